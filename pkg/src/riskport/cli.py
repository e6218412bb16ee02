"""Command-line interface.

Subcommands: ingest, train, backtest, risk, improve, report. All take a
single JSON run-config; individual flags override file values. Every run
writes a manifest (resolved config, config hash, seed, versions) into
its run directory so results are reproducible from the manifest alone.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
Errors print one machine-parsable line on stderr: error:<kind>:<message>.
"""

import argparse
import csv
import datetime
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from . import model as model_mod
from .autodiff import no_grad
from .backtest import PortfolioSeries, baseline_market, baseline_mvm, emit_report, run_backtest
from .errors import ConfigError, DataError, NumericalError
from .market_data import SplitSpec, load_ohlcv, load_panel, save_panel
from .model import ModelConfig
from .objectives import TrainConfig, train
from .pipeline import build_dataset
from .risk_control import adjust_to_risk, improve, min_variance

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "riskport.manifest/1"

_IMPROVE_DEFAULTS = {
    "steps": 30,
    "lr": 0.05,
    "return_weight": 1.0,
    "literal_product": False,
}

_DEFAULTS = {
    "csv": None,
    "panel": None,
    "checkpoint": None,
    "split": None,
    "window": 20,
    "hidden": 64,
    "mixing": "correlation",
    "ridge": 1e-8,
    "objective": "maxsharpe",
    "delta_d": 0.005,
    "cost_rate": 0.0,
    "lr": 1e-4,
    "epochs": 30,
    "batch_len": 128,
    "seed": 0,
    "auxiliary": True,
    "sigma_targets": [],
    "improve": dict(_IMPROVE_DEFAULTS),
    "annualization": 252,
    "out_dir": "runs",
}

_SPLIT_KEYS = ("train_start", "train_end", "test_start", "test_end", "validation_end")


def _type_name(value) -> str:
    return type(value).__name__


def _check_number(cfg: dict, key: str, minimum=None, strict=False):
    value = cfg[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key {key!r} must be a number, got {_type_name(value)}")
    if minimum is not None:
        if strict and not value > minimum:
            raise ConfigError(f"config key {key!r} must be > {minimum}")
        if not strict and not value >= minimum:
            raise ConfigError(f"config key {key!r} must be >= {minimum}")


def load_config(path=None, overrides=None) -> dict:
    """Resolve defaults <- config file <- flag overrides, then validate."""
    cfg = json.loads(json.dumps(_DEFAULTS))  # deep copy
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot open config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = set(user) - set(_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in user.items():
            if key == "improve":
                if not isinstance(value, dict):
                    raise ConfigError("config key 'improve' must be an object")
                bad = set(value) - set(_IMPROVE_DEFAULTS)
                if bad:
                    raise ConfigError(f"unknown improve keys: {sorted(bad)}")
                cfg["improve"].update(value)
            else:
                cfg[key] = value
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in _IMPROVE_DEFAULTS:
            cfg["improve"][key] = value
        else:
            cfg[key] = value
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    for key in ("csv", "panel", "checkpoint"):
        if cfg[key] is not None and not isinstance(cfg[key], str):
            raise ConfigError(f"config key {key!r} must be a path string")
    if cfg["split"] is not None:
        if not isinstance(cfg["split"], dict):
            raise ConfigError("config key 'split' must be an object")
        unknown = set(cfg["split"]) - set(_SPLIT_KEYS)
        if unknown:
            raise ConfigError(f"unknown split keys: {sorted(unknown)}")
    _check_number(cfg, "window", minimum=2)
    _check_number(cfg, "hidden", minimum=1)
    _check_number(cfg, "ridge", minimum=0.0)
    _check_number(cfg, "cost_rate", minimum=0.0)
    _check_number(cfg, "lr", minimum=0.0, strict=True)
    _check_number(cfg, "epochs", minimum=1)
    _check_number(cfg, "batch_len", minimum=2)
    _check_number(cfg, "annualization", minimum=1.0)
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("config key 'seed' must be an integer")
    if not isinstance(cfg["auxiliary"], bool):
        raise ConfigError("config key 'auxiliary' must be a boolean")
    if cfg["mixing"] not in ("correlation", "covariance"):
        raise ConfigError(f"unknown mixing mode {cfg['mixing']!r}")
    if not isinstance(cfg["sigma_targets"], list) or any(
        isinstance(s, bool) or not isinstance(s, (int, float)) for s in cfg["sigma_targets"]
    ):
        raise ConfigError("config key 'sigma_targets' must be a list of numbers")
    if not isinstance(cfg["delta_d"], (int, float, str)) or isinstance(cfg["delta_d"], bool):
        raise ConfigError("config key 'delta_d' must be a number or 'benchmark:<symbol>'")
    imp = cfg["improve"]
    if isinstance(imp["steps"], bool) or not isinstance(imp["steps"], int) or imp["steps"] < 0:
        raise ConfigError("improve.steps must be a non-negative integer")
    for key in ("lr", "return_weight"):
        if isinstance(imp[key], bool) or not isinstance(imp[key], (int, float)):
            raise ConfigError(f"improve.{key} must be a number")
    if imp["lr"] <= 0.0:
        raise ConfigError("improve.lr must be positive")
    if not isinstance(imp["literal_product"], bool):
        raise ConfigError("improve.literal_product must be a boolean")
    if not isinstance(cfg["out_dir"], str):
        raise ConfigError("config key 'out_dir' must be a path string")


def _split_spec(cfg: dict) -> SplitSpec:
    raw = cfg.get("split")
    if not raw:
        raise ConfigError("this command needs a 'split' section in the config")
    missing = [k for k in _SPLIT_KEYS[:4] if k not in raw]
    if missing:
        raise ConfigError(f"split section missing keys: {missing}")

    def day(key):
        value = raw.get(key)
        if value is None:
            return None
        try:
            return datetime.date.fromisoformat(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"split.{key}: bad date {value!r}") from exc

    return SplitSpec(
        train_start=day("train_start"),
        train_end=day("train_end"),
        test_start=day("test_start"),
        test_end=day("test_end"),
        validation_end=day("validation_end"),
    )


def _load_panel_from_cfg(cfg: dict):
    if cfg["panel"]:
        return load_panel(cfg["panel"])
    if cfg["csv"]:
        return load_ohlcv(cfg["csv"], min_observations=int(cfg["window"]) + 2)
    raise ConfigError("config needs either 'panel' or 'csv'")


def _config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _make_run_dir(cfg: dict, command: str, explicit=None) -> str:
    if explicit:
        os.makedirs(explicit, exist_ok=True)
        return explicit
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = os.path.join(cfg["out_dir"], f"{command}-{stamp}")
    path = base
    k = 1
    while os.path.exists(path):
        path = f"{base}-{k}"
        k += 1
    os.makedirs(path)
    return path


def _write_manifest(run_dir: str, command: str, cfg: dict) -> None:
    manifest = {
        "format": MANIFEST_FORMAT,
        "command": command,
        "config": cfg,
        "config_hash": _config_hash(cfg),
        "seed": cfg["seed"],
        "versions": {
            "riskport": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build_dataset(cfg: dict, panel, spec: SplitSpec):
    return build_dataset(
        panel,
        window=int(cfg["window"]),
        ridge=float(cfg["ridge"]),
        mixing=cfg["mixing"],
        norm_start=spec.train_start,
        norm_end=spec.train_end,
    )


def _model_series(cfg: dict, ds, indices):
    path = cfg["checkpoint"]
    if not path:
        raise ConfigError("this command needs a 'checkpoint' path (config key or --checkpoint)")
    params = model_mod.load_checkpoint(path)
    with no_grad():
        out = model_mod.forward(ds.windows(indices), ds.mixing(indices), params)
    series = PortfolioSeries(
        dates=ds.dates(indices),
        weights=out.weights.data,
        logits=out.logits.data,
    )
    return series, out.predicted.data


def _adjustment_columns(assets):
    return ["date", "sigma_g", "gamma", "achieved_risk", "clamped"] + [f"w_{a}" for a in assets]


def _write_adjustments(path, assets, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_adjustment_columns(assets))
        for day, sg, adj in rows:
            writer.writerow(
                [day.isoformat(), repr(float(sg)), repr(float(adj.gamma)),
                 repr(float(adj.achieved_risk)),
                 str(adj.clamped).lower()] + [repr(float(v)) for v in adj.weights]
            )


def _sigma_dir(run_dir: str, sigma: float) -> str:
    return os.path.join(run_dir, f"sigma_{sigma:g}")


# -- commands ----------------------------------------------------------------


def _cmd_ingest(args) -> int:
    cfg = load_config(args.config)
    panel = load_ohlcv(args.csv, min_observations=int(cfg["window"]) + 2)
    save_panel(panel, args.out)
    print(f"ingested {panel.n_assets} assets x {panel.n_periods} dates -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    overrides = {"epochs": args.epochs, "seed": args.seed, "csv": args.csv, "panel": args.panel}
    cfg = load_config(args.config, overrides)
    panel = _load_panel_from_cfg(cfg)
    spec = _split_spec(cfg)
    model_cfg = ModelConfig(hidden=int(cfg["hidden"]), window=int(cfg["window"]),
                            mixing=cfg["mixing"])
    train_cfg = TrainConfig(
        objective=cfg["objective"], delta_d=cfg["delta_d"], cost_rate=float(cfg["cost_rate"]),
        lr=float(cfg["lr"]), epochs=int(cfg["epochs"]), batch_len=int(cfg["batch_len"]),
        seed=int(cfg["seed"]), auxiliary=cfg["auxiliary"],
    )
    result = train(panel, spec, model_cfg, train_cfg, ridge=float(cfg["ridge"]))

    run_dir = _make_run_dir(cfg, "train", args.run_dir)
    _write_manifest(run_dir, "train", cfg)
    ckpt = os.path.join(run_dir, "checkpoint.json")
    model_mod.save_checkpoint(result.params, ckpt)
    log_path = os.path.join(run_dir, "training_log.csv")
    columns = ["epoch", "loss_total", "loss_obj", "loss_pred", "loss_rank",
               "s_m", "s_p", "s_r", "val_metric"]
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in result.log_rows:
            writer.writerow(row)
    status = "aborted (kept last good checkpoint)" if result.aborted else "done"
    print(f"training {status}: {len(result.log_rows)} epochs, "
          f"best epoch {result.best_epoch}, checkpoint {ckpt}")
    return 0


def _strategy_series(cfg, ds, indices, strategy):
    if strategy == "model":
        series, _ = _model_series(cfg, ds, indices)
        return series
    if strategy == "market":
        return baseline_market(ds.panel, indices)
    if strategy == "mvm":
        return baseline_mvm(ds.panel, ds.cov, indices)
    raise ConfigError(f"unknown strategy {strategy!r}")


def _cmd_backtest(args) -> int:
    cfg = load_config(args.config, {"checkpoint": args.checkpoint})
    panel = _load_panel_from_cfg(cfg)
    spec = _split_spec(cfg)
    ds = _build_dataset(cfg, panel, spec)
    indices = ds.decision_indices(spec.test_start, spec.test_end)
    series = _strategy_series(cfg, ds, indices, args.strategy)
    report = run_backtest(
        series, ds.targets(indices), panel.assets,
        cost_rate=float(cfg["cost_rate"]),
        periods_per_year=float(cfg["annualization"]),
        config=cfg,
    )
    run_dir = _make_run_dir(cfg, "backtest", args.run_dir)
    _write_manifest(run_dir, "backtest", cfg)
    out_dir = os.path.join(run_dir, f"backtest_{args.strategy}")
    emit_report(report, out_dir)
    print(f"backtest {args.strategy}: " + ", ".join(
        f"{k}={v:.6g}" for k, v in report.metrics.items()))
    print(f"report -> {out_dir}")
    return 0


def _parse_sigmas(text):
    if text is None:
        return None
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --sigma value {text!r}") from exc
    if not values:
        raise ConfigError("empty --sigma list")
    return values


def _risk_inputs(cfg):
    panel = _load_panel_from_cfg(cfg)
    spec = _split_spec(cfg)
    ds = _build_dataset(cfg, panel, spec)
    indices = ds.decision_indices(spec.test_start, spec.test_end)
    series, predicted = _model_series(cfg, ds, indices)
    sigmas = np.stack([ds.sigma(t) for t in indices])
    b_m = np.stack([min_variance(sigmas[k]).weights for k in range(len(indices))])
    return panel, ds, indices, series, predicted, sigmas, b_m


def _cmd_risk(args) -> int:
    cfg = load_config(args.config, {"checkpoint": args.checkpoint})
    targets = _parse_sigmas(args.sigma) or [float(s) for s in cfg["sigma_targets"]]
    if not targets:
        raise ConfigError("no risk targets: pass --sigma or set sigma_targets")
    panel, ds, indices, series, _, sigmas, b_m = _risk_inputs(cfg)
    run_dir = _make_run_dir(cfg, "risk", args.run_dir)
    _write_manifest(run_dir, "risk", cfg)
    dates = ds.dates(indices)
    rets = ds.targets(indices)

    def job(sg: float):
        adjs = [
            adjust_to_risk(series.weights[k], b_m[k], sigmas[k], sg)
            for k in range(len(indices))
        ]
        adj_series = PortfolioSeries(dates=dates, weights=np.array([a.weights for a in adjs]))
        report = run_backtest(
            adj_series, rets, panel.assets,
            cost_rate=float(cfg["cost_rate"]),
            periods_per_year=float(cfg["annualization"]),
            config=cfg,
        )
        emit_report(report, _sigma_dir(run_dir, sg))
        return sg, adjs, report

    # Each risk level is an independent job; fan out across worker threads.
    with ThreadPoolExecutor(max_workers=min(len(targets), 8)) as pool:
        results = list(pool.map(job, targets))

    rows = []
    for sg, adjs, _ in sorted(results, key=lambda item: item[0]):
        rows.extend((day, sg, adj) for day, adj in zip(dates, adjs))
    _write_adjustments(os.path.join(run_dir, "adjustments.csv"), panel.assets, rows)
    for sg, _, report in sorted(results, key=lambda item: item[0]):
        clamped = sum(1 for day, s, a in rows if s == sg and a.clamped)
        print(f"sigma_g={sg:g}: CW={report.metrics['CW']:.6g} "
              f"ASR={report.metrics['ASR']:.6g} clamped_days={clamped}")
    print(f"adjustments -> {os.path.join(run_dir, 'adjustments.csv')}")
    return 0


def _cmd_improve(args) -> int:
    cfg = load_config(args.config, {
        "checkpoint": args.checkpoint,
        "steps": args.steps,
        "return_weight": args.improve_return_weight,
    })
    values = _parse_sigmas(args.sigma) or [float(s) for s in cfg["sigma_targets"]]
    if not values:
        raise ConfigError("no risk target: pass --sigma or set sigma_targets")
    if len(values) != 1:
        raise ConfigError("improve takes exactly one risk target")
    sigma_g = values[0]
    panel, ds, indices, series, predicted, sigmas, b_m = _risk_inputs(cfg)
    imp_cfg = cfg["improve"]
    result = improve(
        series.logits, b_m, sigmas, sigma_g,
        steps=int(imp_cfg["steps"]),
        lr=float(imp_cfg["lr"]),
        return_weight=float(imp_cfg["return_weight"]),
        predicted_returns=predicted,
        literal_product=imp_cfg["literal_product"],
    )
    run_dir = _make_run_dir(cfg, "improve", args.run_dir)
    _write_manifest(run_dir, "improve", cfg)

    dates = ds.dates(indices)
    rows = [(day, sigma_g, adj) for day, adj in zip(dates, result.adjustments)]
    _write_adjustments(os.path.join(run_dir, "adjustments.csv"), panel.assets, rows)
    with open(os.path.join(run_dir, "trace.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "sum_gamma"])
        for k, (obj, gs) in enumerate(zip(result.objective_history, result.gamma_history)):
            writer.writerow([k, repr(float(obj)), repr(float(gs))])

    adj_series = PortfolioSeries(
        dates=dates, weights=np.array([a.weights for a in result.adjustments]))
    report = run_backtest(
        adj_series, ds.targets(indices), panel.assets,
        cost_rate=float(cfg["cost_rate"]),
        periods_per_year=float(cfg["annualization"]),
        config=cfg,
    )
    emit_report(report, _sigma_dir(run_dir, sigma_g))
    if result.warning:
        log.warning("%s", result.warning)
    print(f"improve sigma_g={sigma_g:g}: accepted {result.steps_accepted} steps, "
          f"sum_gamma {result.gamma_history[0]:.6g} -> {result.gamma_history[-1]:.6g}")
    print(f"run dir -> {run_dir}")
    return 0


def _cmd_report(args) -> int:
    found = []
    for root, _, files in os.walk(args.run):
        if "metrics.json" in files:
            with open(os.path.join(root, "metrics.json"), "r", encoding="utf-8") as fh:
                blob = json.load(fh)
            found.append((os.path.relpath(root, args.run), blob.get("metrics", {})))
    if not found:
        raise DataError(f"no metrics.json under {args.run}")
    found.sort()
    keys = ["CW", "APR", "AVOL", "ASR", "MDD", "ACR"]
    print("\t".join(["report"] + keys))
    for name, metrics in found:
        cells = [name] + [f"{metrics.get(k, float('nan')):.6g}" for k in keys]
        print("\t".join(cells))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskport", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="align an OHLCV CSV into a panel cache")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("train", help="fit the scorer")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--csv")
    p.add_argument("--panel")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("backtest", help="evaluate a strategy on the test period")
    p.add_argument("--config", required=True)
    p.add_argument("--strategy", default="model", choices=("model", "market", "mvm"))
    p.add_argument("--checkpoint")
    p.add_argument("--run-dir")
    p.set_defaults(func=_cmd_backtest)

    p = sub.add_parser("risk", help="interpolate the model portfolio to target risk levels")
    p.add_argument("--config", required=True)
    p.add_argument("--sigma", help="comma-separated risk targets (variance units)")
    p.add_argument("--checkpoint")
    p.add_argument("--run-dir")
    p.set_defaults(func=_cmd_risk)

    p = sub.add_parser("improve", help="gradient-improve the portfolio at one risk target")
    p.add_argument("--config", required=True)
    p.add_argument("--sigma", help="single risk target (variance units)")
    p.add_argument("--steps", type=int)
    p.add_argument("--improve-return-weight", type=float)
    p.add_argument("--checkpoint")
    p.add_argument("--run-dir")
    p.set_defaults(func=_cmd_improve)

    p = sub.add_parser("report", help="summarize metrics files under a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def _fail(code: int, kind: str, exc: Exception) -> int:
    message = " ".join(str(exc).split())
    print(f"error:{kind}:{message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(2, "config", exc)
    except DataError as exc:
        return _fail(3, "data", exc)
    except NumericalError as exc:
        return _fail(4, "numerical", exc)


if __name__ == "__main__":
    raise SystemExit(main())
