"""Training losses and the optimization loop.

Three portfolio objectives over per-period portfolio returns (net of an
L1 turnover cost), two auxiliary return-forecast losses, and an adaptive
combination with learned per-loss log-variance weights:

    total = -exp(-s_m) * L_objective
          +  exp(-s_p) * L_prediction
          +  exp(-s_r) * L_ranking
          + (s_m + s_p + s_r) / 2

Cumulative return is optimized through its logarithm; the reported value
stays the plain product.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .autodiff import AdamW, Tensor, backward, no_grad
from .errors import ConfigError, DataError, NumericalError
from .market_data import MarketPanel, SplitSpec
from .model import ModelConfig, ModelParams
from .pipeline import Dataset, build_dataset

log = logging.getLogger(__name__)

OBJECTIVES = ("maxcum", "maxsharpe", "mindown")


@dataclass
class TrainConfig:
    objective: str = "maxsharpe"
    delta_d: Union[float, str] = 0.005  # float or "benchmark:<symbol>"
    cost_rate: float = 0.0
    lr: float = 1e-4
    epochs: int = 30
    batch_len: int = 128
    seed: int = 0
    auxiliary: bool = True  # False = single-objective baseline

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if isinstance(self.delta_d, str):
            if not self.delta_d.startswith("benchmark:") or len(self.delta_d) <= 10:
                raise ConfigError(f"bad delta_d value {self.delta_d!r}")
        elif not np.isfinite(self.delta_d):
            raise ConfigError("delta_d must be finite")
        if self.cost_rate < 0.0:
            raise ConfigError("cost_rate must be non-negative")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_len < 2:
            raise ConfigError("batch_len must be >= 2")


class LossWeights:
    """Learned log-variance scalars, one per loss term (all start at 0)."""

    def __init__(self):
        self.s_m = Tensor(0.0, requires_grad=True)
        self.s_p = Tensor(0.0, requires_grad=True)
        self.s_r = Tensor(0.0, requires_grad=True)

    def tensors(self):
        return [self.s_m, self.s_p, self.s_r]

    def values(self):
        return (float(self.s_m.data), float(self.s_p.data), float(self.s_r.data))


def portfolio_return(weights, returns, prev_weights, cost_rate: float):
    """Single-period net return: w.r - cost * |w - w_prev|_1."""
    w = weights if isinstance(weights, Tensor) else Tensor(weights)
    gross = (w * returns).sum()
    if cost_rate == 0.0:
        return gross
    prev = prev_weights if isinstance(prev_weights, Tensor) else Tensor(prev_weights)
    return gross - cost_rate * (w - prev).abs().sum()


def portfolio_returns(weights: Tensor, returns: np.ndarray, cost_rate: float) -> Tensor:
    """Per-period net returns (T,) for a weight series (T, N).

    The first period charges no turnover (previous weights are taken
    equal to the first row).
    """
    if weights.shape != returns.shape:
        raise ValueError(f"weights {weights.shape} vs returns {returns.shape}")
    gross = (weights * returns).sum(axis=1)
    if cost_rate == 0.0 or weights.shape[0] < 2:
        return gross
    prev = ad.concat([weights[0:1], weights[:-1]], axis=0)
    turnover = (weights - prev).abs().sum(axis=1)
    return gross - cost_rate * turnover


def loss_maxcum(rp: Tensor) -> Tensor:
    """Terminal cumulative wealth, prod(1 + r)."""
    return ad.exp(maxcum_log(rp))


def maxcum_log(rp: Tensor) -> Tensor:
    """log of cumulative wealth; the form actually optimized."""
    return ad.log(rp + 1.0).sum()


def loss_maxsharpe(rp: Tensor) -> Tensor:
    """Per-period Sharpe ratio, sample std with eps guard."""
    return rp.mean() / rp.std()


def loss_mindown(rp: Tensor, delta) -> Tensor:
    """Negated sum of sub-threshold shortfalls, max(-r + delta, 0)."""
    return -ad.relu(-rp + delta).sum()


def loss_prediction(predicted: Tensor, realized: np.ndarray) -> Tensor:
    """Sum over periods of the Euclidean norm of the forecast error."""
    return ad.norm2(predicted - realized, axis=1).sum()


def loss_ranking(predicted: Tensor, realized: np.ndarray) -> Tensor:
    """Pairwise concordance penalty over ordered asset pairs, per period."""
    t_len, n = predicted.shape
    dp = predicted.reshape((t_len, n, 1)) - predicted.reshape((t_len, 1, n))
    dr = realized[:, :, None] - realized[:, None, :]
    return ad.relu(-(dp * dr)).sum()


def objective_loss(name: str, rp: Tensor, delta) -> Tensor:
    """The optimized form of a named objective (maxcum via its log)."""
    if name == "maxcum":
        return maxcum_log(rp)
    if name == "maxsharpe":
        return loss_maxsharpe(rp)
    if name == "mindown":
        return loss_mindown(rp, delta)
    raise ConfigError(f"unknown objective {name!r}")


def combined_loss(obj: Tensor, pred: Tensor, rank: Tensor, weights: LossWeights) -> Tensor:
    s_m, s_p, s_r = weights.s_m, weights.s_p, weights.s_r
    return (
        -(ad.exp(-s_m) * obj)
        + ad.exp(-s_p) * pred
        + ad.exp(-s_r) * rank
        + (s_m + s_p + s_r) / 2.0
    )


@dataclass
class TrainResult:
    params: ModelParams
    loss_weights: Optional[LossWeights]
    log_rows: List[dict] = field(default_factory=list)
    best_epoch: int = -1
    aborted: bool = False


def _resolve_delta(cfg: TrainConfig, ds: Dataset, indices) -> Union[float, np.ndarray]:
    if isinstance(cfg.delta_d, str):
        symbol = cfg.delta_d.split(":", 1)[1]
        return ds.benchmark(indices, symbol)
    return float(cfg.delta_d)


def _natural_objective_value(name: str, rp: np.ndarray, delta) -> float:
    if name == "maxcum":
        return float(np.prod(1.0 + rp))
    if name == "maxsharpe":
        std = rp.std(ddof=1)
        return float(rp.mean() / np.sqrt(std * std + 1e-12))
    return float(-np.maximum(-rp + delta, 0.0).sum())


def evaluate_objective(params: ModelParams, ds: Dataset, indices, cfg: TrainConfig) -> float:
    """Natural-units objective value of the model on the given decisions."""
    with no_grad():
        out = model_mod.forward(ds.windows(indices), ds.mixing(indices), params)
        rp = portfolio_returns(out.weights, ds.targets(indices), cfg.cost_rate)
    delta = _resolve_delta(cfg, ds, indices)
    return _natural_objective_value(cfg.objective, rp.data, delta)


def _batches(indices: np.ndarray, batch_len: int):
    chunks = [indices[i:i + batch_len] for i in range(0, len(indices), batch_len)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train(
    panel: MarketPanel,
    spec: SplitSpec,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    ridge: float = 1e-8,
) -> TrainResult:
    """Fit the scorer on [train_start, train_end]; optionally select the
    epoch checkpoint by objective value on (train_end, validation_end]."""
    ds = build_dataset(panel, model_cfg.window, ridge, model_cfg.mixing,
                       spec.train_start, spec.train_end)
    train_idx = ds.decision_indices(spec.train_start, spec.train_end)
    if len(train_idx) < 2:
        raise DataError("training range has fewer than 2 usable decisions")
    val_idx = None
    if spec.validation_end is not None:
        after_train = ds.panel.calendar[ds.panel.index_of(spec.train_end) + 1]
        val_idx = ds.decision_indices(after_train, spec.validation_end)
        if len(val_idx) < 2:
            raise DataError("validation range has fewer than 2 usable decisions")

    params = ModelParams(model_cfg.hidden, seed=cfg.seed)
    weights_state = LossWeights() if cfg.auxiliary else None
    trainable = params.tensors() + (weights_state.tensors() if weights_state else [])
    opt = AdamW(trainable, lr=cfg.lr)

    result = TrainResult(params=params, loss_weights=weights_state)
    best_val = -np.inf
    best_state = params.state()
    best_epoch = 0

    for epoch in range(1, cfg.epochs + 1):
        sums = {"total": 0.0, "obj": 0.0, "pred": 0.0, "rank": 0.0}
        n_batches = 0
        try:
            for chunk in _batches(train_idx, cfg.batch_len):
                out = model_mod.forward(ds.windows(chunk), ds.mixing(chunk), params)
                rp = portfolio_returns(out.weights, ds.targets(chunk), cfg.cost_rate)
                delta = _resolve_delta(cfg, ds, chunk)
                l_obj = objective_loss(cfg.objective, rp, delta)
                if weights_state is not None:
                    targets = ds.targets(chunk)
                    l_pred = loss_prediction(out.predicted, targets)
                    l_rank = loss_ranking(out.predicted, targets)
                    total = combined_loss(l_obj, l_pred, l_rank, weights_state)
                    sums["pred"] += float(l_pred.data)
                    sums["rank"] += float(l_rank.data)
                else:
                    total = -l_obj
                backward(total, params=trainable)
                opt.step()
                opt.zero_grad()
                sums["total"] += float(total.data)
                sums["obj"] += float(l_obj.data)
                n_batches += 1
        except NumericalError as exc:
            log.warning("training aborted at epoch %d: %s", epoch, exc)
            result.aborted = True
            break

        row = {
            "epoch": epoch,
            "loss_total": sums["total"] / n_batches,
            "loss_obj": sums["obj"] / n_batches,
            "loss_pred": sums["pred"] / n_batches if weights_state else "",
            "loss_rank": sums["rank"] / n_batches if weights_state else "",
        }
        if weights_state is not None:
            row["s_m"], row["s_p"], row["s_r"] = weights_state.values()
        else:
            row["s_m"] = row["s_p"] = row["s_r"] = ""
        if val_idx is not None:
            val_metric = evaluate_objective(params, ds, val_idx, cfg)
            row["val_metric"] = val_metric
            if val_metric > best_val:
                best_val = val_metric
                best_state = params.state()
                best_epoch = epoch
        else:
            row["val_metric"] = ""
            best_state = params.state()
            best_epoch = epoch
        result.log_rows.append(row)

    params.load_state(best_state)
    result.best_epoch = best_epoch
    return result
