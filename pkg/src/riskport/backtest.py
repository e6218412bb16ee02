"""Backtesting, performance metrics, baselines, and report files.

Wealth compounds from 1.0 through per-period net portfolio returns (the
same L1 turnover-cost rule as training, first period cost-free). Metrics
follow the usual annualized conventions with the year length A taken
from configuration (252 equity, 365 crypto):

    CW   terminal wealth, prod(1 + r)
    APR  CW^(A/T) - 1
    AVOL sample std * sqrt(A)
    ASR  mean / sample std * sqrt(A), zero risk-free
    MDD  most negative peak-relative drawdown (reported <= 0)
    ACR  APR / |MDD|
"""

import datetime
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .covariance import CovarianceSeries
from .errors import DataError
from .market_data import MarketPanel
from .risk_control import min_variance

log = logging.getLogger(__name__)

METRICS_FORMAT = "riskport.metrics/1"
_SIMPLEX_ATOL = 1e-8


@dataclass(frozen=True)
class PortfolioSeries:
    """Per-date portfolio weights, with pre-softmax logits when available."""

    dates: Tuple[datetime.date, ...]
    weights: np.ndarray                 # (T, N)
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        t_len = len(self.dates)
        if self.weights.ndim != 2 or self.weights.shape[0] != t_len:
            raise DataError(f"weights shape {self.weights.shape} does not cover {t_len} dates")
        sums = self.weights.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > _SIMPLEX_ATOL) or np.any(self.weights < -_SIMPLEX_ATOL):
            raise DataError("portfolio weights leave the simplex")
        if self.logits is not None and self.logits.shape != self.weights.shape:
            raise DataError("logits shape does not match weights")


@dataclass
class BacktestReport:
    dates: Tuple[datetime.date, ...]     # decision dates, length T
    assets: Tuple[str, ...]
    weights: np.ndarray                  # (T, N)
    daily_returns: np.ndarray            # (T,)
    wealth: np.ndarray                   # (T + 1,)
    metrics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)


def net_returns(weights: np.ndarray, returns: np.ndarray, cost_rate: float) -> np.ndarray:
    """Per-period net portfolio returns; first period charges no turnover."""
    gross = (weights * returns).sum(axis=1)
    if cost_rate == 0.0 or len(weights) < 2:
        return gross
    turnover = np.abs(np.diff(weights, axis=0)).sum(axis=1)
    net = gross.copy()
    net[1:] -= cost_rate * turnover
    return net


def compute_metrics(wealth: np.ndarray, daily_returns: np.ndarray, periods_per_year: float) -> dict:
    """The six summary metrics; see the module docstring for formulas."""
    r = np.asarray(daily_returns, dtype=np.float64)
    w = np.asarray(wealth, dtype=np.float64)
    t_len = r.size
    if t_len < 2:
        raise DataError("metrics need at least 2 periods")
    if w.size != t_len + 1:
        raise DataError("wealth must have one more entry than returns")
    a = float(periods_per_year)
    cw = float(w[-1])
    apr = cw ** (a / t_len) - 1.0
    std = float(r.std(ddof=1))
    avol = std * math.sqrt(a)
    if std == 0.0:
        log.warning("zero return volatility; ASR undefined")
        asr = float("nan")
    else:
        asr = float(r.mean()) / std * math.sqrt(a)
    peak = np.maximum.accumulate(w)
    mdd = float((w / peak - 1.0).min())
    acr = float("inf") if mdd == 0.0 else apr / abs(mdd)
    return {"CW": cw, "APR": apr, "AVOL": avol, "ASR": asr, "MDD": mdd, "ACR": acr}


def run_backtest(
    series: PortfolioSeries,
    returns: np.ndarray,
    assets: Sequence[str],
    cost_rate: float = 0.0,
    periods_per_year: float = 252.0,
    config: Optional[dict] = None,
) -> BacktestReport:
    """Roll the weight series through realized returns and summarize."""
    rets = np.asarray(returns, dtype=np.float64)
    if rets.shape != series.weights.shape:
        raise DataError(f"returns shape {rets.shape} != weights shape {series.weights.shape}")
    daily = net_returns(series.weights, rets, cost_rate)
    wealth = np.empty(len(daily) + 1)
    wealth[0] = 1.0
    np.cumprod(1.0 + daily, out=wealth[1:])
    return BacktestReport(
        dates=series.dates,
        assets=tuple(assets),
        weights=series.weights,
        daily_returns=daily,
        wealth=wealth,
        metrics=compute_metrics(wealth, daily, periods_per_year),
        config=dict(config or {}),
    )


def baseline_market(panel: MarketPanel, indices: Sequence[int]) -> PortfolioSeries:
    """Equal weights, rebalanced every period."""
    n = panel.n_assets
    t_len = len(indices)
    return PortfolioSeries(
        dates=tuple(panel.calendar[t] for t in indices),
        weights=np.full((t_len, n), 1.0 / n),
    )


def baseline_mvm(
    panel: MarketPanel,
    cov: CovarianceSeries,
    indices: Sequence[int],
) -> PortfolioSeries:
    """Minimum-variance portfolio from each decision-time covariance."""
    rows = []
    for t in indices:
        rows.append(min_variance(cov.at(t - 1)).weights)
    return PortfolioSeries(
        dates=tuple(panel.calendar[t] for t in indices),
        weights=np.asarray(rows),
    )


def emit_report(report: BacktestReport, out_dir) -> None:
    """Write metrics.json, wealth.csv, weights.csv, and wealth.svg."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "format": METRICS_FORMAT,
            "metrics": report.metrics,
            "periods": len(report.daily_returns),
            "config": report.config,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")

    lines = ["date,wealth,daily_return"]
    lines.append(f"{report.dates[0].isoformat()},{float(report.wealth[0])!r},")
    for k, day in enumerate(report.dates):
        lines.append(f"{day.isoformat()},{float(report.wealth[k + 1])!r},"
                     f"{float(report.daily_returns[k])!r}")
    with open(os.path.join(out_dir, "wealth.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("\r\n".join(lines) + "\r\n")

    header = "date," + ",".join(report.assets)
    rows = [header]
    for k, day in enumerate(report.dates):
        rows.append(day.isoformat() + "," + ",".join(repr(float(v)) for v in report.weights[k]))
    with open(os.path.join(out_dir, "weights.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("\r\n".join(rows) + "\r\n")

    with open(os.path.join(out_dir, "wealth.svg"), "w", encoding="utf-8") as fh:
        fh.write(render_wealth_svg(report.wealth))


def render_wealth_svg(wealth: np.ndarray, width: int = 800, height: int = 400) -> str:
    """Minimal standalone SVG: a single polyline over the wealth path."""
    w = np.asarray(wealth, dtype=np.float64)
    pad = 40.0
    lo, hi = float(w.min()), float(w.max())
    span = hi - lo if hi > lo else 1.0
    xs = pad + (width - 2 * pad) * np.arange(w.size) / max(w.size - 1, 1)
    ys = height - pad - (height - 2 * pad) * (w - lo) / span
    points = " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(xs, ys))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}">\n'
        f'  <rect width="{width}" height="{height}" fill="white"/>\n'
        f'  <line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
        f'stroke="#999" stroke-width="1"/>\n'
        f'  <line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" '
        f'stroke="#999" stroke-width="1"/>\n'
        f'  <text x="{pad}" y="{pad - 10:.0f}" font-size="14" fill="#333">wealth '
        f'(start 1.0, end {w[-1]:.4f})</text>\n'
        f'  <polyline fill="none" stroke="#0a58ca" stroke-width="1.5" points="{points}"/>\n'
        f"</svg>\n"
    )
