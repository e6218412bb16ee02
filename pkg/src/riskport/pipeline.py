"""Shared data preparation: features, covariance, and decision-time indexing.

A "decision" at calendar index t builds the portfolio from information
available at the close of day t (indicator window ending at t, trailing
covariance of returns through t) and is scored against the return earned
from t to t+1. Valid decisions therefore satisfy:

    t >= FEATURE_WARMUP_ROWS + window - 1   (window avoids back-filled rows)
    t >= window                             (full trailing return window)
    t <= n_periods - 2                      (next close exists)
"""

import datetime
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .covariance import CovarianceSeries, correlation_from, rolling_covariance
from .errors import ConfigError, DataError
from .indicators import NormStats, apply_norm, compute_indicators, fit_norm
from .market_data import FEATURE_WARMUP_ROWS, MarketPanel, compute_returns


@dataclass
class Dataset:
    """Panel plus everything the model and risk layers consume."""

    panel: MarketPanel
    window: int
    mixing_mode: str
    features: np.ndarray        # (N, T, 8) normalized
    norm: NormStats
    returns: np.ndarray         # (N, T-1)
    cov: CovarianceSeries

    @property
    def first_decision(self) -> int:
        return max(FEATURE_WARMUP_ROWS + self.window - 1, self.window)

    @property
    def last_decision(self) -> int:
        return self.panel.n_periods - 2

    def decision_indices(
        self,
        start: Optional[datetime.date] = None,
        end: Optional[datetime.date] = None,
    ) -> np.ndarray:
        lo = self.first_decision
        hi = self.last_decision
        if start is not None:
            lo = max(lo, self.panel.index_of(start))
        if end is not None:
            hi = min(hi, self.panel.index_of(end))
        if hi < lo:
            raise DataError("no valid decision timesteps in the requested range")
        return np.arange(lo, hi + 1)

    def windows(self, indices: Sequence[int]) -> np.ndarray:
        """Feature windows (B, N, window, 8), each ending at its index."""
        w = self.window
        out = np.empty((len(indices), self.panel.n_assets, w, self.features.shape[-1]))
        for k, t in enumerate(indices):
            if t - w + 1 < 0:
                raise DataError(f"decision index {t} lacks a full feature window")
            out[k] = self.features[:, t - w + 1:t + 1, :]
        return out

    def sigma(self, t: int) -> np.ndarray:
        """Decision-time covariance: trailing window of returns through t."""
        return self.cov.at(t - 1)

    def mixing(self, indices: Sequence[int]) -> np.ndarray:
        n = self.panel.n_assets
        out = np.empty((len(indices), n, n))
        for k, t in enumerate(indices):
            s = self.sigma(t)
            out[k] = correlation_from(s) if self.mixing_mode == "correlation" else s
        return out

    def targets(self, indices: Sequence[int]) -> np.ndarray:
        """Realized next-period returns (B, N) for each decision index."""
        return self.returns[:, np.asarray(indices)].T

    def benchmark(self, indices: Sequence[int], symbol: str) -> np.ndarray:
        if symbol not in self.panel.assets:
            raise ConfigError(f"benchmark symbol {symbol!r} is not in the panel")
        row = self.panel.assets.index(symbol)
        return self.returns[row, np.asarray(indices)]

    def dates(self, indices: Sequence[int]):
        return tuple(self.panel.calendar[t] for t in indices)


def build_dataset(
    panel: MarketPanel,
    window: int,
    ridge: float,
    mixing: str,
    norm_start: datetime.date,
    norm_end: datetime.date,
) -> Dataset:
    """Compute features (normalized with stats fitted on [norm_start, norm_end]),
    returns, and the trailing covariance series for one panel."""
    if mixing not in ("correlation", "covariance"):
        raise ConfigError(f"unknown mixing mode {mixing!r}")
    raw = compute_indicators(panel)
    i0 = panel.index_of(norm_start)
    i1 = panel.index_of(norm_end)
    if i1 < i0:
        raise ConfigError("empty normalization range")
    stats = fit_norm(raw[:, i0:i1 + 1, :])
    features = apply_norm(raw, stats)
    returns = compute_returns(panel).r
    cov = rolling_covariance(returns, window, ridge)
    return Dataset(
        panel=panel,
        window=window,
        mixing_mode=mixing,
        features=features,
        norm=stats,
        returns=returns,
        cov=cov,
    )
