"""Rolling sample covariance of asset returns and quadratic portfolio risk."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError

@dataclass(frozen=True)
class CovarianceSeries:
    """Per-timestep covariance matrices over a trailing window of returns.

    sigmas[k] covers return columns [start + k - window + 1, start + k];
    the series starts at return index start = window - 1 (the first full
    window).
    """

    sigmas: np.ndarray  # (M, N, N)
    start: int
    window: int
    ridge: float

    def has(self, t: int) -> bool:
        return self.start <= t < self.start + len(self.sigmas)

    def at(self, t: int) -> np.ndarray:
        if not self.has(t):
            raise DataError(f"no covariance at return index {t}")
        return self.sigmas[t - self.start]


def rolling_covariance(returns: np.ndarray, window: int, ridge: float = 1e-8) -> CovarianceSeries:
    """Sample covariance (n-1 divisor) over each trailing window, plus ridge*I."""
    r = np.asarray(returns, dtype=np.float64)
    if r.ndim != 2:
        raise DataError("returns must be a 2-D (assets x time) array")
    n, t_len = r.shape
    if window < 2:
        raise DataError("covariance window must be >= 2")
    if t_len < window:
        raise DataError(f"need {window} return columns, got {t_len}")
    if ridge < 0.0:
        raise DataError("ridge must be non-negative")
    m = t_len - window + 1
    sigmas = np.empty((m, n, n))
    eye = ridge * np.eye(n)
    for k in range(m):
        w = r[:, k:k + window]
        x = w - w.mean(axis=1, keepdims=True)
        s = (x @ x.T) / (window - 1) + eye
        sigmas[k] = 0.5 * (s + s.T)
    return CovarianceSeries(sigmas=sigmas, start=window - 1, window=window, ridge=ridge)


def portfolio_risk(weights: np.ndarray, sigma: np.ndarray) -> float:
    """Quadratic form w' Sigma w, clipped at zero for PSD round-off."""
    w = np.asarray(weights, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    if w.ndim != 1 or s.shape != (w.size, w.size):
        raise ValueError(f"dimension mismatch: weights {w.shape}, sigma {s.shape}")
    return max(float(w @ s @ w), 0.0)


def correlation_from(sigma: np.ndarray) -> np.ndarray:
    """Correlation-scaled copy of a covariance matrix, entries in [-1, 1]."""
    s = np.asarray(sigma, dtype=np.float64)
    d = np.sqrt(np.maximum(np.diag(s), 1e-18))
    c = s / np.outer(d, d)
    np.fill_diagonal(c, 1.0)
    return np.clip(c, -1.0, 1.0)
