"""Per-asset technical indicators and z-score feature normalization.

Eight features per asset-date, in fixed column order:

    macd, boll_lb, boll_ub, rsi, cci, dmi, sma30, sma60

All are trailing computations (a value at t only reads rows <= t). Rows
before an indicator's first valid index are back-filled with its first
valid value; the longest warm-up (sma60) defines the global boundary
below which training losses must not look.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError
from .market_data import FEATURE_WARMUP_ROWS, MarketPanel

log = logging.getLogger(__name__)

FEATURE_NAMES = ("macd", "boll_lb", "boll_ub", "rsi", "cci", "dmi", "sma30", "sma60")
N_FEATURES = len(FEATURE_NAMES)
MIN_HISTORY = 60

_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class NormStats:
    """Per-feature z-score statistics fitted on training rows only."""

    mean: np.ndarray  # (N_FEATURES,)
    std: np.ndarray   # (N_FEATURES,), floored at _STD_FLOOR


def _backfill(x: np.ndarray, first_valid: int) -> np.ndarray:
    if first_valid > 0:
        x[:first_valid] = x[first_valid]
    return x


def _ema(x: np.ndarray, n: int) -> np.ndarray:
    # Recursive EMA seeded with the first observation.
    alpha = 2.0 / (n + 1.0)
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, len(x)):
        out[t] = alpha * x[t] + (1.0 - alpha) * out[t - 1]
    return out


def _sma(x: np.ndarray, n: int) -> np.ndarray:
    out = np.empty_like(x)
    out[n - 1:] = sliding_window_view(x, n).mean(axis=1)
    return _backfill(out, n - 1)


def _macd(close: np.ndarray) -> np.ndarray:
    return _ema(close, 12) - _ema(close, 26)


def _bollinger(close: np.ndarray):
    n = 20
    win = sliding_window_view(close, n)
    mid = win.mean(axis=1)
    sd = win.std(axis=1)  # population std over the window
    lb = np.empty_like(close)
    ub = np.empty_like(close)
    lb[n - 1:] = mid - 2.0 * sd
    ub[n - 1:] = mid + 2.0 * sd
    return _backfill(lb, n - 1), _backfill(ub, n - 1)


def _rsi(close: np.ndarray, n: int = 14) -> np.ndarray:
    t_len = len(close)
    change = np.diff(close)
    gain = np.maximum(change, 0.0)
    loss = np.maximum(-change, 0.0)
    out = np.empty(t_len)
    avg_gain = gain[:n].mean()
    avg_loss = loss[:n].mean()

    def level(ag, al):
        if al == 0.0:
            return 100.0 if ag > 0.0 else 50.0
        return 100.0 - 100.0 / (1.0 + ag / al)

    out[n] = level(avg_gain, avg_loss)
    for t in range(n + 1, t_len):
        avg_gain = (avg_gain * (n - 1) + gain[t - 1]) / n
        avg_loss = (avg_loss * (n - 1) + loss[t - 1]) / n
        out[t] = level(avg_gain, avg_loss)
    return _backfill(out, n)


def _cci(high: np.ndarray, low: np.ndarray, close: np.ndarray, n: int = 20) -> np.ndarray:
    tp = (high + low + close) / 3.0
    win = sliding_window_view(tp, n)
    mid = win.mean(axis=1)
    mean_dev = np.abs(win - mid[:, None]).mean(axis=1)
    denom = 0.015 * mean_dev
    raw = np.where(denom > 0.0, (tp[n - 1:] - mid) / np.where(denom > 0.0, denom, 1.0), 0.0)
    out = np.empty_like(tp)
    out[n - 1:] = raw
    return _backfill(out, n - 1)


def _adx(high: np.ndarray, low: np.ndarray, close: np.ndarray, n: int = 14) -> np.ndarray:
    t_len = len(close)
    up = high[1:] - high[:-1]
    dn = low[:-1] - low[1:]
    plus_dm = np.where((up > dn) & (up > 0.0), up, 0.0)
    minus_dm = np.where((dn > up) & (dn > 0.0), dn, 0.0)
    tr = np.maximum.reduce([
        high[1:] - low[1:],
        np.abs(high[1:] - close[:-1]),
        np.abs(low[1:] - close[:-1]),
    ])

    def wilder_sum(x):
        # Smoothed running sums, Wilder's recursion, first value at index n-1
        # of the diff series (calendar index n).
        s = np.empty_like(x)
        s[n - 1] = x[:n].sum()
        for t in range(n, len(x)):
            s[t] = s[t - 1] - s[t - 1] / n + x[t]
        return s

    s_plus = wilder_sum(plus_dm)
    s_minus = wilder_sum(minus_dm)
    s_tr = wilder_sum(tr)

    dx = np.zeros(len(tr))
    for t in range(n - 1, len(tr)):
        if s_tr[t] <= 0.0:
            dx[t] = 0.0
            continue
        di_p = 100.0 * s_plus[t] / s_tr[t]
        di_m = 100.0 * s_minus[t] / s_tr[t]
        denom = di_p + di_m
        dx[t] = 0.0 if denom == 0.0 else 100.0 * abs(di_p - di_m) / denom

    out = np.empty(t_len)
    first_cal = 2 * n - 1  # calendar index of the first ADX value
    out[first_cal] = dx[n - 1:2 * n - 1].mean()
    for t in range(first_cal + 1, t_len):
        out[t] = (out[t - 1] * (n - 1) + dx[t - 1]) / n
    return _backfill(out, first_cal)


def compute_indicators(panel: MarketPanel) -> np.ndarray:
    """Raw feature tensor of shape (n_assets, n_periods, 8)."""
    if panel.n_periods < MIN_HISTORY:
        raise DataError(
            f"need at least {MIN_HISTORY} rows per asset for indicators, got {panel.n_periods}"
        )
    feats = np.empty((panel.n_assets, panel.n_periods, N_FEATURES))
    for i in range(panel.n_assets):
        h, l, c = panel.high[i], panel.low[i], panel.close[i]
        lb, ub = _bollinger(c)
        feats[i, :, 0] = _macd(c)
        feats[i, :, 1] = lb
        feats[i, :, 2] = ub
        feats[i, :, 3] = _rsi(c)
        feats[i, :, 4] = _cci(h, l, c)
        feats[i, :, 5] = _adx(h, l, c)
        feats[i, :, 6] = _sma(c, 30)
        feats[i, :, 7] = _sma(c, 60)
    if not np.all(np.isfinite(feats)):
        raise DataError("indicator computation produced NaN or Inf")
    return feats


def fit_norm(features: np.ndarray) -> NormStats:
    """Fit z-score stats over all asset-rows of a (training) feature slab."""
    flat = features.reshape(-1, features.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    floored = std < _STD_FLOOR
    if np.any(floored):
        names = [FEATURE_NAMES[k] for k in np.nonzero(floored)[0]]
        log.warning("zero-variance feature columns floored: %s", ", ".join(names))
        std = np.where(floored, _STD_FLOOR, std)
    return NormStats(mean=mean, std=std)


def apply_norm(features: np.ndarray, stats: NormStats) -> np.ndarray:
    return (features - stats.mean) / stats.std


def export_features(panel: MarketPanel, features: np.ndarray, path) -> None:
    """Write one CSV row per (date, symbol) with the 8 feature columns."""
    if features.shape != (panel.n_assets, panel.n_periods, N_FEATURES):
        raise DataError(f"feature tensor shape {features.shape} does not match panel")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("date", "symbol") + FEATURE_NAMES)
        for t, day in enumerate(panel.calendar):
            for i, sym in enumerate(panel.assets):
                writer.writerow([day.isoformat(), sym] + [repr(float(v)) for v in features[i, t]])
