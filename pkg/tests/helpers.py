"""Shared test utilities: finite differences, random instances, CSV builders."""

import numpy as np


def fd_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f at x (in place probes)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = float(f(x))
        flat[i] = keep - eps
        lo = float(f(x))
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * eps)
    return g


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(want))) if want.size else 1.0)
    return float(np.max(np.abs(got - want))) / scale if got.size else 0.0


def random_psd(rng, n, scale=1.0, ridge=1e-8):
    m = rng.normal(size=(n + 3, n))
    return (m.T @ m) / (n + 3) * scale + ridge * np.eye(n)


def random_simplex(rng, n):
    x = rng.exponential(size=n)
    return x / x.sum()


def softmax_rows(v):
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def write_ohlcv_csv(path, rows):
    """rows: iterable of (date_str, symbol, o, h, l, c, v) tuples."""
    lines = ["date,symbol,open,high,low,close,volume"]
    for r in rows:
        lines.append(",".join(str(x) for x in r))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def flat_ohlcv_rows(symbol, dates, prices):
    out = []
    for d, p in zip(dates, prices):
        out.append((d, symbol, p, p * 1.001, p * 0.999, p, 1000.0))
    return out
