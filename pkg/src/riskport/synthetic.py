"""Synthetic market generation for demos and tests.

One asset carries a constant drift on top of i.i.d. Gaussian noise; the
rest are driftless with the same noise scale. Useful as an obvious
learnable signal for sanity-checking training.
"""

import argparse
import csv
import datetime

import numpy as np

from .market_data import MarketPanel


def drift_panel(
    n_assets: int = 5,
    n_days: int = 600,
    drift: float = 0.005,
    noise: float = 0.01,
    seed: int = 0,
    drift_asset: int = 0,
    start: datetime.date = datetime.date(2015, 1, 1),
) -> MarketPanel:
    rng = np.random.default_rng(seed)
    rets = rng.normal(0.0, noise, size=(n_assets, n_days - 1))
    rets[drift_asset] += drift
    rets = np.clip(rets, -0.5, None)

    close = np.empty((n_assets, n_days))
    close[:, 0] = rng.uniform(20.0, 200.0, size=n_assets)
    np.cumprod(1.0 + rets, axis=1, out=rets)
    close[:, 1:] = close[:, :1] * rets

    open_ = np.empty_like(close)
    open_[:, 0] = close[:, 0]
    open_[:, 1:] = close[:, :-1]
    wiggle = np.abs(rng.normal(0.0, 0.002, size=close.shape))
    high = np.maximum(open_, close) * (1.0 + wiggle)
    low = np.minimum(open_, close) * (1.0 - wiggle)
    volume = rng.uniform(1e5, 1e6, size=close.shape).round()

    calendar = tuple(start + datetime.timedelta(days=k) for k in range(n_days))
    assets = tuple(f"SYN{i:02d}" for i in range(n_assets))
    return MarketPanel(
        calendar=calendar, assets=assets,
        open=open_, high=high, low=low, close=close, volume=volume,
    )


def write_csv(panel: MarketPanel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("date", "symbol", "open", "high", "low", "close", "volume"))
        for t, day in enumerate(panel.calendar):
            for i, sym in enumerate(panel.assets):
                writer.writerow([
                    day.isoformat(), sym,
                    repr(float(panel.open[i, t])), repr(float(panel.high[i, t])),
                    repr(float(panel.low[i, t])), repr(float(panel.close[i, t])),
                    repr(float(panel.volume[i, t])),
                ])


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="generate a synthetic OHLCV CSV")
    parser.add_argument("out", help="output CSV path")
    parser.add_argument("--assets", type=int, default=5)
    parser.add_argument("--days", type=int, default=600)
    parser.add_argument("--drift", type=float, default=0.005)
    parser.add_argument("--noise", type=float, default=0.01)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    panel = drift_panel(
        n_assets=args.assets, n_days=args.days,
        drift=args.drift, noise=args.noise, seed=args.seed,
    )
    write_csv(panel, args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
