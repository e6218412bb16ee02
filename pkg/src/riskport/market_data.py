"""OHLCV ingestion, panel alignment, returns, and train/test splitting.

Input is a long-format CSV with one row per (date, symbol). The loader
aligns all assets onto the intersection of their trading calendars,
sorts assets lexicographically and dates ascending, and freezes the
result into an immutable MarketPanel. Panels round-trip through a
versioned JSON cache bit-exactly.
"""

import bisect
import csv
import datetime
import json
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

PANEL_FORMAT = "riskport.panel/1"
CSV_FIELDS = ("date", "symbol", "open", "high", "low", "close", "volume")

# Leading rows consumed by the longest indicator lookback (60-day moving
# average): rows before this index carry back-filled feature values.
FEATURE_WARMUP_ROWS = 59


@dataclass(frozen=True)
class MarketPanel:
    """Aligned OHLCV arrays, shape (n_assets, n_periods each)."""

    calendar: Tuple[datetime.date, ...]
    assets: Tuple[str, ...]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        n, t = len(self.assets), len(self.calendar)
        for name in ("open", "high", "low", "close", "volume"):
            arr = getattr(self, name)
            if arr.shape != (n, t):
                raise DataError(f"panel column {name} has shape {arr.shape}, expected {(n, t)}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"panel column {name} holds NaN or Inf")
            arr.setflags(write=False)
        if any(b <= a for a, b in zip(self.calendar, self.calendar[1:])):
            raise DataError("panel calendar is not strictly increasing")
        for name in ("open", "high", "low", "close"):
            if np.any(getattr(self, name) <= 0.0):
                raise DataError(f"panel column {name} has non-positive prices")
        if np.any(self.volume < 0.0):
            raise DataError("panel volume has negative entries")
        if list(self.assets) != sorted(self.assets):
            raise DataError("panel assets are not sorted")

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    @property
    def n_periods(self) -> int:
        return len(self.calendar)

    def index_of(self, day: datetime.date) -> int:
        """Calendar position of an exact trading date."""
        lo = bisect.bisect_left(self.calendar, day)
        if lo >= len(self.calendar) or self.calendar[lo] != day:
            raise ConfigError(f"date {day.isoformat()} is not on the panel calendar")
        return lo

    def restrict(self, start: int, stop: int) -> "MarketPanel":
        """New panel covering calendar positions [start, stop)."""
        if not (0 <= start < stop <= self.n_periods):
            raise ConfigError(f"bad panel range [{start}, {stop})")
        return MarketPanel(
            calendar=self.calendar[start:stop],
            assets=self.assets,
            open=self.open[:, start:stop].copy(),
            high=self.high[:, start:stop].copy(),
            low=self.low[:, start:stop].copy(),
            close=self.close[:, start:stop].copy(),
            volume=self.volume[:, start:stop].copy(),
        )


@dataclass(frozen=True)
class ReturnMatrix:
    """Simple per-period returns; column t spans close[t] -> close[t+1]."""

    r: np.ndarray  # (n_assets, n_periods - 1)

    def __post_init__(self):
        if np.any(self.r <= -1.0):
            raise DataError("return matrix has entries <= -1")
        self.r.setflags(write=False)


@dataclass(frozen=True)
class SplitSpec:
    """Date boundaries for the train/test (and optional validation) split.

    Training covers [train_start, train_end]. When validation_end is set,
    the period (train_end, validation_end] is held out for checkpoint
    selection. Testing covers [test_start, test_end].
    """

    train_start: datetime.date
    train_end: datetime.date
    test_start: datetime.date
    test_end: datetime.date
    validation_end: Optional[datetime.date] = None

    def __post_init__(self):
        if self.train_start > self.train_end:
            raise ConfigError("train_start is after train_end")
        if self.test_start > self.test_end:
            raise ConfigError("test_start is after test_end")
        if self.train_end > self.test_start:
            raise ConfigError("train_end is after test_start")
        if self.validation_end is not None:
            if not (self.train_end < self.validation_end <= self.test_start):
                raise ConfigError("validation_end must fall in (train_end, test_start]")


def _parse_date(text: str, line_num: int) -> datetime.date:
    try:
        return datetime.date.fromisoformat(text.strip())
    except ValueError as exc:
        raise DataError(f"line {line_num}: bad date {text!r}") from exc


def _parse_float(text: str, field_name: str, line_num: int) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError) as exc:
        raise DataError(f"line {line_num}: bad {field_name} value {text!r}") from exc
    if not np.isfinite(value):
        raise DataError(f"line {line_num}: non-finite {field_name} value")
    return value


def load_ohlcv(path, schema: Optional[dict] = None, min_observations: int = 22) -> MarketPanel:
    """Parse a long-format OHLCV CSV into an aligned MarketPanel.

    schema maps the logical column names in CSV_FIELDS to the file's
    actual header names; identity by default. Assets with fewer than
    min_observations raw rows are rejected with an error naming them.
    """
    colmap = {name: name for name in CSV_FIELDS}
    if schema:
        unknown = set(schema) - set(CSV_FIELDS)
        if unknown:
            raise ConfigError(f"schema maps unknown fields: {sorted(unknown)}")
        colmap.update(schema)

    per_symbol: dict = {}
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot open CSV {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty CSV")
        missing = [colmap[f] for f in CSV_FIELDS if colmap[f] not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row in reader:
            line = reader.line_num
            symbol = (row[colmap["symbol"]] or "").strip()
            if not symbol:
                raise DataError(f"line {line}: empty symbol")
            day = _parse_date(row[colmap["date"]] or "", line)
            o = _parse_float(row[colmap["open"]], "open", line)
            h = _parse_float(row[colmap["high"]], "high", line)
            lo_ = _parse_float(row[colmap["low"]], "low", line)
            c = _parse_float(row[colmap["close"]], "close", line)
            v = _parse_float(row[colmap["volume"]], "volume", line)
            if min(o, h, lo_, c) <= 0.0:
                raise DataError(f"line {line}: non-positive price for {symbol} on {day.isoformat()}")
            if v < 0.0:
                raise DataError(f"line {line}: negative volume for {symbol} on {day.isoformat()}")
            bucket = per_symbol.setdefault(symbol, {})
            if day in bucket:
                raise DataError(f"line {line}: duplicate row for {symbol} on {day.isoformat()}")
            bucket[day] = (o, h, lo_, c, v)

    if not per_symbol:
        raise DataError(f"{path}: no data rows")

    short = sorted(s for s, rows in per_symbol.items() if len(rows) < min_observations)
    if short:
        raise DataError(
            f"assets with fewer than {min_observations} observations: {', '.join(short)}"
        )

    date_sets = [set(rows) for rows in per_symbol.values()]
    common = set.intersection(*date_sets)
    if not common:
        raise DataError("no dates shared by all assets")
    union = set.union(*date_sets)
    dropped = len(union) - len(common)
    if dropped:
        log.info("alignment dropped %d dates missing for some asset", dropped)

    calendar = tuple(sorted(common))
    assets = tuple(sorted(per_symbol))
    n, t = len(assets), len(calendar)
    cols = {name: np.empty((n, t)) for name in ("open", "high", "low", "close", "volume")}
    for i, sym in enumerate(assets):
        rows = per_symbol[sym]
        for j, day in enumerate(calendar):
            o, h, lo_, c, v = rows[day]
            cols["open"][i, j] = o
            cols["high"][i, j] = h
            cols["low"][i, j] = lo_
            cols["close"][i, j] = c
            cols["volume"][i, j] = v
    return MarketPanel(calendar=calendar, assets=assets, **cols)


def save_panel(panel: MarketPanel, path) -> None:
    """Write the panel cache (JSON, time-major column lists)."""
    blob = {
        "format": PANEL_FORMAT,
        "calendar": [d.isoformat() for d in panel.calendar],
        "assets": list(panel.assets),
        "columns": {
            name: getattr(panel, name).T.tolist()
            for name in ("open", "high", "low", "close", "volume")
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh)


def load_panel(path) -> MarketPanel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot open panel {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed panel file: {exc}") from exc
    if blob.get("format") != PANEL_FORMAT:
        raise DataError(f"{path}: unrecognized panel format {blob.get('format')!r}")
    calendar = tuple(datetime.date.fromisoformat(d) for d in blob["calendar"])
    cols = {
        name: np.asarray(blob["columns"][name], dtype=np.float64).T
        for name in ("open", "high", "low", "close", "volume")
    }
    return MarketPanel(calendar=calendar, assets=tuple(blob["assets"]), **cols)


def compute_returns(panel: MarketPanel) -> ReturnMatrix:
    """Per-period simple returns from aligned closes."""
    if panel.n_periods < 2:
        raise DataError("need at least 2 periods to compute returns")
    c = panel.close
    return ReturnMatrix(r=c[:, 1:] / c[:, :-1] - 1.0)


def split(panel: MarketPanel, spec: SplitSpec, window: int = 20):
    """Cut the panel into train and test panels.

    The test panel keeps window + FEATURE_WARMUP_ROWS leading context rows
    from before test_start so feature windows and trailing covariance are
    computable at every test date without touching anything after it.
    """
    i_tr0 = panel.index_of(spec.train_start)
    i_tr1 = panel.index_of(spec.train_end)
    i_te0 = panel.index_of(spec.test_start)
    i_te1 = panel.index_of(spec.test_end)
    if i_tr1 < i_tr0 or i_te1 < i_te0:
        raise ConfigError("empty split range")
    context = window + FEATURE_WARMUP_ROWS
    train = panel.restrict(i_tr0, i_tr1 + 1)
    test = panel.restrict(max(0, i_te0 - context), i_te1 + 1)
    if train.n_periods == 0 or test.n_periods == 0:
        raise ConfigError("empty split")
    return train, test
