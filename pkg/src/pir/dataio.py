"""Dataset ingestion, splitting, standardisation and windowing.

Also owns the forecast-exchange CSV: long format with header
``instance_id,channel,step,value`` (channel and step are 0-based integers).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

EXCHANGE_HEADER = ("instance_id", "channel", "step", "value")
N_CALENDAR_FEATURES = 5
STD_FLOOR = 1e-8


class IngestionError(ValueError):
    """Input file violates the dataset contract; message names the row."""


class WindowError(ValueError):
    """A split is too short to cut a single window."""


class JoinError(KeyError):
    """Forecast records do not line up with the window instances."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class TimeSeriesDataset:
    values: np.ndarray          # (T, N)
    timestamps: np.ndarray      # (T,) datetime64[s]
    channel_names: tuple[str, ...]
    offset: int = 0             # position of row 0 in the parent series

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"values must be a non-empty T x N matrix, got {v.shape}")
        if v.shape[1] != len(self.channel_names):
            raise ValueError(f"{v.shape[1]} value columns for {len(self.channel_names)} names")
        if len(self.timestamps) != v.shape[0]:
            raise ValueError("timestamps and values differ in length")
        v = v.copy()
        v.flags.writeable = False
        ts = np.asarray(self.timestamps, dtype="datetime64[s]").copy()
        ts.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "TimeSeriesDataset":
        return TimeSeriesDataset(self.values[start:stop], self.timestamps[start:stop],
                                 self.channel_names, self.offset + start)

    def with_values(self, values: np.ndarray) -> "TimeSeriesDataset":
        return TimeSeriesDataset(values, self.timestamps, self.channel_names, self.offset)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    channel_names: tuple[str, ...]

    def to_json(self) -> dict:
        return {name: {"mean": float(m), "std": float(s)}
                for name, m, s in zip(self.channel_names, self.mean, self.std)}

    @classmethod
    def from_json(cls, blob: Mapping) -> "ChannelStats":
        names = tuple(blob)
        return cls(np.array([blob[n]["mean"] for n in names], dtype=np.float64),
                   np.array([blob[n]["std"] for n in names], dtype=np.float64), names)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ChannelStats":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class WindowInstance:
    id: int
    x: np.ndarray       # (N, L_in)
    y: np.ndarray       # (N, L_out)
    exo: np.ndarray     # (L_out, F)
    origin: int         # index of first target step in the parent series


@dataclass(frozen=True)
class ForecastRecord:
    instance_id: int
    values: np.ndarray  # (N, L_out)
    source: str = "external"


# ---------------------------------------------------------------------------
# CSV datasets


def _parse_timestamp(text: str, row: int) -> np.datetime64:
    text = text.strip()
    try:
        return np.datetime64(datetime.fromisoformat(text.replace("T", " ")), "s")
    except ValueError:
        raise IngestionError(f"row {row}: unparsable timestamp {text!r}") from None


def load_csv(path: str | Path) -> TimeSeriesDataset:
    """Read a ``date,<channel>,...`` file into a dataset.

    Row numbers in errors count the header as row 1.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if len(header) < 2:
            raise IngestionError("row 1: need a date column and at least one channel")
        names = tuple(h.strip() for h in header[1:])
        stamps, rows = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"row {row_no}: expected {len(header)} cells, got {len(row)}")
            stamps.append(_parse_timestamp(row[0], row_no))
            vals = []
            for col, cell in enumerate(row[1:], start=1):
                cell = cell.strip()
                if cell == "" or cell.lower() in ("nan", "na", "null"):
                    raise IngestionError(f"row {row_no}: missing value in column {header[col]!r}")
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestionError(f"row {row_no}: non-numeric {cell!r} in column {header[col]!r}") from None
                if not math.isfinite(v):
                    raise IngestionError(f"row {row_no}: non-finite value in column {header[col]!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    ts = np.array(stamps, dtype="datetime64[s]")
    if len(ts) > 1:
        diffs = np.diff(ts).astype(np.int64)
        stride = diffs[0]
        if stride <= 0:
            raise IngestionError("row 3: timestamps not strictly increasing")
        bad = np.nonzero(diffs != stride)[0]
        if bad.size:
            raise IngestionError(f"row {int(bad[0]) + 3}: irregular timestamp stride "
                                 f"({int(diffs[bad[0]])}s, expected {int(stride)}s)")
    return TimeSeriesDataset(np.array(rows, dtype=np.float64), ts, names)


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s")).replace("T", " ")


def write_csv(dataset: TimeSeriesDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("date",) + dataset.channel_names)
        for ts, row in zip(dataset.timestamps, dataset.values):
            w.writerow([format_timestamp(ts)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# splitting and scaling


def parse_ratios(text: str) -> tuple[Fraction, ...]:
    return tuple(Fraction(part) for part in text.split(":"))


def split_bounds(length: int, ratios: Sequence) -> list[int]:
    fr = [Fraction(str(r)) if isinstance(r, float) else Fraction(r) for r in ratios]
    if len(fr) != 3 or any(r <= 0 for r in fr):
        raise ValueError(f"need three positive split ratios, got {list(ratios)}")
    total = sum(fr)
    cum = [Fraction(0), fr[0], fr[0] + fr[1], total]
    bounds = [math.floor(c / total * length) for c in cum]
    for a, b in zip(bounds, bounds[1:]):
        if b <= a:
            raise ValueError(f"ratios {list(ratios)} leave an empty split for T={length}")
    return bounds


def split_chronological(dataset: TimeSeriesDataset, ratios: Sequence
                        ) -> tuple[TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset]:
    b = split_bounds(dataset.length, ratios)
    return dataset.slice(b[0], b[1]), dataset.slice(b[1], b[2]), dataset.slice(b[2], b[3])


def compute_stats(dataset: TimeSeriesDataset) -> ChannelStats:
    mean = dataset.values.mean(axis=0)
    std = dataset.values.std(axis=0)
    low = std < STD_FLOOR
    if low.any():
        names = [dataset.channel_names[i] for i in np.nonzero(low)[0]]
        log.warning("near-constant channels %s: std clamped to 1", names)
        std = np.where(low, 1.0, std)
    return ChannelStats(mean, std, dataset.channel_names)


def standardize(dataset: TimeSeriesDataset, stats: ChannelStats | None = None
                ) -> tuple[TimeSeriesDataset, ChannelStats]:
    if stats is None:
        stats = compute_stats(dataset)
    if len(stats.mean) != dataset.n_channels:
        raise ValueError(f"stats for {len(stats.mean)} channels, dataset has {dataset.n_channels}")
    return dataset.with_values((dataset.values - stats.mean) / stats.std), stats


def destandardize(values: np.ndarray, stats: ChannelStats, channel_axis: int = -1) -> np.ndarray:
    shape = [1] * np.ndim(values)
    shape[channel_axis] = -1
    return np.asarray(values) * stats.std.reshape(shape) + stats.mean.reshape(shape)


# ---------------------------------------------------------------------------
# windows and calendar features


def calendar_features(timestamps) -> np.ndarray:
    """Minute, hour, weekday, day-of-month, day-of-year scaled to [-0.5, 0.5]."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    out = np.empty((len(ts), N_CALENDAR_FEATURES))
    for i, t in enumerate(ts.astype(object)):
        out[i] = (
            t.minute / 59.0,
            t.hour / 23.0,
            t.weekday() / 6.0,
            (t.day - 1) / 30.0,
            (t.timetuple().tm_yday - 1) / 365.0,
        )
    return out - 0.5


def window_count(length: int, lin: int, lout: int, stride: int = 1) -> int:
    return (length - lin - lout) // stride + 1


def make_windows(dataset: TimeSeriesDataset, lin: int, lout: int, stride: int = 1
                 ) -> list[WindowInstance]:
    """Cut every (input, target) pair lying wholly inside ``dataset``."""
    if lin < 1 or lout < 1 or stride < 1:
        raise ValueError("window lengths and stride must be positive")
    if dataset.length < lin + lout:
        raise WindowError(f"series of length {dataset.length} is too short: "
                          f"need at least L_in + L_out = {lin + lout}")
    cal = calendar_features(dataset.timestamps)
    vals = dataset.values.T
    out = []
    for i in range(window_count(dataset.length, lin, lout, stride)):
        s = i * stride
        out.append(WindowInstance(
            id=i,
            x=vals[:, s:s + lin],
            y=vals[:, s + lin:s + lin + lout],
            exo=cal[s + lin:s + lin + lout],
            origin=dataset.offset + s + lin,
        ))
    return out


@dataclass(frozen=True)
class WindowBatch:
    """Stacked view of a list of windows."""
    ids: np.ndarray      # (M,)
    x: np.ndarray        # (M, N, L_in)
    y: np.ndarray        # (M, N, L_out)
    exo: np.ndarray      # (M, L_out, F)
    origins: np.ndarray  # (M,)

    def __len__(self) -> int:
        return len(self.ids)


def stack_windows(instances: Sequence[WindowInstance]) -> WindowBatch:
    if not instances:
        raise WindowError("no window instances to stack")
    return WindowBatch(
        ids=np.array([w.id for w in instances], dtype=np.int64),
        x=np.stack([w.x for w in instances]),
        y=np.stack([w.y for w in instances]),
        exo=np.stack([w.exo for w in instances]),
        origins=np.array([w.origin for w in instances], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# forecast exchange


def write_forecasts(records: Iterable[ForecastRecord], path: str | Path) -> None:
    records = list(records)
    if records:
        shape = np.shape(records[0].values)
        for r in records:
            if np.shape(r.values) != shape:
                raise ValueError(f"record {r.instance_id}: shape {np.shape(r.values)} != {shape}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EXCHANGE_HEADER)
        for r in records:
            vals = np.asarray(r.values, dtype=np.float64)
            for c in range(vals.shape[0]):
                for t in range(vals.shape[1]):
                    w.writerow((r.instance_id, c, t, repr(float(vals[c, t]))))


def read_forecasts(path: str | Path, source: str | None = None) -> list[ForecastRecord]:
    """Parse a forecast-exchange file; records come back sorted by id."""
    path = Path(path)
    cells: dict[int, dict[tuple[int, int], float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(h.strip() for h in next(reader, ()))
        if header != EXCHANGE_HEADER:
            raise IngestionError(f"{path}: header {header} != {EXCHANGE_HEADER}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                iid, ch, step, val = int(row[0]), int(row[1]), int(row[2]), float(row[3])
            except (ValueError, IndexError):
                raise IngestionError(f"{path}: row {row_no}: malformed {row}") from None
            if ch < 0 or step < 0:
                raise IngestionError(f"{path}: row {row_no}: negative channel/step")
            slot = cells.setdefault(iid, {})
            if (ch, step) in slot:
                raise IngestionError(f"{path}: row {row_no}: duplicate cell {(iid, ch, step)}")
            slot[(ch, step)] = val
    tag = source or path.stem
    records = []
    shape = None
    for iid in sorted(cells):
        slot = cells[iid]
        n = max(c for c, _ in slot) + 1
        lout = max(s for _, s in slot) + 1
        if len(slot) != n * lout:
            raise IngestionError(f"{path}: instance {iid} has holes ({len(slot)} of {n * lout} cells)")
        if shape is None:
            shape = (n, lout)
        elif (n, lout) != shape:
            raise IngestionError(f"{path}: instance {iid} has shape {(n, lout)}, expected {shape}")
        vals = np.empty((n, lout))
        for (c, t), v in slot.items():
            vals[c, t] = v
        records.append(ForecastRecord(iid, vals, tag))
    return records


def join_forecasts(records: Sequence[ForecastRecord], instances: Sequence[WindowInstance]
                   ) -> np.ndarray:
    """Align records to ``instances``; returns an (M, N, L_out) array."""
    by_id = {r.instance_id: r for r in records}
    known = {w.id for w in instances}
    unknown = sorted(set(by_id) - known)
    if unknown:
        raise JoinError(f"forecasts reference unknown instance ids: {unknown}")
    missing = sorted(known - set(by_id))
    if missing:
        raise JoinError(f"missing ids: {missing}")
    out = []
    for w in instances:
        vals = by_id[w.id].values
        if vals.shape != w.y.shape:
            raise JoinError(f"instance {w.id}: forecast shape {vals.shape} != target shape {w.y.shape}")
        out.append(vals)
    return np.stack(out)


def forecasts_to_records(ids: Sequence[int], values: np.ndarray, source: str) -> list[ForecastRecord]:
    return [ForecastRecord(int(i), np.asarray(v, dtype=np.float64), source) for i, v in zip(ids, values)]
