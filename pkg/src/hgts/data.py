"""CSV ingestion, chronological splits, sliding windows and imputation masks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError

# ETT convention: 12/4/4 months of 30 days
_ETT_MONTH_HOURS = 30 * 24
ETT_PRESETS = {"ett_hour": 1, "ett_minute": 4}


@dataclass
class SeriesTable:
    timestamps: np.ndarray  # float seconds since epoch, strictly increasing
    values: np.ndarray  # C x T
    channels: list[str]

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.values.shape[1]


def _parse_time(cell: str) -> float:
    try:
        return float(cell)
    except ValueError:
        pass
    stamp = datetime.fromisoformat(cell.strip().replace("Z", "+00:00"))
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.timestamp()


def load_csv(path: str, columns: Sequence[str] | None = None) -> SeriesTable:
    """Read a header-first CSV whose first column is a timestamp (ISO-8601 or epoch).

    ``columns`` optionally selects and orders value columns by name.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        names = [h.strip() for h in header[1:]]
        if not names:
            raise DataError(f"{path} has no value columns")
        if columns is not None:
            missing = [c for c in columns if c not in names]
            if missing:
                raise DataError(f"{path}: columns not found: {missing}")
            picks = [names.index(c) for c in columns]
        else:
            picks = list(range(len(names)))
        times, rows = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            try:
                times.append(_parse_time(row[0]))
            except ValueError:
                raise DataError(f"{path}: unparsable timestamp at row {row_no}, column {header[0]!r}: {row[0]!r}") from None
            vals = []
            for j in picks:
                cell = row[j + 1]
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: unparsable value at row {row_no}, column {names[j]!r}: {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite value at row {row_no}, column {names[j]!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path} has no data rows")
    ts = np.asarray(times)
    bad = np.nonzero(np.diff(ts) <= 0)[0]
    if bad.size:
        raise DataError(f"{path}: timestamps not strictly increasing at row {bad[0] + 2}")
    return SeriesTable(ts, np.asarray(rows, dtype=np.float64).T.copy(), [names[j] for j in picks])


def save_csv(path: str, table: SeriesTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *table.channels])
        for t, col in zip(table.timestamps, table.values.T):
            stamp = datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S")
            w.writerow([stamp, *(repr(float(v)) for v in col)])


@dataclass
class SplitSpec:
    """Disjoint contiguous [start, stop) ranges plus train-only channel statistics."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]
    mean: np.ndarray  # C
    std: np.ndarray  # C

    def range(self, name: str) -> tuple[int, int]:
        return getattr(self, name)

    def span(self, name: str, lookback: int = 0) -> tuple[int, int]:
        """Indices usable by windows whose predicted points lie in ``name``.

        Validation and test spans reach ``lookback`` points back so the
        first predicted point is the first point of the range.
        """
        lo, hi = self.range(name)
        if name != "train":
            lo = max(0, lo - lookback)
        return lo, hi

    def standardize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[:, None]) / self.std[:, None]

    def destandardize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[:, None] + self.mean[:, None]


def chrono_split(
    table: SeriesTable | np.ndarray,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    preset: str | None = None,
    min_length: int = 1,
) -> SplitSpec:
    """Chronological train/val/test split; statistics come from the train range only."""
    values = table.values if isinstance(table, SeriesTable) else np.asarray(table)
    total = values.shape[1]
    if preset is not None:
        if preset not in ETT_PRESETS:
            raise DataError(f"unknown split preset {preset!r}; expected one of {sorted(ETT_PRESETS)}")
        month = _ETT_MONTH_HOURS * ETT_PRESETS[preset]
        bounds = [0, 12 * month, 16 * month, 20 * month]
        if bounds[-1] > total:
            raise DataError(f"{preset} split needs {bounds[-1]} rows, table has {total}")
    else:
        if len(ratios) != 3 or any(r <= 0 for r in ratios) or sum(ratios) > 1 + 1e-9:
            raise DataError(f"bad split ratios {ratios}")
        n_train = int(total * ratios[0])
        n_test = int(total * ratios[2])
        n_val = total - n_train - n_test if abs(sum(ratios) - 1) < 1e-9 else int(total * ratios[1])
        bounds = [0, n_train, n_train + n_val, n_train + n_val + n_test]
    ranges = [(bounds[i], bounds[i + 1]) for i in range(3)]
    for name, (lo, hi) in zip(("train", "val", "test"), ranges):
        if hi - lo < min_length:
            raise DataError(f"{name} split has {hi - lo} points, need at least {min_length}")
    train = values[:, bounds[0] : bounds[1]]
    mean = train.mean(axis=1)
    std = train.std(axis=1)
    std = np.where(std > 0, std, 1.0)
    return SplitSpec(ranges[0], ranges[1], ranges[2], mean, std)


@dataclass
class WindowBatch:
    values: np.ndarray  # B x C x W
    starts: np.ndarray  # B, absolute start index of each window
    observed: np.ndarray | None = None  # B x C x W bool (imputation)
    loss_mask: np.ndarray | None = None  # B x C x W bool (imputation)

    def __len__(self) -> int:
        return self.values.shape[0]


def window_starts(lo: int, hi: int, width: int, stride: int = 1) -> np.ndarray:
    """Start indices of all length-``width`` windows inside [lo, hi)."""
    if hi - lo < width:
        return np.zeros(0, dtype=np.int64)
    return np.arange(lo, hi - width + 1, stride, dtype=np.int64)


def sample_windows(
    values: np.ndarray,
    span: tuple[int, int],
    width: int,
    stride: int = 1,
    batch_size: int = 32,
    shuffle: bool = False,
    seed: int = 0,
    limit: int = 0,
) -> Iterator[WindowBatch]:
    """Yield batches of sliding windows from ``values[:, span[0]:span[1]]``.

    Shuffling uses ``seed`` only, so the order is reproducible.  ``limit`` > 0
    keeps that many windows (after shuffling).
    """
    starts = window_starts(span[0], span[1], width, stride)
    if shuffle:
        starts = np.random.default_rng(seed).permutation(starts)
    if limit > 0:
        starts = starts[:limit]
    for i in range(0, len(starts), batch_size):
        chunk = starts[i : i + batch_size]
        batch = np.stack([values[:, s : s + width] for s in chunk])
        yield WindowBatch(batch, chunk)


def count_windows(span: tuple[int, int], width: int, stride: int = 1) -> int:
    return len(window_starts(span[0], span[1], width, stride))


def make_imputation_mask(
    shape: tuple[int, int, int],
    ratio: float,
    seed: int | np.random.Generator,
    shared_channels: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Random point masks: exactly ``floor(ratio * W)`` hidden points per (b, c) row.

    Returns ``(observed, loss_mask)`` boolean arrays; ``loss_mask`` marks the
    hidden points.  ``shared_channels`` hides the same time points in every
    channel of a window.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    b, c, w = shape
    n_mask = int(math.floor(ratio * w))
    if w - n_mask < 2:
        raise ValueError(f"ratio {ratio} leaves fewer than 2 observed points out of {w}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rows = b if shared_channels else b * c
    # argsort of iid uniforms gives independent uniform subsets per row
    order = np.argsort(rng.random((rows, w)), axis=-1)[:, :n_mask]
    hidden = np.zeros((rows, w), dtype=bool)
    np.put_along_axis(hidden, order, True, axis=-1)
    if shared_channels:
        hidden = np.repeat(hidden[:, None, :], c, axis=1)
    else:
        hidden = hidden.reshape(b, c, w)
    return ~hidden, hidden


@dataclass
class Dataset:
    """Standardized series plus its split, ready for the harness."""

    values: np.ndarray  # C x T, standardized with train statistics
    split: SplitSpec
    channels: list[str] = field(default_factory=list)
    name: str = ""

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]


def prepare_dataset(table: SeriesTable, preset: str | None = None, ratios=(0.6, 0.2, 0.2), name: str = "") -> Dataset:
    split = chrono_split(table, ratios=ratios, preset=preset)
    return Dataset(split.standardize(table.values), split, list(table.channels), name)


def guess_preset(path: str) -> str | None:
    base = path.replace("\\", "/").rsplit("/", 1)[-1].lower()
    if base.startswith("etth"):
        return "ett_hour"
    if base.startswith("ettm"):
        return "ett_minute"
    return None
