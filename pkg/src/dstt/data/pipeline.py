"""Cleaning, t+w labeling, standardization, windowing and splitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np

from ..errors import DegenerateFeatureError, FoldError, HorizonRangeError, SplitError
from .tables import COLUMNS, FEATURES, HOUR, SolarWindTable, format_float, format_time, write_rows

log = logging.getLogger(__name__)

MAX_HORIZON = 6


@dataclass
class CleaningReport:
    interpolated: dict[str, int] = field(default_factory=dict)
    dropped_rows: int = 0
    inserted_hours: int = 0
    segments: int = 0

    def summary(self) -> str:
        parts = ", ".join(f"{k}={v}" for k, v in self.interpolated.items() if v)
        return (f"segments={self.segments} dropped_rows={self.dropped_rows} "
                f"inserted_hours={self.inserted_hours} interpolated[{parts or 'none'}]")


def _regrid(table: SolarWindTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(table) == 0:
        return table.time, table.values.copy(), np.ones(0, dtype=bool)
    start, stop = table.time[0], table.time[-1]
    n = int((stop - start) / HOUR) + 1
    values = np.full((n, len(COLUMNS)), np.nan)
    present = np.zeros(n, dtype=bool)
    pos = ((table.time - start) / HOUR).astype(np.int64)
    values[pos] = table.values
    present[pos] = True
    return start + np.arange(n) * HOUR, values, present


def _nan_runs(col: np.ndarray) -> Iterator[tuple[int, int]]:
    isnan = np.isnan(col)
    if not isnan.any():
        return
    edges = np.diff(np.concatenate(([0], isnan.view(np.int8), [0])))
    for s, e in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
        yield int(s), int(e)


def clean_missing(table: SolarWindTable, max_gap: int = 6) -> tuple[SolarWindTable, CleaningReport]:
    """Fill short gaps by linear interpolation and split at long ones.

    Absent hours count as missing in every column. A run of at most
    ``max_gap`` missing hours with valid neighbours on both sides is
    interpolated per column; anything else is dropped and starts a new
    segment.
    """
    times, values, present = _regrid(table)
    report = CleaningReport(interpolated={c: 0 for c in COLUMNS}, inserted_hours=int((~present).sum()))
    bad = np.zeros(len(times), dtype=bool)
    for j, name in enumerate(COLUMNS):
        col = values[:, j]
        for s, e in _nan_runs(col):
            if e - s <= max_gap and s > 0 and e < len(col):
                x = np.arange(s - 1, e + 1)
                col[s:e] = np.interp(np.arange(s, e), [x[0], x[-1]], [col[s - 1], col[e]])
                report.interpolated[name] += e - s
            else:
                bad[s:e] = True
    keep = ~bad
    # a new segment starts at every kept row whose predecessor was dropped
    starts = keep & np.concatenate(([True], bad[:-1]))
    segment = np.cumsum(starts) - 1
    out = SolarWindTable(times[keep], values[keep], segment[keep].astype(np.int64))
    report.dropped_rows = int((bad & present).sum())
    report.segments = int(starts.sum())
    log.info("cleaning: %s", report.summary())
    return out, report


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_features(cls, features: np.ndarray) -> "NormalizationStats":
        features = np.asarray(features, dtype=np.float64)
        std = features.std(axis=0)
        for name, s in zip(FEATURES, std):
            if not s > 0:
                raise DegenerateFeatureError(f"feature {name!r} is constant on the training data")
        return cls(features.mean(axis=0), std)

    def apply(self, features: np.ndarray) -> np.ndarray:
        if np.any(self.std <= 0):
            raise DegenerateFeatureError("normalization has a zero standard deviation")
        return (features - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


@dataclass(frozen=True)
class LabeledRecord:
    t: np.datetime64
    features: np.ndarray
    label: float
    w: int


@dataclass
class LabeledSet:
    """Records at source time ``t`` labeled with Dst at ``t + w``."""

    time: np.ndarray
    features: np.ndarray  # [m, 7]
    dst: np.ndarray  # Dst at t
    label: np.ndarray  # Dst at t + w
    segment: np.ndarray
    w: int
    standardized: bool = False

    def __len__(self) -> int:
        return len(self.time)

    def take(self, idx) -> "LabeledSet":
        return replace(self, time=self.time[idx], features=self.features[idx], dst=self.dst[idx],
                       label=self.label[idx], segment=self.segment[idx])

    def records(self) -> Iterator[LabeledRecord]:
        for t, x, y in zip(self.time, self.features, self.label):
            yield LabeledRecord(t, x, float(y), self.w)

    @staticmethod
    def concat(parts: list["LabeledSet"]) -> "LabeledSet":
        """Join parts in order; segment ids are renumbered so parts never merge."""
        segs, offset = [], 0
        for p in parts:
            _, inv = np.unique(p.segment, return_inverse=True)
            segs.append(inv.reshape(-1) + offset)
            offset += int(inv.max()) + 1 if len(p) else 0
        first = parts[0]
        return LabeledSet(
            np.concatenate([p.time for p in parts]),
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.dst for p in parts]),
            np.concatenate([p.label for p in parts]),
            np.concatenate(segs).astype(np.int64) if segs else np.zeros(0, np.int64),
            first.w,
            first.standardized,
        )


def label_records(table: SolarWindTable, w: int) -> LabeledSet:
    """Label each record with the Dst value ``w`` hours later in the same segment."""
    if not 1 <= w <= MAX_HORIZON:
        raise HorizonRangeError(f"horizon w must be in 1..{MAX_HORIZON}, got {w}")
    m = len(table)
    segment = table.segment if table.segment is not None else np.zeros(m, dtype=np.int64)
    if m > w:
        idx = np.arange(m - w)
        ok = (segment[idx + w] == segment[idx]) & (table.time[idx + w] - table.time[idx] == w * HOUR)
        idx = idx[ok]
    else:
        idx = np.zeros(0, dtype=np.int64)
    return LabeledSet(
        table.time[idx],
        table.features[idx].copy(),
        table.dst[idx].copy(),
        table.dst[idx + w].copy(),
        segment[idx].copy(),
        w,
    )


def standardize(labeled: LabeledSet, stats: NormalizationStats) -> LabeledSet:
    return replace(labeled, features=stats.apply(labeled.features), standardized=True)


class Chunk(NamedTuple):
    features: np.ndarray
    labels: np.ndarray
    start: int
    stop: int


def make_sequences(labeled: LabeledSet, n: int = 1024) -> list[Chunk]:
    """Cut each segment into consecutive length-``n`` chunks; a shorter tail chunk is kept."""
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    chunks = []
    m = len(labeled)
    if m == 0:
        return chunks
    breaks = np.flatnonzero(np.diff(labeled.segment) != 0) + 1
    bounds = np.concatenate(([0], breaks, [m]))
    for s, e in zip(bounds[:-1], bounds[1:]):
        for a in range(int(s), int(e), n):
            b = min(a + n, int(e))
            chunks.append(Chunk(labeled.features[a:b], labeled.label[a:b], a, b))
    return chunks


@dataclass
class DatasetSplit:
    train: LabeledSet
    test: LabeledSet
    note: str = ""


def chronological_split(labeled: LabeledSet, boundary) -> DatasetSplit:
    """Train strictly before ``boundary``, test at or after it."""
    boundary = np.datetime64(boundary, "h")
    before = labeled.time < boundary
    if before.all() or not before.any():
        raise SplitError(
            f"boundary {boundary} leaves an empty side ({int(before.sum())} train / {int((~before).sum())} test)"
        )
    train, test = labeled.take(before), labeled.take(~before)
    note = (f"train {format_time(train.time[0])}..{format_time(train.time[-1])} ({len(train)}); "
            f"test {format_time(test.time[0])}..{format_time(test.time[-1])} ({len(test)})")
    log.info("chronological split: %s", note)
    return DatasetSplit(train, test, note)


def fraction_split(labeled: LabeledSet, train_fraction: float) -> DatasetSplit:
    cut = int(round(len(labeled) * train_fraction))
    if not 0 < cut < len(labeled):
        raise SplitError(f"train fraction {train_fraction} leaves an empty side")
    return chronological_split(labeled, labeled.time[cut])


def fold_bounds(m: int, k: int) -> list[tuple[int, int]]:
    sizes = [m // k + (1 if i < m % k else 0) for i in range(k)]
    edges = np.concatenate(([0], np.cumsum(sizes)))
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def kfold_splits(labeled: LabeledSet, k: int = 10) -> list[DatasetSplit]:
    """Contiguous, order-preserving folds; run ``i`` tests on fold ``i``."""
    if k < 2:
        raise FoldError(f"k must be >= 2, got {k}")
    m = len(labeled)
    if m < k:
        raise FoldError(f"cannot make {k} folds from {m} records")
    bounds = fold_bounds(m, k)
    splits = []
    for i, (a, b) in enumerate(bounds):
        parts = [labeled.take(slice(s, e)) for j, (s, e) in enumerate(bounds) if j != i]
        train = LabeledSet.concat(parts)
        splits.append(DatasetSplit(train, labeled.take(slice(a, b)), f"fold {i + 1}/{k}: test rows {a}..{b - 1}"))
    return splits


LABELED_HEADER = ("timestamp",) + COLUMNS + ("label", "w")


def write_labeled_csv(labeled: LabeledSet, path) -> None:
    def rows():
        for t, x, d, y in zip(labeled.time, labeled.features, labeled.dst, labeled.label):
            yield [format_time(t)] + [format_float(v) for v in x] + [format_float(d), format_float(y), labeled.w]

    with open(path, "w", newline="") as fh:
        write_rows(fh, LABELED_HEADER, rows())
