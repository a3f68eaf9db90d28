"""Hourly solar-wind tables, OMNI/CSV parsing and CSV persistence."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, TextIO

import numpy as np

from ..errors import OrderingError, ParseError

FEATURES = ("imf", "bz", "temp", "density", "speed", "pressure", "efield")
COLUMNS = FEATURES + ("dst",)
CSV_HEADER = ("timestamp",) + COLUMNS
DST_RANGE = (-1000.0, 500.0)
HOUR = np.timedelta64(1, "h")


@dataclass(frozen=True)
class SolarWindRecord:
    timestamp: np.datetime64
    imf: float
    bz: float
    plasma_temperature: float
    proton_density: float
    plasma_speed: float
    flow_pressure: float
    electric_field: float
    dst: float

    @property
    def features(self) -> np.ndarray:
        return np.array([self.imf, self.bz, self.plasma_temperature, self.proton_density,
                         self.plasma_speed, self.flow_pressure, self.electric_field])


@dataclass
class SolarWindTable:
    """Column-oriented hourly records; NaN marks a missing value.

    ``segment`` is set once the table has been cleaned: rows sharing a
    segment id are consecutive hours with no missing values.
    """

    time: np.ndarray  # datetime64[h]
    values: np.ndarray  # [m, 8]: FEATURES then dst
    segment: np.ndarray | None = None

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype="datetime64[h]")
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, len(COLUMNS))
        if len(self.time) != len(self.values):
            raise ValueError("time and values lengths differ")

    def __len__(self) -> int:
        return len(self.time)

    @property
    def features(self) -> np.ndarray:
        return self.values[:, :7]

    @property
    def dst(self) -> np.ndarray:
        return self.values[:, 7]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, COLUMNS.index(name)]

    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.values)

    def records(self) -> Iterator[SolarWindRecord]:
        for t, row in zip(self.time, self.values):
            yield SolarWindRecord(t, *map(float, row))

    def slice(self, start: int, stop: int) -> "SolarWindTable":
        seg = None if self.segment is None else self.segment[start:stop]
        return SolarWindTable(self.time[start:stop], self.values[start:stop], seg)


def load_column_map(path: str | os.PathLike | None = None) -> dict:
    """Column indices and fill sentinels for OMNI2 hourly text."""
    if path is None:
        text = resources.files("dstt.data").joinpath("omni2_columns.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def _open_text(source) -> tuple[TextIO, bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", newline=""), True
    return source, False


def _to_time(year: int, doy: int, hour: int) -> np.datetime64:
    return np.datetime64(f"{year:04d}-01-01T00", "h") + np.timedelta64((doy - 1) * 24 + hour, "h")


def _check_order(times: list, line_numbers: list) -> None:
    for i in range(1, len(times)):
        if times[i] <= times[i - 1]:
            raise OrderingError(
                f"timestamps not strictly increasing at line {line_numbers[i]}: "
                f"{times[i]} follows {times[i - 1]}"
            )


def parse_omni_table(source, column_map: dict | None = None) -> SolarWindTable:
    """Parse OMNI-style hourly rows (year, day-of-year, hour, ...).

    Rows may be whitespace- or comma-delimited. Values equal to the column's
    fill sentinel, and Dst outside the sanity range, become NaN.
    """
    cmap = column_map or load_column_map()
    tcols = cmap["time"]
    specs = [(cmap["columns"][name]["index"], cmap["columns"][name].get("fill")) for name in COLUMNS]
    need = max([tcols["year"], tcols["doy"], tcols["hour"]] + [i for i, _ in specs]) + 1
    fh, close = _open_text(source)
    times, rows, lines = [], [], []
    try:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.replace(",", " ").split()
            if len(parts) < need:
                raise ParseError(f"expected at least {need} fields, found {len(parts)}", line=lineno)
            try:
                t = _to_time(int(parts[tcols["year"]]), int(parts[tcols["doy"]]), int(parts[tcols["hour"]]))
                row = []
                for idx, fill in specs:
                    v = float(parts[idx])
                    if fill is not None and abs(v - fill) < 1e-6 * max(1.0, abs(fill)):
                        v = np.nan
                    row.append(v)
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            times.append(t)
            rows.append(row)
            lines.append(lineno)
    finally:
        if close:
            fh.close()
    _check_order(times, lines)
    values = np.array(rows, dtype=np.float64).reshape(-1, len(COLUMNS))
    _mask_dst(values)
    return SolarWindTable(np.array(times, dtype="datetime64[h]"), values)


def _mask_dst(values: np.ndarray) -> None:
    dst = values[:, 7]
    with np.errstate(invalid="ignore"):
        bad = (dst < DST_RANGE[0]) | (dst > DST_RANGE[1])
    dst[bad] = np.nan


def _parse_time(text: str) -> np.datetime64:
    s = text.strip().rstrip("Z").replace(" ", "T")
    return np.datetime64(s, "h")


def read_csv_table(source) -> SolarWindTable:
    """Read the documented CSV layout (``timestamp,imf,...,dst``); extra columns are ignored."""
    fh, close = _open_text(source)
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return SolarWindTable(np.array([], dtype="datetime64[h]"), np.empty((0, 8)))
        header = [h.strip() for h in header]
        missing = [c for c in CSV_HEADER if c not in header]
        if missing:
            raise ParseError(f"CSV header lacks columns {missing}", line=1)
        cols = [header.index(c) for c in COLUMNS]
        tcol = header.index("timestamp")
        times, rows, lines = [], [], []
        for lineno, parts in enumerate(reader, start=2):
            if not parts or all(not p.strip() for p in parts):
                continue
            try:
                times.append(_parse_time(parts[tcol]))
                rows.append([float(parts[c]) if parts[c].strip() else np.nan for c in cols])
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), line=lineno) from None
            lines.append(lineno)
    finally:
        if close:
            fh.close()
    _check_order(times, lines)
    values = np.array(rows, dtype=np.float64).reshape(-1, len(COLUMNS))
    _mask_dst(values)
    return SolarWindTable(np.array(times, dtype="datetime64[h]"), values)


def sniff_format(path: str | os.PathLike) -> str:
    with open(path, "r") as fh:
        for line in fh:
            if line.strip():
                return "csv" if line.lstrip().startswith("timestamp") else "omni"
    return "csv"


def load_table(path: str | os.PathLike, fmt: str = "auto", column_map: dict | None = None) -> SolarWindTable:
    fmt = sniff_format(path) if fmt == "auto" else fmt
    if fmt == "csv":
        return read_csv_table(path)
    if fmt == "omni":
        return parse_omni_table(path, column_map)
    raise ValueError(f"unknown table format {fmt!r}")


def format_time(t: np.datetime64) -> str:
    return str(np.datetime64(t, "h")) + ":00:00Z"


def format_float(v: float) -> str:
    """Shortest text that round-trips a float64 exactly; empty for NaN."""
    return "" if v != v else repr(float(v))


def write_rows(fh: TextIO, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def write_table_csv(table: SolarWindTable, dest) -> None:
    rows = ([format_time(t)] + [format_float(v) for v in row] for t, row in zip(table.time, table.values))
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="") as fh:
            write_rows(fh, CSV_HEADER, rows)
    else:
        write_rows(dest, CSV_HEADER, rows)


def table_from_records(records: Iterable[SolarWindRecord]) -> SolarWindTable:
    recs = list(records)
    times = np.array([r.timestamp for r in recs], dtype="datetime64[h]")
    values = np.array([[*r.features, r.dst] for r in recs], dtype=np.float64).reshape(-1, 8)
    return SolarWindTable(times, values)
