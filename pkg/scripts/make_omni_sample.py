"""Regenerate src/dstt/data/omni2_sample.dat.

Writes synthetic hourly values in the OMNI2 low-resolution fixed-width layout
(55 words per line) and injects the format's fill sentinels: isolated missing
hours that cleaning interpolates, plus one 9-hour speed outage that splits the
series into two segments.
"""
import sys
from pathlib import Path

import numpy as np

from dstt.data import synthesize_records

COUNT = 2000
SEED = 2021
START = np.datetime64("2021-06-01T00", "h")

# Fortran layout of one OMNI2 record
FMT = (["{:4d}"] * 2 + ["{:3d}", "{:5d}", "{:3d}", "{:3d}", "{:4d}", "{:4d}"] + ["{:6.1f}"] * 14
       + ["{:8.0f}.", "{:6.1f}", "{:5.0f}.", "{:6.1f}", "{:6.1f}", "{:6.3f}", "{:6.2f}", "{:8.0f}.", "{:6.1f}",
          "{:5.0f}.", "{:6.1f}", "{:6.1f}", "{:6.3f}", "{:7.2f}", "{:7.2f}", "{:6.1f}", "{:3d}", "{:4d}",
          "{:6d}", "{:5d}", "{:10.2f}"] + ["{:9.2f}"] * 5 + ["{:3d}", "{:4d}", "{:6.1f}", "{:6.1f}",
                                                             "{:6d}", "{:6d}", "{:5.1f}"])
assert len(FMT) == 55

FILL = {8: 999.9, 16: 999.9, 22: 9999999.0, 23: 999.9, 24: 9999.0, 28: 99.99, 35: 999.99, 40: 99999}
# (word index, first row, number of rows)
GAPS = [(24, 300, 1), (8, 512, 2), (23, 777, 3), (40, 901, 1), (22, 1200, 4), (24, 1400, 9),
        (28, 1650, 1), (35, 1651, 1), (16, 1820, 6)]


def main(out: Path) -> None:
    table = synthesize_records(COUNT, SEED)
    v = table.values
    rows = []
    for i in range(COUNT):
        t = START + np.timedelta64(i, "h")
        year = t.astype("datetime64[Y]").astype(int) + 1970
        doy = int((t.astype("datetime64[D]") - t.astype("datetime64[Y]")).astype(int)) + 1
        hour = int((t - t.astype("datetime64[D]")).astype(int))
        imf, bz, temp, dens, speed, pres, ef, dst = v[i]
        words = [year, doy, hour, 2560, 51, 52, 60, 45, imf, imf * 0.95, 0.0, 180.0, 0.0, 0.0, bz, 0.0, bz,
                 0.5, 0.5, 0.5, 0.5, 0.5, temp, dens, speed, 0.0, 0.0, 0.04, pres, 9999999.0, 999.9, 9999.0,
                 99.9, 99.9, 9.999, ef, 999.99, 999.9, 10, 0, int(round(dst)), 99, 999999.99, 99999.99,
                 99999.99, 99999.99, 99999.99, 99999.99, 0, 5, 75.0, 999.9, 99999, 99999, 99.9]
        rows.append(words)
    for col, first, n in GAPS:
        for r in range(first, first + n):
            rows[r][col] = FILL[col]
    with open(out, "w") as fh:
        for words in rows:
            fh.write("".join(f.format(w) for f, w in zip(FMT, words)) + "\n")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("src/dstt/data/omni2_sample.dat"))
