"""Seeded synthetic solar-wind / Dst generator.

Dst is a quiet-time AR(1) fluctuation around -10 nT plus Poisson-timed
storms (exponential main-phase drop, exponential recovery). Each solar-wind
feature is a fixed smoothing kernel applied to the Dst trajectory a few hours
*ahead* of its own timestamp, pushed through a physical-looking transform plus
noise, so the upstream solar wind carries learnable information about future
Dst. Pressure and electric field are derived from the other features.

Generation is blockwise so arbitrarily long series stream in bounded memory.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.signal import lfilter

from .tables import CSV_HEADER, SolarWindTable, format_float, format_time, write_rows

MAX_RECORDS = 1_200_000
START = np.datetime64("2010-01-01T00", "h")


@dataclass(frozen=True)
class SynthParams:
    quiet_mean: float = -10.0
    ar_coef: float = 0.95
    ar_noise: float = 2.5
    storm_rate: float = 1 / 120  # storms per hour
    depth_range: tuple[float, float] = (-250.0, -30.0)
    main_phase_hours: tuple[int, int] = (3, 10)
    recovery_tau: tuple[float, float] = (8.0, 24.0)
    block: int = 8192


# (first lead hour, last lead hour) of the Dst window each feature responds to
KERNELS = {"imf": (4, 7), "bz": (5, 6), "temp": (0, 2), "density": (2, 4), "speed": (3, 6)}
MAX_LEAD = max(b for _, b in KERNELS.values())


def _storm_profile(depth: float, main: int, tau: float) -> np.ndarray:
    s = np.arange(main, dtype=np.float64) + 1.0
    tau_m = main / 3.0
    drop = depth * (1.0 - np.exp(-s / tau_m)) / (1.0 - np.exp(-main / tau_m))
    rec = depth * np.exp(-np.arange(1, int(6 * tau) + 1) / tau)
    return np.concatenate((drop, rec))


def _dst_blocks(rng: np.random.Generator, p: SynthParams) -> Iterator[np.ndarray]:
    max_len = p.main_phase_hours[1] + int(6 * p.recovery_tau[1]) + 1
    pending = np.zeros(max_len)
    q_prev = 0.0
    while True:
        eps = rng.standard_normal(p.block) * p.ar_noise
        quiet, zf = lfilter([1.0], [1.0, -p.ar_coef], eps, zi=[p.ar_coef * q_prev])
        q_prev = quiet[-1]
        storms = np.zeros(p.block + max_len)
        storms[:max_len] = pending
        starts = np.flatnonzero(rng.random(p.block) < p.storm_rate)
        for s in starts:
            u = rng.random(3)
            lo, hi = p.depth_range
            depth = hi + (lo - hi) * u[0] ** 2
            main = int(p.main_phase_hours[0] + u[1] * (p.main_phase_hours[1] - p.main_phase_hours[0] + 1))
            main = min(main, p.main_phase_hours[1])
            tau = p.recovery_tau[0] + u[2] * (p.recovery_tau[1] - p.recovery_tau[0])
            prof = _storm_profile(depth, main, tau)
            seg = storms[s : s + len(prof)]
            np.minimum(seg, prof[: len(seg)], out=seg)
        pending = storms[p.block : p.block + max_len].copy()
        yield p.quiet_mean + quiet + storms[: p.block]


def _window_mean(dst: np.ndarray, n: int, lead: tuple[int, int]) -> np.ndarray:
    a, b = lead
    return np.mean([dst[k : k + n] for k in range(a, b + 1)], axis=0)


def _features(dst_ahead: np.ndarray, n: int, rng: np.random.Generator, quiet: float) -> np.ndarray:
    g = {name: _window_mean(dst_ahead, n, lead) - quiet for name, lead in KERNELS.items()}
    z = rng.standard_normal((5, n))
    imf = np.maximum(5.0 + 0.1 * np.maximum(-g["imf"], 0.0) + 0.3 * z[0], 0.5)
    bz = 0.5 + 0.07 * g["bz"] + 0.2 * z[1]
    temp = 8.0e4 * np.exp(-0.006 * g["temp"] + 0.02 * z[2])
    density = 5.0 * np.exp(-0.004 * g["density"] + 0.015 * z[3])
    speed = 400.0 - 1.2 * g["speed"] + 3.0 * z[4]
    pressure = 1.6726e-6 * density * speed**2
    efield = -speed * bz * 1e-3
    return np.column_stack((imf, bz, temp, density, speed, pressure, efield))


def iter_synthetic(count: int, seed: int, params: SynthParams | None = None) -> Iterator[SolarWindTable]:
    """Yield consecutive table blocks totalling ``count`` hourly records."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > MAX_RECORDS:
        raise ValueError(f"count must be <= {MAX_RECORDS}")
    p = params or SynthParams()
    dst_seq, feat_seq = np.random.SeedSequence(seed).spawn(2)
    dst_rng, feat_rng = np.random.default_rng(dst_seq), np.random.default_rng(feat_seq)
    blocks = _dst_blocks(dst_rng, p)
    current = next(blocks)
    done = 0
    while done < count:
        upcoming = next(blocks)
        n = min(p.block, count - done)
        ahead = np.concatenate((current, upcoming[:MAX_LEAD]))
        feats = _features(ahead, p.block, feat_rng, p.quiet_mean)[:n]
        times = START + (done + np.arange(n)) * np.timedelta64(1, "h")
        yield SolarWindTable(times, np.column_stack((feats, current[:n])))
        done += n
        current = upcoming


def synthesize_records(count: int, seed: int, params: SynthParams | None = None) -> SolarWindTable:
    parts = list(iter_synthetic(count, seed, params))
    return SolarWindTable(np.concatenate([b.time for b in parts]), np.concatenate([b.values for b in parts]))


def write_synthetic_csv(count: int, seed: int, path: str | os.PathLike, params: SynthParams | None = None) -> int:
    """Stream a synthetic series to CSV block by block; returns rows written."""
    rows = 0
    with open(path, "w", newline="") as fh:
        def gen():
            nonlocal rows
            for block in iter_synthetic(count, seed, params):
                for t, row in zip(block.time, block.values):
                    rows += 1
                    yield [format_time(t)] + [format_float(v) for v in row]
        write_rows(fh, CSV_HEADER, gen())
    return rows
