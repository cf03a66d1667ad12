"""Synthetic county-style benchmark: noisy sinusoidal case waves.

Each region gets its own size (log-normal, so a few regions dominate the
absolute counts the way large counties do), wave period of two to three
months, phase and amplitude. Daily counts are Poisson draws around the
resulting curve. There is no weekday reporting pattern.
This is a stand-in for the real per-county export when it is unavailable;
it does not reproduce any real epidemic.
"""

from __future__ import annotations

from datetime import date

import numpy as np

from dpfedcast.data import RegionSeries

BENCH_START = date(2022, 2, 14)
BENCH_DAYS = 46


def make_benchmark(
    n_regions: int = 400,
    n_days: int = BENCH_DAYS,
    seed: int = 2022,
    start: date = BENCH_START,
    median_level: float = 120.0,
) -> dict[str, RegionSeries]:
    rng = np.random.default_rng(seed)
    t = np.arange(n_days)
    out = {}
    for k in range(n_regions):
        level = median_level * rng.lognormal(0.0, 0.8)
        period = rng.uniform(56.0, 84.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        amplitude = rng.uniform(0.3, 0.7)
        curve = level * (1.0 + amplitude * np.sin(2 * np.pi * t / period + phase))
        counts = rng.poisson(curve).astype(float)
        region = f"R{k:04d}"
        out[region] = RegionSeries(region, start, counts)
    return out
