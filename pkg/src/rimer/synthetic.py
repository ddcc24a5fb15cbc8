"""Deterministic synthetic series for tests and offline benchmarks."""

from __future__ import annotations

from datetime import datetime, timedelta

import numpy as np

from .data import SeriesDataset

ETT_COLUMNS = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"]


def two_sinusoids(n_steps: int = 4096, periods=(24.0, 61.0), amplitudes=(1.0, 0.6), noise: float = 0.02, seed: int = 0) -> SeriesDataset:
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps, dtype=np.float64)
    y = sum(a * np.sin(2 * np.pi * t / p + ph) for a, p, ph in zip(amplitudes, periods, (0.0, 0.7)))
    y = y + noise * rng.standard_normal(n_steps)
    return SeriesDataset(name="two_sinusoids", columns=["y"], values=y[:, None])


def _ar1(rng, n, phi, sigma):
    e = rng.standard_normal(n) * sigma
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = phi * acc + e[i]
        out[i] = acc
    return out


def etth_like(n_rows: int = 5000, seed: int = 0) -> SeriesDataset:
    """Hourly transformer-load stand-in with the ETTh1 column layout.

    Six load channels share daily and weekly cycles whose amplitude scales
    with a slowly drifting demand level; oil temperature (OT) follows the
    total load through a first-order thermal lag plus its own daily swing.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_rows, dtype=np.float64)
    day = 2 * np.pi * t / 24.0
    week = 2 * np.pi * t / 168.0
    demand = 1.0 + 0.35 * np.tanh(_ar1(rng, n_rows, 0.995, 0.04))
    profile = np.sin(day - 1.2) + 0.45 * np.sin(2 * day + 0.4) + 0.25 * np.sin(week)
    loads = []
    for c in range(6):
        base = rng.uniform(2.0, 12.0)
        amp = rng.uniform(0.8, 3.0)
        phase = rng.uniform(-0.3, 0.3)
        shaped = np.sin(day - 1.2 + phase) + 0.45 * np.sin(2 * day + 0.4) + 0.25 * np.sin(week + phase)
        mix = 0.7 * profile + 0.3 * shaped
        loads.append(base * demand + amp * demand * mix + _ar1(rng, n_rows, 0.8, 0.15 * amp))
    loads = np.stack(loads, axis=1)
    heat = loads @ rng.uniform(0.2, 0.6, size=6)
    ot = np.empty(n_rows)
    level = heat[0]
    for i in range(n_rows):
        level = 0.97 * level + 0.03 * heat[i]
        ot[i] = level
    ot = 0.8 * ot + 2.0 * np.sin(day - 2.0) + _ar1(rng, n_rows, 0.9, 0.3)
    values = np.round(np.concatenate([loads, ot[:, None]], axis=1), 3)
    start = datetime(2016, 7, 1)
    stamps = [(start + timedelta(hours=i)).strftime("%Y-%m-%d %H:%M:%S") for i in range(n_rows)]
    return SeriesDataset(name="ETTh1", columns=list(ETT_COLUMNS), values=values, timestamps=stamps)
