"""CSV ingestion, chronological splits, z-scoring and sliding windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, LoadError

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.1)


@dataclass
class NormStats:
    """Per-channel train statistics.

    Constant channels are flagged and pass through untouched, so their
    effective mean is 0 and std is 1.
    """

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.where(self.constant, 1.0, self.std)

    @property
    def shift(self) -> np.ndarray:
        return np.where(self.constant, 0.0, self.mean)

    def normalize(self, values: np.ndarray, channel=None) -> np.ndarray:
        """Z-score ``values``; the last axis is channels unless ``channel`` is given."""
        shift, scale = (self.shift, self.scale) if channel is None else (self.shift[channel], self.scale[channel])
        return (values - shift) / scale

    def denormalize(self, values: np.ndarray, channel=None) -> np.ndarray:
        shift, scale = (self.shift, self.scale) if channel is None else (self.shift[channel], self.scale[channel])
        return values * scale + shift

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            constant=np.asarray(d["constant"], dtype=bool),
        )


@dataclass
class SeriesDataset:
    name: str
    columns: list[str]
    values: np.ndarray
    timestamps: list[str] | None = None
    stats: NormStats | None = None
    train_end: int | None = None
    val_end: int | None = None
    raw: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def bounds(self, split: str) -> tuple[int, int]:
        if self.train_end is None:
            raise ConfigError("dataset has not been split; call split_normalize first")
        if split == "train":
            return 0, self.train_end
        if split == "val":
            return self.train_end, self.val_end
        if split == "test":
            return self.val_end, self.n_steps
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")

    def split_values(self, split: str) -> np.ndarray:
        lo, hi = self.bounds(split)
        return self.values[lo:hi]


@dataclass
class WindowSet:
    inputs: np.ndarray
    targets: np.ndarray
    channels: np.ndarray
    origins: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class WindowSpec:
    lookback: int
    horizon: int
    stride: int = 1

    def __post_init__(self):
        for name in ("lookback", "horizon", "stride"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v}")


def _parse_cell(text: str, row: int, col: int, path) -> float:
    try:
        value = float(text)
    except ValueError:
        raise LoadError(f"{path}: row {row}, column {col}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise LoadError(f"{path}: row {row}, column {col}: non-finite value {text!r} (missing data is unsupported)")
    return value


def load_csv(path, has_date_column: bool | None = None, name: str | None = None) -> SeriesDataset:
    """Read a header-first CSV; ``has_date_column=None`` detects a leading ``date`` column."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise LoadError(f"{path}: {exc}") from exc
    rows = [r for r in rows if r]
    if not rows:
        raise LoadError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if has_date_column is None:
        has_date_column = header[0].lower() == "date"
    body = rows[1:]
    if not body:
        raise LoadError(f"{path}: no data rows")
    first = 1 if has_date_column else 0
    if len(header) <= first:
        raise LoadError(f"{path}: no value columns")
    values = np.empty((len(body), len(header) - first))
    stamps = [] if has_date_column else None
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise LoadError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
        if has_date_column:
            stamps.append(row[0].strip())
        for j in range(first, len(header)):
            values[i - 2, j - first] = _parse_cell(row[j].strip(), i, j + 1, path)
    return SeriesDataset(
        name=name or path.stem,
        columns=header[first:],
        values=values,
        timestamps=stamps,
    )


def split_bounds(n_steps: int, fractions=DEFAULT_FRACTIONS) -> tuple[int, int]:
    train, val = fractions
    if not (train > 0 and val > 0 and train + val < 1):
        raise ConfigError(f"split fractions must be positive with train+val < 1, got {fractions}")
    # the guard keeps e.g. 10 * (0.7 + 0.1) = 7.999... from flooring to 7
    train_end = int(math.floor(n_steps * train + 1e-9))
    val_end = int(math.floor(n_steps * (train + val) + 1e-9))
    if train_end < 1 or val_end <= train_end or val_end >= n_steps:
        raise ConfigError(f"fractions {fractions} leave an empty partition for {n_steps} steps")
    return train_end, val_end


def fit_stats(train_values: np.ndarray) -> NormStats:
    mean = train_values.mean(axis=0)
    std = train_values.std(axis=0)
    return NormStats(mean=mean, std=std, constant=std == 0)


def split_normalize(ds: SeriesDataset, fractions=DEFAULT_FRACTIONS) -> SeriesDataset:
    """Chronological split; z-score every split with train-only population stats."""
    train_end, val_end = split_bounds(ds.n_steps, fractions)
    raw = ds.values if ds.raw is None else ds.raw
    stats = fit_stats(raw[:train_end])
    return replace(ds, values=stats.normalize(raw), raw=raw, stats=stats, train_end=train_end, val_end=val_end)


def window_count(split_len: int, lookback: int, horizon: int, stride: int) -> int:
    span = split_len - lookback - horizon
    return span // stride + 1 if span >= 0 else 0


def make_windows(ds: SeriesDataset, split: str, lookback: int, horizon: int, stride: int = 1) -> WindowSet:
    """Channel-major sliding windows that never cross a split boundary."""
    lo, hi = ds.bounds(split)
    block = ds.values[lo:hi]
    n = window_count(hi - lo, lookback, horizon, stride)
    C = ds.n_channels
    starts = np.arange(n) * stride
    if n == 0:
        empty = np.empty((0, lookback)), np.empty((0, horizon))
        return WindowSet(*empty, np.empty(0, dtype=int), np.empty(0, dtype=int))
    offsets = starts[:, None] + np.arange(lookback + horizon)[None, :]
    spans = np.concatenate([block[offsets, c] for c in range(C)], axis=0)
    return WindowSet(
        inputs=spans[:, :lookback].copy(),
        targets=spans[:, lookback:].copy(),
        channels=np.repeat(np.arange(C), n),
        origins=np.tile(starts + lo, C),
    )


def write_csv(path, columns, values, timestamps=None, index_name=None, index=None) -> None:
    """Write a series CSV with ``repr``-exact floats."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        lead = ["date"] if timestamps is not None else ([index_name] if index_name else [])
        w.writerow(lead + list(columns))
        for i, row in enumerate(np.atleast_2d(values) if len(values) else []):
            prefix = [timestamps[i]] if timestamps is not None else ([index[i]] if index_name else [])
            w.writerow(prefix + [repr(float(v)) for v in row])
