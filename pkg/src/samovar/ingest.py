"""CSV time-series loading, chronological splits and sliding windows."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, ParseError


@dataclass
class Dataset:
    name: str
    values: np.ndarray  # (T, C)
    channel_names: list
    timestamps: list | None = None

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]


@dataclass
class SplitSpec:
    ratios: tuple = (0.7, 0.1, 0.2)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")


@dataclass
class Split:
    name: str
    values: np.ndarray  # standardised (T_s, C)
    start: int  # row offset in the source dataset
    mean: np.ndarray = field(repr=False, default=None)
    std: np.ndarray = field(repr=False, default=None)

    def destandardize(self, x=None):
        x = self.values if x is None else x
        return x * self.std + self.mean


def _parse_time(s: str):
    s = s.strip()
    try:
        return datetime.fromisoformat(s)
    except ValueError:
        return None


def _parse_float(s: str) -> float | None:
    s = s.strip()
    try:
        v = float(s)
    except ValueError:
        return None
    return v


def load_csv(path, name: str | None = None) -> Dataset:
    """Read a header-first CSV; the first column is a timestamp if it parses as one."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"dataset not found: {path}") from None
    with fh:
        try:
            rows = list(csv.reader(fh))
        except (csv.Error, UnicodeDecodeError) as exc:
            raise ParseError(f"unreadable CSV: {exc}") from None
    if not rows or not any(c.strip() for c in rows[0]):
        raise ParseError("empty file", row=1)
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise ParseError("no data rows", row=2)
    ncol = len(header)
    # timestamp column if the first cell is a date and not a number
    first = body[0][0] if body[0] else ""
    has_time = _parse_float(first) is None and _parse_time(first) is not None
    c0 = 1 if has_time else 0
    if ncol - c0 < 1:
        raise ParseError("no numeric columns", row=1)
    values = np.empty((len(body), ncol - c0))
    stamps = [] if has_time else None
    for r, row in enumerate(body):
        rown = r + 2  # 1-based, header is row 1
        if len(row) != ncol:
            raise ParseError(f"expected {ncol} fields, got {len(row)}", row=rown)
        if has_time:
            if _parse_time(row[0]) is None:
                raise ParseError(f"bad timestamp {row[0]!r}", row=rown, col=1)
            stamps.append(row[0].strip())
        for c in range(c0, ncol):
            v = _parse_float(row[c])
            if v is None:
                raise ParseError(f"non-numeric cell {row[c]!r}", row=rown, col=c + 1)
            if not math.isfinite(v):
                raise ParseError(f"missing or non-finite value {row[c]!r}", row=rown, col=c + 1)
            values[r, c - c0] = v
    if name is None:
        name = str(path).replace("\\", "/").rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return Dataset(name, values, header[c0:], stamps)


def calendar_features(timestamps) -> np.ndarray:
    """Hour-of-day, day-of-week, day-of-month and day-of-year scaled to [-0.5, 0.5]."""
    if not timestamps:
        raise DataError("dataset has no timestamps for calendar features")
    ts = [datetime.fromisoformat(s) for s in timestamps]
    return np.array([[t.hour / 23.0 - 0.5, t.weekday() / 6.0 - 0.5,
                      (t.day - 1) / 30.0 - 0.5, (t.timetuple().tm_yday - 1) / 365.0 - 0.5]
                     for t in ts])


def with_calendar_features(ds: Dataset) -> Dataset:
    cal = calendar_features(ds.timestamps)
    names = ds.channel_names + ["hour", "weekday", "monthday", "yearday"]
    return Dataset(ds.name, np.concatenate([ds.values, cal], axis=1), names, ds.timestamps)


def split_and_standardize(ds: Dataset, spec: SplitSpec | None = None):
    """Chronological train/val/test views, all standardised with train statistics.

    Returns ``(train, val, test, spec)`` where ``spec`` carries the fitted mean/std.
    """
    spec = spec or SplitSpec()
    T = ds.T
    n_train = int(T * spec.ratios[0])
    n_test = int(T * spec.ratios[2])
    n_val = T - n_train - n_test
    train_raw = ds.values[:n_train]
    if n_train < 2:
        raise DataError(f"training split has {n_train} rows; need at least 2")
    mean = train_raw.mean(axis=0)
    std = train_raw.std(axis=0)
    const = np.flatnonzero(std <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    if const.size:
        names = [ds.channel_names[i] for i in const]
        raise DataError(f"constant channel(s) in training split: {names}")
    spec.mean, spec.std = mean, std
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, T)]
    splits = [Split(nm, (ds.values[a:b] - mean) / std, a, mean, std)
              for nm, (a, b) in zip(("train", "val", "test"), bounds)]
    return splits[0], splits[1], splits[2], spec


def window_count(length: int, L_I: int, L_P: int, stride: int = 1) -> int:
    if length < L_I + L_P:
        return 0
    return (length - L_I - L_P) // stride + 1


def window_sampler(split, L_I: int, L_P: int, stride: int = 1) -> Iterator[tuple]:
    """Chronological ``(input, target)`` windows that stay inside the split."""
    values = split.values if isinstance(split, Split) else np.asarray(split)
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    n = window_count(len(values), L_I, L_P, stride)
    if n == 0:
        raise DataError(f"split of length {len(values)} is shorter than L_I + L_P = {L_I + L_P}")
    for w in range(n):
        s = w * stride
        yield values[s:s + L_I], values[s + L_I:s + L_I + L_P]


def window_arrays(split, L_I: int, L_P: int, stride: int = 1):
    """All windows stacked: inputs (n, L_I, C) and targets (n, L_P, C), as views."""
    values = split.values if isinstance(split, Split) else np.asarray(split)
    n = window_count(len(values), L_I, L_P, stride)
    if n == 0:
        raise DataError(f"split of length {len(values)} is shorter than L_I + L_P = {L_I + L_P}")
    win = np.lib.stride_tricks.sliding_window_view(values, L_I + L_P, axis=0)[::stride][:n]
    win = np.swapaxes(win, 1, 2)  # (n, L_I + L_P, C)
    return win[:, :L_I], win[:, L_I:]


def write_csv(path, values, channel_names=None, timestamps=None):
    values = np.asarray(values)
    names = channel_names or [f"ch{c}" for c in range(values.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow((["date"] if timestamps else []) + list(names))
        for i, row in enumerate(values):
            w.writerow(([timestamps[i]] if timestamps else []) + [repr(float(v)) for v in row])
