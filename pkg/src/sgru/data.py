"""Traffic series ingest, repair, scaling and windowing."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np

from .model import STREAM_NOISE, rng_for

STEPS_PER_DAY = 288
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class TrafficSeries:
    values: np.ndarray                   # (T, N, D)
    missing_mask: np.ndarray             # (T, N, D) bool
    start_timestamp: str = "2018-01-01T00:00:00"
    interval_seconds: int = 300

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def D(self) -> int:
        return self.values.shape[2]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values).tobytes())
        h.update(np.ascontiguousarray(self.missing_mask).tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------- csv

def load_csv(path) -> TrafficSeries:
    """Read `timestamp,node_0,...` with one row per step; empty cells are missing."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: line 1: empty file") from None
        n = len(header) - 1
        if n <= 0:
            raise DataError(f"{path}: line 1: zero nodes in header")
        stamps, rows, masks = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 1:
                raise DataError(f"{path}: line {lineno}: expected {n + 1} fields, got {len(row)}")
            vals, miss = [], []
            for cell in row[1:]:
                cell = cell.strip()
                if cell == "":
                    vals.append(np.nan)
                    miss.append(True)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: line {lineno}: non-numeric value {cell!r}") from None
                miss.append(False)
            stamps.append(row[0])
            rows.append(vals)
            masks.append(miss)
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64)[:, :, None]
    mask = np.array(masks, dtype=bool)[:, :, None]
    interval = 300
    if len(stamps) > 1:
        try:
            interval = int((datetime.fromisoformat(stamps[1]) - datetime.fromisoformat(stamps[0]))
                           .total_seconds())
        except ValueError:
            pass
    return TrafficSeries(values, mask, stamps[0], interval)


def load_channels(paths) -> TrafficSeries:
    """Stack several single-channel CSV files along the channel axis."""
    parts = [load_csv(p) for p in paths]
    shapes = {p.values.shape[:2] for p in parts}
    if len(shapes) != 1:
        raise DataError(f"channel files disagree on (T, N): {sorted(shapes)}")
    return TrafficSeries(np.concatenate([p.values for p in parts], axis=2),
                         np.concatenate([p.missing_mask for p in parts], axis=2),
                         parts[0].start_timestamp, parts[0].interval_seconds)


def _timestamps(s: TrafficSeries) -> list[str]:
    try:
        start = datetime.fromisoformat(s.start_timestamp)
    except ValueError:
        start = datetime(2018, 1, 1)
    step = timedelta(seconds=s.interval_seconds)
    return [(start + i * step).isoformat() for i in range(s.T)]


def dumps_csv(s: TrafficSeries, channel: int = 0) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["timestamp"] + [f"node_{i}" for i in range(s.N)])
    for stamp, vals, miss in zip(_timestamps(s), s.values[:, :, channel], s.missing_mask[:, :, channel]):
        writer.writerow([stamp] + ["" if m else repr(float(v)) for v, m in zip(vals, miss)])
    return buf.getvalue()


def write_csv(s: TrafficSeries, path, channel: int = 0) -> None:
    from .model import write_atomic
    write_atomic(path, dumps_csv(s, channel))


# ------------------------------------------------------------------- repair

def interpolate_missing(s: TrafficSeries) -> TrafficSeries:
    values = s.values.copy()
    idx = np.arange(s.T)
    for n in range(s.N):
        for c in range(s.D):
            miss = s.missing_mask[:, n, c]
            if not miss.any():
                continue
            if miss.all():
                raise DataError(f"node_{n} channel {c} has no observed values")
            obs = ~miss
            # np.interp holds the edge values constant outside the observed range
            values[miss, n, c] = np.interp(idx[miss], idx[obs], values[obs, n, c])
    return replace(s, values=values, missing_mask=np.zeros_like(s.missing_mask))


# ------------------------------------------------------------- standardizer

@dataclass
class Standardizer:
    mean: np.ndarray    # (D,)
    std: np.ndarray     # (D,)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Standardizer:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_standardizer(train_values: np.ndarray) -> Standardizer:
    """Global per-channel mean and population std over all steps and nodes."""
    x = np.asarray(train_values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    flat = x.reshape(-1, x.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std < 1e-8):
        raise DataError("constant series: standard deviation below 1e-8")
    return Standardizer(mean, std)


# ---------------------------------------------------------------- windowing

@dataclass
class WindowedDataset:
    inputs: dict[str, np.ndarray]        # split -> (W, P, N, D), standardized
    targets: dict[str, np.ndarray]       # split -> (W, F, N, D_out), original scale
    standardizer: Standardizer
    P: int
    F: int
    boundaries: tuple[int, int, int] = (0, 0, 0)
    # start step of each window's target block, per split
    target_starts: dict[str, np.ndarray] = field(default_factory=dict)

    def count(self, split: str) -> int:
        return self.inputs[split].shape[0]

    @property
    def N(self) -> int:
        return self.inputs["train"].shape[2]

    @property
    def D(self) -> int:
        return self.inputs["train"].shape[3]


def window_count(length: int, P: int, F: int) -> int:
    return max(length - P - F + 1, 0)


def split_points(T: int, ratios=(0.6, 0.2, 0.2)) -> tuple[int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    return int(np.floor(ratios[0] * T)), int(np.floor((ratios[0] + ratios[1]) * T))


def _segment_windows(seg: np.ndarray, P: int, F: int, out_channels: int):
    n = window_count(seg.shape[0], P, F)
    N, D = seg.shape[1], seg.shape[2]
    if n == 0:
        return (np.zeros((0, P, N, D)), np.zeros((0, F, N, out_channels)), np.zeros(0, dtype=int))
    xs = np.stack([seg[i:i + P] for i in range(n)])
    ys = np.stack([seg[i + P:i + P + F, :, :out_channels] for i in range(n)])
    return xs, ys, np.arange(n) + P


def make_windows(s: TrafficSeries, P: int = 12, F: int = 12, ratios=(0.6, 0.2, 0.2),
                 D_out: int = 1) -> WindowedDataset:
    if P < 1 or F < 1:
        raise DataError(f"P and F must be >= 1, got P={P}, F={F}")
    if s.missing_mask.any():
        s = interpolate_missing(s)
    cut1, cut2 = split_points(s.T, ratios)
    bounds = {"train": (0, cut1), "val": (cut1, cut2), "test": (cut2, s.T)}
    if window_count(cut1, P, F) == 0:
        raise DataError(f"training segment of {cut1} steps is too short for P={P}, F={F}")
    scaler = fit_standardizer(s.values[:cut1])
    scaled = scaler.apply(s.values)
    inputs, targets, starts = {}, {}, {}
    for split, (lo, hi) in bounds.items():
        xs, _, st = _segment_windows(scaled[lo:hi], P, F, D_out)
        _, ys, _ = _segment_windows(s.values[lo:hi], P, F, D_out)
        inputs[split], targets[split], starts[split] = xs, ys, st + lo
    if sum(v.shape[0] for v in inputs.values()) == 0:
        raise DataError("no windows in any split")
    return WindowedDataset(inputs, targets, scaler, P, F, (0, cut1, cut2), starts)


# ---------------------------------------------------------------- synthetic

def daily_profile(steps: np.ndarray) -> np.ndarray:
    """Double-peaked weekday flow in vehicles per 5 minutes, period 288 steps."""
    hour = (np.asarray(steps) % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    # peaks wrap around midnight so the profile is exactly periodic
    def bump(center, width):
        dist = (hour - center + 12.0) % 24.0 - 12.0
        return np.exp(-0.5 * (dist / width) ** 2)
    return 60.0 + 280.0 * bump(8.0, 1.3) + 240.0 * bump(17.5, 1.6) + 90.0 * bump(13.0, 3.0)


def generate_synthetic(N: int = 4, days: int = 2, seed: int = 0, lag_steps: int = 6,
                       noise_std: float = 0.05) -> TrafficSeries:
    """Node i replays node 0's daily profile delayed by i*lag_steps, plus Gaussian noise.

    noise_std is in flow units (vehicles per interval).
    """
    if N < 1 or days < 1:
        raise DataError(f"need N >= 1 and days >= 1, got N={N}, days={days}")
    T = days * STEPS_PER_DAY
    t = np.arange(T)
    clean = np.stack([daily_profile(t - i * lag_steps) for i in range(N)], axis=1)
    noise = rng_for(seed, STREAM_NOISE).normal(0.0, 1.0, size=clean.shape) * noise_std
    values = (clean + noise)[:, :, None]
    return TrafficSeries(values, np.zeros(values.shape, dtype=bool))
