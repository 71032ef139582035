"""Channel-file ingestion, resampling, scaling, windowing and fold assembly.

Channel files are the plain-text layout used by REDD and UK-DALE: one
``<unix seconds> <watts>`` pair per line, one file per meter channel, plus a
``labels.dat`` mapping channel numbers to appliance names.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAX_GAP_S = 60.0
CACHE_MAGIC = b"NILMW1"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class ChannelSeries:
    name: str
    timestamps: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.power = np.asarray(self.power, dtype=np.float64)
        if self.timestamps.shape != self.power.shape or self.timestamps.ndim != 1:
            raise DataError(f"{self.name}: timestamps and power must be equal-length vectors")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError(f"{self.name}: timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.power)):
            raise DataError(f"{self.name}: non-finite power values")

    @property
    def period(self) -> float:
        """Native sample period, the median spacing between readings."""
        if len(self.timestamps) < 2:
            return 0.0
        return float(np.median(np.diff(self.timestamps)))

    def energy(self) -> float:
        return float(np.sum(self.power))


def parse_channel_file(path, name: str | None = None) -> ChannelSeries:
    path = Path(path)
    ts, pw = [], []
    prev = -np.inf
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                if len(parts) != 2:
                    raise ValueError
                t, p = float(parts[0]), float(parts[1])
                if not (np.isfinite(t) and np.isfinite(p)):
                    raise ValueError
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected '<timestamp> <power>', got {line.strip()!r}") from None
            if t <= prev:
                raise DataError(f"{path}:{lineno}: timestamp {parts[0]} does not increase")
            prev = t
            ts.append(t)
            pw.append(p)
    if not ts:
        raise DataError(f"{path}: no samples")
    return ChannelSeries(name or path.stem, np.array(ts), np.array(pw))


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() and abs(x) < 2 ** 53 else repr(float(x))


def write_channel_file(series: ChannelSeries, path) -> None:
    with open(path, "w") as fh:
        for t, p in zip(series.timestamps, series.power):
            fh.write(f"{_fmt(t)} {_fmt(p)}\n")


def parse_labels(path) -> dict[int, str]:
    labels = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2 or not parts[0].isdigit():
                raise DataError(f"{path}:{lineno}: expected '<channel> <name>'")
            labels[int(parts[0])] = " ".join(parts[1:])
    return labels


def resample_linear(series: ChannelSeries, period: float, start: float | None = None,
                    stop: float | None = None, max_gap: float = MAX_GAP_S) -> np.ndarray:
    """Linear interpolation onto the grid ``start + period * i``.

    The grid runs from ``start`` (default: first timestamp) to ``stop``
    (default: last timestamp). Grid points strictly inside a gap longer than
    ``max_gap`` seconds, or outside the recorded span, are zero-filled.
    """
    if period <= 0:
        raise ValueError("period must be positive")
    ts, pw = series.timestamps, series.power
    start = ts[0] if start is None else float(start)
    stop = ts[-1] if stop is None else float(stop)
    n = int(np.floor((stop - start) / period + 1e-9)) + 1
    if n < 1:
        raise DataError(f"{series.name}: empty resampling grid")
    if len(ts) == 1 and n > 1:
        raise DataError(f"{series.name}: cannot interpolate a single sample onto {n} points")
    grid = start + period * np.arange(n)
    values = np.interp(grid, ts, pw)

    outside = (grid < ts[0]) | (grid > ts[-1])
    if outside.any():
        log.info("%s: %d grid points outside the recorded span zero-filled", series.name, int(outside.sum()))
        values[outside] = 0.0
    gaps = np.flatnonzero(np.diff(ts) > max_gap)
    if len(gaps):
        filled = 0
        for i in gaps:
            inside = (grid > ts[i]) & (grid < ts[i + 1])
            values[inside] = 0.0
            filled += int(inside.sum())
        log.warning("%s: %d gaps longer than %gs, %d grid points zero-filled",
                    series.name, len(gaps), max_gap, filled)
    return values


def build_aggregate(targets, extra=None, noise_std: float = 0.0,
                    rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Sum of appliance series, plus an optional unmodelled series and noise, clamped at 0 W."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    total = targets.sum(axis=0)
    if extra is not None:
        extra = np.asarray(extra, dtype=np.float64)
        if extra.shape != total.shape:
            raise DataError(f"extra series length {extra.shape} != {total.shape}")
        total = total + extra
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if noise_std > 0:
        rng = np.random.default_rng(rng)
        total = total + rng.normal(0.0, noise_std, size=total.shape)
    return np.maximum(total, 0.0)


# ---------------------------------------------------------------------------
# Scaling


@dataclass(frozen=True)
class Scale:
    """Min-max scale fitted on a mixture.

    The mixture maps affinely onto [0, 1]. Appliance series share the same
    range but are not shifted, so 0 W stays 0 and a zero prediction inverts
    to 0 W.
    """

    min_w: float
    max_w: float

    @property
    def span(self) -> float:
        return self.max_w - self.min_w


def minmax_fit_transform(mixture) -> tuple[np.ndarray, Scale]:
    mixture = np.asarray(mixture, dtype=np.float64)
    lo, hi = float(mixture.min()), float(mixture.max())
    if not hi > lo:
        raise DataError(f"constant mixture ({lo} W): min-max scaling is undefined")
    scale = Scale(lo, hi)
    return apply_scale(mixture, scale), scale


def apply_scale(x, scale: Scale, shift: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return ((x - scale.min_w) if shift else x) / scale.span


def invert_scale(x, scale: Scale, shift: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64) * scale.span
    return x + scale.min_w if shift else x


# ---------------------------------------------------------------------------
# Windows and folds


@dataclass
class SignalWindow:
    mixture: np.ndarray     # (T,) scaled
    targets: np.ndarray     # (C, T) scaled with the mixture's range
    scale: Scale
    start: float = 0.0

    def __post_init__(self):
        self.mixture = np.asarray(self.mixture, dtype=np.float64)
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if self.targets.shape[1] != self.mixture.shape[0]:
            raise DataError("targets and mixture lengths differ")


def window_split(mixture, targets, length: int, scale: Scale, stride: int | None = None,
                 start: float = 0.0, period: float = 1.0) -> list[SignalWindow]:
    """Cut aligned scaled series into windows; a trailing partial window is dropped."""
    mixture = np.asarray(mixture, dtype=np.float64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    total = mixture.shape[0]
    if targets.shape[1] != total:
        raise DataError(f"targets length {targets.shape[1]} != mixture length {total}")
    if length < 1 or length > total:
        raise DataError(f"window length {length} does not fit a series of {total} samples")
    stride = stride or length
    starts = range(0, total - length + 1, stride)
    windows = [SignalWindow(mixture[i:i + length].copy(), targets[:, i:i + length].copy(),
                            scale, start + i * period) for i in starts]
    dropped = total - (starts[-1] + length)
    if dropped:
        log.info("window_split: %d trailing samples dropped", dropped)
    return windows


def kfold_split(windows: list, k: int) -> list[tuple[list, list]]:
    """Contiguous time-ordered folds; fold i validates on the i-th block."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(windows):
        raise DataError(f"{k} folds need at least {k} windows, got {len(windows)}")
    blocks = np.array_split(np.arange(len(windows)), k)
    folds = []
    for block in blocks:
        held = set(block.tolist())
        folds.append(([w for i, w in enumerate(windows) if i not in held],
                      [windows[i] for i in block]))
    return folds


def fold_indices(n_windows: int, k: int) -> list[list[int]]:
    if k > n_windows:
        raise DataError(f"{k} folds need at least {k} windows, got {n_windows}")
    return [b.tolist() for b in np.array_split(np.arange(n_windows), k)]


def stack_windows(windows: list[SignalWindow]) -> tuple[np.ndarray, np.ndarray]:
    """(n, T) mixtures and (n, C, T) targets."""
    return (np.stack([w.mixture for w in windows]),
            np.stack([w.targets for w in windows]))


# ---------------------------------------------------------------------------
# Window cache
#
# b"NILMW1", uint32 n_windows, uint32 n_sources, uint32 length,
# float64 min_w, float64 max_w, float64 period, then per window:
# float64 start, length x float64 mixture, n_sources*length x float64 targets.

_CACHE_HEAD = struct.Struct("<3I3d")


def write_cache(path, windows: list[SignalWindow], period: float) -> None:
    if not windows:
        raise DataError("no windows to write")
    n_src, length = windows[0].targets.shape
    scale = windows[0].scale
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(_CACHE_HEAD.pack(len(windows), n_src, length, scale.min_w, scale.max_w, period))
        for w in windows:
            if w.targets.shape != (n_src, length):
                raise DataError("windows differ in shape")
            fh.write(struct.pack("<d", w.start))
            fh.write(np.ascontiguousarray(w.mixture, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(w.targets, dtype="<f8").tobytes())


def read_cache(path) -> tuple[list[SignalWindow], float]:
    raw = Path(path).read_bytes()
    if raw[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise DataError(f"{path}: not a window cache")
    pos = len(CACHE_MAGIC)
    try:
        n, n_src, length, lo, hi, period = _CACHE_HEAD.unpack_from(raw, pos)
    except struct.error as exc:
        raise DataError(f"{path}: truncated header") from exc
    pos += _CACHE_HEAD.size
    record = 8 * (1 + length + n_src * length)
    if len(raw) != pos + n * record:
        raise DataError(f"{path}: size does not match {n} windows of {n_src}x{length}")
    scale = Scale(lo, hi)
    windows = []
    for _ in range(n):
        (start,) = struct.unpack_from("<d", raw, pos)
        body = np.frombuffer(raw, dtype="<f8", count=length * (1 + n_src), offset=pos + 8)
        windows.append(SignalWindow(body[:length].copy(), body[length:].reshape(n_src, length).copy(),
                                    scale, start))
        pos += record
    return windows, period


def write_manifest(path, **fields) -> None:
    Path(path).write_text(json.dumps(fields, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# House directories


@dataclass
class HouseData:
    appliances: list[str]
    channels: list[int]
    mixture_w: np.ndarray
    targets_w: np.ndarray
    start: float
    period: float


def _channel_path(house_dir: Path, channel: int) -> Path:
    return house_dir / f"channel_{channel}.dat"


def load_house(house_dir, dataset: str, top: int, extra_label: str = "television") -> HouseData:
    """Load one house and pick the ``top`` appliance channels by energy.

    REDD: the mixture is the sum of the mains channels, everything on a 1 s
    grid. UK-DALE: the mixture is built from the selected appliances plus
    the ``extra_label`` channel when present, on a 6 s grid.
    """
    house_dir = Path(house_dir)
    if dataset not in ("redd", "ukdale"):
        raise ValueError(f"unknown dataset {dataset!r}")
    labels_path = house_dir / "labels.dat"
    if not labels_path.exists():
        raise DataError(f"{house_dir}: missing labels.dat")
    labels = parse_labels(labels_path)
    period = 1.0 if dataset == "redd" else 6.0

    series = {}
    for ch, name in labels.items():
        path = _channel_path(house_dir, ch)
        if not path.exists():
            raise DataError(f"{house_dir}: channel {ch} ({name}) listed in labels.dat but missing")
        series[ch] = parse_channel_file(path, name)

    mains = [ch for ch, n in labels.items() if n in ("mains", "aggregate")]
    extra = [ch for ch, n in labels.items() if n == extra_label] if dataset == "ukdale" else []
    candidates = [ch for ch in labels if ch not in mains and ch not in extra]
    if dataset == "redd" and not mains:
        raise DataError(f"{house_dir}: no mains channel in labels.dat")
    if len(candidates) < top:
        raise DataError(f"{house_dir}: {len(candidates)} appliance channels, {top} requested")

    used = candidates + mains + extra
    start = max(series[ch].timestamps[0] for ch in used)
    stop = min(series[ch].timestamps[-1] for ch in used)
    if stop <= start:
        raise DataError(f"{house_dir}: channels do not overlap in time")
    grid = {ch: resample_linear(series[ch], period, start, stop) for ch in used}

    # energy over the common span decides "top"; ties broken by channel number
    ranked = sorted(candidates, key=lambda ch: (-float(grid[ch].sum()), ch))[:top]
    ranked.sort()
    targets = np.stack([grid[ch] for ch in ranked])
    if dataset == "redd":
        mixture = np.sum([grid[ch] for ch in mains], axis=0)
    else:
        mixture = build_aggregate(targets, grid[extra[0]] if extra else None)
    return HouseData([labels[ch] for ch in ranked], ranked, mixture, targets, start, period)
