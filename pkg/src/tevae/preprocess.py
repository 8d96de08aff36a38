"""Resampling, z-score normalisation, window-size estimation and windowing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

STD_FLOOR = 1e-8
DEFAULT_MAX_LAG = 1024
DEFAULT_MIN_WINDOW = 16


@dataclass(frozen=True)
class RawChannel:
    name: str
    timestamps: np.ndarray
    values: np.ndarray
    native_rate: float

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        vs = np.asarray(self.values, dtype=float)
        if ts.shape != vs.shape or ts.ndim != 1:
            raise ValueError("timestamps and values must be 1-d arrays of equal length")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(vs)):
            raise ValueError("values must be finite")
        if not self.native_rate > 0:
            raise ValueError("native_rate must be positive")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vs)


@dataclass
class Sequence:
    """One multivariate measurement sampled at a uniform rate.

    ``values`` has shape ``(T, d)``.
    """

    values: np.ndarray
    rate: float
    channel_names: list[str]
    id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"sequence {self.id!r}: values must be a non-empty T x d matrix")
        if len(self.channel_names) != self.values.shape[1]:
            raise ValueError(f"sequence {self.id!r}: {len(self.channel_names)} names for "
                             f"{self.values.shape[1]} channels")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"sequence {self.id!r}: non-finite values")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


@dataclass
class WindowSet:
    windows: np.ndarray  # (n, w, d)
    w: int
    shift: int
    source_id: str = ""
    starts: np.ndarray = field(default=None)

    def __len__(self):
        return self.windows.shape[0]


def resample_channel(ch: RawChannel, target_rate: float = 2.0) -> np.ndarray:
    """Resample ``ch`` onto a uniform grid at ``target_rate`` starting at its first timestamp.

    Slower channels are linearly interpolated. Faster channels are low-passed at
    ``target_rate / 2`` with a zero-phase 4th-order Butterworth before being
    sampled on the target grid.
    """
    if not target_rate > 0:
        raise ValueError("target_rate must be positive")
    if ch.values.size < 2:
        raise ValueError("insufficient samples")

    t0, t1 = ch.timestamps[0], ch.timestamps[-1]
    n_out = int(np.floor((t1 - t0) * target_rate + 1e-9)) + 1
    grid = t0 + np.arange(n_out) / target_rate

    values = ch.values
    if ch.native_rate > target_rate:
        cutoff = target_rate / 2.0
        sos = signal.butter(4, cutoff, btype="low", fs=ch.native_rate, output="sos")
        # filter the offset from the first sample so constants pass through exactly
        offset = values[0]
        centred = values - offset
        padlen = min(3 * (2 * len(sos) + 1), centred.size - 1)
        values = signal.sosfiltfilt(sos, centred, padlen=padlen) + offset
    return np.interp(grid, ch.timestamps, values)


def resample_sequence(channels: list[RawChannel], target_rate: float = 2.0, seq_id: str = "") -> Sequence:
    """Resample every channel and truncate to the shortest common length."""
    series = [resample_channel(ch, target_rate) for ch in channels]
    n = min(s.size for s in series)
    values = np.stack([s[:n] for s in series], axis=1)
    return Sequence(values, target_rate, [ch.name for ch in channels], seq_id)


def resample_uniform(seq: Sequence, target_rate: float = 2.0) -> Sequence:
    if np.isclose(seq.rate, target_rate):
        return seq
    t = np.arange(seq.T) / seq.rate
    channels = [RawChannel(name, t, seq.values[:, j], seq.rate)
                for j, name in enumerate(seq.channel_names)]
    return resample_sequence(channels, target_rate, seq.id)


def fit_norm(train: list[Sequence]) -> NormStats:
    """Pooled per-channel mean and population std over all training time steps."""
    if not train:
        raise ValueError("cannot fit normalisation on an empty training set")
    d = train[0].d
    if any(s.d != d for s in train):
        raise ValueError("channel count differs between training sequences")
    pooled = np.concatenate([s.values for s in train], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    std = np.where(std < STD_FLOOR, STD_FLOOR, std)
    return NormStats(mean, std)


def apply_norm(seq: Sequence, stats: NormStats) -> Sequence:
    if seq.d != stats.mean.size:
        raise ValueError(f"channel count mismatch: sequence has {seq.d}, stats have {stats.mean.size}")
    return Sequence((seq.values - stats.mean) / stats.std, seq.rate, list(seq.channel_names), seq.id)


def invert_norm(seq: Sequence, stats: NormStats) -> Sequence:
    if seq.d != stats.mean.size:
        raise ValueError(f"channel count mismatch: sequence has {seq.d}, stats have {stats.mean.size}")
    return Sequence(seq.values * stats.std + stats.mean, seq.rate, list(seq.channel_names), seq.id)


def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelation for lags ``0..max_lag`` (biased estimator)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    centred = x - x.mean()
    denom = np.dot(centred, centred)
    if denom <= 0:
        return np.zeros(max_lag + 1)
    nfft = 1 << int(np.ceil(np.log2(2 * n - 1)))
    spec = np.fft.rfft(centred, nfft)
    acov = np.fft.irfft(spec * np.conj(spec), nfft)[: max_lag + 1]
    return acov / denom


def significant_lag(x: np.ndarray, max_lag: int) -> int:
    """Largest lag ``L`` such that the ACF stays above ``1.96/sqrt(T)`` for every lag in ``1..L``.

    Returns 0 when lag 1 is already inside the white-noise band.
    """
    n = len(x)
    max_lag = min(max_lag, n - 1)
    acf = autocorrelation(x, max_lag)[1:]
    band = 1.96 / np.sqrt(n)
    inside = np.flatnonzero(acf <= band)
    if inside.size == 0:
        return max_lag
    return int(inside[0])


def next_power_of_two_above(n: int) -> int:
    return 1 << int(n).bit_length()


def estimate_window_size(train: list[Sequence], max_lag: int = DEFAULT_MAX_LAG,
                         min_window: int = DEFAULT_MIN_WINDOW) -> int:
    """Window length: smallest power of two strictly above the slowest significant lag."""
    if not train:
        raise ValueError("cannot estimate window size from an empty training set")
    largest = 0
    for seq in train:
        if seq.T <= max_lag:
            raise ValueError(f"sequence {seq.id!r} (T={seq.T}) is not longer than max_lag={max_lag}")
        for j in range(seq.d):
            largest = max(largest, significant_lag(seq.values[:, j], max_lag))
    if largest == 0:
        return min_window
    return max(min_window, next_power_of_two_above(largest))


def window_sequence(seq: Sequence | np.ndarray, w: int, shift: int) -> WindowSet:
    values = seq.values if isinstance(seq, Sequence) else np.asarray(seq, dtype=float)
    source = seq.id if isinstance(seq, Sequence) else ""
    if shift < 1:
        raise ValueError("shift must be >= 1")
    T = values.shape[0]
    if T < w:
        raise ValueError(f"sequence shorter than window ({T} < {w})")
    n = (T - w) // shift + 1
    starts = np.arange(n) * shift
    view = np.lib.stride_tricks.sliding_window_view(values, w, axis=0)[::shift]
    windows = np.ascontiguousarray(np.swapaxes(view, 1, 2)[:n])
    return WindowSet(windows, w, shift, source, starts)


def window_many(seqs: list[Sequence], w: int, shift: int) -> np.ndarray:
    """Stack the windows of every sequence long enough to hold one."""
    parts = [window_sequence(s, w, shift).windows for s in seqs if s.T >= w]
    if not parts:
        raise ValueError("no sequence is long enough for a single window")
    return np.concatenate(parts, axis=0)
