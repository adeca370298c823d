"""Time-frequency front and back end.

Spectrogram arrays are laid out ``(freq_bins, frames)``; batched helpers
accept any leading dimensions and work on the last two axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DimensionError, InputError, NumericError

MASK_EPS = 1e-8


@dataclass(frozen=True)
class DSPProfile:
    """STFT geometry for one experiment profile."""

    sample_rate: int
    clip_samples: int
    window_len: int
    hop: int
    n_frames: int
    log_bins: int

    @property
    def linear_bins(self) -> int:
        return self.window_len // 2 + 1


# ~1 s at 8 kHz: (n_frames - 1) * hop samples gives exactly n_frames centred frames.
DESK = DSPProfile(sample_rate=8000, clip_samples=127 * 64, window_len=254, hop=64,
                  n_frames=128, log_bins=64)
# ~6 s at 11025 Hz, frames trimmed to 256.
PAPER = DSPProfile(sample_rate=11025, clip_samples=6 * 11025, window_len=1022, hop=256,
                   n_frames=256, log_bins=256)
PROFILES = {"desk": DESK, "paper": PAPER}


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InputError(f"waveform must be a non-empty 1-D array, got shape {self.samples.shape}")
        if self.sample_rate_hz <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class ComplexSpectrogram:
    re: np.ndarray
    im: np.ndarray
    window_len: int
    hop: int

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise DimensionError(f"re/im shapes differ: {self.re.shape} vs {self.im.shape}")
        if self.re.shape[-2] != self.window_len // 2 + 1:
            raise DimensionError(
                f"{self.re.shape[-2]} frequency bins inconsistent with window {self.window_len}")

    @classmethod
    def from_complex(cls, z: np.ndarray, window_len: int, hop: int) -> "ComplexSpectrogram":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag), window_len, hop)

    @property
    def values(self) -> np.ndarray:
        return self.re + 1j * self.im

    @property
    def shape(self) -> tuple:
        return self.re.shape

    def magnitude(self) -> "MagnitudeSpectrogram":
        return MagnitudeSpectrogram(np.hypot(self.re, self.im))


@dataclass
class MagnitudeSpectrogram:
    mag: np.ndarray
    grid: str = "linear"
    linear_bins: int | None = None  # original bin count when grid == "log"

    def __post_init__(self):
        self.mag = np.asarray(self.mag, dtype=np.float64)
        if self.grid not in ("linear", "log"):
            raise InputError(f"unknown frequency grid '{self.grid}'")
        if np.any(self.mag < 0):
            raise InputError("magnitudes must be non-negative")

    @property
    def shape(self) -> tuple:
        return self.mag.shape


@dataclass
class RatioMask:
    values: np.ndarray
    grid: str = "linear"
    linear_bins: int | None = field(default=None)

    @property
    def shape(self) -> tuple:
        return self.values.shape


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (sum of squares is exactly 3n/8)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _check_geometry(window_len: int, hop: int) -> None:
    if hop <= 0 or window_len <= 0:
        raise ConfigError(f"window_len and hop must be positive, got {window_len}, {hop}")
    if window_len < hop:
        raise ConfigError(f"window_len {window_len} shorter than hop {hop}")


def stft(w: Waveform | np.ndarray, window_len: int, hop: int,
         n_frames: int | None = None) -> ComplexSpectrogram:
    """Centre-padded (reflect) Hann STFT.

    The frame count is ``1 + len // hop`` unless ``n_frames`` is given, in
    which case frames are trimmed or zero-padded to that count.
    """
    _check_geometry(window_len, hop)
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size < window_len:
        raise InputError(f"signal of {x.size} samples is shorter than the window ({window_len})")
    pad = window_len // 2
    padded = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, window_len)[::hop]
    frames = frames[: 1 + x.size // hop]
    spec = np.fft.rfft(frames * hann_window(window_len), axis=-1).T
    if n_frames is not None:
        if spec.shape[1] >= n_frames:
            spec = spec[:, :n_frames]
        else:
            spec = np.pad(spec, ((0, 0), (0, n_frames - spec.shape[1])))
    return ComplexSpectrogram.from_complex(spec, window_len, hop)


def istft(c: ComplexSpectrogram, target_len: int, sample_rate: int = 1) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Each frame is windowed again and the sum is divided by the summed
    squared windows. Samples that no frame reaches (only possible at the
    ends) come back as zero.
    """
    _check_geometry(c.window_len, c.hop)
    n, hop = c.window_len, c.hop
    win = hann_window(n)
    frames = np.fft.irfft(c.values.T, n=n, axis=-1) * win
    n_frames = frames.shape[0]
    total = (n_frames - 1) * hop + n
    pad = n // 2
    length = max(total, target_len + pad)
    out = np.zeros(length)
    norm = np.zeros(length)
    wsq = win * win
    for t in range(n_frames):
        out[t * hop: t * hop + n] += frames[t]
        norm[t * hop: t * hop + n] += wsq
    out = out[pad: pad + target_len]
    norm = norm[pad: pad + target_len]
    tiny = 1e-10 * wsq.max()
    covered = np.flatnonzero(norm > tiny)
    if covered.size == 0:
        raise NumericError("istft: no output sample is covered by any frame")
    lo, hi = covered[0], covered[-1]
    if np.any(norm[lo: hi + 1] <= tiny):
        raise NumericError("istft: zero window normalisation inside the signal")
    y = np.zeros(target_len)
    y[lo: hi + 1] = out[lo: hi + 1] / norm[lo: hi + 1]
    return Waveform(y, sample_rate)


# ---------------------------------------------------------------------------
# log-frequency resampling


@lru_cache(maxsize=16)
def log_freq_matrix(linear_bins: int, out_bins: int) -> np.ndarray:
    """``(out_bins, linear_bins)`` interpolation onto a geometric grid.

    Output row ``j`` samples the linear spectrum at fractional bin
    ``(linear_bins - 1) ** (j / (out_bins - 1))``, i.e. from bin 1 to the
    Nyquist bin.
    """
    if out_bins < 2:
        raise ConfigError(f"out_bins must be at least 2, got {out_bins}")
    if linear_bins < 3:
        raise ConfigError(f"need at least 3 linear bins, got {linear_bins}")
    pos = (linear_bins - 1.0) ** (np.arange(out_bins) / (out_bins - 1.0))
    return _interp_matrix(pos, linear_bins)


@lru_cache(maxsize=16)
def linear_freq_matrix(linear_bins: int, log_bins: int) -> np.ndarray:
    """``(linear_bins, log_bins)`` interpolation back onto the linear grid.

    Bin 0 (DC) shares the value of the lowest log bin.
    """
    if log_bins < 2:
        raise ConfigError(f"log_bins must be at least 2, got {log_bins}")
    k = np.maximum(np.arange(linear_bins, dtype=np.float64), 1.0)
    pos = np.log(k) / np.log(linear_bins - 1.0) * (log_bins - 1.0)
    return _interp_matrix(pos, log_bins)


def _interp_matrix(pos: np.ndarray, n_src: int) -> np.ndarray:
    pos = np.clip(pos, 0.0, n_src - 1.0)
    lo = np.minimum(np.floor(pos).astype(int), n_src - 2)
    frac = pos - lo
    mat = np.zeros((pos.size, n_src))
    rows = np.arange(pos.size)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def to_log_grid(arr: np.ndarray, out_bins: int) -> np.ndarray:
    return log_freq_matrix(arr.shape[-2], out_bins) @ arr


def to_linear_grid(arr: np.ndarray, linear_bins: int) -> np.ndarray:
    return linear_freq_matrix(linear_bins, arr.shape[-2]) @ arr


def log_freq_resample(m: MagnitudeSpectrogram, out_bins: int) -> MagnitudeSpectrogram:
    if m.grid != "linear":
        raise InputError("log_freq_resample expects a linear-frequency spectrogram")
    return MagnitudeSpectrogram(to_log_grid(m.mag, out_bins), grid="log", linear_bins=m.mag.shape[-2])


def inverse_log_freq_resample(m: MagnitudeSpectrogram, linear_bins: int | None = None
                              ) -> MagnitudeSpectrogram:
    if m.grid != "log":
        raise InputError("inverse_log_freq_resample expects a log-frequency spectrogram")
    n = linear_bins or m.linear_bins
    if n is None:
        raise ConfigError("linear bin count unknown for inverse resampling")
    return MagnitudeSpectrogram(to_linear_grid(m.mag, n), grid="linear")


# ---------------------------------------------------------------------------
# masks


def ratio_mask_array(source: np.ndarray, mixture: np.ndarray, eps: float = MASK_EPS) -> np.ndarray:
    if source.shape != mixture.shape:
        raise DimensionError(f"ratio_mask: source {source.shape} vs mixture {mixture.shape}")
    return np.clip(source / (mixture + eps), 0.0, 1.0)


def ratio_mask(source: MagnitudeSpectrogram, mixture: MagnitudeSpectrogram,
               eps: float = MASK_EPS) -> RatioMask:
    """Clamped ratio ``source / (mixture + eps)`` on the spectrograms' grid."""
    if source.grid != mixture.grid:
        raise DimensionError(f"ratio_mask: grids differ ({source.grid} vs {mixture.grid})")
    return RatioMask(ratio_mask_array(source.mag, mixture.mag, eps), grid=source.grid,
                     linear_bins=source.linear_bins)


def apply_mask_and_reconstruct(mask: RatioMask | np.ndarray, mixture: ComplexSpectrogram,
                               target_len: int, sample_rate: int = 1) -> Waveform:
    """Mask the mixture magnitude, keep the mixture phase, invert.

    Log-grid masks are first interpolated back onto the linear grid.
    """
    if isinstance(mask, RatioMask):
        values = mask.values
        if mask.grid == "log":
            values = to_linear_grid(values, mixture.shape[0])
    else:
        values = np.asarray(mask, dtype=np.float64)
    if values.shape != mixture.shape:
        raise DimensionError(f"mask {values.shape} does not match mixture {mixture.shape}")
    # a real non-negative mask times the complex bin keeps the mixture phase
    masked = ComplexSpectrogram(values * mixture.re, values * mixture.im,
                                mixture.window_len, mixture.hop)
    return istft(masked, target_len, sample_rate)
