"""Short-time Fourier analysis and overlap-add synthesis.

All transforms are one-sided (``F = fft_size // 2 + 1`` bins), unnormalized
forward DFTs of sqrt-Hann windowed frames. Frames that would overrun the end of
the signal are dropped rather than padded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = 256
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size % 2:
            raise ValueError(f"fft_size must be a positive even integer, got {self.fft_size}")
        if self.hop <= 0 or self.hop > self.fft_size or self.fft_size % self.hop:
            raise ValueError(f"hop must divide fft_size and be <= fft_size, got {self.hop}")
        if self.window != "sqrt_hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def analysis_window(self) -> np.ndarray:
        # periodic Hann, so that shifted copies at hop = fft_size/4 sum to a constant
        n = np.arange(self.fft_size)
        return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.fft_size))

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.fft_size) // self.hop

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.fft_size


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class ComplexSpectrogram:
    bins: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 2:
            raise ShapeError(f"spectrogram must be 2-D [F x N], got shape {self.bins.shape}")
        if not np.all(np.isfinite(self.bins)):
            raise NonFiniteError("spectrogram contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


def stft(wave: Waveform, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    x = wave.samples
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("waveform contains non-finite samples")
    if x.shape[0] < cfg.fft_size:
        raise ShapeError(f"input too short: {x.shape[0]} samples < fft_size {cfg.fft_size}")
    n_frames = cfg.n_frames(x.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.fft_size)[:: cfg.hop][:n_frames]
    bins = np.fft.rfft(frames * cfg.analysis_window(), axis=1).T
    return ComplexSpectrogram(bins, cfg, wave.sample_rate)


def istft(spec: ComplexSpectrogram) -> Waveform:
    cfg = spec.config
    n_bins, n_frames = spec.bins.shape
    if n_bins != cfg.n_bins:
        raise ShapeError(f"spectrogram has {n_bins} bins, config expects {cfg.n_bins}")
    window = cfg.analysis_window()
    frames = np.fft.irfft(spec.bins.T, n=cfg.fft_size, axis=1) * window
    out = np.zeros(cfg.n_samples(n_frames))
    for n in range(n_frames):
        start = n * cfg.hop
        out[start:start + cfg.fft_size] += frames[n]
    # interior overlap of squared window is constant; edges are left attenuated
    out /= np.sum(window**2) / cfg.hop
    return Waveform(out, spec.sample_rate)


def power_spectrum(spec: ComplexSpectrogram) -> np.ndarray:
    """Elementwise ``|bins|**2`` as a real ``[F x N]`` array."""
    b = spec.bins
    return b.real**2 + b.imag**2


def interior_slice(cfg: StftConfig, n_frames: int) -> slice:
    """Samples covered by a full set of overlapping frames."""
    return slice(cfg.fft_size - cfg.hop, cfg.n_samples(n_frames) - (cfg.fft_size - cfg.hop))
