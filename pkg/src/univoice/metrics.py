"""Objective evaluation: signal-to-distortion ratio and short-time objective intelligibility."""
from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy import signal

from .dsp import Waveform
from .errors import ShapeError

SDR_CAP_DB = 100.0

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps

RESAMPLE_TAPS_PER_PHASE = 64
KAISER_BETA = 5.0


def _pair(ref: Waveform, est: Waveform) -> tuple[np.ndarray, np.ndarray]:
    if len(ref) != len(est):
        raise ShapeError(f"length mismatch: reference {len(ref)} vs estimate {len(est)} samples")
    if ref.sample_rate != est.sample_rate:
        raise ShapeError(f"sample rate mismatch: {ref.sample_rate} vs {est.sample_rate}")
    return ref.samples, est.samples


def sdr(ref: Waveform, est: Waveform) -> float:
    """``10 log10(|ref|^2 / |ref - est|^2)`` in dB, capped at +100 dB."""
    r, e = _pair(ref, est)
    energy = float(np.dot(r, r))
    if energy == 0.0:
        raise ValueError("silent reference")
    err = r - e
    distortion = float(np.dot(err, err))
    if distortion < 1e-10 * energy:
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10.0 * np.log10(energy / distortion))


def resample(wav: Waveform, target_rate: int) -> Waveform:
    """Polyphase resampling with a Kaiser-windowed sinc, 64 taps per phase."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == wav.sample_rate:
        return Waveform(wav.samples.copy(), wav.sample_rate)
    g = gcd(int(target_rate), wav.sample_rate)
    up, down = target_rate // g, wav.sample_rate // g
    taps = RESAMPLE_TAPS_PER_PHASE * up + 1
    h = signal.firwin(taps, 1.0 / max(up, down), window=("kaiser", KAISER_BETA)) * up
    out = signal.resample_poly(wav.samples, up, down, window=h)
    n_out = -(-len(wav) * up // down)
    return Waveform(out[:n_out], target_rate)


def _hann(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    starts = range(0, len(x) - size, hop)
    return np.array([x[i:i + size] for i in starts]).reshape(-1, size)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, size = frames.shape
    out = np.zeros((n_frames - 1) * hop + size) if n_frames else np.zeros(0)
    for i, fr in enumerate(frames):
        out[i * hop:i * hop + size] += fr
    return out


def _remove_silent_frames(x, y, dyn_range, size, hop):
    w = _hann(size)
    xf = _frames(x, size, hop) * w
    yf = _frames(y, size, hop) * w
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def third_octave_bands(fs=STOI_FS, nfft=STOI_NFFT, n_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ) -> np.ndarray:
    """Binary one-third-octave band matrix ``[n_bands x nfft/2+1]``."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands, dtype=np.float64)
    low = min_freq * 2.0 ** ((2 * k - 1) / 6)
    high = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        lo = int(np.argmin((f - low[i]) ** 2))
        hi = int(np.argmin((f - high[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, STOI_FRAME, STOI_FRAME // 2) * _hann(STOI_FRAME), n=STOI_NFFT, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)


def stoi(ref: Waveform, est: Waveform) -> float:
    r, e = _pair(ref, est)
    if len(r) < 0.5 * ref.sample_rate:
        raise ValueError("signals shorter than 0.5 s")
    if ref.sample_rate != STOI_FS:
        r = resample(ref, STOI_FS).samples
        e = resample(est, STOI_FS).samples
    r, e = _remove_silent_frames(r, e, STOI_DYN_RANGE_DB, STOI_FRAME, STOI_FRAME // 2)
    obm = third_octave_bands()
    if len(r) <= STOI_FRAME:
        raise ValueError("too short after silence removal")
    x_env = _band_envelopes(r, obm)
    y_env = _band_envelopes(e, obm)
    n_frames = x_env.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError("too short after silence removal")

    idx = np.arange(STOI_SEGMENT)[None, :] + np.arange(n_frames - STOI_SEGMENT + 1)[:, None]
    x_seg = x_env[:, idx].transpose(1, 0, 2)  # [M x J x N]
    y_seg = y_env[:, idx].transpose(1, 0, 2)
    scale = np.linalg.norm(x_seg, axis=2, keepdims=True) / (np.linalg.norm(y_seg, axis=2, keepdims=True) + _EPS)
    y_norm = y_seg * scale
    y_clip = np.minimum(y_norm, x_seg * (1.0 + 10.0 ** (-STOI_BETA_DB / 20.0)))

    xc = x_seg - x_seg.mean(axis=2, keepdims=True)
    yc = y_clip - y_clip.mean(axis=2, keepdims=True)
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + _EPS
    yc /= np.linalg.norm(yc, axis=2, keepdims=True) + _EPS
    return float(np.sum(xc * yc) / (x_seg.shape[0] * x_seg.shape[1]))


METRICS = {"sdr": sdr, "stoi": stoi}


@dataclass
class MetricReport:
    rows: list[tuple[str, str, float]]

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in sorted({m for _, m, _ in self.rows}):
            vals = np.array([v for _, m, v in self.rows if m == name])
            out[name] = (float(vals.mean()), float(vals.std()))
        return out


def evaluate(ref: Waveform, est: Waveform, names=("sdr", "stoi"), utt_id: str = "utt") -> MetricReport:
    """Trim both signals to the shorter length and compute the requested metrics."""
    n = min(len(ref), len(est))
    ref = Waveform(ref.samples[:n], ref.sample_rate)
    est = Waveform(est.samples[:n], est.sample_rate)
    rows = []
    for name in names:
        if name not in METRICS:
            raise ValueError(f"unknown metric {name!r}; choose from {sorted(METRICS)}")
        rows.append((utt_id, name, METRICS[name](ref, est)))
    return MetricReport(rows)
