"""Audio and feature file I/O, mixing, and the synthetic audio-visual corpus.

File formats
------------
WAV
    RIFF PCM 16-bit mono. Samples are scaled by 1/32768 on read; on write they
    are clamped to [-1, 1] and rounded.
UVFT
    ``b"UVFT" | version u32 | dtype u8 (1 = f32) | ndim u8 (= 2) | N u32 | D u32``
    followed by exactly ``N * D`` little-endian float32 values, row-major.
Manifest
    JSON array of ``{"id", "wav", "lip", "ident", "split"}`` records. Relative
    paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import hashlib
import json
import struct
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .dsp import DEFAULT_SAMPLE_RATE, ComplexSpectrogram, StftConfig, Waveform, istft
from .errors import (
    BadMagicError,
    ConfigError,
    DimensionOverflowError,
    FormatError,
    TrailingDataError,
    TruncatedError,
    UnsupportedAudioError,
    VersionError,
)
from .model import ModelConfig, VisualFrame, init_params

UVFT_MAGIC = b"UVFT"
UVFT_VERSION = 1
_UVFT_HEAD = struct.Struct("<4sIBBII")
_DTYPE_F32 = 1
_MAX_PAYLOAD = 1 << 34


# --------------------------------------------------------------------------- WAV

def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedAudioError(f"non-PCM WAV encoding ({msg})") from exc
        raise FormatError(f"malformed WAV header: {msg}") from exc
    except EOFError as exc:
        raise FormatError("malformed WAV header: unexpected end of file") from exc
    if channels != 1:
        raise UnsupportedAudioError(f"unsupported channel count {channels}")
    if width != 2:
        raise UnsupportedAudioError(f"unsupported sample width {8 * width} bits")
    if len(raw) != 2 * n:
        raise TruncatedError(f"WAV data truncated: {len(raw)} of {2 * n} bytes")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(wave_: Waveform, path) -> None:
    q = np.round(np.clip(wave_.samples, -1.0, 1.0) * 32768.0)
    q = np.clip(q, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wave_.sample_rate)
        fh.writeframes(q.tobytes())


# -------------------------------------------------------------------------- UVFT

@dataclass
class FeatureFile:
    frames: np.ndarray
    role: str = "lip"

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype="<f4")
        if self.frames.ndim != 2 or min(self.frames.shape) < 1:
            raise ValueError(f"feature matrix must be [N x D] with N, D >= 1, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature matrix contains non-finite values")


def uvft_bytes(feat: FeatureFile) -> bytes:
    n, d = feat.frames.shape
    return _UVFT_HEAD.pack(UVFT_MAGIC, UVFT_VERSION, _DTYPE_F32, 2, n, d) + feat.frames.tobytes()


def parse_uvft(blob: bytes, role: str = "lip") -> FeatureFile:
    if blob[:4] != UVFT_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {UVFT_MAGIC!r}")
    if len(blob) < _UVFT_HEAD.size:
        raise TruncatedError("truncated UVFT header")
    _, version, dtype, ndim, n, d = _UVFT_HEAD.unpack_from(blob)
    if version != UVFT_VERSION:
        raise VersionError(f"unsupported UVFT version {version}")
    if dtype != _DTYPE_F32:
        raise FormatError(f"unsupported UVFT dtype code {dtype}")
    if ndim != 2:
        raise FormatError(f"UVFT ndim must be 2, got {ndim}")
    need = n * d * 4
    if n == 0 or d == 0 or need > _MAX_PAYLOAD:
        raise DimensionOverflowError(f"declared dims {n} x {d} are out of range")
    payload = blob[_UVFT_HEAD.size:]
    if len(payload) < need:
        raise TruncatedError(f"truncated payload: {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise TrailingDataError(f"{len(payload) - need} trailing bytes after payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()
    return FeatureFile(frames, role)


def write_uvft(feat: FeatureFile, path) -> None:
    Path(path).write_bytes(uvft_bytes(feat))


def read_uvft(path, role: str = "lip") -> FeatureFile:
    return parse_uvft(Path(path).read_bytes(), role)


# ------------------------------------------------------------------ visual input

@dataclass
class VisualFeatures:
    """Lip features per video frame plus the identity vector of the first frame."""

    lip: np.ndarray
    identity: np.ndarray

    @classmethod
    def from_files(cls, lip_path, ident_path) -> "VisualFeatures":
        lip = read_uvft(lip_path, "lip").frames
        ident = read_uvft(ident_path, "identity").frames[0]
        return cls(lip.astype(np.float64), ident.astype(np.float64))

    @property
    def n_frames(self) -> int:
        return self.lip.shape[0]

    def aligned(self, n_frames: int) -> VisualFrame:
        """Resample lip rows onto ``n_frames`` STFT frames by linear interpolation."""
        lip = np.asarray(self.lip, dtype=np.float64)
        if lip.shape[0] != n_frames:
            src = np.linspace(0.0, 1.0, lip.shape[0]) if lip.shape[0] > 1 else np.zeros(1)
            dst = np.linspace(0.0, 1.0, n_frames)
            lip = np.stack([np.interp(dst, src, col) for col in lip.T], axis=1)
        return VisualFrame(lip, np.asarray(self.identity, dtype=np.float64))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.lip, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.identity, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------- manifest

@dataclass
class UtteranceRecord:
    id: str
    wav: str
    lip: str
    ident: str
    split: str = "train"


class Manifest(list):
    """List of :class:`UtteranceRecord` with paths resolved against ``root``."""

    def __init__(self, records=(), root="."):
        super().__init__(records)
        self.root = Path(root)
        ids = [r.id for r in self]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids are not unique")

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def split(self, tag: str) -> "Manifest":
        return Manifest([r for r in self if r.split == tag], self.root)

    def check_files(self):
        for r in self:
            for rel in (r.wav, r.lip, r.ident):
                if not self.path(rel).exists():
                    raise FileNotFoundError(f"{r.id}: missing file {self.path(rel)}")

    def load(self, rec: UtteranceRecord) -> tuple[Waveform, VisualFeatures]:
        return read_wav(self.path(rec.wav)), VisualFeatures.from_files(self.path(rec.lip), self.path(rec.ident))


def write_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in manifest], indent=1) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(raw, list):
        raise FormatError("manifest must be a JSON array")
    records = []
    for item in raw:
        if set(item) != {"id", "wav", "lip", "ident", "split"}:
            raise FormatError(f"manifest record has keys {sorted(item)}")
        records.append(UtteranceRecord(**item))
    manifest = Manifest(records, path.parent)
    manifest.check_files()
    return manifest


# ------------------------------------------------------------------------ mixing

def mix(clean: Waveform, interferer: Waveform, snr_db: float) -> Waveform:
    """``clean + alpha * interferer`` with alpha chosen to hit ``snr_db`` exactly."""
    return Waveform(clean.samples + scaled_interferer(clean, interferer, snr_db), clean.sample_rate)


def scaled_interferer(clean: Waveform, interferer: Waveform, snr_db: float) -> np.ndarray:
    if clean.sample_rate != interferer.sample_rate:
        raise ValueError("sample rates differ")
    noise = np.resize(interferer.samples, clean.samples.shape)
    e_noise = float(np.dot(noise, noise))
    if e_noise == 0.0:
        raise ValueError("silent interferer")
    e_clean = float(np.dot(clean.samples, clean.samples))
    return noise * np.sqrt(e_clean / (e_noise * 10.0 ** (snr_db / 10.0)))


# -------------------------------------------------------------- synthetic corpus

@dataclass(frozen=True)
class SynthConfig:
    n_utts: int = 200
    frames_per_utt: int = 50
    latent_dim: int = 8
    lip_dim: int = 16
    id_dim: int = 8
    seed: int = 0
    decoder_width: int = 64
    test_fraction: float = 0.1

    def __post_init__(self):
        for name in ("n_utts", "frames_per_utt", "latent_dim", "lip_dim", "id_dim", "decoder_width"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.decoder_width < 2 * self.latent_dim:
            raise ConfigError("decoder_width must be at least 2 * latent_dim")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in [0, 1)")


AR_COEF = 0.9
LIP_NOISE = 0.1


def _consistency_gain(cfg: StftConfig) -> float:
    """Amplitude restoring the energy lost when i.i.d. bins are projected onto consistent STFTs.

    Synthesis followed by analysis keeps ``hop / fft_size`` of the energy of
    independent bins, so re-analysed power matches the drawn variance after this gain.
    """
    return float(np.sqrt(cfg.fft_size / cfg.hop))


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


class GroundTruth:
    """The fixed generator network, stored as an ordinary model checkpoint.

    The prior is the exact Gaussian conditional of z given the lip features
    (realized through a relu pair ``relu(x) - relu(-x)``), the encoder copies the
    prior and ignores audio, and the decoder maps z alone to a smooth log-spectral
    envelope.
    """

    def __init__(self, cfg: SynthConfig, stft_cfg: StftConfig | None = None):
        self.cfg = cfg
        self.stft_cfg = stft_cfg or StftConfig()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        L, Dl, Di, H = cfg.latent_dim, cfg.lip_dim, cfg.id_dim, cfg.decoder_width
        F = self.stft_cfg.n_bins
        self.model_config = ModelConfig(
            freq_bins=F, latent_dim=L, lip_dim=Dl, id_dim=Di, hidden=H, lam=0.1,
        )
        self.lip_map = rng.normal(0.0, 1.0 / np.sqrt(L), size=(L, Dl))

        precision = np.eye(L) + self.lip_map @ self.lip_map.T / LIP_NOISE**2
        cov = np.linalg.inv(precision)
        to_mean = self.lip_map.T @ cov / LIP_NOISE**2
        post_std = np.sqrt(np.diag(cov))

        P = {k: np.zeros_like(v) for k, v in init_params(self.model_config, rng).items()}
        P["enc.input_scale"][:] = 1.0
        relu_pair = np.zeros((Dl + Di, H))
        relu_pair[:Dl, :L] = to_mean
        relu_pair[:Dl, L:2 * L] = -to_mean
        unpair = np.zeros((H, L))
        unpair[:L] = np.eye(L)
        unpair[L:2 * L] = -np.eye(L)
        std_bias = _softplus_inv(post_std - self.model_config.latent_floor)
        P["prior.visual.W"] = relu_pair
        P["prior.mean.W"] = unpair
        P["prior.std.b"] = std_bias
        P["enc.visual.W"] = relu_pair.copy()
        P["enc.mean.W"][H:] = unpair
        P["enc.std.b"] = std_bias.copy()

        P["dec.hidden.W"][:L] = rng.normal(0.0, 1.5 / np.sqrt(L), size=(L, H))
        P["dec.hidden.b"] = rng.normal(0.0, 0.3, size=H)
        # low-order cosine envelope; order 0 carries frame loudness
        n_basis = 12
        f = np.arange(F) / (F - 1)
        basis = np.cos(np.pi * np.outer(np.arange(n_basis), f))
        coef = rng.normal(0.0, 1.0, size=(H, n_basis)) / np.sqrt(np.arange(1, n_basis + 1))
        coef[:, 0] *= 2.0
        P["dec.out.W"] = coef @ basis * (3.0 / np.sqrt(H))
        P["dec.out.b"] = 0.5 - 3.0 * f
        self.params = {k: v.astype(np.float32).astype(np.float64) for k, v in P.items()}

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.model_config, self.params, {"synthetic_seed": self.cfg.seed}, epoch=0)

    def sample_latents(self, n_frames: int, rng) -> np.ndarray:
        L = self.cfg.latent_dim
        z = np.empty((n_frames, L))
        z[0] = rng.standard_normal(L)
        innov = np.sqrt(1.0 - AR_COEF**2)
        for n in range(1, n_frames):
            z[n] = AR_COEF * z[n - 1] + innov * rng.standard_normal(L)
        return z

    def utterance(self, index: int, n_frames: int | None = None) -> dict:
        """Latents, features, sampled STFT bins, and the synthesized waveform."""
        from .model import decode

        cfg = self.cfg
        n_frames = n_frames or cfg.frames_per_utt
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, index]))
        z = self.sample_latents(n_frames, rng)
        lip = z @ self.lip_map + LIP_NOISE * rng.standard_normal((n_frames, cfg.lip_dim))
        ident = rng.standard_normal(cfg.id_dim)
        vis = VisualFrame(lip, ident)
        var = decode(z, vis, self.params, self.model_config).value.T
        bins = np.sqrt(var / 2.0) * (
            rng.standard_normal(var.shape) + 1j * rng.standard_normal(var.shape)
        )
        spec = ComplexSpectrogram(bins * _consistency_gain(self.stft_cfg), self.stft_cfg, DEFAULT_SAMPLE_RATE)
        return {
            "z": z,
            "lip": lip,
            "identity": ident,
            "variance": var,
            "bins": bins,
            "wave": istft(spec),
        }


def nmf_noise(n_samples: int, rng, rank: int = 3, stft_cfg: StftConfig | None = None) -> Waveform:
    """Complex-Gaussian noise whose STFT variance is a random rank-``rank`` NMF."""
    stft_cfg = stft_cfg or StftConfig()
    F = stft_cfg.n_bins
    n_frames = stft_cfg.n_frames(n_samples)
    f = np.arange(F) / (F - 1)
    centers = rng.uniform(0.05, 0.9, size=rank)
    widths = rng.uniform(0.05, 0.3, size=rank)
    W = np.exp(-0.5 * ((f[:, None] - centers) / widths) ** 2) + 0.02
    H = np.exp(np.cumsum(rng.normal(0.0, 0.1, size=(rank, n_frames)), axis=1))
    var = W @ H
    bins = np.sqrt(var / 2.0) * (rng.standard_normal(var.shape) + 1j * rng.standard_normal(var.shape))
    out = istft(ComplexSpectrogram(bins * _consistency_gain(stft_cfg), stft_cfg)).samples
    full = np.zeros(n_samples)
    full[: out.shape[0]] = out
    return Waveform(full)


def synth_dataset(cfg: SynthConfig, out_dir) -> Manifest:
    """Write a synthetic corpus (WAV + UVFT + manifest + generator checkpoint)."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(parents=True, exist_ok=True)
    gt = GroundTruth(cfg)
    n_test = int(round(cfg.test_fraction * cfg.n_utts))
    records = []
    for i in range(cfg.n_utts):
        utt = gt.utterance(i)
        uid = f"utt{i:05d}"
        write_wav(utt["wave"], out / "wav" / f"{uid}.wav")
        write_uvft(FeatureFile(utt["lip"], "lip"), out / "features" / f"{uid}.lip.uvft")
        write_uvft(FeatureFile(utt["identity"][None, :], "identity"), out / "features" / f"{uid}.ident.uvft")
        records.append(UtteranceRecord(
            id=uid,
            wav=f"wav/{uid}.wav",
            lip=f"features/{uid}.lip.uvft",
            ident=f"features/{uid}.ident.uvft",
            split="test" if i >= cfg.n_utts - n_test else "train",
        ))
    manifest = Manifest(records, out)
    write_manifest(manifest, out / "manifest.json")
    save_checkpoint(gt.checkpoint(), out / "ground_truth.uvck")
    return manifest
