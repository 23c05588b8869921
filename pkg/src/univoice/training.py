"""Unsupervised training of the autoencoder on clean speech and visual features."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Manifest
from .dsp import StftConfig, power_spectrum, stft
from .errors import ConfigError, NonFiniteError, ShapeError, TrainingError
from .model import (
    BUFFERS,
    ModelConfig,
    encode,
    init_params,
    loss,
    prior,
    regularizer_terms,
)

__all__ = [
    "AdamState", "FrameSet", "LatentActivity", "TrainConfig", "TrainingRun",
    "adam_step", "frames_for", "frames_from_utterances", "latent_activity", "load_checkpoint", "load_frames",
    "run_training", "save_checkpoint", "train", "validation_loss",
]

logger = logging.getLogger(__name__)

COLLAPSE_THRESHOLD = 0.01
_VAL_STREAM = 2**31 - 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    validation_fraction: float = 0.1
    min_delta: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in (0, 1)")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must be two values in [0, 1)")
        if self.adam_eps <= 0 or self.min_delta < 0:
            raise ConfigError("adam_eps must be positive and min_delta non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter has {np.shape(p)}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


@dataclass
class FrameSet:
    """All frames of a corpus, flattened across utterances."""

    power: np.ndarray       # [T x F]
    visual: np.ndarray      # [T x (lip_dim + id_dim)]
    utterance: np.ndarray   # [T] index into ids
    ids: list[str]

    def __len__(self):
        return self.power.shape[0]

    def subset(self, utt_indices) -> "FrameSet":
        mask = np.isin(self.utterance, np.asarray(utt_indices))
        return FrameSet(self.power[mask], self.visual[mask], self.utterance[mask], self.ids)


def load_frames(manifest: Manifest, stft_cfg: StftConfig | None = None) -> FrameSet:
    stft_cfg = stft_cfg or StftConfig()
    powers, visuals, owners, ids = [], [], [], []
    for i, rec in enumerate(manifest):
        wave, feats = manifest.load(rec)
        pw = power_spectrum(stft(wave, stft_cfg)).T
        vis = feats.aligned(pw.shape[0]).stacked()
        powers.append(pw)
        visuals.append(vis)
        owners.append(np.full(pw.shape[0], i))
        ids.append(rec.id)
    if not powers:
        raise TrainingError("empty manifest")
    return FrameSet(np.concatenate(powers), np.concatenate(visuals), np.concatenate(owners), ids)


def _check_dims(frames: FrameSet, cfg: ModelConfig):
    if frames.power.shape[1] != cfg.freq_bins:
        raise ConfigError(f"data has {frames.power.shape[1]} frequency bins, model expects {cfg.freq_bins}")
    if frames.visual.shape[1] != cfg.visual_dim:
        raise ConfigError(f"data has visual dim {frames.visual.shape[1]}, model expects {cfg.visual_dim}")


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def data_init(params: dict, frames: FrameSet, cfg: ModelConfig):
    """Fit input standardization and the output bias to the training frames."""
    logp = np.log(frames.power + cfg.variance_floor)
    params["enc.input_shift"] = logp.mean(axis=0)
    params["enc.input_scale"] = np.maximum(logp.std(axis=0), 1e-3)
    # the variance floor is added after the softplus, so aim the softplus at the mean power itself
    mean_power = np.maximum(frames.power.mean(axis=0), 1e-3 * cfg.variance_floor)
    params["dec.out.b"] = _softplus_inv(mean_power)


def _split(params):
    trainable = {k: v for k, v in params.items() if k not in BUFFERS}
    buffers = {k: v for k, v in params.items() if k in BUFFERS}
    return trainable, buffers


def _rounded(params) -> dict:
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def validation_loss(params: dict, frames: FrameSet, cfg: ModelConfig, seed: int, chunk: int = 4096) -> float:
    """Frame-averaged loss with fixed noise draws, so repeated calls agree."""
    eps = np.random.default_rng([seed, _VAL_STREAM]).standard_normal((len(frames), cfg.latent_dim))
    total = 0.0
    for start in range(0, len(frames), chunk):
        sl = slice(start, start + chunk)
        batch_loss = loss(frames.power[sl], frames.visual[sl], params, cfg, eps[sl])
        total += float(batch_loss) * (min(start + chunk, len(frames)) - start)
    return total / len(frames)


def split_utterances(n_utts: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n_utts < 2:
        raise TrainingError("need at least two utterances for a validation split")
    order = np.random.default_rng([seed, 0x5EED]).permutation(n_utts)
    n_val = min(max(1, int(round(fraction * n_utts))), n_utts - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _checked_loss(params, frames, cfg, seed, what) -> float:
    try:
        value = validation_loss(params, frames, cfg, seed)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite {what}: {exc}") from exc
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what}")
    return value


@dataclass
class TrainingRun:
    checkpoint: Checkpoint
    history: list[dict]
    initial_train_loss: float
    initial_val_loss: float
    stopped_early: bool


def _digest(*parts) -> str:
    return hashlib.sha256(repr(parts).encode()).hexdigest()[:16]


def run_training(
    data: Manifest | FrameSet,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    stft_cfg: StftConfig | None = None,
) -> TrainingRun:
    frames = data if isinstance(data, FrameSet) else load_frames(data, stft_cfg)
    if len(frames) == 0:
        raise TrainingError("empty manifest")
    _check_dims(frames, model_cfg)
    seed = train_cfg.seed
    train_utts, val_utts = split_utterances(len(frames.ids), train_cfg.validation_fraction, seed)
    train_set, val_set = frames.subset(train_utts), frames.subset(val_utts)

    params = init_params(model_cfg, np.random.default_rng([seed, 0x1]))
    data_init(params, train_set, model_cfg)
    trainable, buffers = _split(params)
    state = AdamState()

    initial_train = _checked_loss(_rounded(params), train_set, model_cfg, seed, "initial training loss")
    best_val = _checked_loss(_rounded(params), val_set, model_cfg, seed, "initial validation loss")
    initial_val = best_val
    best = (0, _rounded(params), best_val)
    history = [{"epoch": 0, "train_loss": initial_train, "val_loss": best_val}]
    stale = 0
    stopped_early = False
    L = model_cfg.latent_dim

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(train_set))
        batch_losses = []
        for b, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            eps = np.random.default_rng([seed, epoch, b]).standard_normal((idx.size, L))
            graph = ad.Graph()
            P = {k: graph.param(k, v) for k, v in trainable.items()}
            P.update(buffers)
            try:
                value = loss(train_set.power[idx], train_set.visual[idx], P, model_cfg, eps)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {exc}") from exc
            if not math.isfinite(float(value)):
                raise TrainingError(f"NaN loss at epoch {epoch}, batch {b}")
            grads = graph.backward(value)
            adam_step(trainable, grads, state, train_cfg)
            batch_losses.append(float(value) * idx.size)

        current = {**trainable, **buffers}
        val = _checked_loss(_rounded(current), val_set, model_cfg, seed, f"validation loss at epoch {epoch}")
        train_loss = sum(batch_losses) / len(train_set)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val})
        logger.info("epoch %d train %.4f val %.4f", epoch, train_loss, val)
        if val < best_val - train_cfg.min_delta * abs(best_val):
            best_val = val
            best = (epoch, _rounded(current), val)
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                stopped_early = epoch < train_cfg.max_epochs
                break

    epoch, best_params, best_val = best
    ckpt = Checkpoint(
        model_config=model_cfg,
        params=best_params,
        train_config=train_cfg.to_dict(),
        epoch=epoch,
        best_val_loss=best_val,
        rng_digest=_digest(seed, epoch, len(history)),
    )
    return TrainingRun(ckpt, history, initial_train, initial_val, stopped_early)


def train(data, model_cfg: ModelConfig, train_cfg: TrainConfig, stft_cfg: StftConfig | None = None) -> Checkpoint:
    return run_training(data, model_cfg, train_cfg, stft_cfg).checkpoint


@dataclass
class LatentActivity:
    mean_reg: np.ndarray
    var_of_mean: np.ndarray

    @property
    def collapsed(self) -> np.ndarray:
        return self.var_of_mean < COLLAPSE_THRESHOLD

    @property
    def n_collapsed(self) -> int:
        return int(self.collapsed.sum())

    def rows(self) -> list[dict]:
        return [
            {"dim": i, "mean_reg": float(r), "var_of_mean": float(v), "collapsed": bool(c)}
            for i, (r, v, c) in enumerate(zip(self.mean_reg, self.var_of_mean, self.collapsed))
        ]


def latent_activity(ckpt: Checkpoint, data: Manifest | FrameSet, stft_cfg: StftConfig | None = None) -> LatentActivity:
    """Per-dimension regularizer mass and spread of the posterior mean across frames."""
    frames = data if isinstance(data, FrameSet) else load_frames(data, stft_cfg)
    cfg = ckpt.model_config
    _check_dims(frames, cfg)
    P = ckpt.float_params()
    q = encode(frames.power, frames.visual, P, cfg)
    p = prior(frames.visual, P, cfg, batch=len(frames))
    reg = regularizer_terms(q, p, cfg).value
    return LatentActivity(np.maximum(reg.mean(axis=0), 0.0), q.mean.value.var(axis=0))


def frames_for(power: np.ndarray, visual: np.ndarray) -> FrameSet:
    """Wrap in-memory arrays as a single-utterance :class:`FrameSet`."""
    return FrameSet(np.asarray(power), np.asarray(visual), np.zeros(len(power), dtype=int), ["mem"])


def frames_from_utterances(items: Sequence[tuple[np.ndarray, np.ndarray]]) -> FrameSet:
    """Build a :class:`FrameSet` from ``(power [N x F], visual [N x Dv])`` pairs."""
    power = np.concatenate([p for p, _ in items])
    visual = np.concatenate([v for _, v in items])
    owner = np.concatenate([np.full(len(p), i) for i, (p, _) in enumerate(items)])
    return FrameSet(power, visual, owner, [f"utt{i}" for i in range(len(items))])
