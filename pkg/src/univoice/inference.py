"""Test-time enhancement and separation by Monte Carlo EM.

The observed mixture STFT is modelled per bin as

    x[f, n] ~ N_C(0, sum_k g[k, n] * v_k[f, n] + beta[f, n])

with ``v_k = decode(z_k, visual_k)`` the speech variance of speaker ``k``,
``g`` per-frame gains and ``beta = W @ H`` a nonnegative noise factorization.
The E-step samples each speaker's latents with a random-walk Metropolis-Hastings
chain targeting ``p(z_k | x, rest) ∝ p(x | z) p(z_k | visual_k)``; the M-step
updates ``H``, ``W`` and ``g`` with square-root multiplicative rules that do not
increase the Itakura-Saito objective. Sources are recovered with the
sample-averaged Wiener filter.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import VisualFeatures
from .dsp import ComplexSpectrogram, StftConfig, Waveform, istft, power_spectrum, stft
from .errors import ConfigError, InferenceError, ShapeError
from .model import VisualFrame, decode, encode, prior

logger = logging.getLogger(__name__)

FLOOR = 1e-10


@dataclass(frozen=True)
class McemConfig:
    n_iters: int = 50
    mh_steps: int = 40
    burn_in: int = 30
    proposal_std: float = 0.01
    nmf_rank: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_iters < 1:
            raise ConfigError("n_iters must be >= 1")
        if not 0 <= self.burn_in < self.mh_steps:
            raise ConfigError("burn_in must satisfy 0 <= burn_in < mh_steps")
        if self.proposal_std <= 0:
            raise ConfigError("proposal_std must be positive")
        if self.nmf_rank < 1:
            raise ConfigError("nmf_rank must be >= 1")


@dataclass
class NoiseNMF:
    W: np.ndarray  # [F x K]
    H: np.ndarray  # [K x N]

    @property
    def variance(self) -> np.ndarray:
        return self.W @ self.H


@dataclass
class McemState:
    mix: np.ndarray                 # complex [F x N]
    power: np.ndarray               # [F x N]
    visual: list[np.ndarray]        # per speaker [N x Dv]
    z: np.ndarray                   # [K x N x L]
    gains: np.ndarray               # [K x N]
    noise: NoiseNMF
    prior_mean: np.ndarray          # [K x N x L]
    prior_std: np.ndarray           # [K x N x L]
    speech_var: np.ndarray          # [K x F x N] at the current z
    rngs: list[np.random.Generator]
    order: list[int]                # speaker visiting order
    stft_config: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = 16000
    retained_z: list[np.ndarray] = field(default_factory=list)
    retained_var: list[np.ndarray] = field(default_factory=list)
    accepted: int = 0
    proposed: int = 0

    @property
    def n_speakers(self) -> int:
        return self.z.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")

    def total_variance(self, speech_var=None) -> np.ndarray:
        sv = self.speech_var if speech_var is None else speech_var
        t = self.noise.variance.copy()
        for k in self.order:
            t += self.gains[k] * sv[k]
        return t


def _as_frames(feat, n_frames: int) -> np.ndarray:
    if isinstance(feat, VisualFeatures):
        return feat.aligned(n_frames).stacked()
    if isinstance(feat, VisualFrame):
        v = feat.stacked()
    else:
        v = np.atleast_2d(np.asarray(feat, dtype=np.float64))
    if v.shape[0] < n_frames:
        raise ShapeError(f"feature stream has {v.shape[0]} frames, mixture has {n_frames}")
    return v[:n_frames]


def _stream_key(v: np.ndarray) -> int:
    import hashlib

    return int(hashlib.sha256(np.ascontiguousarray(v, dtype="<f8").tobytes()).hexdigest()[:15], 16)


def _decode_var(z: np.ndarray, vis: np.ndarray, P, cfg) -> np.ndarray:
    return decode(z, vis, P, cfg).value.T


def init_mcem(mix: ComplexSpectrogram, feats: Sequence, checkpoint: Checkpoint, cfg: McemConfig) -> McemState:
    if len(feats) == 0:
        raise InferenceError("at least one speaker's visual features are required")
    mcfg = checkpoint.model_config
    P = checkpoint.float_params()
    x = mix.bins
    if x.shape[0] != mcfg.freq_bins:
        raise ShapeError(f"mixture has {x.shape[0]} bins, model expects {mcfg.freq_bins}")
    power = power_spectrum(mix)
    n_frames = x.shape[1]
    visual = [_as_frames(f, n_frames) for f in feats]

    keys = [_stream_key(v) for v in visual]
    order = sorted(range(len(visual)), key=lambda k: (keys[k], k))
    rngs = [np.random.default_rng([cfg.seed, keys[k]]) for k in range(len(visual))]

    z, pm, ps, sv = [], [], [], []
    for v in visual:
        q = encode(power.T, v, P, mcfg)
        p = prior(v, P, mcfg, batch=n_frames)
        z.append(q.mean.value)
        pm.append(p.mean.value)
        ps.append(p.std.value)
        sv.append(_decode_var(q.mean.value, v, P, mcfg))

    nmf_rng = np.random.default_rng([cfg.seed, 0xB0])
    W = nmf_rng.uniform(0.1, 1.0, size=(x.shape[0], cfg.nmf_rank))
    H = nmf_rng.uniform(0.1, 1.0, size=(cfg.nmf_rank, n_frames))
    H *= (power.mean() / 2.0) / (W @ H).mean()
    noise = NoiseNMF(np.maximum(W, FLOOR), np.maximum(H, FLOOR))

    return McemState(
        mix=x, power=power, visual=visual,
        z=np.stack(z), gains=np.ones((len(visual), n_frames)), noise=noise,
        prior_mean=np.stack(pm), prior_std=np.stack(ps), speech_var=np.stack(sv),
        rngs=rngs, order=order, stft_config=mix.config, sample_rate=mix.sample_rate,
    )


def _mh_sweep(state: McemState, checkpoint: Checkpoint, P, cfg: McemConfig):
    mcfg = checkpoint.model_config
    x = state.power
    for k in state.order:
        rng = state.rngs[k]
        z = state.z[k]
        others = state.total_variance() - state.gains[k] * state.speech_var[k]
        proposal = z + cfg.proposal_std * rng.standard_normal(z.shape)
        new_var = _decode_var(proposal, state.visual[k], P, mcfg)
        t_old = others + state.gains[k] * state.speech_var[k]
        t_new = others + state.gains[k] * new_var
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            loglik = np.sum(x / t_old + np.log(t_old) - x / t_new - np.log(t_new), axis=0)
        mu, sd = state.prior_mean[k], state.prior_std[k]
        logprior = 0.5 * np.sum(((z - mu) / sd) ** 2 - ((proposal - mu) / sd) ** 2, axis=1)
        log_ratio = loglik + logprior
        bad = ~np.isfinite(log_ratio)
        if np.any(bad):
            n = int(np.flatnonzero(bad)[0])
            raise InferenceError(f"non-finite likelihood for speaker {k}, frame {n}")
        accept = np.log(rng.uniform(size=log_ratio.shape)) < log_ratio
        state.z[k][accept] = proposal[accept]
        state.speech_var[k][:, accept] = new_var[:, accept]
        state.accepted += int(accept.sum())
        state.proposed += accept.size


def mh_step(state: McemState, checkpoint: Checkpoint, cfg: McemConfig) -> McemState:
    """E-step: ``cfg.mh_steps`` Metropolis-Hastings sweeps, keeping the post-burn-in draws."""
    P = checkpoint.float_params()
    state.retained_z = []
    state.retained_var = []
    state.accepted = state.proposed = 0
    for step in range(cfg.mh_steps):
        _mh_sweep(state, checkpoint, P, cfg)
        if step >= cfg.burn_in:
            state.retained_z.append(state.z.copy())
            state.retained_var.append(state.speech_var.copy())
    return state


def is_objective(power: np.ndarray, total_var: np.ndarray) -> float:
    return float(np.sum(power / total_var + np.log(total_var)))


def mean_speech_variance(state: McemState) -> np.ndarray:
    if not state.retained_var:
        raise InferenceError("m_step needs at least one retained sample")
    return np.mean(state.retained_var, axis=0)


def mixture_objective(state: McemState) -> float:
    """Itakura-Saito objective at the sample-averaged speech variances."""
    return is_objective(state.power, state.total_variance(mean_speech_variance(state)))


def m_step(state: McemState) -> McemState:
    v_hat = mean_speech_variance(state)
    x = state.power
    W, H = state.noise.W, state.noise.H

    def total():
        return state.total_variance(v_hat)

    t = total()
    H *= np.sqrt((W.T @ (x / t**2)) / (W.T @ (1.0 / t)))
    np.maximum(H, FLOOR, out=H)
    t = total()
    W *= np.sqrt(((x / t**2) @ H.T) / ((1.0 / t) @ H.T))
    np.maximum(W, FLOOR, out=W)
    for k in state.order:
        t = total()
        num = np.sum(x * v_hat[k] / t**2, axis=0)
        den = np.sum(v_hat[k] / t, axis=0)
        state.gains[k] *= np.sqrt(num / den)
        np.maximum(state.gains[k], FLOOR, out=state.gains[k])
    return state


def wiener_filters(state: McemState) -> np.ndarray:
    """Sample-averaged Wiener gains ``[K x F x N]`` for each speaker's image in the mixture."""
    if not state.retained_var:
        raise InferenceError("Wiener estimate needs at least one retained sample")
    beta = state.noise.variance
    acc = np.zeros_like(state.retained_var[0])
    for sv in state.retained_var:
        scaled = state.gains[:, None, :] * sv
        t = beta.copy()
        for k in state.order:
            t += scaled[k]
        acc += scaled / t
    return acc / len(state.retained_var)


def wiener_estimate(state: McemState) -> list[ComplexSpectrogram]:
    return [ComplexSpectrogram(f * state.mix, state.stft_config, state.sample_rate) for f in wiener_filters(state)]


def run_mcem(state: McemState, checkpoint: Checkpoint, cfg: McemConfig, trace: list | None = None) -> McemState:
    for it in range(cfg.n_iters):
        mh_step(state, checkpoint, cfg)
        m_step(state)
        if trace is not None:
            trace.append({"iter": it, "objective": mixture_objective(state), "acceptance": state.acceptance_rate})
    logger.info("MCEM finished: acceptance %.3f", state.acceptance_rate)
    return state


def _extract(wav: Waveform, feats: Sequence, checkpoint: Checkpoint, cfg: McemConfig, stft_cfg: StftConfig | None):
    stft_cfg = stft_cfg or StftConfig()
    mix = stft(wav, stft_cfg)
    state = init_mcem(mix, feats, checkpoint, cfg)
    run_mcem(state, checkpoint, cfg)
    return [istft(s) for s in wiener_estimate(state)], state


def enhance(wav: Waveform, feats, checkpoint: Checkpoint, cfg: McemConfig | None = None,
            stft_cfg: StftConfig | None = None) -> Waveform:
    """Single-speaker enhancement; output covers the analysed frames only."""
    cfg = cfg or McemConfig()
    if isinstance(feats, (list, tuple)):
        if len(feats) != 1:
            raise InferenceError("enhance takes exactly one speaker; use separate for mixtures of several")
        feats = feats[0]
    outputs, _ = _extract(wav, [feats], checkpoint, cfg, stft_cfg)
    return outputs[0]


def separate(wav: Waveform, feats: Sequence, checkpoint: Checkpoint, cfg: McemConfig | None = None,
             stft_cfg: StftConfig | None = None) -> list[Waveform]:
    """One output per visual stream, in the order the streams are given."""
    cfg = cfg or McemConfig()
    if len(feats) < 2:
        raise InferenceError("separate needs at least two speakers; use enhance for a single speaker")
    outputs, _ = _extract(wav, list(feats), checkpoint, cfg, stft_cfg)
    return outputs
