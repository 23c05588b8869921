"""Audio-visual Wasserstein autoencoder.

The model works frame by frame. Every forward function takes a batch of frames
``[B x ...]`` (a single frame is promoted to ``B = 1``) and is written in terms
of :mod:`univoice.autodiff` ops, so the same code serves training (parameters
registered on a :class:`~univoice.autodiff.Graph`) and inference (plain arrays).

Parameter layout, with ``H = hidden`` and ``Dv = lip_dim + id_dim``::

    enc.audio   [F x H]      log-power branch, tanh
    enc.visual  [Dv x H]     visual branch, relu        (visual models only)
    enc.mean    [2H x L]     posterior mean head        ([H x L] without visual)
    enc.std     [2H x L]     posterior std head
    prior.visual, prior.mean, prior.std                 (visual models only)
    dec.visual  [Dv x H]                                (visual models only)
    dec.hidden  [(L+H) x H]  tanh
    dec.out     [H x F]      softplus -> speech variance

``enc.input_shift`` / ``enc.input_scale`` standardize the log-power input and are
fitted from data, not optimized.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

REGULARIZERS = ("wasserstein", "kl")
BUFFERS = ("enc.input_shift", "enc.input_scale")


@dataclass(frozen=True)
class ModelConfig:
    freq_bins: int = 513
    latent_dim: int = 32
    lip_dim: int = 768
    id_dim: int = 128
    hidden: int = 512
    lam: float = 0.1
    regularizer: str = "wasserstein"
    use_visual: bool = True
    variance_floor: float = 1e-8
    latent_floor: float = 1e-6

    def __post_init__(self):
        for name in ("freq_bins", "latent_dim", "lip_dim", "id_dim", "hidden"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.variance_floor <= 0 or self.latent_floor <= 0:
            raise ConfigError("variance floors must be positive")

    @property
    def visual_dim(self) -> int:
        return self.lip_dim + self.id_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VisualFrame:
    """Lip features (one row per frame) and the static identity vector."""

    lip: np.ndarray
    identity: np.ndarray

    def stacked(self) -> np.ndarray:
        lip = np.atleast_2d(np.asarray(self.lip, dtype=np.float64))
        ident = np.asarray(self.identity, dtype=np.float64)
        ident = np.broadcast_to(ident, (lip.shape[0], ident.shape[-1]))
        return np.concatenate([lip, ident], axis=1)


@dataclass
class LatentGaussian:
    mean: Tensor
    std: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    F, L, H, Dv = cfg.freq_bins, cfg.latent_dim, cfg.hidden, cfg.visual_dim
    shapes: dict[str, tuple[int, ...]] = {
        "enc.input_shift": (F,),
        "enc.input_scale": (F,),
        "enc.audio.W": (F, H),
        "enc.audio.b": (H,),
    }
    fused = 2 * H if cfg.use_visual else H
    if cfg.use_visual:
        shapes.update({"enc.visual.W": (Dv, H), "enc.visual.b": (H,)})
    shapes.update({
        "enc.mean.W": (fused, L), "enc.mean.b": (L,),
        "enc.std.W": (fused, L), "enc.std.b": (L,),
    })
    if cfg.use_visual:
        shapes.update({
            "prior.visual.W": (Dv, H), "prior.visual.b": (H,),
            "prior.mean.W": (H, L), "prior.mean.b": (L,),
            "prior.std.W": (H, L), "prior.std.b": (L,),
            "dec.visual.W": (Dv, H), "dec.visual.b": (H,),
        })
    shapes.update({
        "dec.hidden.W": (L + (H if cfg.use_visual else 0), H), "dec.hidden.b": (H,),
        "dec.out.W": (H, F), "dec.out.b": (F,),
    })
    return shapes


def count_parameters(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.size(v) for k, v in params.items() if k not in BUFFERS))


def init_params(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> dict[str, np.ndarray]:
    """Scaled-Gaussian weights, zero biases, identity input standardization."""
    rng = np.random.default_rng(rng)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "enc.input_scale":
            params[name] = np.ones(shape)
        elif name.endswith(".W"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            params[name] = np.zeros(shape)
    logger.info("initialized model with %d parameters", count_parameters(params))
    return params


def validate_params(params: Mapping[str, np.ndarray], cfg: ModelConfig):
    expected = parameter_shapes(cfg)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ShapeError(f"parameter names do not match config (missing={sorted(missing)}, extra={sorted(extra)})")
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != shape:
            raise ShapeError(f"{name} has shape {np.shape(params[name])}, expected {shape}")


def _batch(x, width: int, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeError(f"{what} must have {width} columns, got shape {arr.shape}")
    return arr


def _visual_input(vis, batch: int, cfg: ModelConfig) -> np.ndarray:
    if isinstance(vis, VisualFrame):
        lip = np.atleast_2d(np.asarray(vis.lip, dtype=np.float64))
        ident = np.asarray(vis.identity, dtype=np.float64)
        if lip.shape[1] != cfg.lip_dim or ident.shape[-1] != cfg.id_dim:
            raise ShapeError(
                f"visual dims ({lip.shape[1]}, {ident.shape[-1]}) do not match config "
                f"({cfg.lip_dim}, {cfg.id_dim})"
            )
        v = vis.stacked()
    else:
        v = _batch(vis, cfg.visual_dim, "visual input")
    if v.shape[0] != batch:
        if v.shape[0] != 1:
            raise ShapeError(f"visual batch {v.shape[0]} does not match {batch}")
        v = np.broadcast_to(v, (batch, v.shape[1]))
    if not np.all(np.isfinite(v)):
        raise ValueError("visual features contain non-finite values")
    return v


def _dense(x, P, name, kind=None):
    out = ad.affine(x, P[name + ".W"], P[name + ".b"])
    return ad.activation(out, kind) if kind else out


def _gaussian_head(h, P, prefix, floor) -> LatentGaussian:
    mean = _dense(h, P, prefix + ".mean")
    std = ad.add(_dense(h, P, prefix + ".std", "softplus"), floor)
    return LatentGaussian(mean, std)


def encode(power, vis, P: Mapping, cfg: ModelConfig) -> LatentGaussian:
    """Posterior q(z | power, visual) for a batch of power-spectrum frames."""
    power = _batch(power, cfg.freq_bins, "power frame")
    if np.any(power < 0):
        raise ValueError("power spectrum has negative entries")
    logp = (np.log(power + cfg.variance_floor) - _plain(P["enc.input_shift"])) / _plain(P["enc.input_scale"])
    h = _dense(logp, P, "enc.audio", "tanh")
    if cfg.use_visual:
        v = _visual_input(vis, power.shape[0], cfg)
        h = ad.concat([h, _dense(v, P, "enc.visual", "relu")], axis=1)
    return _gaussian_head(h, P, "enc", cfg.latent_floor)


def prior(vis, P: Mapping, cfg: ModelConfig, batch: int | None = None) -> LatentGaussian:
    """Visually conditioned prior p(z | visual); standard normal without visual input."""
    if not cfg.use_visual:
        if batch is None:
            batch = 1 if vis is None else _visual_rows(vis)
        L = cfg.latent_dim
        return LatentGaussian(ad.constant(np.zeros((batch, L))), ad.constant(np.ones((batch, L))))
    v = _visual_input(vis, batch or _visual_rows(vis), cfg)
    h = _dense(v, P, "prior.visual", "relu")
    return _gaussian_head(h, P, "prior", cfg.latent_floor)


def _visual_rows(vis) -> int:
    if isinstance(vis, VisualFrame):
        return np.atleast_2d(vis.lip).shape[0]
    return np.atleast_2d(vis).shape[0]


def _plain(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def reparameterize(g: LatentGaussian, eps) -> Tensor:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != g.dim:
        raise ShapeError(f"eps has length {eps.shape[-1]}, latent dim is {g.dim}")
    return ad.add(g.mean, ad.mul(g.std, eps))


def decode(z, vis, P: Mapping, cfg: ModelConfig) -> Tensor:
    """Per-bin variance of the complex-Gaussian speech model, ``[B x F]``."""
    if not isinstance(z, Tensor):
        z = _batch(z, cfg.latent_dim, "latent")
    elif z.shape[-1] != cfg.latent_dim:
        raise ShapeError(f"latent has length {z.shape[-1]}, expected {cfg.latent_dim}")
    h = z
    if cfg.use_visual:
        v = _visual_input(vis, z.shape[0], cfg)
        h = ad.concat([z, _dense(v, P, "dec.visual", "relu")], axis=1)
    h = _dense(h, P, "dec.hidden", "tanh")
    return ad.add(_dense(h, P, "dec.out", "softplus"), cfg.variance_floor)


def is_nll(power, variance) -> Tensor:
    """Complex-Gaussian negative log-likelihood per frame, without the ``F ln pi`` constant."""
    if np.any(_plain(variance) <= 0):
        raise ValueError("variance must be strictly positive")
    return ad.reduce_sum(ad.add(ad.div(power, variance), ad.activation(variance, "log")), axis=-1)


def _check_pair(q: LatentGaussian, p: LatentGaussian):
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ShapeError(f"latent dims differ: {q.mean.shape[-1]} vs {p.mean.shape[-1]}")


def _wrap(g: LatentGaussian) -> LatentGaussian:
    mean = g.mean if isinstance(g.mean, Tensor) else ad.constant(g.mean)
    std = g.std if isinstance(g.std, Tensor) else ad.constant(g.std)
    return LatentGaussian(mean, std)


def w2_terms(q: LatentGaussian, p: LatentGaussian) -> Tensor:
    """Per-dimension squared 2-Wasserstein distance between diagonal Gaussians."""
    q, p = _wrap(q), _wrap(p)
    _check_pair(q, p)
    return ad.add(ad.square(ad.sub(q.mean, p.mean)), ad.square(ad.sub(q.std, p.std)))


def kl_terms(q: LatentGaussian, p: LatentGaussian) -> Tensor:
    """Per-dimension KL(q || p) between diagonal Gaussians."""
    q, p = _wrap(q), _wrap(p)
    _check_pair(q, p)
    log_ratio = ad.activation(ad.div(p.std, q.std), "log")
    quad = ad.div(ad.add(ad.square(q.std), ad.square(ad.sub(q.mean, p.mean))), ad.mul(ad.square(p.std), 2.0))
    return ad.sub(ad.add(log_ratio, quad), 0.5)


def w2_diag_gauss(q: LatentGaussian, p: LatentGaussian) -> Tensor:
    return ad.reduce_sum(w2_terms(q, p), axis=-1)


def kl_diag_gauss(q: LatentGaussian, p: LatentGaussian) -> Tensor:
    return ad.reduce_sum(kl_terms(q, p), axis=-1)


def regularizer_terms(q: LatentGaussian, p: LatentGaussian, cfg: ModelConfig) -> Tensor:
    return w2_terms(q, p) if cfg.regularizer == "wasserstein" else kl_terms(q, p)


def frame_losses(power, vis, P: Mapping, cfg: ModelConfig, eps):
    """Return (reconstruction NLL, regularizer) per frame, both ``[B]``."""
    power = _batch(power, cfg.freq_bins, "power frame")
    if power.shape[0] == 0:
        raise ValueError("empty batch")
    q = encode(power, vis, P, cfg)
    p = prior(vis, P, cfg, batch=power.shape[0])
    z = reparameterize(q, eps)
    nll = is_nll(power, decode(z, vis, P, cfg))
    reg = ad.reduce_sum(regularizer_terms(q, p, cfg), axis=-1)
    return nll, reg


def loss(power, vis, P: Mapping, cfg: ModelConfig, eps) -> Tensor:
    """Mean over frames of ``NLL + lam * regularizer``; ``eps`` holds one draw per frame."""
    if np.size(power) == 0:
        raise ValueError("empty batch")
    nll, reg = frame_losses(power, vis, P, cfg, eps)
    return ad.reduce_mean(ad.add(nll, ad.mul(reg, cfg.lam)))
