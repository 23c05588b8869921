"""scikit-learn style front end.

:class:`UniVoiceLite` wraps training (``fit``), the posterior encoder
(``transform``) and MCEM inference (``enhance`` / ``separate``) behind the usual
estimator protocol, so hyperparameters can be inspected with ``get_params`` and
swept with sklearn's model-selection tools.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import Checkpoint, load_checkpoint
from .data import Manifest, read_manifest
from .dsp import StftConfig
from .inference import McemConfig, enhance, separate
from .model import ModelConfig, encode
from .training import FrameSet, TrainConfig, frames_from_utterances, load_frames, run_training, validation_loss


def _as_frames(X, stft_cfg: StftConfig) -> FrameSet:
    if isinstance(X, FrameSet):
        return X
    if isinstance(X, (str, Path)):
        X = read_manifest(X)
    if isinstance(X, Manifest):
        return load_frames(X, stft_cfg)
    items = []
    for power, visual in X:
        power = check_array(power, ensure_min_samples=1)
        visual = check_array(visual, ensure_min_samples=1)
        if len(power) != len(visual):
            raise ValueError(f"power has {len(power)} frames but visual has {len(visual)}")
        if np.any(power < 0):
            raise ValueError("power spectra must be nonnegative")
        items.append((power, visual))
    if not items:
        raise ValueError("no utterances given")
    return frames_from_utterances(items)


class UniVoiceLite(TransformerMixin, BaseEstimator):
    """Audio-visual Wasserstein autoencoder with MCEM enhancement and separation.

    ``X`` for :meth:`fit`, :meth:`transform` and :meth:`score` is a manifest
    (object or path), a :class:`~univoice.training.FrameSet`, or an iterable of
    ``(power [N x F], visual [N x (lip_dim + id_dim)])`` pairs, one per utterance.
    ``lip_dim`` is the only visual dimension that cannot be inferred from the data.
    """

    def __init__(
        self,
        lip_dim=768,
        latent_dim=32,
        hidden=512,
        lam=0.1,
        regularizer="wasserstein",
        use_visual=True,
        learning_rate=1e-4,
        batch_size=512,
        max_epochs=100,
        patience=10,
        validation_fraction=0.1,
        n_iters=50,
        mh_steps=40,
        burn_in=30,
        proposal_std=0.01,
        nmf_rank=10,
        fft_size=1024,
        hop=256,
        random_state=0,
    ):
        self.lip_dim = lip_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.lam = lam
        self.regularizer = regularizer
        self.use_visual = use_visual
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.n_iters = n_iters
        self.mh_steps = mh_steps
        self.burn_in = burn_in
        self.proposal_std = proposal_std
        self.nmf_rank = nmf_rank
        self.fft_size = fft_size
        self.hop = hop
        self.random_state = random_state

    def _stft_config(self) -> StftConfig:
        return StftConfig(self.fft_size, self.hop)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience, seed=self.random_state, validation_fraction=self.validation_fraction,
        )

    def _mcem_config(self) -> McemConfig:
        return McemConfig(
            n_iters=self.n_iters, mh_steps=self.mh_steps, burn_in=self.burn_in,
            proposal_std=self.proposal_std, nmf_rank=self.nmf_rank, seed=self.random_state,
        )

    def fit(self, X, y=None):
        frames = _as_frames(X, self._stft_config())
        n_bins, n_visual = frames.power.shape[1], frames.visual.shape[1]
        if not 0 < self.lip_dim < n_visual:
            raise ValueError(f"lip_dim={self.lip_dim} leaves no room for identity features in {n_visual} columns")
        model_cfg = ModelConfig(
            freq_bins=n_bins, latent_dim=self.latent_dim, lip_dim=self.lip_dim,
            id_dim=n_visual - self.lip_dim, hidden=self.hidden, lam=self.lam,
            regularizer=self.regularizer, use_visual=self.use_visual,
        )
        run = run_training(frames, model_cfg, self._train_config())
        self.checkpoint_ = run.checkpoint
        self.history_ = run.history
        self.n_features_in_ = n_bins
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path, **kwargs) -> "UniVoiceLite":
        """Estimator around an existing checkpoint; hyperparameters mirror its configs."""
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        mc = ckpt.model_config
        params = dict(
            lip_dim=mc.lip_dim, latent_dim=mc.latent_dim, hidden=mc.hidden, lam=mc.lam,
            regularizer=mc.regularizer, use_visual=mc.use_visual,
        )
        params.update(kwargs)
        est = cls(**params)
        est.checkpoint_ = ckpt
        est.history_ = []
        est.n_features_in_ = mc.freq_bins
        return est

    def transform(self, X) -> np.ndarray:
        """Posterior means ``[T x latent_dim]`` for every frame of ``X``."""
        check_is_fitted(self, "checkpoint_")
        frames = _as_frames(X, self._stft_config())
        q = encode(frames.power, frames.visual, self.checkpoint_.float_params(), self.checkpoint_.model_config)
        return q.mean.value

    def score(self, X, y=None) -> float:
        """Negative frame-averaged training objective (higher is better)."""
        check_is_fitted(self, "checkpoint_")
        frames = _as_frames(X, self._stft_config())
        ckpt = self.checkpoint_
        return -validation_loss(ckpt.float_params(), frames, ckpt.model_config, self.random_state)

    def enhance(self, wave, visual):
        check_is_fitted(self, "checkpoint_")
        return enhance(wave, visual, self.checkpoint_, self._mcem_config(), self._stft_config())

    def separate(self, wave, visuals):
        check_is_fitted(self, "checkpoint_")
        return separate(wave, visuals, self.checkpoint_, self._mcem_config(), self._stft_config())
