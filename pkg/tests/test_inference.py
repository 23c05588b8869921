from dataclasses import replace

import numpy as np
import pytest

from univoice.checkpoint import Checkpoint
from univoice.data import GroundTruth, SynthConfig, VisualFeatures
from univoice.dsp import ComplexSpectrogram, StftConfig, Waveform
from univoice.errors import ConfigError, InferenceError, ShapeError
from univoice.inference import (
    FLOOR, McemConfig, NoiseNMF, enhance, init_mcem, m_step, mh_step, mixture_objective, run_mcem, separate,
    wiener_estimate, wiener_filters,
)
from univoice.metrics import sdr
from univoice.model import ModelConfig, VisualFrame, init_params

TINY_STFT = StftConfig(fft_size=8, hop=2)
TINY = ModelConfig(freq_bins=5, latent_dim=2, lip_dim=3, id_dim=2, hidden=4)


@pytest.fixture(scope="module")
def gt():
    return GroundTruth(SynthConfig())


def tiny_checkpoint(seed=0, cfg=TINY):
    return Checkpoint(cfg, init_params(cfg, seed))


def tiny_mixture(rng, n_frames=12):
    bins = rng.standard_normal((5, n_frames)) + 1j * rng.standard_normal((5, n_frames))
    return ComplexSpectrogram(bins, TINY_STFT)


def tiny_state(rng, n_speakers=1, n_frames=12, cfg=McemConfig(mh_steps=4, burn_in=2, nmf_rank=2)):
    feats = [rng.standard_normal((n_frames, 5)) for _ in range(n_speakers)]
    return init_mcem(tiny_mixture(rng, n_frames), feats, tiny_checkpoint(), cfg)


def test_config_validation():
    for bad in (dict(n_iters=0), dict(burn_in=40), dict(proposal_std=0.0), dict(nmf_rank=0)):
        with pytest.raises(ConfigError):
            McemConfig(**bad)


def test_init_shapes_and_noise_scale(rng):
    state = tiny_state(rng)
    assert state.z.shape == (1, 12, 2)
    assert state.gains.shape == (1, 12) and np.all(state.gains == 1.0)
    assert state.noise.W.shape == (5, 2) and state.noise.H.shape == (2, 12)
    assert state.noise.variance.mean() == pytest.approx(state.power.mean() / 2, rel=1e-12)


def test_init_deterministic():
    a = tiny_state(np.random.default_rng(3))
    b = tiny_state(np.random.default_rng(3))
    for field in ("z", "gains", "speech_var"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    np.testing.assert_array_equal(a.noise.W, b.noise.W)


def test_init_errors(rng):
    with pytest.raises(InferenceError):
        init_mcem(tiny_mixture(rng), [], tiny_checkpoint(), McemConfig())
    with pytest.raises(ShapeError):
        init_mcem(tiny_mixture(rng, 12), [rng.standard_normal((10, 5))], tiny_checkpoint(), McemConfig())
    with pytest.raises(ShapeError):
        init_mcem(ComplexSpectrogram(np.ones((9, 4), complex), StftConfig(16, 4)), [np.ones((4, 5))],
                  tiny_checkpoint(), McemConfig())


def test_init_truncates_longer_streams(rng):
    state = init_mcem(tiny_mixture(rng, 12), [rng.standard_normal((20, 5))], tiny_checkpoint(), McemConfig())
    assert state.visual[0].shape == (12, 5)


def test_retained_sample_count(rng):
    cfg = McemConfig(mh_steps=7, burn_in=3, nmf_rank=2)
    state = tiny_state(rng, cfg=cfg)
    mh_step(state, tiny_checkpoint(), cfg)
    assert len(state.retained_var) == len(state.retained_z) == 4
    mh_step(state, tiny_checkpoint(), cfg)
    assert len(state.retained_var) == 4


def test_tiny_proposal_accepts_nearly_everything(rng):
    cfg = McemConfig(mh_steps=10, burn_in=5, proposal_std=1e-9, nmf_rank=2)
    state = tiny_state(rng, cfg=cfg)
    mh_step(state, tiny_checkpoint(), cfg)
    assert state.acceptance_rate > 0.99


def test_constant_decoder_samples_the_prior():
    """With a z-independent decoder the chain targets the prior exactly."""
    cfg = replace(TINY, latent_dim=1, use_visual=False)
    P = {k: np.zeros_like(v) for k, v in init_params(cfg).items()}
    P["enc.input_scale"][:] = 1.0
    ckpt = Checkpoint(cfg, P)
    n = 10_000
    rng = np.random.default_rng(0)
    mix = ComplexSpectrogram(rng.standard_normal((5, n)) + 0j, TINY_STFT)
    mc = McemConfig(mh_steps=60, burn_in=59, proposal_std=1.5)
    state = init_mcem(mix, [np.zeros((n, 5))], ckpt, mc)
    mh_step(state, ckpt, mc)
    draws = state.retained_z[-1][0, :, 0]     # one draw per independent frame chain
    assert abs(draws.mean()) < 3 / np.sqrt(n)
    assert abs(draws.std() - 1.0) < 3 / np.sqrt(2 * n)


def test_non_finite_likelihood_names_speaker_and_frame(rng):
    cfg = McemConfig(mh_steps=2, burn_in=1, nmf_rank=2)
    state = tiny_state(rng, cfg=cfg)
    state.power[:, 3] = np.inf
    with pytest.raises(InferenceError, match="speaker 0, frame 3"):
        mh_step(state, tiny_checkpoint(), cfg)


def test_m_step_requires_samples(rng):
    with pytest.raises(InferenceError):
        m_step(tiny_state(rng))


def test_m_step_fixed_point(rng):
    state = tiny_state(rng, n_speakers=2)
    state.retained_var = [state.speech_var.copy()]
    state.power = state.total_variance(state.speech_var).copy()
    W, H, g = state.noise.W.copy(), state.noise.H.copy(), state.gains.copy()
    m_step(state)
    np.testing.assert_allclose(state.noise.W, W, rtol=1e-12)
    np.testing.assert_allclose(state.noise.H, H, rtol=1e-12)
    np.testing.assert_allclose(state.gains, g, rtol=1e-12)


def test_m_step_floors_and_monotone(rng):
    state = tiny_state(rng, n_speakers=2)
    state.retained_var = [state.speech_var * s for s in (0.5, 1.0, 2.0)]
    state.power[:, :4] = 0.0   # drives ratios towards zero
    before = mixture_objective(state)
    for _ in range(30):
        m_step(state)
        after = mixture_objective(state)
        assert after <= before + 1e-9 * abs(before)
        before = after
        assert state.noise.W.min() >= FLOOR and state.noise.H.min() >= FLOOR and state.gains.min() >= FLOOR


def _with_noise(state, beta):
    F, N = beta.shape
    state.noise = NoiseNMF(beta.copy(), np.eye(N))
    return state


def test_wiener_limits(rng):
    state = tiny_state(rng)
    v = state.speech_var
    state.retained_var = [v.copy()]
    x = state.mix
    _with_noise(state, np.full(v.shape[1:], 1e-12))
    np.testing.assert_allclose(wiener_estimate(state)[0].bins, x, rtol=1e-6)
    _with_noise(state, v[0])
    np.testing.assert_allclose(wiener_estimate(state)[0].bins, x / 2, rtol=1e-12)
    _with_noise(state, np.full(v.shape[1:], 1e12))
    assert np.abs(wiener_estimate(state)[0].bins).max() < 1e-9 * np.abs(x).max()


def test_wiener_filters_bounded_and_energy(rng):
    state = tiny_state(rng, n_speakers=3)
    state.retained_var = [state.speech_var * s for s in (0.3, 1.0, 4.0)]
    filters = wiener_filters(state)
    assert filters.min() >= 0 and filters.sum(axis=0).max() <= 1.0 + 1e-12
    energy = sum(np.sum(np.abs(s.bins) ** 2) for s in wiener_estimate(state))
    assert energy <= np.sum(np.abs(state.mix) ** 2)


def test_wiener_requires_samples(rng):
    with pytest.raises(InferenceError):
        wiener_filters(tiny_state(rng))


def test_run_mcem_trace(rng):
    cfg = McemConfig(n_iters=3, mh_steps=4, burn_in=2, nmf_rank=2)
    trace = []
    run_mcem(tiny_state(rng, cfg=cfg), tiny_checkpoint(), cfg, trace)
    assert [t["iter"] for t in trace] == [0, 1, 2]
    assert all(np.isfinite(t["objective"]) for t in trace)


def test_enhance_clean_input(gt):
    u = gt.utterance(500, 60)
    clean = u["wave"].samples
    tiny_noise = 1e-4 * clean.std() * np.random.default_rng(0).standard_normal(clean.size)
    est = enhance(Waveform(clean + tiny_noise), VisualFrame(u["lip"], u["identity"]), gt.checkpoint(),
                  McemConfig(n_iters=5))
    assert len(est) == len(clean)
    assert sdr(Waveform(clean[: len(est)]), est) >= 10.0


def test_enhance_deterministic_and_preconditions(gt):
    u = gt.utterance(501, 30)
    feats = VisualFeatures(u["lip"], u["identity"])
    cfg = McemConfig(n_iters=2, mh_steps=6, burn_in=3)
    a = enhance(u["wave"], feats, gt.checkpoint(), cfg)
    b = enhance(u["wave"], feats, gt.checkpoint(), cfg)
    assert a.samples.tobytes() == b.samples.tobytes()
    with pytest.raises(InferenceError, match="use separate"):
        enhance(u["wave"], [feats, feats], gt.checkpoint(), cfg)


def test_separate_preconditions_and_permutation(gt):
    a, b = gt.utterance(600, 30), gt.utterance(601, 30)
    mix = Waveform(a["wave"].samples + b["wave"].samples)
    fa, fb = VisualFrame(a["lip"], a["identity"]), VisualFrame(b["lip"], b["identity"])
    cfg = McemConfig(n_iters=2, mh_steps=6, burn_in=3)
    with pytest.raises(InferenceError, match="use enhance"):
        separate(mix, [fa], gt.checkpoint(), cfg)
    ab = separate(mix, [fa, fb], gt.checkpoint(), cfg)
    ba = separate(mix, [fb, fa], gt.checkpoint(), cfg)
    assert len(ab) == 2
    np.testing.assert_array_equal(ab[0].samples, ba[1].samples)
    np.testing.assert_array_equal(ab[1].samples, ba[0].samples)
