"""Acceptance criteria 1-10.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.
"""
import csv
import struct
import time

import numpy as np
import pytest

from univoice import autodiff as ad
from univoice.checkpoint import Checkpoint, from_bytes, to_bytes
from univoice.config import RunConfig
from univoice.data import (
    FeatureFile, GroundTruth, SynthConfig, mix, nmf_noise, parse_uvft, read_manifest, read_wav, scaled_interferer,
    synth_dataset, uvft_bytes, write_wav,
)
from univoice.dsp import ComplexSpectrogram, StftConfig, Waveform, interior_slice, istft, power_spectrum, stft
from univoice.errors import BadMagicError, TruncatedError
from univoice.inference import McemConfig, NoiseNMF, enhance, init_mcem, m_step, mixture_objective, separate
from univoice.metrics import SDR_CAP_DB, sdr, stoi
from univoice.model import LatentGaussian, ModelConfig, VisualFrame, init_params, loss, w2_diag_gauss
from univoice.training import FrameSet, TrainConfig, load_frames, run_training

DESK_MODEL = {"hidden": 64, "latent_dim": 8}


@pytest.fixture(scope="module")
def gt():
    return GroundTruth(SynthConfig())


@pytest.mark.criterion(1, "gradient check on the full loss")
def test_criterion_1_gradient_check():
    cfg = ModelConfig(freq_bins=8, latent_dim=4, lip_dim=3, id_dim=2, hidden=16)
    rng = np.random.default_rng(0)
    P = init_params(cfg, 0)
    for k in P:
        if k.endswith(".b"):
            P[k] = rng.normal(0, 0.3, P[k].shape)
    power, vis, eps = rng.exponential(size=(4, 8)), rng.standard_normal((4, 5)), rng.standard_normal((4, 4))
    buffers = {k: P.pop(k) for k in ("enc.input_shift", "enc.input_scale")}
    start = time.perf_counter()
    err = ad.grad_check(lambda g, t: loss(power, vis, {**t, **buffers}, cfg, eps), P)
    assert err < 1e-5
    assert time.perf_counter() - start < 10


def _sorted_sample_w2(mq, sq, mp, sp, n, rng):
    """Monotone coupling of samples: the optimal 1-D transport plan."""
    a = np.sort(rng.normal(mq, sq, n))
    b = np.sort(rng.normal(mp, sp, n))
    return float(np.mean((a - b) ** 2))


@pytest.mark.criterion(2, "closed-form W2 against sample transport")
def test_criterion_2_wasserstein():
    rng = np.random.default_rng(2)
    for _ in range(20):
        d = int(rng.integers(1, 5))
        mq, mp = rng.normal(0, 2, d), rng.normal(0, 2, d)
        sq, sp = rng.uniform(0.2, 3, d), rng.uniform(0.2, 3, d)
        closed = float(w2_diag_gauss(LatentGaussian(ad.constant(mq[None]), ad.constant(sq[None])),
                                     LatentGaussian(ad.constant(mp[None]), ad.constant(sp[None]))).value[0])
        sampled = sum(_sorted_sample_w2(mq[j], sq[j], mp[j], sp[j], 10**6, rng) for j in range(d))
        assert abs(closed - sampled) / closed < 0.01
    hand = w2_diag_gauss(LatentGaussian(ad.constant([[1.0, 2.0]]), ad.constant([[2.0, 3.0]])),
                         LatentGaussian(ad.constant([[0.0, 0.0]]), ad.constant([[1.0, 1.0]])))
    assert float(hand.value[0]) == 10.0


@pytest.mark.criterion(3, "STFT round trip and Parseval")
def test_criterion_3_stft():
    rng = np.random.default_rng(3)
    cfg = StftConfig()
    weights = np.full(cfg.n_bins, 2.0)
    weights[[0, -1]] = 1.0
    for _ in range(100):
        x = rng.standard_normal(int(rng.integers(4096, 16385)))
        spec = stft(Waveform(x), cfg)
        sl = interior_slice(cfg, spec.n_frames)
        y = istft(spec).samples
        assert 10 * np.log10(np.sum(x[sl] ** 2) / np.sum((x[sl] - y[sl]) ** 2)) > 100
        frames = np.lib.stride_tricks.sliding_window_view(x, cfg.fft_size)[:: cfg.hop][: spec.n_frames]
        direct = np.sum((frames * cfg.analysis_window()) ** 2, axis=1)
        spectral = (weights[:, None] * power_spectrum(spec)).sum(axis=0) / cfg.fft_size
        assert np.max(np.abs(spectral - direct) / direct) < 1e-10


@pytest.mark.slow
@pytest.mark.criterion(4, "MCEM enhancement with the ground-truth decoder")
def test_criterion_4_enhancement(gt):
    start = time.perf_counter()
    improved = []
    for i in range(10):
        u = gt.utterance(1000 + i, 150)
        clean = u["wave"]
        noisy = mix(clean, nmf_noise(len(clean), np.random.default_rng(i)), 0.0)
        est = enhance(noisy, VisualFrame(u["lip"], u["identity"]), gt.checkpoint(), McemConfig())
        n = len(est)
        ref = Waveform(clean.samples[:n])
        gain = sdr(ref, est) - sdr(ref, Waveform(noisy.samples[:n]))
        print(f"utterance {i}: SDR improvement {gain:.2f} dB")
        improved.append(gain >= 3.0)
    assert sum(improved) >= 9
    assert time.perf_counter() - start < 600


@pytest.mark.criterion(5, "M-step monotonicity")
def test_criterion_5_m_step_monotone():
    stft_cfg = StftConfig(fft_size=16, hop=4)
    cfg = ModelConfig(freq_bins=9, latent_dim=2, lip_dim=3, id_dim=2, hidden=4)
    ckpt = Checkpoint(cfg, init_params(cfg, 0))
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n_spk, T = int(rng.integers(1, 4)), 20
        bins = (rng.standard_normal((9, T)) + 1j * rng.standard_normal((9, T))) * rng.exponential(1, (9, 1))
        state = init_mcem(ComplexSpectrogram(bins, stft_cfg), [rng.standard_normal((T, 5)) for _ in range(n_spk)],
                          ckpt, McemConfig(nmf_rank=3))
        state.retained_var = [rng.exponential(1, (n_spk, 9, T)) for _ in range(5)]
        state.noise = NoiseNMF(rng.exponential(1, (9, 3)), rng.exponential(1, (3, T)))
        state.gains = rng.uniform(0.2, 3, (n_spk, T))
        before = mixture_objective(state)
        for _ in range(20):
            m_step(state)
            after = mixture_objective(state)
            assert after <= before + 1e-9 * abs(before)
            before = after


@pytest.mark.slow
@pytest.mark.criterion(6, "two-speaker separation")
def test_criterion_6_separation(gt):
    gains = []
    for i in range(3):
        a, b = gt.utterance(2000 + 2 * i, 150), gt.utterance(2001 + 2 * i, 150)
        s1 = a["wave"].samples
        s2 = scaled_interferer(a["wave"], b["wave"], 0.0)
        mixture = Waveform(s1 + s2)
        fa, fb = VisualFrame(a["lip"], a["identity"]), VisualFrame(b["lip"], b["identity"])
        outs = separate(mixture, [fa, fb], gt.checkpoint(), McemConfig())
        n = len(outs[0])
        for ref, est in zip((s1, s2), outs):
            r = Waveform(ref[:n])
            gains.append(sdr(r, est) - sdr(r, Waveform(mixture.samples[:n])))
        if i == 0:
            swapped = separate(mixture, [fb, fa], gt.checkpoint(), McemConfig())
            assert swapped[0].samples.tobytes() == outs[1].samples.tobytes()
            assert swapped[1].samples.tobytes() == outs[0].samples.tobytes()
    print("per-speaker SDR improvements", np.round(gains, 2))
    assert np.mean(gains) >= 3.0


@pytest.mark.slow
@pytest.mark.criterion(7, "training sanity")
def test_criterion_7_training(tmp_path):
    manifest = synth_dataset(SynthConfig(n_utts=200, frames_per_utt=50), tmp_path / "data")
    frames = load_frames(manifest.split("train"))
    synth = SynthConfig()
    model = ModelConfig(freq_bins=513, lip_dim=synth.lip_dim, id_dim=synth.id_dim, **DESK_MODEL)
    tc = TrainConfig(learning_rate=1e-3, max_epochs=20, patience=20, seed=1)
    a = run_training(frames, model, tc)
    b = run_training(frames, model, tc)
    assert a.history[-1]["train_loss"] < a.initial_train_loss
    assert to_bytes(a.checkpoint) == to_bytes(b.checkpoint)

    n, F = 200, 17
    silent = FrameSet(np.zeros((n, F)), np.zeros((n, 6)), np.repeat(np.arange(10), n // 10),
                      [f"u{i}" for i in range(10)])
    flat = run_training(silent, ModelConfig(freq_bins=F, latent_dim=2, lip_dim=4, id_dim=2, hidden=4),
                        TrainConfig(learning_rate=1e-3, batch_size=50, max_epochs=50, patience=2))
    assert flat.stopped_early and len(flat.history) - 1 < 50


@pytest.mark.slow
@pytest.mark.criterion(8, "ablation direction")
def test_criterion_8_ablation(tmp_path):
    from univoice.ablation import run_ablation

    synth_dataset(SynthConfig(n_utts=200), tmp_path / "data")
    cfg = RunConfig.from_dict({
        "model": DESK_MODEL,
        "train": {"learning_rate": 1e-3, "max_epochs": 40, "patience": 5},
        "mcem": {"n_iters": 20},
    })
    result = run_ablation(read_manifest(tmp_path / "data" / "manifest.json"), cfg, tmp_path / "out")
    for v in result.scores:
        print(f"{v}: sdr {result.mean(v, 'sdr'):.2f} collapsed {result.activity[v].n_collapsed}")
    with open(tmp_path / "out" / "checks.csv", newline="") as fh:
        rows = {r["check"]: r["result"] for r in csv.DictReader(fh)}
    assert rows == {"no_visual_sdr_below_full": "pass", "kl_collapsed_at_least_full": "pass"}
    assert all(result.checks.values())


@pytest.mark.criterion(9, "metric self-tests")
def test_criterion_9_metrics(gt):
    rng = np.random.default_rng(9)
    ref = rng.standard_normal(4000)
    err = rng.standard_normal(4000)
    err *= np.sqrt(0.1 * np.dot(ref, ref) / np.dot(err, err))
    assert sdr(Waveform(ref), Waveform(ref + err)) == pytest.approx(10.0, abs=1e-12)
    assert sdr(Waveform(ref), Waveform(np.zeros_like(ref))) == 0.0
    assert sdr(Waveform(ref), Waveform(ref)) == SDR_CAP_DB

    x = gt.utterance(0, 200)["wave"]
    assert stoi(x, x) == pytest.approx(1.0, abs=1e-6)
    noisy = Waveform(x.samples + rng.standard_normal(len(x)) * x.samples.std())
    base = stoi(x, noisy)
    assert stoi(x, Waveform(2 * x.samples)) == pytest.approx(1.0, abs=1e-6)
    assert stoi(x, Waveform(3.7 * noisy.samples)) == pytest.approx(base, abs=1e-6)
    assert stoi(Waveform(0.2 * x.samples), noisy) == pytest.approx(base, abs=1e-6)
    scores = [stoi(w, Waveform(rng.standard_normal(len(w))))
              for w in (gt.utterance(100 + i, 200)["wave"] for i in range(20))]
    print(f"stoi against white noise: mean {np.mean(scores):.3f} max {np.max(scores):.3f}")
    assert np.mean(scores) < 0.2


@pytest.mark.criterion(10, "format robustness")
def test_criterion_10_formats(tmp_path):
    rng = np.random.default_rng(10)
    feats = FeatureFile(rng.standard_normal((12, 5)))
    blob = uvft_bytes(feats)
    assert parse_uvft(blob).frames.tobytes() == feats.frames.tobytes()
    with pytest.raises(BadMagicError):
        parse_uvft(b"XXXX" + blob[4:])
    with pytest.raises(TruncatedError):
        parse_uvft(blob[:-4])

    cfg = ModelConfig(freq_bins=9, latent_dim=2, lip_dim=3, id_dim=2, hidden=5)
    ckpt = Checkpoint(cfg, init_params(cfg, 1), epoch=4, best_val_loss=0.5)
    cblob = to_bytes(ckpt)
    assert from_bytes(cblob) == ckpt and to_bytes(from_bytes(cblob)) == cblob
    with pytest.raises(BadMagicError):
        from_bytes(b"XXXX" + cblob[4:])
    with pytest.raises(TruncatedError):
        from_bytes(cblob[:-4])
    assert struct.unpack_from("<I", cblob, 4)[0] == 1

    x = rng.uniform(-1, 1, 8000)
    write_wav(Waveform(x), tmp_path / "x.wav")
    assert np.max(np.abs(read_wav(tmp_path / "x.wav").samples - x)) <= 1 / 32768
