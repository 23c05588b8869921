"""Ablation of the visual prior and the Wasserstein regularizer.

Three models are trained on the same frames: ``full`` (Wasserstein, visual),
``kl`` (KL regularizer with the trade-off weight scaled by 100) and
``no_visual`` (standard normal prior, no visual branches). Each enhances the
same held-out noisy mixtures, and each gets a latent-activity report.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Manifest, mix, nmf_noise
from .dsp import Waveform
from .inference import enhance
from .metrics import sdr, stoi
from .training import LatentActivity, latent_activity, load_frames, train

logger = logging.getLogger(__name__)

KL_LAMBDA_SCALE = 100.0
VARIANTS = ("full", "kl", "no_visual")


@dataclass
class AblationResult:
    scores: dict[str, dict[str, list[float]]]   # variant -> metric -> per-utterance values
    activity: dict[str, LatentActivity]
    checks: dict[str, bool]

    def mean(self, variant: str, metric: str) -> float:
        return float(np.mean(self.scores[variant][metric]))


def variant_configs(cfg: RunConfig, freq_bins: int, lip_dim: int, id_dim: int):
    base = cfg.model_for_data(freq_bins, lip_dim, id_dim)
    base = replace(base, regularizer="wasserstein", use_visual=True)
    return {
        "full": base,
        "kl": replace(base, regularizer="kl", lam=base.lam * KL_LAMBDA_SCALE),
        "no_visual": replace(base, use_visual=False),
    }


def held_out_mixtures(manifest: Manifest, seed: int, snr_db: float = 0.0):
    """Noisy versions of the held-out utterances, with NMF-structured noise."""
    test = manifest.split("test")
    if not test:
        raise ValueError("manifest has no utterances tagged 'test'")
    for i, rec in enumerate(test):
        clean, feats = manifest.load(rec)
        noise = nmf_noise(len(clean), np.random.default_rng([seed, 0xAB, i]))
        yield rec.id, clean, feats, mix(clean, noise, snr_db)


def run_ablation(manifest: Manifest, cfg: RunConfig, out_dir) -> AblationResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = load_frames(manifest.split("train"), cfg.stft)
    lip_dim = manifest.load(manifest[0])[1].lip.shape[1]
    configs = variant_configs(cfg, frames.power.shape[1], lip_dim, frames.visual.shape[1] - lip_dim)

    checkpoints, activity = {}, {}
    for name, model_cfg in configs.items():
        logger.info("training variant %s", name)
        ckpt = train(frames, model_cfg, cfg.train, cfg.stft)
        save_checkpoint(ckpt, out / f"{name}.uvck")
        checkpoints[name] = ckpt
        activity[name] = latent_activity(ckpt, frames)
        _write_activity(activity[name], out / f"latent_activity_{name}.csv")

    scores = {name: {"sdr": [], "stoi": [], "sdr_in": []} for name in configs}
    rows = []
    for utt_id, clean, feats, noisy in held_out_mixtures(manifest, cfg.mcem.seed):
        for name, ckpt in checkpoints.items():
            est = enhance(noisy, feats, ckpt, cfg.mcem, cfg.stft)
            n = len(est)
            ref = Waveform(clean.samples[:n], clean.sample_rate)
            values = {
                "sdr": sdr(ref, est),
                "stoi": stoi(ref, est),
                "sdr_in": sdr(ref, Waveform(noisy.samples[:n], noisy.sample_rate)),
            }
            for metric, value in values.items():
                scores[name][metric].append(value)
                rows.append((name, utt_id, metric, value))

    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "utt_id", "metric", "value"])
        for name, utt_id, metric, value in rows:
            w.writerow([name, utt_id, metric, f"{value:.6f}"])
        for name in configs:
            for metric in ("sdr", "stoi"):
                w.writerow([name, "mean", metric, f"{np.mean(scores[name][metric]):.6f}"])

    result = AblationResult(scores, activity, {})
    result.checks = {
        "no_visual_sdr_below_full": result.mean("no_visual", "sdr") < result.mean("full", "sdr"),
        "kl_collapsed_at_least_full": activity["kl"].n_collapsed >= activity["full"].n_collapsed,
    }
    with open(out / "checks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "lhs", "rhs", "result"])
        w.writerow([
            "no_visual_sdr_below_full",
            f"{result.mean('no_visual', 'sdr'):.6f}", f"{result.mean('full', 'sdr'):.6f}",
            "pass" if result.checks["no_visual_sdr_below_full"] else "fail",
        ])
        w.writerow([
            "kl_collapsed_at_least_full",
            activity["kl"].n_collapsed, activity["full"].n_collapsed,
            "pass" if result.checks["kl_collapsed_at_least_full"] else "fail",
        ])
    return result


def _write_activity(report: LatentActivity, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", "mean_reg", "var_of_mean", "collapsed"])
        for row in report.rows():
            w.writerow([row["dim"], f"{row['mean_reg']:.6g}", f"{row['var_of_mean']:.6g}", int(row["collapsed"])])
