"""Command-line interface: ``univoice <subcommand> ...``.

Errors are reported as a single ``error: <kind>: <message>`` line on stderr.
Exit status is 0 on success, 1 for data/file/runtime errors and 2 for usage
errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import VisualFeatures, mix, read_manifest, read_wav, synth_dataset, write_wav
from .dsp import power_spectrum, stft
from .errors import UniVoiceError
from .inference import enhance, separate
from .metrics import METRICS, evaluate

logger = logging.getLogger("univoice")


def _config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None)).with_seed(args.seed)


def cmd_synth(args):
    cfg = _config(args)
    manifest = synth_dataset(cfg.synth, args.out)
    print(f"wrote {len(manifest)} utterances to {args.out}")


def cmd_train(args):
    from .training import load_frames, run_training

    cfg = _config(args)
    manifest = read_manifest(args.manifest)
    train_part = manifest.split("train") or manifest
    frames = load_frames(train_part, cfg.stft)
    lip_dim = train_part.load(train_part[0])[1].lip.shape[1]
    model_cfg = cfg.model_for_data(frames.power.shape[1], lip_dim, frames.visual.shape[1] - lip_dim)
    run = run_training(frames, model_cfg, cfg.train, cfg.stft)
    save_checkpoint(run.checkpoint, args.out)
    print(f"epoch {run.checkpoint.epoch} best validation loss {run.checkpoint.best_val_loss:.6f}")


def cmd_enhance(args):
    cfg = _config(args)
    ckpt = load_checkpoint(args.ckpt)
    feats = VisualFeatures.from_files(args.lip, args.ident)
    out = enhance(read_wav(args.wav), feats, ckpt, cfg.mcem, cfg.stft)
    write_wav(out, args.out)


def _speaker(spec: str) -> tuple[str, str]:
    parts = spec.split(",")
    if len(parts) != 2 or not all(parts):
        raise argparse.ArgumentTypeError(f"--speaker expects LIP.uvft,IDENT.uvft, got {spec!r}")
    return parts[0], parts[1]


def cmd_separate(args):
    cfg = _config(args)
    if len(args.speaker) < 2:
        raise UniVoiceError("separate needs at least two --speaker streams; use enhance for a single speaker")
    ckpt = load_checkpoint(args.ckpt)
    feats = [VisualFeatures.from_files(lip, ident) for lip, ident in args.speaker]
    outs = separate(read_wav(args.wav), feats, ckpt, cfg.mcem, cfg.stft)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k, wav in enumerate(outs):
        write_wav(wav, out_dir / f"speaker{k}.wav")


def cmd_mix(args):
    write_wav(mix(read_wav(args.clean), read_wav(args.noise), args.snr), args.out)


def cmd_eval(args):
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in names if m not in METRICS]
    if unknown:
        raise UniVoiceError(f"unknown metric(s) {', '.join(unknown)}")
    report = evaluate(read_wav(args.ref), read_wav(args.est), names, utt_id=Path(args.est).stem)
    fh = open(args.csv, "w", newline="") if args.csv else nullcontext(sys.stdout)
    with fh as stream:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["utt_id", "metric", "value"])
        for utt_id, metric, value in report.rows:
            w.writerow([utt_id, metric, f"{value:.6f}"])


def cmd_ablate(args):
    from .ablation import run_ablation

    cfg = _config(args)
    result = run_ablation(read_manifest(args.manifest), cfg, args.out)
    for name, ok in result.checks.items():
        print(f"{name}: {'pass' if ok else 'fail'}")


def cmd_dump_spec(args):
    cfg = _config(args)
    wav = read_wav(args.wav)
    spec = stft(wav, cfg.stft)
    mag = np.sqrt(power_spectrum(spec))
    freqs = np.arange(spec.bins.shape[0]) * wav.sample_rate / cfg.stft.fft_size
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "time_s"] + [f"{f:.2f}" for f in freqs])
        for n in range(mag.shape[1]):
            t = n * cfg.stft.hop / wav.sample_rate
            w.writerow([n, f"{t:.6f}"] + [f"{v:.6e}" for v in mag[:, n]])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="univoice", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("synth", cmd_synth, "write a synthetic audio-visual corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a model on a manifest")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("enhance", cmd_enhance, "enhance one speaker")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--lip", required=True)
    p.add_argument("--ident", required=True)
    p.add_argument("--out", required=True)

    p = add("separate", cmd_separate, "separate speakers by their visual streams")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--speaker", type=_speaker, action="append", default=[], metavar="LIP,IDENT")
    p.add_argument("--out-dir", required=True)

    p = add("mix", cmd_mix, "mix a clean signal with an interferer at a given SNR")
    p.add_argument("--clean", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--snr", type=float, required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score an estimate against a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--metrics", default="sdr,stoi")
    p.add_argument("--csv")

    p = add("ablate", cmd_ablate, "train and compare the ablation variants")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("dump-spec", cmd_dump_spec, "write a magnitude spectrogram as CSV")
    p.add_argument("--config")
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    return parser


def _thread_limit():
    value = os.environ.get("UNIVOICE_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            args.func(args)
    except (OSError, UniVoiceError, ValueError) as exc:
        kind = type(exc).__name__
        message = " ".join(str(exc).split())
        print(f"error: {kind}: {message}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
