"""Batch command-line surface tying the pipeline together.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
All randomness is controlled by --seed (or the MTGAN_SEED environment
variable as a fallback).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalkit
from . import features as feats
from . import trainer as trainer_mod
from .trainer import ConfigError, TrainConfig

log = logging.getLogger(__name__)

ABLATION_FLAGS = {"gan": "use_gan", "softmax": "use_softmax", "triplet": "use_triplet"}


def _resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("MTGAN_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"MTGAN_SEED must be an integer, got {env!r}") from exc
    return None


def _load_config(args) -> TrainConfig:
    config = TrainConfig.from_file(args.config)
    seed = _resolve_seed(args)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    return config


def print_report(headers: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    print("  ".join("-" * w for w in widths))
    for row in rows:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)))


def cmd_synth(args) -> int:
    seed = _resolve_seed(args)
    fs = feats.make_synthetic_corpus(args.speakers, args.utts, seed if seed is not None else 0)
    feats.save_features(fs, args.output)
    print(f"wrote {len(fs.slices)} slices / {fs.n_classes} speakers to {args.output}")
    return 0


def cmd_extract(args) -> int:
    utts = feats.read_wav_tree(args.input)
    fs = feats.extract_features(utts, slice_seconds=args.slice_seconds, hop_seconds=args.hop_seconds)
    feats.save_features(fs, args.output)
    print(f"wrote {len(fs.slices)} slices / {fs.n_classes} speakers to {args.output}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    fs = feats.load_features(args.input)
    t = trainer_mod.train(fs, config, args.output)
    last = t.state.history[-1]
    print(f"trained {t.state.step} steps; final total loss {last.total:.6g}")
    print(f"checkpoint: {t.last_checkpoint}")
    return 0


def cmd_enroll(args) -> int:
    bundle, _, _ = trainer_mod.load_checkpoint(args.model)
    fs = feats.load_features(args.input)
    models = [
        evalkit.enroll(bundle.encoder, [fs.slices[i] for i in idx], speaker_id=spk)
        for spk, idx in sorted(fs.by_speaker().items())
        if idx
    ]
    evalkit.save_models(models, args.output)
    print(f"enrolled {len(models)} speakers to {args.output}")
    return 0


def cmd_score(args) -> int:
    bundle, _, _ = trainer_mod.load_checkpoint(args.model)
    fs = feats.load_features(args.input)
    if args.models:
        models = evalkit.load_models(args.models)
        trials = evalkit.build_trials(bundle.encoder, models, fs.slices)
        eer, _ = evalkit.compute_eer(trials)
        acc, _ = evalkit.compute_accuracy(trials)
    else:
        seed = _resolve_seed(args)
        eer, acc, trials = evalkit.evaluate_encoder(
            bundle.encoder,
            fs,
            n_enroll=args.n_enroll,
            n_test=args.n_test,
            seed=seed if seed is not None else 0,
        )
    if args.output:
        evalkit.save_trials_csv(trials, args.output)
    print(f"EER={eer * 100:.2f}%, ACC={acc * 100:.2f}%")
    return 0


def cmd_det(args) -> int:
    trials = evalkit.load_trials_csv(args.input)
    det = evalkit.det_curve(trials, n_points=args.points)
    script = evalkit.save_det(det, args.output)
    print(f"wrote {len(det.far)} operating points to {args.output} (plot: {script})")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    fs = feats.load_features(args.input)
    dims = [int(d) for d in args.dims.split(",") if d.strip()]
    if not dims:
        raise ConfigError("--dims must list at least one dimension")
    rows = evalkit.embedding_dim_sweep(
        fs,
        dims,
        config,
        args.output_dir,
        n_holdout=args.holdout_speakers,
        n_enroll=args.n_enroll,
        n_test=args.n_test,
        split_seed=config.seed,
    )
    print_report(["dim", "EER"], [[str(d), f"{e * 100:.2f}%"] for d, e in rows])
    if args.output:
        with open(args.output, "w") as fh:
            fh.write("dim,eer\n")
            for d, e in rows:
                fh.write(f"{d},{repr(e)}\n")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    drops = [d.strip() for d in args.drop.split(",") if d.strip()]
    bad = [d for d in drops if d not in ABLATION_FLAGS]
    if bad:
        raise ConfigError(f"unknown ablation(s): {', '.join(bad)} (choose from {sorted(ABLATION_FLAGS)})")
    fs = feats.load_features(args.input)
    train_fs, holdout = evalkit.split_speakers(fs, args.holdout_speakers, seed=config.seed)
    out_root = Path(args.output_dir)
    rows = []
    conditions = [(f"w/o {d}", {ABLATION_FLAGS[d]: False}) for d in drops]
    if args.with_full:
        conditions.append(("full", {}))
    for name, overrides in conditions:
        cfg = dataclasses.replace(config, **overrides)
        t = trainer_mod.train(train_fs, cfg, out_root / name.replace("/", "_").replace(" ", "_"))
        eer, acc, _ = evalkit.evaluate_encoder(
            t.bundle.encoder, holdout, n_enroll=args.n_enroll, n_test=args.n_test, seed=config.seed
        )
        rows.append([name, f"{eer * 100:.2f}%", f"{acc * 100:.2f}%"])
    print_report(["condition", "EER", "ACC"], rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtgan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic corpus")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utts", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract features from <speaker>/<utt>.wav trees")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--slice-seconds", type=float, default=feats.DEFAULT_SLICE_SECONDS)
    p.add_argument("--hop-seconds", type=float, default=feats.DEFAULT_SLICE_SECONDS)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train on a feature file")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enroll", help="build speaker models from enrollment features")
    p.add_argument("-m", "--model", required=True, help="checkpoint file")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("score", help="score trials and report EER/ACC")
    p.add_argument("-m", "--model", required=True, help="checkpoint file")
    p.add_argument("-i", "--input", required=True, help="test (or eval) feature file")
    p.add_argument("--models", default=None, help="model file from `enroll`")
    p.add_argument("--n-enroll", type=int, default=3, help="per-speaker enrollment utterances")
    p.add_argument("--n-test", type=int, default=7, help="per-speaker test utterances")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", default=None, help="write trials CSV here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("det", help="DET curve from a trials CSV")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--points", type=int, default=0, help="subsample to this many points")
    p.set_defaults(func=cmd_det)

    p = sub.add_parser("sweep", help="train/evaluate across embedding dimensions")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--dims", required=True, help="comma-separated, e.g. 64,128,256,512")
    p.add_argument("--holdout-speakers", type=int, default=5)
    p.add_argument("--n-enroll", type=int, default=3)
    p.add_argument("--n-test", type=int, default=7)
    p.add_argument("--output-dir", default="sweep_runs")
    p.add_argument("-o", "--output", default=None, help="write dim,eer CSV here")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="re-train with modules disabled and compare")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--drop", required=True, help="comma-separated from gan,softmax,triplet")
    p.add_argument("--with-full", action="store_true", help="append the unablated row")
    p.add_argument("--holdout-speakers", type=int, default=5)
    p.add_argument("--n-enroll", type=int, default=3)
    p.add_argument("--n-test", type=int, default=7)
    p.add_argument("--output-dir", default="ablate_runs")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mtgan: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures get one diagnostic line
        print(f"mtgan: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
