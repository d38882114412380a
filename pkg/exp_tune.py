"""Scratch experiment: toy-scale full vs w/o-softmax across seeds (not shipped)."""
import dataclasses
import sys
import tempfile
import time

import numpy as np

from mtgan import evalkit
from mtgan.features import make_synthetic_corpus
from mtgan.trainer import TrainConfig, train


def run(noise, jitter, epochs, base_ch, embed, seeds, lr_scale=1.0, n_formants=4, reduction="sum"):
    fs = make_synthetic_corpus(20, 10, seed=7, noise_scale=noise, jitter=jitter, n_formants=n_formants)
    train_fs, hold = evalkit.split_speakers(fs, 5, seed=0)
    wins = 0
    for seed in seeds:
        base = TrainConfig(
            n_speakers=10, anchors_per_speaker=2, positives_per_anchor=2,
            negative_classes=3, negatives_per_class=1,
            embed_dim=embed, base_channels=base_ch, batch_size=64,
            epochs=epochs, seed=seed, triplet_reduction=reduction,
            lr_encoder=1e-3 * lr_scale, lr_classifier=1e-3 * lr_scale,
        )
        results = {}
        for name, ov in [("full", {}), ("wos", {"use_softmax": False})]:
            cfg = dataclasses.replace(base, **ov)
            t0 = time.perf_counter()
            with tempfile.TemporaryDirectory() as d:
                tr = train(train_fs, cfg, d)
            eer, acc, _ = evalkit.evaluate_encoder(tr.bundle.encoder, hold, seed=0)
            results[name] = (eer, acc, time.perf_counter() - t0)
        f, w = results["full"], results["wos"]
        win = f[0] < w[0]
        wins += win
        print(
            f"  seed {seed}: full EER={f[0]*100:5.1f}% wos EER={w[0]*100:5.1f}% "
            f"{'WIN' if win else 'tie/loss'}  ({f[2]:.0f}s+{w[2]:.0f}s)",
            flush=True,
        )
    print(f"=> noise={noise} jitter={jitter} epochs={epochs} ch={base_ch} embed={embed}: {wins}/{len(seeds)} wins")


if __name__ == "__main__":
    args = sys.argv[1:]
    noise = float(args[0]) if args else 2.0
    jitter = float(args[1]) if len(args) > 1 else 3.0
    epochs = int(args[2]) if len(args) > 2 else 40
    base_ch = int(args[3]) if len(args) > 3 else 8
    embed = int(args[4]) if len(args) > 4 else 64
    seeds = [int(s) for s in (args[5].split(",") if len(args) > 5 else ["0", "1", "2"])]
    reduction = args[6] if len(args) > 6 else "sum"
    run(noise, jitter, epochs, base_ch, embed, seeds, reduction=reduction)
