"""Enrollment, cosine trial scoring, EER/accuracy, and DET curves.

Scores are cosine similarities (higher = more likely the same speaker) and
the accept rule everywhere is score >= threshold. Metric computations are
pure functions over immutable trial data.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import nets
from .features import FbankSlice, FeatureSet

log = logging.getLogger(__name__)

_EMBED_CHUNK = 256


class EvalError(ValueError):
    """Trial data unusable for the requested metric."""


@dataclass
class SpeakerModel:
    """Unit-norm centroid of a speaker's enrollment embeddings."""

    speaker_id: str
    centroid: np.ndarray
    n_enroll: int

    def __post_init__(self) -> None:
        self.centroid = np.asarray(self.centroid, dtype=np.float64)
        if self.n_enroll < 1:
            raise EvalError(f"n_enroll must be >= 1, got {self.n_enroll}")


@dataclass
class TrialScoreSet:
    """Scored verification trials: per trial a score and a same-speaker flag."""

    scores: np.ndarray
    targets: np.ndarray
    model_ids: list[str] | None = None
    test_ids: list[str] | None = None

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=bool)
        if self.scores.shape != self.targets.shape or self.scores.ndim != 1:
            raise EvalError(
                f"scores/targets must be matching 1-D arrays, got {self.scores.shape} vs {self.targets.shape}"
            )

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def target_scores(self) -> np.ndarray:
        return self.scores[self.targets]

    @property
    def nontarget_scores(self) -> np.ndarray:
        return self.scores[~self.targets]


@dataclass
class DetCurve:
    """Operating points of the detection error trade-off, sorted by threshold."""

    far: np.ndarray
    frr: np.ndarray
    thresholds: np.ndarray


def _normalize_rows(e: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    return e / np.maximum(norms, 1e-12)


def embed_slices(encoder, slices: Sequence[FbankSlice] | np.ndarray) -> np.ndarray:
    """Inference-mode embeddings for a batch of slices, as float64 rows.

    `encoder` may be an EncoderNet or any callable mapping an (N, H, W) array
    to (N, D) embeddings.
    """
    if isinstance(slices, np.ndarray):
        mats = slices if slices.ndim == 3 else slices[None]
    else:
        mats = np.stack([s.matrix for s in slices])
    if isinstance(encoder, torch.nn.Module):
        chunks = [
            nets.encode(encoder, mats[i : i + _EMBED_CHUNK]).detach().cpu().numpy()
            for i in range(0, len(mats), _EMBED_CHUNK)
        ]
        emb = np.concatenate(chunks)
    else:
        emb = np.asarray(encoder(mats))
    return emb.astype(np.float64)


def pool_embedding(embeddings: np.ndarray) -> np.ndarray:
    """Mean of embedding rows, renormalized to unit length."""
    return _normalize_rows(np.asarray(embeddings, dtype=np.float64).mean(axis=0))


def enroll(encoder, slices: Sequence[FbankSlice], speaker_id: str | None = None) -> SpeakerModel:
    """Build a speaker model from enrollment slices: normalized mean embedding."""
    if not len(slices):
        raise EvalError("enrollment needs at least one slice")
    if speaker_id is None:
        speaker_id = slices[0].speaker_id
    emb = embed_slices(encoder, slices)
    return SpeakerModel(speaker_id=speaker_id, centroid=pool_embedding(emb), n_enroll=len(slices))


def score_trial(model: SpeakerModel, test_embedding: np.ndarray) -> float:
    """Cosine similarity between the model centroid and a test embedding."""
    e = np.asarray(test_embedding, dtype=np.float64)
    return float(model.centroid @ _normalize_rows(e[None])[0])


def build_trials(
    encoder,
    models: Sequence[SpeakerModel],
    test_slices: Sequence[FbankSlice],
    *,
    pool_by_utterance: bool = True,
) -> TrialScoreSet:
    """Score every test entry against every model; target = speaker match.

    With pooling, the slices of one test utterance are averaged into a single
    embedding before scoring; otherwise each slice is its own trial entry.
    """
    if not models:
        raise EvalError("no speaker models to score against")
    if not test_slices:
        raise EvalError("no test slices to score")
    emb = embed_slices(encoder, test_slices)
    if pool_by_utterance:
        groups: dict[tuple[str, str], list[int]] = {}
        for i, s in enumerate(test_slices):
            groups.setdefault((s.speaker_id, s.utterance_id), []).append(i)
        entries = [
            (spk, utt, pool_embedding(emb[idx])) for (spk, utt), idx in sorted(groups.items())
        ]
    else:
        entries = [
            (s.speaker_id, f"{s.utterance_id}#{s.slice_index}", _normalize_rows(emb[i][None])[0])
            for i, s in enumerate(test_slices)
        ]
    scores, targets, model_ids, test_ids = [], [], [], []
    for model in models:
        for spk, test_id, e in entries:
            scores.append(float(model.centroid @ e))
            targets.append(spk == model.speaker_id)
            model_ids.append(model.speaker_id)
            test_ids.append(test_id)
    return TrialScoreSet(
        scores=np.asarray(scores), targets=np.asarray(targets), model_ids=model_ids, test_ids=test_ids
    )


def _sweep(trials: TrialScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FAR/FRR over thresholds -inf, every distinct score, +inf (accept if >= t)."""
    tar = np.sort(trials.target_scores)
    non = np.sort(trials.nontarget_scores)
    thresholds = np.concatenate([[-np.inf], np.unique(trials.scores), [np.inf]])
    far = (len(non) - np.searchsorted(non, thresholds, side="left")) / len(non)
    frr = np.searchsorted(tar, thresholds, side="left") / len(tar)
    return far, frr, thresholds


def _require_both_classes(trials: TrialScoreSet) -> None:
    if len(trials) == 0:
        raise EvalError("empty trial set")
    if not trials.targets.any():
        raise EvalError("trial set has no target trials")
    if trials.targets.all():
        raise EvalError("trial set has no non-target trials")


def compute_eer(trials: TrialScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Sweeps all distinct scores; when FAR and FRR do not meet exactly, the
    crossing is linearly interpolated between the two adjacent operating
    points. Warns when the result exceeds 0.5 (score orientation is likely
    inverted).
    """
    _require_both_classes(trials)
    far, frr, thresholds = _sweep(trials)
    diff = far - frr  # non-increasing in the threshold
    idx = int(np.argmax(diff <= 0))
    if diff[idx] == 0:
        eer, thr = float(far[idx]), float(thresholds[idx])
    else:
        lam = diff[idx - 1] / (diff[idx - 1] - diff[idx])
        eer = float(far[idx - 1] + lam * (far[idx] - far[idx - 1]))
        lo, hi = thresholds[idx - 1], thresholds[idx]
        thr = float(lo + lam * (hi - lo)) if np.isfinite(lo) and np.isfinite(hi) else float(
            lo if np.isfinite(lo) else hi
        )
    if eer > 0.5:
        warnings.warn(f"EER {eer:.3f} exceeds 0.5; scores look inverted (higher should mean target)")
    return eer, thr


def compute_accuracy(trials: TrialScoreSet) -> tuple[float, float]:
    """Best verification accuracy over all thresholds, ties toward the lower one.

    Candidates are every distinct score (accept if score >= threshold) plus a
    reject-all threshold just above the maximum score.
    """
    _require_both_classes(trials)
    tar = np.sort(trials.target_scores)
    non = np.sort(trials.nontarget_scores)
    candidates = np.unique(trials.scores)
    candidates = np.append(candidates, np.nextafter(candidates[-1], np.inf))
    correct = (len(tar) - np.searchsorted(tar, candidates, side="left")) + np.searchsorted(
        non, candidates, side="left"
    )
    best = int(np.argmax(correct))  # argmax takes the first (lowest) threshold on ties
    return float(correct[best] / len(trials)), float(candidates[best])


def det_curve(trials: TrialScoreSet, n_points: int = 0) -> DetCurve:
    """All operating points of the threshold sweep, optionally subsampled.

    Includes the extreme points (FAR=1, FRR=0) and (FAR=0, FRR=1); FAR is
    non-increasing and FRR non-decreasing along the curve.
    """
    _require_both_classes(trials)
    far, frr, thresholds = _sweep(trials)
    if n_points and n_points < len(far):
        keep = np.unique(np.linspace(0, len(far) - 1, n_points).round().astype(int))
        far, frr, thresholds = far[keep], frr[keep], thresholds[keep]
    return DetCurve(far=far, frr=frr, thresholds=thresholds)


def split_speakers(
    features: FeatureSet, n_holdout: int, seed: int
) -> tuple[FeatureSet, FeatureSet]:
    """Split a corpus into disjoint train / held-out speaker sets."""
    speakers = sorted(features.speaker_index)
    if not 0 < n_holdout < len(speakers):
        raise EvalError(f"cannot hold out {n_holdout} of {len(speakers)} speakers")
    rng = np.random.default_rng(seed)
    held = set(rng.choice(speakers, size=n_holdout, replace=False).tolist())
    train_idx = [i for i, s in enumerate(features.slices) if s.speaker_id not in held]
    hold_idx = [i for i, s in enumerate(features.slices) if s.speaker_id in held]
    return features.subset(train_idx), features.subset(hold_idx)


def enroll_test_split(
    holdout: FeatureSet, n_enroll: int = 3, n_test: int = 7, seed: int = 0
) -> tuple[dict[str, list[FbankSlice]], list[FbankSlice]]:
    """Per speaker, randomly pick n_enroll utterances to enroll and n_test to test."""
    rng = np.random.default_rng(seed)
    enroll_by_speaker: dict[str, list[FbankSlice]] = {}
    test_slices: list[FbankSlice] = []
    for spk in sorted(holdout.speaker_index):
        utts = sorted({s.utterance_id for s in holdout.slices if s.speaker_id == spk})
        if len(utts) < n_enroll + 1:
            raise EvalError(
                f"speaker {spk} has {len(utts)} utterances; need at least {n_enroll + 1}"
            )
        order = rng.permutation(len(utts))
        enroll_utts = {utts[i] for i in order[:n_enroll]}
        test_utts = {utts[i] for i in order[n_enroll : n_enroll + n_test]}
        enroll_by_speaker[spk] = [
            s for s in holdout.slices if s.speaker_id == spk and s.utterance_id in enroll_utts
        ]
        test_slices += [
            s for s in holdout.slices if s.speaker_id == spk and s.utterance_id in test_utts
        ]
    return enroll_by_speaker, test_slices


def evaluate_encoder(
    encoder,
    holdout: FeatureSet,
    *,
    n_enroll: int = 3,
    n_test: int = 7,
    seed: int = 0,
) -> tuple[float, float, TrialScoreSet]:
    """Full enroll/score protocol on held-out speakers: returns (EER, ACC, trials)."""
    enroll_map, test_slices = enroll_test_split(holdout, n_enroll=n_enroll, n_test=n_test, seed=seed)
    models = [enroll(encoder, slices, speaker_id=spk) for spk, slices in sorted(enroll_map.items())]
    trials = build_trials(encoder, models, test_slices)
    eer, _ = compute_eer(trials)
    acc, _ = compute_accuracy(trials)
    return eer, acc, trials


def embedding_dim_sweep(
    features: FeatureSet,
    dims: Sequence[int],
    config,
    workdir: str | Path,
    *,
    n_holdout: int = 5,
    n_enroll: int = 3,
    n_test: int = 7,
    split_seed: int = 0,
) -> list[tuple[int, float]]:
    """Train and evaluate the pipeline once per embedding dimension.

    Returns (dim, EER) rows; plumbing around train + evaluate_encoder with the
    speaker split held fixed across dimensions.
    """
    import dataclasses

    from . import trainer as trainer_mod

    workdir = Path(workdir)
    train_fs, holdout = split_speakers(features, n_holdout, seed=split_seed)
    rows: list[tuple[int, float]] = []
    for dim in dims:
        cfg = dataclasses.replace(config, embed_dim=int(dim))
        t = trainer_mod.train(train_fs, cfg, workdir / f"dim{dim}")
        eer, _, _ = evaluate_encoder(
            t.bundle.encoder, holdout, n_enroll=n_enroll, n_test=n_test, seed=split_seed
        )
        rows.append((int(dim), eer))
    return rows


def save_trials_csv(trials: TrialScoreSet, path: str | Path) -> None:
    """CSV rows model_id,test_id,score,target with round-tripping float text."""
    path = Path(path)
    model_ids = trials.model_ids or [""] * len(trials)
    test_ids = trials.test_ids or [""] * len(trials)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "test_id", "score", "target"])
        for m, t, s, tgt in zip(model_ids, test_ids, trials.scores, trials.targets):
            writer.writerow([m, t, repr(float(s)), int(tgt)])


def load_trials_csv(path: str | Path) -> TrialScoreSet:
    path = Path(path)
    model_ids, test_ids, scores, targets = [], [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["model_id", "test_id", "score", "target"]:
            raise EvalError(f"{path}: unexpected trial CSV header {header}")
        for row in reader:
            model_ids.append(row[0])
            test_ids.append(row[1])
            scores.append(float(row[2]))
            targets.append(bool(int(row[3])))
    return TrialScoreSet(
        scores=np.asarray(scores), targets=np.asarray(targets), model_ids=model_ids, test_ids=test_ids
    )


def save_models(models: Sequence[SpeakerModel], path: str | Path) -> None:
    """Write speaker models as versioned JSON (deterministic key order)."""
    import json

    if not models:
        raise EvalError("no models to save")
    payload = {
        "version": 1,
        "embed_dim": int(models[0].centroid.shape[0]),
        "models": [
            {
                "speaker_id": m.speaker_id,
                "n_enroll": m.n_enroll,
                "centroid": [float(v) for v in m.centroid],
            }
            for m in models
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_models(path: str | Path) -> list[SpeakerModel]:
    import json

    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise EvalError(f"{path}: not a model file: {exc}") from exc
    if payload.get("version") != 1:
        raise EvalError(f"{path}: unsupported model file version {payload.get('version')}")
    return [
        SpeakerModel(
            speaker_id=m["speaker_id"],
            centroid=np.asarray(m["centroid"], dtype=np.float64),
            n_enroll=int(m["n_enroll"]),
        )
        for m in payload["models"]
    ]


def save_det(det: DetCurve, path: str | Path) -> Path:
    """Write far,frr CSV plus a minimal gnuplot script next to it."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["far", "frr"])
        for fa, fr in zip(det.far, det.frr):
            writer.writerow([repr(float(fa)), repr(float(fr))])
    script = path.with_suffix(path.suffix + ".gp")
    script.write_text(
        "set datafile separator ','\n"
        "set xlabel 'false accept rate'\n"
        "set ylabel 'false reject rate'\n"
        f"plot '{path.name}' using 1:2 every ::1 with lines title 'DET'\n"
    )
    return script
