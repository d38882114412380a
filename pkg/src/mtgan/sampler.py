"""Triplet batch construction: random draws and in-batch semi-hard negative mining.

Both samplers are deterministic given (plan seed, epoch, features) and, for
mining, the frozen encoder snapshot. Streams are single-consumer iterators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from . import nets
from .features import FeatureSet

log = logging.getLogger(__name__)

MODES = ("random", "semi_hard")
DEFAULT_MINING_BATCH = 64


class SamplingError(ValueError):
    """The plan cannot be satisfied by the given feature set."""


@dataclass(frozen=True)
class SamplingPlan:
    """Per-epoch draw counts: speakers n, anchors A, positives P, other
    classes K, negatives J per class; n*A*P*K*J triples per epoch."""

    n_speakers: int = 10
    anchors_per_speaker: int = 2
    positives_per_anchor: int = 2
    negative_classes: int = 5
    negatives_per_class: int = 1
    mode: str = "random"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in (
            "n_speakers",
            "anchors_per_speaker",
            "positives_per_anchor",
            "negative_classes",
            "negatives_per_class",
        ):
            if getattr(self, name) < 1:
                raise SamplingError(f"plan count {name} must be >= 1, got {getattr(self, name)}")
        if self.mode not in MODES:
            raise SamplingError(f"unknown sampling mode {self.mode!r}, expected one of {MODES}")
        if self.seed < 0:
            raise SamplingError(f"plan seed must be >= 0, got {self.seed}")


def epoch_pair_count(plan: SamplingPlan) -> int:
    """Triples drawn per epoch: n * A * P * K * J."""
    return (
        plan.n_speakers
        * plan.anchors_per_speaker
        * plan.positives_per_anchor
        * plan.negative_classes
        * plan.negatives_per_class
    )


@dataclass
class TripletBatch:
    """A batch of slices plus (anchor, positive, negative) index triples into it.

    `slice_ids` are indices into the source FeatureSet; `triples` index into
    `slice_ids`. `fallback` marks mined negatives that fell outside the
    semi-hard window (always all-False for random sampling).
    """

    slice_ids: np.ndarray
    triples: np.ndarray
    fallback: np.ndarray

    def __post_init__(self) -> None:
        self.slice_ids = np.asarray(self.slice_ids, dtype=np.int64)
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        self.fallback = np.asarray(self.fallback, dtype=bool)

    def __len__(self) -> int:
        return len(self.triples)

    def global_triples(self) -> np.ndarray:
        """Triples expressed as indices into the source FeatureSet."""
        return self.slice_ids[self.triples]


def _epoch_rng(plan: SamplingPlan, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(plan.seed, epoch)))


def _eligible_speakers(features: FeatureSet) -> dict[str, np.ndarray]:
    groups = features.by_speaker()
    eligible: dict[str, np.ndarray] = {}
    for spk in sorted(groups):
        if len(groups[spk]) >= 2:
            eligible[spk] = np.asarray(groups[spk], dtype=np.int64)
        else:
            log.warning("speaker %s has %d slice(s), skipping (need >= 2)", spk, len(groups[spk]))
    if len(eligible) < 2:
        raise SamplingError(f"need at least 2 speakers with >= 2 slices, have {len(eligible)}")
    return eligible


def _choose_speakers(rng: np.random.Generator, plan: SamplingPlan, eligible: dict[str, np.ndarray]) -> list[str]:
    names = sorted(eligible)
    n = plan.n_speakers
    if n > len(names):
        log.warning("plan asks for %d speakers but only %d are eligible; using all", n, len(names))
        n = len(names)
    chosen = rng.choice(len(names), size=n, replace=False)
    return [names[i] for i in sorted(chosen)]


def _draw(rng: np.random.Generator, pool: np.ndarray, count: int) -> np.ndarray:
    """Draw `count` items, without replacement when the pool allows it."""
    return rng.choice(pool, size=count, replace=count > len(pool))


def _anchor_positive_pairs(
    rng: np.random.Generator, plan: SamplingPlan, eligible: dict[str, np.ndarray], chosen: list[str]
) -> list[tuple[int, int, str]]:
    pairs = []
    for spk in chosen:
        own = eligible[spk]
        for a in _draw(rng, own, plan.anchors_per_speaker):
            pool = own[own != a]
            for p in _draw(rng, pool, plan.positives_per_anchor):
                pairs.append((int(a), int(p), spk))
    return pairs


def _to_batches(triples: np.ndarray, fallback: np.ndarray, batch_triples: int) -> Iterator[TripletBatch]:
    for start in range(0, len(triples), batch_triples):
        chunk = triples[start : start + batch_triples]
        flags = fallback[start : start + batch_triples]
        ids, local = np.unique(chunk, return_inverse=True)
        yield TripletBatch(slice_ids=ids, triples=local.reshape(-1, 3), fallback=flags)


def sample_random(
    plan: SamplingPlan,
    features: FeatureSet,
    *,
    batch_triples: int = 64,
    epoch: int = 0,
) -> Iterator[TripletBatch]:
    """One epoch of uniformly drawn triples, chunked into batches.

    Per chosen speaker: A anchors, P positives each, then K distinct other
    classes with J negatives each, giving n*A*P*K*J triples in total.
    """
    rng = _epoch_rng(plan, epoch)
    eligible = _eligible_speakers(features)
    chosen = _choose_speakers(rng, plan, eligible)
    if plan.negative_classes > len(chosen) - 1:
        raise SamplingError(
            f"plan needs {plan.negative_classes} negative classes but only"
            f" {len(chosen) - 1} other speakers are in the epoch"
        )
    triples = []
    for a, p, spk in _anchor_positive_pairs(rng, plan, eligible, chosen):
        others = [s for s in chosen if s != spk]
        picked = rng.choice(len(others), size=plan.negative_classes, replace=False)
        for k in picked:
            for neg in _draw(rng, eligible[others[k]], plan.negatives_per_class):
                triples.append((a, p, int(neg)))
    triples = np.asarray(triples, dtype=np.int64)
    order = rng.permutation(len(triples))
    triples = triples[order]
    yield from _to_batches(triples, np.zeros(len(triples), dtype=bool), batch_triples)


EmbedFn = Callable[[np.ndarray], np.ndarray]


def _as_embed_fn(encoder) -> EmbedFn:
    if isinstance(encoder, torch.nn.Module):
        return lambda mats: nets.encode(encoder, mats).detach().cpu().numpy()
    if callable(encoder):
        return lambda mats: np.asarray(encoder(mats), dtype=np.float64)
    raise TypeError(f"encoder must be a module or a callable, got {type(encoder)!r}")


def select_semi_hard(
    d_ap: float, d_neg: np.ndarray, margin: float, count: int
) -> tuple[np.ndarray, np.ndarray]:
    """Pick `count` negatives by the semi-hard rule.

    Priority: in-window negatives (d_ap < d < d_ap + margin) hardest first,
    then negatives with d >= d_ap closest to the window, then margin-violating
    ones least-violating first. Ties break toward the lower candidate index.
    Returns (positions into d_neg, fallback flags for picks outside the window).
    """
    if count > len(d_neg):
        raise SamplingError(f"need {count} negatives but only {len(d_neg)} candidates are in the batch")
    in_window = (d_neg > d_ap) & (d_neg < d_ap + margin)
    violating = d_neg < d_ap
    rank = np.where(in_window, 0, np.where(violating, 2, 1))
    distance_key = np.where(rank == 2, -d_neg, d_neg)
    order = np.lexsort((np.arange(len(d_neg)), distance_key, rank))
    picks = order[:count]
    return picks, rank[picks] > 0


def sample_semi_hard(
    plan: SamplingPlan,
    features: FeatureSet,
    encoder,
    *,
    batch_slices: int = DEFAULT_MINING_BATCH,
    epoch: int = 0,
    margin: float = 0.2,
) -> Iterator[TripletBatch]:
    """One epoch of triples with negatives mined inside each mini-batch.

    Anchor/positive pairs follow the plan exactly as in random sampling; each
    pair then receives K*J negatives selected from the embedded mini-batch by
    select_semi_hard, re-embedding with the current encoder snapshot per batch.
    """
    embed = _as_embed_fn(encoder)
    rng = _epoch_rng(plan, epoch)
    eligible = _eligible_speakers(features)
    chosen = _choose_speakers(rng, plan, eligible)
    pairs = _anchor_positive_pairs(rng, plan, eligible, chosen)
    rng.shuffle(pairs)
    negatives_per_pair = plan.negative_classes * plan.negatives_per_class

    all_ids = np.concatenate([eligible[s] for s in chosen])
    speaker_of = {int(i): features.slices[int(i)].speaker_id for i in all_ids}
    pairs_per_batch = max(1, batch_slices // 4)

    for start in range(0, len(pairs), pairs_per_batch):
        chunk = pairs[start : start + pairs_per_batch]
        core = []
        for a, p, _ in chunk:
            core += [a, p]
        ids = list(dict.fromkeys(core))  # unique, insertion-ordered
        extra_pool = np.setdiff1d(all_ids, np.asarray(ids, dtype=np.int64))
        room = batch_slices - len(ids)
        if room > 0 and len(extra_pool) > 0:
            take = min(room, len(extra_pool))
            ids += [int(i) for i in rng.choice(extra_pool, size=take, replace=False)]
        # Guarantee every pair has enough cross-speaker candidates.
        for a, p, spk in chunk:
            have = sum(1 for i in ids if speaker_of[i] != spk)
            if have < negatives_per_pair:
                others = np.asarray(
                    [int(i) for i in np.setdiff1d(all_ids, np.asarray(ids)) if speaker_of[int(i)] != spk],
                    dtype=np.int64,
                )
                if len(others) < negatives_per_pair - have:
                    raise SamplingError(
                        f"speaker {spk} needs {negatives_per_pair} negatives but the corpus"
                        f" offers only {have + len(others)} cross-speaker slices"
                    )
                ids += [int(i) for i in rng.choice(others, size=negatives_per_pair - have, replace=False)]

        slice_ids = np.asarray(ids, dtype=np.int64)
        local = {int(g): i for i, g in enumerate(slice_ids)}
        mats = np.stack([features.slices[int(i)].matrix for i in slice_ids])
        emb = embed(mats)
        dist = 1.0 - emb @ emb.T

        triples = []
        flags = []
        batch_speakers = np.asarray([speaker_of[int(i)] for i in slice_ids])
        for a, p, spk in chunk:
            la, lp = local[a], local[p]
            cand = np.flatnonzero(batch_speakers != spk)
            picks, fell = select_semi_hard(dist[la, lp], dist[la, cand], margin, negatives_per_pair)
            for pos, f in zip(picks, fell):
                triples.append((la, lp, int(cand[pos])))
                flags.append(bool(f))
        yield TripletBatch(
            slice_ids=slice_ids,
            triples=np.asarray(triples, dtype=np.int64),
            fallback=np.asarray(flags, dtype=bool),
        )


def sample_epoch(
    plan: SamplingPlan,
    features: FeatureSet,
    encoder=None,
    *,
    batch_size: int = 64,
    epoch: int = 0,
    margin: float = 0.2,
) -> Iterator[TripletBatch]:
    """Dispatch to the plan's sampling mode."""
    if plan.mode == "random":
        return sample_random(plan, features, batch_triples=batch_size, epoch=epoch)
    if encoder is None:
        raise SamplingError("semi_hard sampling requires an encoder")
    return sample_semi_hard(
        plan, features, encoder, batch_slices=batch_size, epoch=epoch, margin=margin
    )


def format_triple_rows(epoch: int, batch_index: int, batch: TripletBatch) -> list[str]:
    """Audit-log lines: epoch, batch, anchor/positive/negative ids, fallback flag."""
    rows = []
    for (a, p, n), f in zip(batch.global_triples(), batch.fallback):
        rows.append(f"{epoch} {batch_index} {a} {p} {n} {int(f)}")
    return rows
