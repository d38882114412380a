"""Loss terms: cosine triplet hinge, speaker softmax, and the adversarial pair.

All functions are pure in their tensor inputs and safe to evaluate
concurrently. Distances between embeddings are cosine distances
d(a, b) = 1 - a.b on unit vectors; note that for unit vectors
||a - b||^2 = 2 * d(a, b), so a squared-Euclidean hinge is the same
hinge with a doubled margin. The margin here is in cosine units.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DEFAULT_MARGIN = 0.2
DEFAULT_GP_LAMBDA = 10.0


class NonFiniteLossError(FloatingPointError):
    """A loss component came out NaN or infinite."""


@dataclass(frozen=True)
class LossWeights:
    """Weights for the four loss terms of the combined objective."""

    triplet: float = 0.1
    softmax: float = 0.2
    generator: float = 0.2
    critic: float = 0.5

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - a.b for unit-norm vectors; 0 for identical, 2 for antipodal."""
    return 1.0 - (a * b).sum(dim=-1)


def triplet_loss(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    margin: float = DEFAULT_MARGIN,
    reduction: str = "sum",
) -> torch.Tensor:
    """Hinge sum over triples: max(0, d(a,p) - d(a,n) + margin).

    All three batches must have the same shape; embeddings are assumed
    unit-norm. reduction="mean" divides by the triple count for
    batch-size-independent tuning.
    """
    if not anchors.shape == positives.shape == negatives.shape:
        raise ValueError(
            f"triplet batches must match: {tuple(anchors.shape)}, "
            f"{tuple(positives.shape)}, {tuple(negatives.shape)}"
        )
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    d_ap = cosine_distance(anchors, positives)
    d_an = cosine_distance(anchors, negatives)
    hinge = torch.clamp(d_ap - d_an + margin, min=0.0)
    if reduction == "sum":
        return hinge.sum()
    if reduction == "mean":
        return hinge.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def softmax_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the batch, numerically stable via log-sum-exp."""
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"bad logits/labels shapes: {tuple(logits.shape)} vs {tuple(labels.shape)}")
    return F.cross_entropy(logits, labels)


def gan_losses(
    real_scores: torch.Tensor,
    fake_scores: torch.Tensor,
    grad_penalty: torch.Tensor | float = 0.0,
    gp_lambda: float = DEFAULT_GP_LAMBDA,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Critic-style adversarial pair (L_G, L_D).

    L_D = mean(fake) - mean(real) + gp_lambda * grad_penalty, and
    L_G = -mean(fake) identically.
    """
    l_g = -fake_scores.mean()
    l_d = fake_scores.mean() - real_scores.mean() + gp_lambda * grad_penalty
    return l_g, l_d


def log_loss_gan_losses(
    real_scores: torch.Tensor, fake_scores: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Alternative saturating-log objective on raw critic scores as logits.

    L_D = -mean(log sigmoid(real)) - mean(log(1 - sigmoid(fake))) and the
    non-saturating generator form L_G = -mean(log sigmoid(fake)), computed
    through softplus for stability.
    """
    l_d = F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean()
    l_g = F.softplus(-fake_scores).mean()
    return l_g, l_d


def gradient_penalty(
    critic,
    real: torch.Tensor,
    fake: torch.Tensor,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean (||grad_x critic(x_hat)||_2 - 1)^2 at x_hat = eps*real + (1-eps)*fake.

    eps is uniform per sample; pass it explicitly for reproducible probes,
    otherwise it is drawn from `generator`. The result stays connected to the
    critic's parameters (double backward) so it can be minimized directly.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real/fake shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    b = real.shape[0]
    if eps is None:
        eps_shape = (b,) + (1,) * (real.ndim - 1)
        eps = torch.rand(eps_shape, generator=generator, dtype=real.dtype, device=real.device)
    x_hat = (eps * real.detach() + (1.0 - eps) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    grads = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)[0]
    norms = grads.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def total_loss(
    l_triplet: float,
    l_softmax: float,
    l_generator: float,
    l_critic: float,
    weights: LossWeights = LossWeights(),
) -> float:
    """Weighted sum of the four components, for logging.

    Optimization applies each term only to its own parameter group (the
    adversarial terms are a minimax pair, not a summable objective); this
    aggregate is the reporting scalar. Non-finite components raise.
    """
    components = {
        "triplet": float(l_triplet),
        "softmax": float(l_softmax),
        "generator": float(l_generator),
        "critic": float(l_critic),
    }
    for name, value in components.items():
        if not torch.isfinite(torch.tensor(value)):
            raise NonFiniteLossError(f"{name} loss is {value}")
    return (
        weights.triplet * components["triplet"]
        + weights.softmax * components["softmax"]
        + weights.generator * components["generator"]
        + weights.critic * components["critic"]
    )
