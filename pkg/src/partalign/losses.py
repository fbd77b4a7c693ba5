"""Training objectives: identity CE, similarity distribution matching,
symmetric InfoNCE, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor

SDM_EPS = 1e-8


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is not finite ({value})")
        self.component = component
        self.value = value


def id_loss(image_pooled: Tensor, text_pooled: Tensor, labels: Tensor, classifier) -> Tensor:
    """Cross-entropy of a shared identity classifier, averaged over both modalities."""
    num_classes = classifier.out_features
    if labels.numel() and (int(labels.max()) >= num_classes or int(labels.min()) < 0):
        raise ValueError(f"labels must lie in [0, {num_classes}), got {labels.tolist()}")
    image_ce = F.cross_entropy(classifier(image_pooled), labels)
    text_ce = F.cross_entropy(classifier(text_pooled), labels)
    return (image_ce + text_ce) / 2


def cosine_similarity_matrix(left: Tensor, right: Tensor) -> Tensor:
    return F.normalize(left, dim=-1) @ F.normalize(right, dim=-1).t()


def identity_distribution(labels: Tensor) -> Tensor:
    """Q_ij = 1[y_i = y_j] / #{k : y_k = y_i}."""
    same = (labels[:, None] == labels[None, :]).to(torch.get_default_dtype())
    return same / same.sum(dim=1, keepdim=True)


def sdm_loss(similarity: Tensor, labels: Tensor, tau) -> Tensor:
    """Similarity distribution matching.

    ``similarity`` is the N x N cosine matrix with image rows and text
    columns. Each direction is KL(P || Q), summed over the row and averaged over
    the batch; only the target distribution carries the epsilon.
    """
    if float(tau) <= 0:
        raise ValueError(f"temperature must be positive, got {float(tau)}")
    if similarity.shape[0] < 2:
        raise ValueError("sdm_loss needs at least two samples")
    q = identity_distribution(labels).to(similarity.dtype)
    log_q = torch.log(q + SDM_EPS)
    logits = similarity / tau
    log_p_i2t = F.log_softmax(logits, dim=1)
    log_p_t2i = F.log_softmax(logits.t(), dim=1)
    kl_i2t = (log_p_i2t.exp() * (log_p_i2t - log_q)).sum(dim=1).mean()
    kl_t2i = (log_p_t2i.exp() * (log_p_t2i - log_q)).sum(dim=1).mean()
    return (kl_i2t + kl_t2i) / 2


@dataclass
class ITCResult:
    loss: Tensor
    degenerate: bool = False


def itc_loss(left: Tensor, right: Tensor, tau, groups: Optional[Tensor] = None) -> ITCResult:
    """Symmetric InfoNCE over matched rows of ``left`` and ``right``.

    Rows are L2-normalized internally. With fewer than two pairs there are no
    negatives and the loss is defined as zero with ``degenerate`` set.
    ``groups`` (M,) optionally marks rows that describe the same thing; such
    off-diagonal pairs are dropped from the negatives instead of being pushed apart.
    """
    m = left.shape[0]
    if right.shape != left.shape:
        raise ValueError(f"itc_loss inputs differ in shape: {tuple(left.shape)} vs {tuple(right.shape)}")
    if m < 2:
        zero = (left.sum() + right.sum()) * 0.0
        return ITCResult(zero, degenerate=True)
    logits = cosine_similarity_matrix(left, right) / tau
    if groups is not None:
        same = (groups[:, None] == groups[None, :]) & ~torch.eye(m, dtype=torch.bool)
        logits = logits.masked_fill(same, float("-inf"))
    target = torch.arange(m)
    loss = (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target)) / 2
    return ITCResult(loss)


COMPONENTS = ("id", "sdm", "itc", "biirr")


@dataclass
class LossBreakdown:
    id: Tensor
    sdm: Tensor
    itc: Tensor
    biirr: Tensor
    total: Tensor
    diagnostics: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in COMPONENTS + ("total",)}


def total_loss(parts: dict, weights) -> Tensor:
    """alpha * ID + beta * SDM + gamma * ITC + delta * BiIRR.

    Raises NonFiniteLossError naming the first non-finite component.
    """
    for name in COMPONENTS:
        value = float(parts[name].detach()) if torch.is_tensor(parts[name]) else float(parts[name])
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    alpha, beta, gamma, delta = weights
    return (alpha * parts["id"] + beta * parts["sdm"]
            + gamma * parts["itc"] + delta * parts["biirr"])
