"""Part-level alignment through learnable part queries.

Each of the K part queries is projected and then attends, in one multi-head
cross-attention step, over the pooled part-description embeddings concatenated
with the full caption tokens. The updated queries are contrasted with the
mean-pooled image features of the matching part regions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from .config import ModelConfig
from .featurespace import FeatureBundle, MultiHeadAttention, pool_part_features
from .losses import itc_loss


class PartQuerySet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.num_parts <= 0:
            raise ValueError("need at least one part query")
        d = config.embed_dim
        self.num_parts = config.num_parts
        self.queries = nn.Parameter(torch.randn(config.num_parts, d) * 0.02)
        self.proj = nn.Linear(d, d, bias=False)
        self.cross_attn = MultiHeadAttention(d, config.num_heads)

    def forward(self, part_texts: Tensor, global_text: Tensor,
                text_padding: Optional[Tensor] = None) -> Tensor:
        return update_part_queries(self, part_texts, global_text, text_padding)


def update_part_queries(queries: PartQuerySet, part_texts: Tensor, global_text: Tensor,
                        text_padding: Optional[Tensor] = None) -> Tensor:
    """Updated part queries (N, K, d).

    ``part_texts`` (N, K, d) pooled part descriptions, ``global_text``
    (N, L, d) caption tokens with optional (N, L) padding mask.
    """
    if global_text.shape[1] == 0:
        raise ValueError("global text must contain at least one token")
    n, k, d = part_texts.shape
    if k != queries.num_parts or d != queries.queries.shape[1] or global_text.shape[-1] != d:
        raise ValueError(
            f"expected part texts (N, {queries.num_parts}, {queries.queries.shape[1]}), "
            f"got {tuple(part_texts.shape)} with global text {tuple(global_text.shape)}")
    context = torch.cat([part_texts, global_text], dim=1)
    padding = None
    if text_padding is not None:
        part_pad = torch.zeros(n, k, dtype=torch.bool, device=text_padding.device)
        padding = torch.cat([part_pad, text_padding], dim=1)
    q = queries.proj(queries.queries).unsqueeze(0).expand(n, -1, -1)
    return queries.cross_attn(q, context, padding)


@dataclass
class PLFAOutput:
    part_image_features: Tensor   # (N, K, d)
    updated_queries: Tensor       # (N, K, d)
    present: Tensor               # (N, K) bool
    itc_loss: Tensor
    all_absent: bool = False


def plfa_forward(bundle: FeatureBundle, part_mask: Tensor, queries: PartQuerySet, tau,
                 pair_groups: Optional[Tensor] = None) -> PLFAOutput:
    """Pool visual part features, update queries, and contrast present parts.

    Every present (sample, part) pair is a positive; all other present pairs
    in the batch act as negatives. Absent parts take no part in the loss.
    ``pair_groups`` (N, K) labels pairs that must not serve as each other's
    negatives (see :func:`negative_groups`).
    """
    part_feats, present = pool_part_features(bundle.image_patches, part_mask)
    updated = update_part_queries(queries, bundle.part_texts, bundle.global_text,
                                  bundle.text_padding)
    if not bool(present.any()):
        zero = (part_feats.sum() + updated.sum()) * 0.0
        return PLFAOutput(part_feats, updated, present, zero, all_absent=True)
    groups = None if pair_groups is None else pair_groups[present]
    result = itc_loss(part_feats[present], updated[present], tau, groups)
    return PLFAOutput(part_feats, updated, present, result.loss)


def negative_groups(mode: str, identities: Tensor, part_token_ids: Tensor) -> Optional[Tensor]:
    """(N, K) group labels for the ITC negative set, or None for plain in-batch.

    "identity": the same part on two samples of one identity shares a group.
    "text": pairs whose part texts tokenize identically share a group, which
    also covers the identity case when part texts follow the attributes.
    """
    n, k = part_token_ids.shape[:2]
    if mode == "batch":
        return None
    if mode == "identity":
        return identities[:, None] * k + torch.arange(k, device=identities.device)
    if mode == "text":
        flat = part_token_ids.reshape(n * k, -1)
        return torch.unique(flat, dim=0, return_inverse=True)[1].view(n, k)
    raise ValueError(f"unknown ITC negative mode {mode!r}")
