"""Bidirectional masked reconstruction.

Masked caption tokens are recovered by attending to the clean image tokens,
masked image patches by attending to the clean caption tokens. Each decoder
block applies cross-attention, a feed-forward layer and self-attention in
that order, each with a pre-norm residual branch. The text branch has a
single block, the image branch ``num_mim_decoder_layers`` of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig
from .featurespace import SPECIAL_IDS, FeedForward, MultiHeadAttention


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class MaskPlan:
    text_positions: tuple[int, ...]
    image_positions: tuple[int, ...]
    seed: int
    image_mode: str = "ratio"

    def to_dict(self) -> dict:
        return {"seed": self.seed, "image_mode": self.image_mode,
                "text_positions": list(self.text_positions),
                "image_positions": list(self.image_positions)}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskPlan":
        return cls(tuple(d["text_positions"]), tuple(d["image_positions"]),
                   int(d["seed"]), d.get("image_mode", "ratio"))


def maskable_positions(token_ids: Sequence[int]) -> list[int]:
    return [i for i, t in enumerate(token_ids) if int(t) not in SPECIAL_IDS]


def sample_mask_plan(token_ids: Sequence[int], config: ModelConfig, seed: int,
                     part_patches: Optional[np.ndarray] = None) -> MaskPlan:
    """Draw masked text and image positions reproducibly from ``seed``.

    With ``config.mim_mask_source == "part"`` the image positions are the
    patches covered by any part in ``part_patches`` (K x L_v) instead of a
    random ``image_mask_ratio`` fraction.
    """
    rng = np.random.default_rng(seed)
    candidates = maskable_positions(token_ids)
    n_text = round_half_up(config.text_mask_ratio * len(candidates))
    text = rng.choice(candidates, size=n_text, replace=False) if n_text else []
    if config.mim_mask_source == "part":
        if part_patches is None:
            raise ValueError("part-sourced image masking needs the part patch mask")
        image = np.flatnonzero(np.asarray(part_patches).any(axis=0))
        mode = "part"
    else:
        n_image = round_half_up(config.image_mask_ratio * config.num_patches)
        image = rng.choice(config.num_patches, size=n_image, replace=False)
        mode = "ratio"
    return MaskPlan(tuple(sorted(int(i) for i in text)), tuple(sorted(int(i) for i in image)),
                    int(seed), mode)


def apply_text_mask(token_ids: Tensor, plans: Sequence[MaskPlan], mask_id: int) -> Tensor:
    masked = token_ids.clone()
    for row, plan in enumerate(plans):
        if plan.text_positions:
            masked[row, list(plan.text_positions)] = mask_id
    return masked


def image_mask_matrix(plans: Sequence[MaskPlan], num_patches: int) -> Tensor:
    mask = torch.zeros(len(plans), num_patches, dtype=torch.bool)
    for row, plan in enumerate(plans):
        if plan.image_positions:
            mask[row, list(plan.image_positions)] = True
    return mask


def _gather_index(plans: Sequence[MaskPlan], attr: str) -> tuple[Tensor, Tensor]:
    rows, cols = [], []
    for row, plan in enumerate(plans):
        positions = getattr(plan, attr)
        rows.extend([row] * len(positions))
        cols.extend(positions)
    return torch.tensor(rows, dtype=torch.long), torch.tensor(cols, dtype=torch.long)


class CrossModalBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, num_heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, mlp_ratio)
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, num_heads)

    def forward(self, x: Tensor, context: Tensor, context_padding: Optional[Tensor] = None,
                self_padding: Optional[Tensor] = None) -> Tensor:
        x = x + self.cross_attn(self.norm_q(x), self.norm_ctx(context), context_padding)
        x = x + self.ffn(self.norm_ffn(x))
        h = self.norm_self(x)
        return x + self.self_attn(h, h, self_padding)


class TextRecovery(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim
        self.block = CrossModalBlock(d, config.num_heads, config.mlp_ratio)
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size)

    def forward(self, masked_text: Tensor, global_image: Tensor, plans: Sequence[MaskPlan],
                text_padding: Optional[Tensor] = None) -> Tensor:
        return recover_text(self, masked_text, global_image, plans, text_padding)


class ImageRecovery(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim
        self.blocks = nn.ModuleList(CrossModalBlock(d, config.num_heads, config.mlp_ratio)
                                    for _ in range(config.num_mim_decoder_layers))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.patch_dim)

    def forward(self, masked_image: Tensor, global_text: Tensor, plans: Sequence[MaskPlan],
                text_padding: Optional[Tensor] = None) -> Tensor:
        return recover_image(self, masked_image, global_text, plans, text_padding)


def recover_text(decoder: TextRecovery, masked_text: Tensor, global_image: Tensor,
                 plans: Sequence[MaskPlan], text_padding: Optional[Tensor] = None) -> Tensor:
    """Vocabulary logits at the masked text positions, stacked over the batch."""
    rows, cols = _gather_index(plans, "text_positions")
    vocab = decoder.head.out_features
    if rows.numel() == 0:
        return masked_text.new_zeros(0, vocab)
    x = decoder.block(masked_text, global_image, None, text_padding)
    return decoder.head(decoder.norm(x[rows, cols]))


def recover_image(decoder: ImageRecovery, masked_image: Tensor, global_text: Tensor,
                  plans: Sequence[MaskPlan], text_padding: Optional[Tensor] = None) -> Tensor:
    """Pixel predictions (M_I, p*p*3) for the masked patches.

    ``masked_image`` includes the classification token at index 0, so patch
    position j lives at token j + 1.
    """
    rows, cols = _gather_index(plans, "image_positions")
    if rows.numel() == 0:
        return masked_image.new_zeros(0, decoder.head.out_features)
    x = masked_image
    for block in decoder.blocks:
        x = block(x, global_text, text_padding)
    return decoder.head(decoder.norm(x[rows, cols + 1]))


@dataclass
class ReconstructionOutput:
    text_logits: Tensor
    image_pixels: Tensor


def gather_targets(token_ids: Tensor, patches: Tensor,
                   plans: Sequence[MaskPlan]) -> tuple[Tensor, Tensor]:
    """Ground-truth token ids and pixel patches aligned with the plans."""
    t_rows, t_cols = _gather_index(plans, "text_positions")
    i_rows, i_cols = _gather_index(plans, "image_positions")
    return token_ids[t_rows, t_cols], patches[i_rows, i_cols]


def bmria_loss(recon: ReconstructionOutput, text_targets: Tensor, image_targets: Tensor) -> Tensor:
    """(masked-token CE + masked-patch pixel MSE) / 2.

    Each term averages over its own masked set; the pixel term also averages
    over the values inside a patch. An empty masked set contributes zero.
    """
    if recon.text_logits.shape[0] != text_targets.shape[0]:
        raise ValueError(f"{recon.text_logits.shape[0]} text predictions but "
                         f"{text_targets.shape[0]} targets")
    if recon.image_pixels.shape != image_targets.shape:
        raise ValueError(f"image predictions {tuple(recon.image_pixels.shape)} do not match "
                         f"targets {tuple(image_targets.shape)}")
    zero = (recon.text_logits.sum() + recon.image_pixels.sum()) * 0.0
    text_term = (F.cross_entropy(recon.text_logits, text_targets)
                 if text_targets.numel() else zero)
    image_term = (F.mse_loss(recon.image_pixels, image_targets)
                  if image_targets.numel() else zero)
    return (text_term + image_term) / 2
