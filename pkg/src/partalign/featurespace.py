"""Feature shapes, the tokenizer and the toy dual encoders.

The encoders are small pre-norm transformers with learned positional
embeddings. Image token 0 is a classification token; its output is the pooled
image vector. The pooled text vector is the output at the [EOS] position.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import ModelConfig
from .vocab import SPECIAL_TOKENS, WORDS

PAD_ID, BOS_ID, EOS_ID, MASK_ID, UNK_ID = range(len(SPECIAL_TOKENS))
SPECIAL_IDS = frozenset((PAD_ID, BOS_ID, EOS_ID, MASK_ID, UNK_ID))
VOCAB_SIZE = len(WORDS)

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass
class TokenizedText:
    ids: list[int]
    truncated: bool = False


class Tokenizer:
    """Whitespace tokenizer over a fixed vocabulary, wrapping with [BOS]/[EOS]."""

    def __init__(self, words: Sequence[str] = WORDS):
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str, max_len: int) -> TokenizedText:
        ids = [self.index.get(w, UNK_ID) for w in _WORD_RE.findall(text.lower())]
        truncated = len(ids) + 2 > max_len
        if truncated:
            ids = ids[: max_len - 2]
        return TokenizedText([BOS_ID] + ids + [EOS_ID], truncated)

    def pad(self, ids: Sequence[int], length: int) -> list[int]:
        return list(ids) + [PAD_ID] * (length - len(ids))

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID))


# ---------------------------------------------------------------------------
# Attention primitives shared by the encoders, PLFA and BMRIA.


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, bias: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim, bias=bias)
        self.k_proj = nn.Linear(dim, dim, bias=bias)
        self.v_proj = nn.Linear(dim, dim, bias=bias)
        self.out_proj = nn.Linear(dim, dim, bias=bias)

    def forward(self, query: Tensor, context: Tensor,
                key_padding_mask: Optional[Tensor] = None) -> Tensor:
        """``query`` (N, Lq, d) attends over ``context`` (N, Lk, d).

        ``key_padding_mask`` is (N, Lk) with True at positions to ignore.
        """
        if query.shape[-1] != self.dim or context.shape[-1] != self.dim:
            raise ValueError(
                f"attention expects feature dim {self.dim}, got query {tuple(query.shape)} "
                f"and context {tuple(context.shape)}")
        n, lq, _ = query.shape
        lk = context.shape[1]
        q = self.q_proj(query).view(n, lq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(context).view(n, lk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(context).view(n, lk, self.num_heads, self.head_dim).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, lq, self.dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: Tensor, key_padding_mask: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_padding_mask)
        return x + self.mlp(self.norm2(x))


# ---------------------------------------------------------------------------


def patchify(pixels: Tensor, patch_size: int) -> Tensor:
    """(N, 3, H, W) -> (N, L_v, p*p*3), patches row-major, values (py, px, c)."""
    n, c, h, w = pixels.shape
    gh, gw = h // patch_size, w // patch_size
    x = pixels.reshape(n, c, gh, patch_size, gw, patch_size)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(n, gh * gw, patch_size * patch_size * c)


def unpatchify(patches: Tensor, patch_size: int) -> Tensor:
    n, lv, _ = patches.shape
    g = math.isqrt(lv)
    x = patches.reshape(n, g, g, patch_size, patch_size, 3)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(n, 3, g * patch_size, g * patch_size)


class ImageEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim
        self.config = config
        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.randn(1, config.num_patches + 1, d) * 0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, config.num_heads, config.mlp_ratio) for _ in range(config.num_layers))
        self.norm = nn.LayerNorm(d)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, pixels: Tensor, patch_mask: Optional[Tensor] = None) -> Tensor:
        """(N, 3, H, W) pixels -> (N, L_v + 1, d) tokens.

        ``patch_mask`` (N, L_v) bool replaces the embedding of masked patches
        with the shared mask token before the transformer runs.
        """
        size = self.config.image_size
        if pixels.dim() != 4 or tuple(pixels.shape[1:]) != (3, size, size):
            raise ValueError(
                f"expected images of shape (N, 3, {size}, {size}), got {tuple(pixels.shape)}")
        x = self.patch_embed(patchify(pixels, self.config.patch_size))
        if patch_mask is not None:
            x = torch.where(patch_mask[..., None], self.mask_token.to(x.dtype), x)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class TextEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim
        self.config = config
        self.token_embed = nn.Embedding(config.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.randn(1, config.max_text_len, d) * 0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, config.num_heads, config.mlp_ratio) for _ in range(config.num_layers))
        self.norm = nn.LayerNorm(d)
        nn.init.normal_(self.token_embed.weight, std=0.02)

    def forward(self, token_ids: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(N, L) ids -> (tokens (N, L, d), pooled (N, d), padding mask (N, L))."""
        n, length = token_ids.shape
        if length > self.config.max_text_len:
            raise ValueError(f"sequence length {length} exceeds max_text_len "
                             f"{self.config.max_text_len}")
        if token_ids.numel() and int(token_ids.max()) >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary range")
        padding = token_ids == PAD_ID
        x = self.token_embed(token_ids) + self.pos_embed[:, :length]
        for block in self.blocks:
            x = block(x, padding)
        x = self.norm(x)
        last = (~padding).sum(dim=1).clamp(min=1) - 1
        pooled = x[torch.arange(n), last]
        return x, pooled, padding


@dataclass
class TextEncoding:
    tokens: Tensor
    pooled: Tensor
    padding_mask: Tensor
    truncated: bool = False


def encode_image(encoder: ImageEncoder, pixels) -> Tensor:
    """Encode one H x W x 3 image with values in [0, 1]; returns (L_v + 1, d)."""
    x = torch.as_tensor(np.asarray(pixels), dtype=next(encoder.parameters()).dtype)
    size = encoder.config.image_size
    if x.shape != (size, size, 3):
        raise ValueError(f"expected an image of shape ({size}, {size}, 3), got {tuple(x.shape)}")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return encoder(x.permute(2, 0, 1)[None])[0]


def encode_text(encoder: TextEncoder, token_ids: Sequence[int]) -> TextEncoding:
    """Encode one token id sequence; overlong input is truncated and flagged."""
    max_len = encoder.config.max_text_len
    ids = list(token_ids)
    truncated = len(ids) > max_len
    if truncated:
        ids = ids[: max_len - 1] + [EOS_ID]
    if not ids:
        ids = [BOS_ID, EOS_ID]
    x = torch.tensor([ids], dtype=torch.long)
    tokens, pooled, padding = encoder(x)
    return TextEncoding(tokens[0], pooled[0], padding[0], truncated)


# ---------------------------------------------------------------------------


@dataclass
class PartMask:
    """K x L_v binary patch assignment; ``provenance`` is "grid" or "box"."""

    grid: np.ndarray
    provenance: str = "grid"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        if self.grid.ndim != 2:
            raise ValueError("part mask must be a K x L_v matrix")
        if not np.isin(self.grid, (0, 1)).all():
            raise ValueError("part mask entries must be 0 or 1")

    @property
    def present(self) -> np.ndarray:
        return self.grid.any(axis=1)


@dataclass
class FeatureBundle:
    """The five encoded inputs for a batch of N samples."""

    global_image: Tensor        # (N, L_v + 1, d)
    global_text: Tensor         # (N, L, d)
    text_pooled: Tensor         # (N, d)
    text_padding: Tensor        # (N, L) True at [PAD]
    masked_image: Tensor        # (N, L_v + 1, d)
    masked_text: Tensor         # (N, L, d)
    part_texts: Tensor          # (N, K, d) pooled part descriptions

    @property
    def image_pooled(self) -> Tensor:
        return self.global_image[:, 0]

    @property
    def image_patches(self) -> Tensor:
        return self.global_image[:, 1:]


def pool_part_features(image_tokens: Tensor, part_mask) -> tuple[Tensor, Tensor]:
    """Mean of patch tokens inside each part region.

    ``image_tokens`` is (L_v, d) or (N, L_v, d) with the classification token
    already removed; ``part_mask`` is (K, L_v) or (N, K, L_v). Returns the
    pooled features (.., K, d) and a boolean present flag (.., K). Absent
    parts pool to the zero vector.
    """
    if isinstance(part_mask, PartMask):
        part_mask = part_mask.grid
    mask = torch.as_tensor(np.asarray(part_mask) if not torch.is_tensor(part_mask) else part_mask)
    mask = mask.to(image_tokens.dtype)
    if mask.shape[-1] != image_tokens.shape[-2]:
        raise ValueError(f"part mask covers {mask.shape[-1]} patches but there are "
                         f"{image_tokens.shape[-2]} image tokens")
    counts = mask.sum(dim=-1)
    summed = mask @ image_tokens
    pooled = summed / counts.clamp(min=1)[..., None]
    return pooled, counts > 0
