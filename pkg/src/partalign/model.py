"""The full retrieval model: dual encoders plus the part-alignment and
masked-reconstruction heads, producing the four loss components."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .bmria import (ImageRecovery, MaskPlan, ReconstructionOutput, TextRecovery,
                    apply_text_mask, bmria_loss, gather_targets, image_mask_matrix,
                    recover_image, recover_text)
from .config import ModelConfig
from .featurespace import MASK_ID, FeatureBundle, ImageEncoder, TextEncoder, patchify
from .losses import LossBreakdown, cosine_similarity_matrix, id_loss, sdm_loss, total_loss
from .plfa import PartQuerySet, negative_groups, plfa_forward


@dataclass
class Batch:
    images: Tensor           # (N, 3, H, W) in [0, 1]
    token_ids: Tensor        # (N, L)
    part_token_ids: Tensor   # (N, K, Lp)
    part_masks: Tensor       # (N, K, L_v) in {0, 1}
    labels: Tensor           # (N,) classifier indices
    plans: Sequence[MaskPlan]
    identities: Optional[Tensor] = None

    def __len__(self) -> int:
        return self.images.shape[0]


class RetrievalModel(nn.Module):
    def __init__(self, config: ModelConfig, num_classes: int):
        super().__init__()
        self.config = config
        self.num_classes = num_classes
        self.image_encoder = ImageEncoder(config)
        self.text_encoder = TextEncoder(config)
        self.part_queries = PartQuerySet(config)
        self.text_recovery = TextRecovery(config)
        self.image_recovery = ImageRecovery(config)
        self.classifier = nn.Linear(config.embed_dim, num_classes)
        nn.init.normal_(self.classifier.weight, std=0.001)
        nn.init.zeros_(self.classifier.bias)
        log_tau = torch.tensor(math.log(config.temperature))
        if config.learnable_temperature:
            self.log_tau = nn.Parameter(log_tau)
        else:
            self.register_buffer("log_tau", log_tau)

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp()

    @property
    def itc_tau(self):
        if self.config.itc_temperature is None:
            return self.tau
        return self.config.itc_temperature

    def backbone_parameters(self) -> list[nn.Parameter]:
        """Encoder weights; everything else counts as a newly initialized module."""
        skip = {id(self.image_encoder.mask_token)}
        return [p for enc in (self.image_encoder, self.text_encoder)
                for p in enc.parameters() if id(p) not in skip]

    def module_parameters(self) -> list[nn.Parameter]:
        backbone = {id(p) for p in self.backbone_parameters()}
        return [p for p in self.parameters() if id(p) not in backbone]

    # -- encoding -----------------------------------------------------------

    def encode_text_pooled(self, token_ids: Tensor) -> Tensor:
        return self.text_encoder(token_ids)[1]

    def encode_image_pooled(self, images: Tensor) -> Tensor:
        return self.image_encoder(images)[:, 0]

    def encode(self, batch: Batch) -> FeatureBundle:
        cfg = self.config
        global_image = self.image_encoder(batch.images)
        global_text, text_pooled, text_padding = self.text_encoder(batch.token_ids)
        masked_image = masked_text = part_texts = None
        if cfg.use_bmria:
            patch_mask = image_mask_matrix(batch.plans, cfg.num_patches)
            if cfg.mim_mask_source == "part":
                keep = 1.0 - patch_mask.to(batch.images.dtype)
                pixel_keep = keep.view(-1, 1, cfg.grid_side, 1, cfg.grid_side, 1)
                side = (cfg.grid_side, cfg.patch_size)
                zeroed = (batch.images.view(-1, 3, side[0], side[1], side[0], side[1])
                          * pixel_keep).view_as(batch.images)
                masked_image = self.image_encoder(zeroed)
            else:
                masked_image = self.image_encoder(batch.images, patch_mask)
            masked_ids = apply_text_mask(batch.token_ids, batch.plans, MASK_ID)
            masked_text = self.text_encoder(masked_ids)[0]
        if cfg.use_plfa:
            n, k, lp = batch.part_token_ids.shape
            part_texts = self.text_encoder(batch.part_token_ids.view(n * k, lp))[1].view(n, k, -1)
        return FeatureBundle(global_image, global_text, text_pooled, text_padding,
                             masked_image, masked_text, part_texts)

    # -- objectives ---------------------------------------------------------

    def forward(self, batch: Batch) -> LossBreakdown:
        cfg = self.config
        bundle = self.encode(batch)
        image_pooled, text_pooled = bundle.image_pooled, bundle.text_pooled
        zero = image_pooled.sum() * 0.0
        diagnostics = {}

        parts = {
            "id": id_loss(image_pooled, text_pooled, batch.labels, self.classifier),
            "sdm": sdm_loss(cosine_similarity_matrix(image_pooled, text_pooled),
                            batch.labels, self.tau),
            "itc": zero,
            "biirr": zero,
        }
        if cfg.use_plfa:
            groups = negative_groups(cfg.itc_negatives, batch.labels, batch.part_token_ids)
            out = plfa_forward(bundle, batch.part_masks, self.part_queries, self.itc_tau, groups)
            parts["itc"] = out.itc_loss
            diagnostics["itc_pairs"] = int(out.present.sum())
            diagnostics["itc_all_absent"] = out.all_absent
        if cfg.use_bmria:
            recon = ReconstructionOutput(
                recover_text(self.text_recovery, bundle.masked_text, bundle.global_image,
                             batch.plans, bundle.text_padding),
                recover_image(self.image_recovery, bundle.masked_image, bundle.global_text,
                              batch.plans, bundle.text_padding))
            text_targets, image_targets = gather_targets(
                batch.token_ids, patchify(batch.images, cfg.patch_size), batch.plans)
            parts["biirr"] = bmria_loss(recon, text_targets, image_targets)
        total = total_loss(parts, cfg.loss_weights)
        return LossBreakdown(parts["id"], parts["sdm"], parts["itc"], parts["biirr"], total,
                             diagnostics)

    @torch.no_grad()
    def similarity(self, token_ids: Tensor, images: Tensor, chunk: int = 64) -> Tensor:
        """Cosine similarity of text queries (rows) against gallery images (columns)."""
        texts = torch.cat([self.encode_text_pooled(token_ids[i:i + chunk])
                           for i in range(0, len(token_ids), chunk)])
        gallery = torch.cat([self.encode_image_pooled(images[i:i + chunk])
                             for i in range(0, len(images), chunk)])
        return F.normalize(texts, dim=-1) @ F.normalize(gallery, dim=-1).t()
