"""Data loading, identity-balanced batching, the training loop, checkpoints
and retrieval evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .bmria import MaskPlan, sample_mask_plan
from .config import ModelConfig, RunConfig, hash_dict
from .datagen import SampleRecord, apply_augmentation, augment_records, record_patch_mask
from .featurespace import Tokenizer
from .metrics import RetrievalRun, metrics_report
from .model import Batch, RetrievalModel

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data


class RecordSet:
    """Tensors for a list of manifest records, loaded once and kept in memory."""

    def __init__(self, records: Sequence[SampleRecord], root: str | Path, config: ModelConfig,
                 class_ids: Optional[Sequence[int]] = None):
        self.records = list(records)
        self.config = config
        self.tokenizer = Tokenizer()
        root = Path(root)
        size = config.image_size
        base: dict[str, tuple[np.ndarray, tuple[int, int]]] = {}
        images, tokens, part_tokens, masks = [], [], [], []
        self.truncated = 0
        for r in self.records:
            if r.image_path not in base:
                with Image.open(root / r.image_path) as im:
                    hw = (im.height, im.width)
                    im = im.convert("RGB")
                    if im.size != (size, size):
                        im = im.resize((size, size), Image.BILINEAR)
                    base[r.image_path] = (np.asarray(im, np.float64) / 255.0, hw)
            pixels, hw = base[r.image_path]
            images.append(apply_augmentation(pixels, r.augmentation))
            enc = self.tokenizer.encode(r.caption, config.max_text_len)
            self.truncated += enc.truncated
            tokens.append(self.tokenizer.pad(enc.ids, config.max_text_len))
            part_tokens.append([self.tokenizer.pad(self.tokenizer.encode(t, config.part_text_len).ids,
                                                   config.part_text_len)
                                for t in r.texts_for_parts()])
            masks.append(record_patch_mask(r, config.num_patches, hw))
        if self.truncated:
            log.warning("%d captions exceeded max_text_len and were truncated", self.truncated)
        dtype = torch.get_default_dtype()
        self.images = torch.tensor(np.stack(images), dtype=dtype).permute(0, 3, 1, 2).contiguous()
        self.token_ids = torch.tensor(tokens, dtype=torch.long)
        self.part_token_ids = torch.tensor(part_tokens, dtype=torch.long)
        self.part_masks = torch.tensor(np.stack(masks), dtype=dtype)
        self.identities = torch.tensor([r.identity for r in self.records], dtype=torch.long)
        if class_ids is None:
            class_ids = sorted(set(self.identities.tolist()))
        self.class_ids = list(class_ids)
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        self.labels = torch.tensor([lookup.get(int(i), -1) for i in self.identities])

    def __len__(self) -> int:
        return len(self.records)

    def batch(self, indices: Sequence[int], plans: Sequence[MaskPlan]) -> Batch:
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return Batch(self.images[idx], self.token_ids[idx], self.part_token_ids[idx],
                     self.part_masks[idx], self.labels[idx], list(plans), self.identities[idx])

    def plans(self, indices: Sequence[int], seeds: Sequence[int]) -> list[MaskPlan]:
        return [sample_mask_plan(self.token_ids[i].tolist(), self.config, s,
                                 self.part_masks[i].numpy())
                for i, s in zip(indices, seeds)]


def load_split(records: Sequence[SampleRecord], root, config: ModelConfig, split: str,
               augment: bool = False, class_ids=None, **aug_kwargs) -> RecordSet:
    chosen = [r for r in records if r.split == split]
    if augment and split == "train":
        chosen = augment_records(chosen, **aug_kwargs)
    return RecordSet(chosen, root, config, class_ids)


def overfit_subset(records: Sequence[SampleRecord], n: int = 4) -> list[SampleRecord]:
    """``n`` train records for a memorization run, one per identity where possible."""
    train_records = [r for r in records if r.split == "train"]
    chosen, seen = [], set()
    for r in train_records:
        if r.identity not in seen and len(chosen) < n:
            chosen.append(r)
            seen.add(r.identity)
    for r in train_records:
        if len(chosen) >= n:
            break
        if r not in chosen:
            chosen.append(r)
    if len(seen) < 2:
        raise ValueError("overfit batch needs train records from at least two identities")
    return chosen


def identity_batches(identities: Sequence[int], ids_per_batch: int, instances_per_id: int,
                     rng: np.random.Generator) -> list[list[int]]:
    """One epoch of P x M batches covering every sample.

    Each identity's samples are shuffled and cut into chunks of M (topped up by
    resampling); chunks are shuffled and grouped P at a time with distinct
    identities. Chunks that cannot complete a batch are dropped.
    """
    by_id: dict[int, list[int]] = {}
    for index, identity in enumerate(identities):
        by_id.setdefault(int(identity), []).append(index)
    chunks = []
    for identity in sorted(by_id):
        pool = list(rng.permutation(by_id[identity]))
        for start in range(0, len(pool), instances_per_id):
            chunk = pool[start:start + instances_per_id]
            if len(chunk) < instances_per_id:
                chunk += list(rng.choice(by_id[identity], instances_per_id - len(chunk)))
            chunks.append((identity, [int(i) for i in chunk]))
    order = rng.permutation(len(chunks))
    pending = [chunks[i] for i in order]
    batches = []
    while pending:
        used, batch, rest = set(), [], []
        for identity, chunk in pending:
            if identity not in used and len(used) < ids_per_batch:
                used.add(identity)
                batch.extend(chunk)
            else:
                rest.append((identity, chunk))
        if len(used) < ids_per_batch:
            break
        batches.append(batch)
        pending = rest
    return batches


def lr_factor(epoch: float, run: RunConfig) -> float:
    """Linear warmup from ``warmup_start_lr / base_lr`` to 1, then cosine decay to 0."""
    w = run.warmup_epochs
    if epoch < w:
        start = run.warmup_start_lr / run.base_lr
        return start + (1.0 - start) * epoch / w
    span = run.epochs - w
    if span <= 0:
        return 1.0
    progress = min(1.0, (epoch - w) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def mask_seed(run_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, epoch, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: str | Path, model: RetrievalModel, optimizer, run: RunConfig,
                    epoch: int, step: int, class_ids: Sequence[int]) -> None:
    torch.save({
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "run_config": run.to_dict(),
        "config_hash": run.config_hash(),
        "num_classes": model.num_classes,
        "class_ids": list(class_ids),
        "epoch": epoch,
        "step": step,
    }, path)


def load_checkpoint(path: str | Path) -> tuple[RetrievalModel, dict]:
    state = torch.load(path, map_location="cpu", weights_only=False)
    run = RunConfig.from_dict(state["run_config"])
    model = RetrievalModel(run.model, state["num_classes"])
    model.load_state_dict(state["model"])
    model.eval()
    state["run"] = run
    return model, state


def model_hash(config: ModelConfig) -> str:
    return hash_dict(config.to_dict())


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: RetrievalModel
    trace: list[dict] = field(default_factory=list)
    class_ids: list[int] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def build_optimizer(model: RetrievalModel, run: RunConfig) -> torch.optim.Adam:
    return torch.optim.Adam([
        {"params": model.backbone_parameters(), "lr": run.base_lr, "base": run.base_lr},
        {"params": model.module_parameters(), "lr": run.module_lr, "base": run.module_lr},
    ])


def _set_lr(optimizer, factor: float) -> list[float]:
    lrs = []
    for group in optimizer.param_groups:
        group["lr"] = group["base"] * factor
        lrs.append(group["lr"])
    return lrs


def train(run: RunConfig, records: Sequence[SampleRecord], root: str | Path,
          out_dir: Optional[str | Path] = None, resume: Optional[str | Path] = None,
          overfit_steps: Optional[int] = None, stop_after_epoch: Optional[int] = None,
          on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train on the train split of ``records``.

    ``overfit_steps`` repeats one fixed batch (all train records, fixed mask
    plans) for that many steps, one step per schedule epoch. With ``out_dir``
    a JSONL step log and per-epoch checkpoints are written there.
    """
    torch.manual_seed(run.seed)
    data = load_split(records, root, run.model, "train", augment=run.augment,
                      gamma_bright=run.gamma_bright, gamma_dark=run.gamma_dark,
                      noise_sigma=run.noise_sigma, seed=run.seed)
    if len(set(data.identities.tolist())) < 2:
        raise ValueError("training needs at least two identities")
    model = RetrievalModel(run.model, len(data.class_ids))
    optimizer = build_optimizer(model, run)
    start_epoch, step, trace = 0, 0, []

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl" if out is not None else None

    if resume is not None:
        state = torch.load(resume, map_location="cpu", weights_only=False)
        if state["config_hash"] != run.config_hash():
            raise ValueError("checkpoint was produced by a different run config")
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        start_epoch, step = state["epoch"] + 1, state["step"]
        if log_path is not None and log_path.exists():
            trace = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
            trace = [t for t in trace if t["step"] < step]
    elif log_path is not None:
        log_path.write_text("")

    if overfit_steps is not None:
        fixed = list(range(len(data)))
        fixed_plans = data.plans(fixed, [mask_seed(run.seed, 0, i) for i in fixed])
        epochs = range(start_epoch, overfit_steps)
        schedule_len = overfit_steps
    else:
        epochs = range(start_epoch, run.epochs)
        schedule_len = run.epochs
    schedule = run.replace(epochs=schedule_len,
                           warmup_epochs=min(run.warmup_epochs, schedule_len))

    model.train()
    for epoch in epochs:
        if overfit_steps is not None:
            batches = [(fixed, fixed_plans)]
        else:
            rng = np.random.default_rng([run.seed, epoch])
            index_batches = identity_batches(data.identities.tolist(), run.ids_per_batch,
                                             run.instances_per_id, rng)
            batches = [(b, data.plans(b, [mask_seed(run.seed, epoch, i) for i in b]))
                       for b in index_batches]
        for b, (indices, plans) in enumerate(batches):
            lrs = _set_lr(optimizer, lr_factor(epoch + b / len(batches), schedule))
            losses = model(data.batch(indices, plans))
            optimizer.zero_grad()
            losses.total.backward()
            optimizer.step()
            record = {"step": step, "epoch": epoch, "lr": lrs[0], "module_lr": lrs[1],
                      **losses.as_floats(), "mask_seeds": [p.seed for p in plans]}
            trace.append(record)
            if log_path is not None:
                with log_path.open("a") as fh:
                    fh.write(json.dumps(record) + "\n")
            if on_step is not None:
                on_step(record)
            step += 1
        if out is not None:
            save_checkpoint(out / "checkpoint.pt", model, optimizer, run, epoch, step,
                            data.class_ids)
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    model.eval()
    return TrainResult(model, trace, data.class_ids,
                       out / "checkpoint.pt" if out is not None else None)


# ---------------------------------------------------------------------------
# Evaluation


def retrieval_run(model: RetrievalModel, data: RecordSet) -> RetrievalRun:
    model.eval()
    sim = model.similarity(data.token_ids, data.images)
    ids = data.identities.numpy()
    return RetrievalRun(sim.double().numpy(), ids, ids)


def evaluate(model: RetrievalModel, records: Sequence[SampleRecord], root, config_hash: str,
             split: str = "test") -> dict:
    """Text-to-image retrieval over one split; every caption queries all its images."""
    data = load_split(records, root, model.config, split)
    return metrics_report(retrieval_run(model, data), config_hash)

