"""Model and run configuration.

Both configs are flat dataclasses that serialize to JSON documents. Loading
rejects unknown keys so that a typo in a config file fails loudly instead of
silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 512
    num_heads: int = 8
    num_parts: int = 6
    image_size: int = 384
    patch_size: int = 16
    max_text_len: int = 77
    part_text_len: int = 8
    vocab_size: int = 0  # 0 -> size of the built-in vocabulary
    num_layers: int = 2
    mlp_ratio: int = 4
    image_mask_ratio: float = 0.25
    text_mask_ratio: float = 0.15
    num_mim_decoder_layers: int = 3
    loss_weights: tuple[float, float, float, float] = (0.5, 1.0, 0.2, 0.5)
    temperature: float = 0.02
    learnable_temperature: bool = False
    # None shares ``temperature`` between SDM and part ITC.
    itc_temperature: Optional[float] = None
    # "ratio": random patch masking at token level; "part": zero part regions.
    mim_mask_source: str = "ratio"
    # "batch": every other present (sample, part) pair is a negative.
    # "identity": the same part on two samples of one identity is not a negative.
    # "text": pairs with identical part texts are not negatives.
    itc_negatives: str = "batch"
    use_plfa: bool = True
    use_bmria: bool = True

    def __post_init__(self):
        if self.vocab_size == 0:
            from .featurespace import VOCAB_SIZE

            object.__setattr__(self, "vocab_size", VOCAB_SIZE)
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        self.validate()

    def validate(self) -> None:
        positive = ("embed_dim", "num_heads", "num_parts", "image_size", "patch_size",
                    "max_text_len", "part_text_len", "vocab_size", "num_layers",
                    "mlp_ratio", "num_mim_decoder_layers")
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        for name in ("image_mask_ratio", "text_mask_ratio"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        if len(self.loss_weights) != 4 or any(w < 0 for w in self.loss_weights):
            raise ConfigError(f"loss_weights must be four non-negative reals, got {self.loss_weights}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.itc_temperature is not None and self.itc_temperature <= 0:
            raise ConfigError("itc_temperature must be positive")
        if self.mim_mask_source not in ("ratio", "part"):
            raise ConfigError(f"unknown mim_mask_source {self.mim_mask_source!r}")
        if self.itc_negatives not in ("batch", "identity", "text"):
            raise ConfigError(f"unknown itc_negatives {self.itc_negatives!r}")
        if self.part_text_len < 2:
            raise ConfigError("part_text_len must hold at least [BOS] and [EOS]")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        """L_v, the number of visual patch tokens."""
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * 3

    @classmethod
    def smoke(cls, **overrides) -> "ModelConfig":
        """Desk-scale preset used by tests and CLI smoke runs."""
        values = dict(embed_dim=32, num_heads=4, image_size=64, patch_size=8)
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        _reject_unknown(cls, d)
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 60
    warmup_epochs: int = 5
    base_lr: float = 1e-5
    module_lr: float = 5e-5
    warmup_start_lr: float = 1e-6
    ids_per_batch: int = 4
    instances_per_id: int = 2
    augment: bool = False
    gamma_bright: float = 0.6
    gamma_dark: float = 1.6
    noise_sigma: float = 0.05
    seed: int = 0
    manifest: str = ""
    output_dir: str = "runs"

    # Paths do not change what a run computes, so they are left out of the hash.
    _unhashed = ("manifest", "output_dir")

    def __post_init__(self):
        if self.epochs <= 0 or self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError("need epochs > 0 and 0 <= warmup_epochs <= epochs")
        if self.ids_per_batch < 2:
            raise ConfigError("ids_per_batch must be >= 2 so every batch has in-batch negatives")
        if self.instances_per_id < 1:
            raise ConfigError("instances_per_id must be >= 1")
        if min(self.base_lr, self.module_lr, self.warmup_start_lr) <= 0:
            raise ConfigError("learning rates must be positive")

    @classmethod
    def smoke(cls, **overrides) -> "RunConfig":
        model_overrides = overrides.pop("model", {})
        if isinstance(model_overrides, ModelConfig):
            model = model_overrides
        else:
            model = ModelConfig.smoke(**model_overrides)
        values = dict(model=model, epochs=40, warmup_epochs=2, base_lr=1e-3,
                      module_lr=1e-3, warmup_start_lr=1e-4)
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        _reject_unknown(cls, d)
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    def config_hash(self) -> str:
        d = self.to_dict()
        for key in self._unhashed:
            d.pop(key)
        return hash_dict(d)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def hash_dict(d: dict[str, Any]) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _reject_unknown(cls, d: dict[str, Any]) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")


def load_config(path: str | Path) -> RunConfig:
    """Read a run config, or a bare model config, from a JSON file."""
    d = json.loads(Path(path).read_text())
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    if d and set(d) <= model_keys:
        return RunConfig(model=ModelConfig.from_dict(d))
    return RunConfig.from_dict(d)


def save_config(config: RunConfig | ModelConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
