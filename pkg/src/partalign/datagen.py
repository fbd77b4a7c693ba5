"""Synthetic part-annotated vehicle dataset and manifest handling.

Vehicles are drawn on a 24 x 24 cell lattice (``render_size`` must be a
multiple of 24), so a part's pixel mask is exactly the upsampled 24 x 24 grid
stored in the manifest. Identities are distinct attribute tuples; captions
name every attribute and can be parsed back into the tuple.

Manifest format: one JSON object per line with keys ``image_path`` (relative
to the manifest), ``caption``, ``identity``, ``split`` (train|test),
``part_masks`` (K entries ``{"part", "grid"}`` with a 144-digit hex grid, or
``{"part", "box"}`` with ``[x0, y0, x1, y1]`` pixel corners) and optionally
``part_texts``, ``attributes`` and ``augmentation``.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .vocab import (BODY_COLORS, BODY_SHAPES, CAPTION_OPENERS, FILLERS, PART_ANCHORS,
                    PART_ATTRIBUTES, PART_CLAUSES, PART_NAMES)

GRID = 24
GRID_HEX_LEN = GRID * GRID // 4
SPLITS = ("train", "test")

# Annotated pairs per identity -> number of identities, all-data row.
PAPER_IMAGES_PER_ID = {2: 149, 3: 361, 4: 248, 5: 18}


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Identities and captions


@dataclass(frozen=True)
class SyntheticVehicleSpec:
    body_color: str
    body_shape: str
    parts: tuple[str, ...]  # one attribute per PART_NAMES entry

    def as_dict(self) -> dict:
        return {"body_color": self.body_color, "body_shape": self.body_shape,
                "parts": dict(zip(PART_NAMES, self.parts))}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticVehicleSpec":
        return cls(d["body_color"], d["body_shape"], tuple(d["parts"][p] for p in PART_NAMES))


_AXES = [tuple(BODY_COLORS), BODY_SHAPES] + [tuple(PART_ATTRIBUTES[p]) for p in PART_NAMES]
NUM_SPECS = math.prod(len(a) for a in _AXES)


def spec_from_index(index: int) -> SyntheticVehicleSpec:
    values = []
    for axis in reversed(_AXES):
        index, r = divmod(index, len(axis))
        values.append(axis[r])
    values.reverse()
    return SyntheticVehicleSpec(values[0], values[1], tuple(values[2:]))


def sample_specs(num_ids: int, rng: np.random.Generator) -> list[SyntheticVehicleSpec]:
    indices = rng.choice(NUM_SPECS, size=num_ids, replace=False)
    return [spec_from_index(int(i)) for i in indices]


def part_texts(spec: SyntheticVehicleSpec) -> list[str]:
    return [f"{attr} {PART_ANCHORS[name]}" for name, attr in zip(PART_NAMES, spec.parts)]


def make_caption(spec: SyntheticVehicleSpec, rng: np.random.Generator, num_fillers: int = 2) -> str:
    opener = CAPTION_OPENERS[rng.integers(len(CAPTION_OPENERS))]
    clauses = [opener.format(color=spec.body_color, shape=spec.body_shape)]
    part_clauses = [PART_CLAUSES[name][rng.integers(len(PART_CLAUSES[name]))].format(a=attr)
                    for name, attr in zip(PART_NAMES, spec.parts)]
    rng.shuffle(part_clauses)
    fillers = [FILLERS[i] for i in rng.choice(len(FILLERS), size=num_fillers, replace=False)]
    clauses.extend(part_clauses)
    for filler in fillers:
        clauses.insert(int(rng.integers(1, len(clauses) + 1)), filler)
    return ". ".join(clauses) + "."


_BODY_RE = re.compile(r"\b({})\s+({})\b".format("|".join(BODY_COLORS), "|".join(BODY_SHAPES)))
_PART_RES = {name: re.compile(r"\b({})\s+{}\b".format("|".join(PART_ATTRIBUTES[name]),
                                                       PART_ANCHORS[name]))
             for name in PART_NAMES}


def parse_caption(caption: str) -> SyntheticVehicleSpec:
    """Recover the attribute tuple a generated caption was written from."""
    text = caption.lower()
    body = _BODY_RE.findall(text)
    if len(body) != 1:
        raise ValueError(f"expected one body phrase, found {body}")
    parts = []
    for name in PART_NAMES:
        found = _PART_RES[name].findall(text)
        if len(found) != 1:
            raise ValueError(f"expected one {name} phrase, found {found}")
        parts.append(found[0])
    return SyntheticVehicleSpec(body[0][0], body[0][1], tuple(parts))


# ---------------------------------------------------------------------------
# Rendering

# (body_top, body_left, body_right, cabin_top, cabin_left, cabin_right) in cells;
# the body ends at row 16 and wheels occupy rows 16-18.
_SHAPES = {
    "sedan": (12, 2, 21, 8, 7, 16),
    "suv": (11, 2, 21, 6, 4, 18),
    "hatchback": (12, 3, 20, 8, 6, 17),
    "van": (10, 2, 21, 5, 3, 20),
    "pickup": (12, 2, 21, 8, 5, 11),
}
_BODY_BOTTOM = 16


@dataclass(frozen=True)
class View:
    dx: int = 0
    dy: int = 0
    flip: bool = False
    occluded: Optional[str] = None
    background: tuple[int, int, int] = (120, 125, 120)
    brightness: float = 1.0
    texture_seed: int = 0

    def as_dict(self) -> dict:
        return {"dx": self.dx, "dy": self.dy, "flip": self.flip, "occluded": self.occluded,
                "background": list(self.background), "brightness": self.brightness,
                "texture_seed": self.texture_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "View":
        return cls(d["dx"], d["dy"], d["flip"], d["occluded"], tuple(d["background"]),
                   d["brightness"], d["texture_seed"])


def sample_view(rng: np.random.Generator, occlusion_prob: float = 0.1) -> View:
    occluded = None
    if rng.random() < occlusion_prob:
        occluded = PART_NAMES[rng.integers(len(PART_NAMES))]
    base = rng.integers(70, 180)
    tint = rng.integers(-15, 16, size=3)
    background = tuple(int(np.clip(base + t, 0, 255)) for t in tint)
    return View(dx=int(rng.integers(-1, 2)), dy=int(rng.integers(-1, 2)),
                flip=bool(rng.random() < 0.5), occluded=occluded, background=background,
                brightness=float(np.round(rng.uniform(0.85, 1.15), 4)),
                texture_seed=int(rng.integers(2**31)))


def _cell_layout(spec: SyntheticVehicleSpec, view: View) -> tuple[np.ndarray, np.ndarray]:
    """Cell-level body map (24x24 bool) and part label map (24x24, -1 = none)."""
    bt, bl, br, ct, cl, cr = _SHAPES[spec.body_shape]
    body = np.zeros((GRID, GRID), bool)
    labels = np.full((GRID, GRID), -1, int)
    body[bt:_BODY_BOTTOM + 1, bl:br + 1] = True
    body[ct:bt, cl:cr + 1] = True

    def put(name, rows, cols):
        if view.occluded != name:
            labels[rows, cols] = PART_NAMES.index(name)

    put("roof", slice(ct, ct + 1), slice(cl, cr + 1))
    mid = (cl + cr) // 2
    for c0, c1 in ((cl + 1, mid - 1), (mid + 1, cr - 1)):
        if c1 >= c0:
            put("windows", slice(ct + 1, bt), slice(c0, c1 + 1))
    put("doors", slice(bt, bt + 3), slice(cl + 1, cr))
    put("lights", slice(bt + 1, bt + 3), slice(br, br + 1))
    put("lights", slice(bt + 1, bt + 3), slice(bl, bl + 1))
    for c in (bl + 2, br - 4):
        put("wheels", slice(_BODY_BOTTOM, _BODY_BOTTOM + 3), slice(c, c + 3))
    put("mirrors", slice(bt - 2, bt), slice(cr + 1, cr + 2))

    body = np.roll(body, (view.dy, view.dx), axis=(0, 1))
    labels = np.roll(labels, (view.dy, view.dx), axis=(0, 1))
    if view.flip:
        body, labels = body[:, ::-1], labels[:, ::-1]
    return body, labels


def render_vehicle(spec: SyntheticVehicleSpec, view: View,
                   render_size: int = 96) -> tuple[np.ndarray, np.ndarray]:
    """Draw one vehicle. Returns uint8 pixels (S, S, 3) and part pixel masks (K, S, S)."""
    if render_size % GRID:
        raise ValueError(f"render_size must be a multiple of {GRID}")
    cell = render_size // GRID
    body_cells, label_cells = _cell_layout(spec, view)
    body = np.kron(body_cells, np.ones((cell, cell), bool))
    labels = np.kron(label_cells, np.ones((cell, cell), int))

    rng = np.random.default_rng(view.texture_seed)
    img = np.empty((render_size, render_size, 3), np.float64)
    img[:] = view.background
    road = int(render_size * 19 / GRID) + view.dy * cell
    img[road:] *= 0.7
    body_rgb = np.array(BODY_COLORS[spec.body_color], np.float64)
    img[body] = body_rgb

    yy, xx = np.mgrid[:render_size, :render_size]
    for k, (name, attr) in enumerate(zip(PART_NAMES, spec.parts)):
        region = labels == k
        if not region.any():
            continue
        primary, secondary = (np.array(c, np.float64) for c in PART_ATTRIBUTES[name][attr])
        if name == "doors":
            base = body_rgb * 0.85
            if attr == "plain":
                pattern = np.zeros_like(region)
            elif attr == "striped":
                pattern = (yy // 2) % 2 == 0
            else:
                pattern = ((xx // 2) + (yy // 2)) % 2 == 0
            colors = np.where(pattern[..., None], primary, base)
        elif name == "roof" and attr == "plain":
            colors = np.broadcast_to(body_rgb * 0.65, img.shape)
        else:
            if name == "roof" and attr == "rack":
                pattern = (xx // 2) % 2 == 0
            elif name == "windows":
                pattern = ((xx + yy) // 3) % 3 == 0
            else:
                pattern = (xx + yy) % 4 == 0
            colors = np.where(pattern[..., None], secondary, primary)
        img[region] = colors[region]

    img = img * view.brightness + rng.normal(0.0, 4.0, img.shape)
    pixels = np.clip(np.round(img), 0, 255).astype(np.uint8)
    masks = np.stack([labels == k for k in range(len(PART_NAMES))])
    return pixels, masks


def pixel_mask_to_grid(mask: np.ndarray) -> np.ndarray:
    """Any-coverage reduction of an (S, S) pixel mask to the 24 x 24 grid."""
    s = mask.shape[0]
    cell = s // GRID
    return mask.reshape(GRID, cell, GRID, cell).any(axis=(1, 3)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Records and manifest I/O


@dataclass
class SampleRecord:
    image_path: str
    caption: str
    identity: int
    part_masks: list[dict]  # {"part": name, "grid": (24,24) uint8} or {"part", "box"}
    split: str
    part_texts: Optional[list[str]] = None
    attributes: Optional[dict] = None
    augmentation: Optional[dict] = None

    def grids(self, image_hw: Optional[tuple[int, int]] = None) -> np.ndarray:
        """All K part masks as (K, 24, 24) grids; boxes need ``image_hw``."""
        out = []
        for entry in self.part_masks:
            if "grid" in entry:
                out.append(np.asarray(entry["grid"], np.uint8))
            else:
                if image_hw is None:
                    raise ValueError("box part masks need the image size to rasterize")
                out.append(box_to_grid(entry["box"], *image_hw))
        return np.stack(out)

    @property
    def provenance(self) -> str:
        return "box" if any("box" in e for e in self.part_masks) else "grid"

    def texts_for_parts(self) -> list[str]:
        return self.part_texts if self.part_texts is not None else list(PART_NAMES)

    def to_json(self) -> dict:
        masks = []
        for entry in self.part_masks:
            if "grid" in entry:
                masks.append({"part": entry["part"], "grid": grid_to_hex(entry["grid"])})
            else:
                masks.append({"part": entry["part"], "box": [int(v) for v in entry["box"]]})
        d = {"image_path": self.image_path, "caption": self.caption,
             "identity": int(self.identity), "split": self.split, "part_masks": masks}
        for key in ("part_texts", "attributes", "augmentation"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        return d


def grid_to_hex(grid) -> str:
    bits = np.asarray(grid, np.uint8).reshape(-1)
    if bits.size != GRID * GRID:
        raise ValueError(f"grid must have {GRID * GRID} cells")
    return np.packbits(bits).tobytes().hex()


def hex_to_grid(text: str) -> np.ndarray:
    if len(text) != GRID_HEX_LEN or not re.fullmatch(r"[0-9a-fA-F]+", text):
        raise ManifestError(f"grid must be {GRID_HEX_LEN} hex digits")
    return np.unpackbits(np.frombuffer(bytes.fromhex(text), np.uint8)).reshape(GRID, GRID)


_REQUIRED = ("image_path", "caption", "identity", "split", "part_masks")
_OPTIONAL = ("part_texts", "attributes", "augmentation")


def _parse_record(d: dict, where: str) -> SampleRecord:
    if not isinstance(d, dict):
        raise ManifestError(f"{where}: record must be an object")
    missing = [k for k in _REQUIRED if k not in d]
    unknown = sorted(set(d) - set(_REQUIRED) - set(_OPTIONAL))
    if missing or unknown:
        raise ManifestError(f"{where}: missing keys {missing}, unknown keys {unknown}")
    if not isinstance(d["identity"], int) or isinstance(d["identity"], bool) or d["identity"] < 0:
        raise ManifestError(f"{where}: identity must be a non-negative integer")
    if d["split"] not in SPLITS:
        raise ManifestError(f"{where}: split must be one of {SPLITS}")
    if not isinstance(d["caption"], str) or not d["caption"].strip():
        raise ManifestError(f"{where}: caption must be a non-empty string")
    masks = d["part_masks"]
    if not isinstance(masks, list) or [m.get("part") for m in masks] != list(PART_NAMES):
        raise ManifestError(f"{where}: part_masks must list the parts {PART_NAMES} in order")
    parsed = []
    for m in masks:
        if set(m) == {"part", "grid"}:
            parsed.append({"part": m["part"], "grid": hex_to_grid(m["grid"])})
        elif set(m) == {"part", "box"}:
            box = m["box"]
            if (len(box) != 4 or not all(isinstance(v, int) for v in box)
                    or box[0] < 0 or box[1] < 0 or box[2] < box[0] or box[3] < box[1]):
                raise ManifestError(f"{where}: malformed box {box}")
            parsed.append({"part": m["part"], "box": tuple(box)})
        else:
            raise ManifestError(f"{where}: part mask needs exactly one of grid/box")
    texts = d.get("part_texts")
    if texts is not None and (len(texts) != len(PART_NAMES) or not all(isinstance(t, str) for t in texts)):
        raise ManifestError(f"{where}: part_texts must hold {len(PART_NAMES)} strings")
    return SampleRecord(d["image_path"], d["caption"], d["identity"], parsed, d["split"],
                        texts, d.get("attributes"), d.get("augmentation"))


def write_manifest(records: Iterable[SampleRecord], path: str | Path) -> None:
    lines = [json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path, check_images: bool = True) -> list[SampleRecord]:
    """Load and validate a manifest, including externally produced ones.

    Checks every record's schema, that boxes lie inside their images, and that
    no identity appears in both splits.
    """
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        record = _parse_record(d, f"{path}:{lineno}")
        image = path.parent / record.image_path
        if check_images:
            if not image.is_file():
                raise ManifestError(f"{path}:{lineno}: missing image {record.image_path}")
            if record.provenance == "box":
                with Image.open(image) as im:
                    w, h = im.size
                for m in record.part_masks:
                    if "box" in m and (m["box"][2] > w or m["box"][3] > h):
                        raise ManifestError(f"{path}:{lineno}: box {m['box']} outside {w}x{h} image")
        records.append(record)
    if not records:
        raise ManifestError(f"{path}: manifest is empty")
    check_split_disjoint(records)
    return records


def check_split_disjoint(records: Sequence[SampleRecord]) -> None:
    train = {r.identity for r in records if r.split == "train"}
    test = {r.identity for r in records if r.split == "test"}
    overlap = train & test
    if overlap:
        raise ManifestError(f"identities in both splits: {sorted(overlap)[:10]}")


# ---------------------------------------------------------------------------
# Generation


def images_per_id_counts(num_ids: int, images_per_id, rng: np.random.Generator) -> list[int]:
    if images_per_id == "paper":
        sizes = np.array(list(PAPER_IMAGES_PER_ID))
        weights = np.array(list(PAPER_IMAGES_PER_ID.values()), np.float64)
        return [int(v) for v in rng.choice(sizes, size=num_ids, p=weights / weights.sum())]
    n = int(images_per_id)
    if n < 1:
        raise ValueError("images_per_id must be positive")
    return [n] * num_ids


def generate_dataset(out_dir: str | Path, num_ids: int, images_per_id=3, seed: int = 0,
                     render_size: int = 96, num_fillers: int = 2,
                     occlusion_prob: float = 0.1, train_fraction: float = 0.7) -> list[SampleRecord]:
    """Render a dataset into ``out_dir`` (images/ + manifest.jsonl)."""
    if num_ids < 2:
        raise ValueError("need at least two identities for contrastive batches")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    specs = sample_specs(num_ids, rng)
    counts = images_per_id_counts(num_ids, images_per_id, rng)
    order = rng.permutation(num_ids)
    n_train = min(num_ids - 1, max(1, int(math.floor(train_fraction * num_ids + 0.5))))
    train_ids = {int(i) for i in order[:n_train]}

    records = []
    tasks = [(identity, j) for identity in range(num_ids) for j in range(counts[identity])]
    for index, (identity, j) in enumerate(tasks):
        # Per-record seed keeps any single record reproducible on its own.
        rec_rng = np.random.default_rng([seed, identity, j])
        spec = specs[identity]
        view = sample_view(rec_rng, occlusion_prob)
        pixels, masks = render_vehicle(spec, view, render_size)
        name = f"images/{index:05d}.png"
        Image.fromarray(pixels).save(out_dir / name, format="PNG")
        part_masks = [{"part": p, "grid": pixel_mask_to_grid(m)} for p, m in zip(PART_NAMES, masks)]
        records.append(SampleRecord(
            image_path=name,
            caption=make_caption(spec, rec_rng, num_fillers),
            identity=identity,
            part_masks=part_masks,
            split="train" if identity in train_ids else "test",
            part_texts=part_texts(spec),
            attributes={"spec": spec.as_dict(), "view": view.as_dict(), "render_size": render_size},
        ))
    write_manifest(records, out_dir / "manifest.jsonl")
    return records


# ---------------------------------------------------------------------------
# Augmentation


def augment(record: SampleRecord, gamma_bright: float = 0.6, gamma_dark: float = 1.6,
            noise_sigma: float = 0.05, seed: int = 0) -> list[SampleRecord]:
    """Three extra training copies: over-exposed, under-exposed, Gaussian noise.

    The images are not rewritten; each copy carries an ``augmentation`` entry
    that the loader applies on read. Labels and part masks are shared.
    """
    if record.split != "train":
        raise ValueError("augmentation is only applied to training records")
    if record.augmentation is not None:
        raise ValueError("record is already an augmented copy")
    if gamma_bright == 1.0 or gamma_dark == 1.0:
        raise ValueError("gamma 1.0 would reproduce the original image")
    noise_seed = (zlib.crc32(record.image_path.encode()) ^ seed) & 0x7FFFFFFF
    augs = [{"kind": "gamma", "gamma": gamma_bright},
            {"kind": "gamma", "gamma": gamma_dark},
            {"kind": "noise", "sigma": noise_sigma, "seed": noise_seed}]
    return [SampleRecord(record.image_path, record.caption, record.identity, record.part_masks,
                         record.split, record.part_texts, record.attributes, aug)
            for aug in augs]


def augment_records(records: Sequence[SampleRecord], **kwargs) -> list[SampleRecord]:
    """Each training record followed by its three copies; test records untouched."""
    out = []
    for r in records:
        out.append(r)
        if r.split == "train":
            out.extend(augment(r, **kwargs))
    return out


def apply_augmentation(pixels: np.ndarray, aug: Optional[dict]) -> np.ndarray:
    """Apply a record's augmentation to float pixels in [0, 1]."""
    if aug is None:
        return pixels
    if aug["kind"] == "gamma":
        out = np.power(pixels, aug["gamma"])
    elif aug["kind"] == "noise":
        noise = np.random.default_rng(aug["seed"]).normal(0.0, aug["sigma"], pixels.shape)
        out = pixels + noise
    else:
        raise ValueError(f"unknown augmentation {aug['kind']!r}")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Part masks on the patch grid


def _covering(i: int, src: int, dst: int) -> range:
    lo = (i * src) // dst
    hi = max(lo + 1, -(-((i + 1) * src) // dst))
    return range(lo, hi)


def grid_to_patch_mask(grid, num_patches: int) -> tuple[np.ndarray, bool]:
    """Resample a 24 x 24 grid onto the sqrt(L_v) x sqrt(L_v) patch grid.

    A patch is set iff any grid cell it covers is set. Returns the flattened
    row (L_v,) and whether the part is present.
    """
    grid = np.asarray(grid, np.uint8)
    side = math.isqrt(num_patches)
    if side * side != num_patches:
        raise ValueError(f"L_v={num_patches} is not a perfect square")
    src = grid.shape[0]
    out = np.zeros((side, side), np.uint8)
    for i in range(side):
        rows = _covering(i, src, side)
        for j in range(side):
            cols = _covering(j, src, side)
            out[i, j] = grid[rows.start:rows.stop, cols.start:cols.stop].any()
    row = out.reshape(-1)
    return row, bool(row.any())


def box_to_grid(box, height: int, width: int) -> np.ndarray:
    """Rasterize a pixel box [x0, y0, x1, y1) onto the 24 x 24 grid by cell overlap."""
    x0, y0, x1, y1 = box
    grid = np.zeros((GRID, GRID), np.uint8)
    if x1 <= x0 or y1 <= y0:
        return grid
    for r in range(GRID):
        cy0, cy1 = r * height / GRID, (r + 1) * height / GRID
        if not (y0 < cy1 and y1 > cy0):
            continue
        for c in range(GRID):
            cx0, cx1 = c * width / GRID, (c + 1) * width / GRID
            if x0 < cx1 and x1 > cx0:
                grid[r, c] = 1
    return grid


def record_patch_mask(record: SampleRecord, num_patches: int,
                      image_hw: Optional[tuple[int, int]] = None) -> np.ndarray:
    """(K, L_v) patch mask for a record."""
    grids = record.grids(image_hw)
    return np.stack([grid_to_patch_mask(g, num_patches)[0] for g in grids])


def make_part_masked_image(pixels: np.ndarray, part_boxes: Sequence[Sequence[int]]) -> np.ndarray:
    """Zero the pixels inside the union of ``part_boxes`` ([x0, y0, x1, y1))."""
    out = np.array(pixels, copy=True)
    h, w = out.shape[:2]
    for x0, y0, x1, y1 in part_boxes:
        if not (0 <= x0 <= x1 <= w and 0 <= y0 <= y1 <= h):
            raise ValueError(f"box {(x0, y0, x1, y1)} outside {w}x{h} image")
        out[y0:y1, x0:x1] = 0
    return out
