"""Deterministic synthetic anomaly-segmentation corpus.

Five textured categories by default (stripes, checker, smooth blobs) at desk
scale. Train splits contain only defect-free images; test splits mix normal
images with images carrying injected spots, scratch polylines, or rectangle
occlusions, each with an exact ground-truth mask. All randomness derives from
one master seed, split per category, so generation is byte-reproducible and
may run per-category in parallel without changing output.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fileio

# every anomalous pixel differs from the clean rendering by at least this
# much per channel (before 8-bit quantization)
CONTRAST_FLOOR = 0.25

TEXTURES = ("stripes", "checker", "blobs")
ANOMALY_TYPES = ("spot", "scratch", "rect")


class IntegrityError(RuntimeError):
    """Corpus file does not match its manifest hash."""


@dataclass
class CategorySpec:
    name: str
    texture: str
    target_ar: float
    base_color: tuple[float, float, float]
    alt_color: tuple[float, float, float]

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; choose from {TEXTURES}")
        if not 0.0 < self.target_ar < 0.5:
            raise ValueError(f"target_ar must be in (0, 0.5), got {self.target_ar}")


def _default_categories() -> list[CategorySpec]:
    return [
        CategorySpec("stripes_teal", "stripes", 0.020, (0.20, 0.55, 0.60), (0.80, 0.85, 0.90)),
        CategorySpec("stripes_amber", "stripes", 0.010, (0.75, 0.50, 0.20), (0.30, 0.20, 0.10)),
        CategorySpec("checker_slate", "checker", 0.030, (0.35, 0.35, 0.40), (0.70, 0.70, 0.75)),
        CategorySpec("blobs_moss", "blobs", 0.050, (0.25, 0.45, 0.25), (0.70, 0.75, 0.50)),
        CategorySpec("blobs_plum", "blobs", 0.015, (0.45, 0.25, 0.45), (0.85, 0.80, 0.70)),
    ]


@dataclass
class CorpusSpec:
    image_size: int = 64
    train_count: int = 200
    test_normal: int = 40
    test_anomalous: int = 40
    anomaly_types: tuple[str, ...] = ANOMALY_TYPES
    master_seed: int = 1234
    categories: list[CategorySpec] = field(default_factory=_default_categories)

    def __post_init__(self):
        for t in self.anomaly_types:
            if t not in ANOMALY_TYPES:
                raise ValueError(f"unknown anomaly type {t!r}")

    @classmethod
    def from_json(cls, doc: dict) -> "CorpusSpec":
        doc = dict(doc)
        cats = doc.pop("categories", None)
        known = {"image_size", "train_count", "test_normal", "test_anomalous",
                 "anomaly_types", "master_seed"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown corpus spec keys: {sorted(unknown)}")
        spec = cls(**{k: tuple(v) if k == "anomaly_types" else v for k, v in doc.items()})
        if cats is not None:
            spec.categories = [CategorySpec(
                name=c["name"], texture=c["texture"], target_ar=c["target_ar"],
                base_color=tuple(c["base_color"]), alt_color=tuple(c["alt_color"]),
            ) for c in cats]
        return spec

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    image: np.ndarray  # (3,H,W) float32 in [0,1]
    mask: np.ndarray   # (H,W) uint8 in {0,1}
    category: str
    split: str         # train | test
    label: str         # good | anomalous
    image_id: str
    path: str


# ---------------------------------------------------------------------------
# texture renderers
# ---------------------------------------------------------------------------

def _colorize(value: np.ndarray, base, alt) -> np.ndarray:
    """Blend two RGB colors by a scalar field in [0,1] -> (3,H,W)."""
    base = np.asarray(base, dtype=np.float32)[:, None, None]
    alt = np.asarray(alt, dtype=np.float32)[:, None, None]
    return base + (alt - base) * value[None].astype(np.float32)


def _coarse_noise(gen, size, cells=8):
    """Smooth random field: bilinear blow-up of a coarse uniform grid."""
    coarse = gen.random(size=(cells, cells))
    pos = (np.arange(size) + 0.5) * (cells / size) - 0.5
    pos = np.clip(pos, 0, cells - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, cells - 1)
    frac = pos - lo
    rows = coarse[lo][:, lo] * np.outer(1 - frac, 1 - frac)
    rows += coarse[lo][:, hi] * np.outer(1 - frac, frac)
    rows += coarse[hi][:, lo] * np.outer(frac, 1 - frac)
    rows += coarse[hi][:, hi] * np.outer(frac, frac)
    return rows


def category_style(cat: CategorySpec, master_seed: int, index: int) -> dict:
    """Per-category style parameters, fixed across all images of a category."""
    gen = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(index, 0))))
    if cat.texture == "stripes":
        return {"angle": gen.uniform(0, np.pi), "period": gen.uniform(6, 12)}
    if cat.texture == "checker":
        return {"cell": int(gen.integers(5, 9))}
    return {"cells": int(gen.integers(6, 10))}


def render_normal(cat: CategorySpec, style: dict,
                  img_gen: np.random.Generator, size: int) -> np.ndarray:
    """Draw one defect-free image; img_gen supplies the per-image variation."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if cat.texture == "stripes":
        phase = img_gen.uniform(0, 2 * np.pi)
        coord = xx * np.cos(style["angle"]) + yy * np.sin(style["angle"])
        value = 0.5 + 0.5 * np.sin(2 * np.pi * coord / style["period"] + phase)
    elif cat.texture == "checker":
        cell = style["cell"]
        dx, dy = img_gen.integers(0, cell, size=2)
        value = (((xx + dx) // cell + (yy + dy) // cell) % 2).astype(np.float64)
        value = 0.15 + 0.7 * value  # soften so both tiles carry texture noise
    else:  # blobs
        value = _coarse_noise(img_gen, size, cells=style["cells"])
    img = _colorize(value, cat.base_color, cat.alt_color)
    # per-image 2px speckle grain, zero-meaned over 4x4 blocks: fine-scale
    # detail no reconstruction can predict, so the finest feature level
    # over-fires on normal images while coarser levels barely see it
    half = img_gen.normal(0.0, 1.0, size=(size // 2, size // 2))
    grain = np.repeat(np.repeat(half, 2, axis=0), 2, axis=1)
    blocks = grain.reshape(size // 4, 4, size // 4, 4)
    grain = (blocks - blocks.mean(axis=(1, 3), keepdims=True)).reshape(size, size)
    img += (0.04 * grain[None]).astype(np.float32)
    img += img_gen.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    _stamp_marks(img, img_gen, size)
    return np.clip(img, 0.0, 1.0)


def _stamp_marks(img: np.ndarray, gen: np.random.Generator, size: int) -> None:
    """Scatter a few tiny high-contrast specks (knots, pits). They belong to
    the normal class: positions and colors are random per image, so they defy
    reconstruction at fine scale, yet they are far smaller than any injected
    defect and vanish at coarse scales."""
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(gen.integers(4, 9))):
        radius = gen.uniform(0.8, 2.0)
        cy = gen.uniform(radius + 1, size - radius - 1)
        cx = gen.uniform(radius + 1, size - radius - 1)
        spot = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        vals = img[:, spot]
        delta = (0.3 + 0.1 * gen.random(size=vals.shape)).astype(np.float32)
        direction = np.where(vals < 0.5, 1.0, -1.0).astype(np.float32)
        img[:, spot] = np.clip(vals + direction * delta, 0.0, 1.0)


# ---------------------------------------------------------------------------
# anomaly injection
# ---------------------------------------------------------------------------

def _spot_mask(gen, size, area):
    radius = float(np.sqrt(area / np.pi))
    if 2 * (radius + 1) >= size:
        raise ValueError(f"anomaly area {area:.0f}px does not fit a {size}x{size} image")
    margin = radius + 1
    cy = gen.uniform(margin, size - margin)
    cx = gen.uniform(margin, size - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius)


def _rect_mask(gen, size, area):
    aspect = gen.uniform(0.5, 2.0)
    w = max(2, int(round(np.sqrt(area * aspect))))
    h = max(2, int(round(area / w)))
    if w >= size or h >= size:
        raise ValueError(f"anomaly area {area:.0f}px does not fit a {size}x{size} image")
    x0 = int(gen.integers(0, size - w))
    y0 = int(gen.integers(0, size - h))
    mask = np.zeros((size, size), dtype=bool)
    mask[y0:y0 + h, x0:x0 + w] = True
    return mask


def _scratch_mask(gen, size, area):
    # width 1-3 px, but no thinner than the length cap allows for this area
    min_width = max(1, int(np.ceil(area / (1.4 * size))))
    width = int(gen.integers(min_width, 4))
    length = min(area / width, 1.4 * size)
    segments = int(gen.integers(2, 5))
    pts = [np.array([gen.uniform(4, size - 4), gen.uniform(4, size - 4)])]
    heading = gen.uniform(0, 2 * np.pi)
    for _ in range(segments):
        heading += gen.uniform(-0.6, 0.6)
        step = length / segments
        nxt = pts[-1] + step * np.array([np.sin(heading), np.cos(heading)])
        pts.append(np.clip(nxt, 1, size - 2))
    mask = np.zeros((size, size), dtype=bool)
    half = width / 2.0
    for a, b in zip(pts, pts[1:]):
        seg = b - a
        n = max(2, int(np.ceil(np.linalg.norm(seg) * 4)))
        for t in np.linspace(0.0, 1.0, n):
            cy, cx = a + t * seg
            y0, y1 = int(np.floor(cy - half)), int(np.ceil(cy + half))
            x0, x1 = int(np.floor(cx - half)), int(np.ceil(cx + half))
            for y in range(max(0, y0), min(size, y1 + 1)):
                for x in range(max(0, x0), min(size, x1 + 1)):
                    if (y - cy) ** 2 + (x - cx) ** 2 <= half * half + 0.25:
                        mask[y, x] = True
    return mask


_MAKERS = {"spot": _spot_mask, "rect": _rect_mask, "scratch": _scratch_mask}


def make_anomalous(image: np.ndarray, gen: np.random.Generator, target_area: float,
                   anomaly_types: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Inject one defect; returns (corrupted image, binary mask).

    Masked pixels are pushed away from the clean value by at least
    CONTRAST_FLOOR per channel, toward the far end of the [0,1] range.
    """
    size = image.shape[-1]
    area = target_area * gen.uniform(0.85, 1.15)
    # a scratch is capped at width 3 and length 1.4*size; drop it as a
    # candidate when it cannot realize the requested area
    feasible = tuple(t for t in anomaly_types
                     if t != "scratch" or area <= 3 * 1.4 * size)
    kind = feasible[int(gen.integers(0, len(feasible)))]
    mask = _MAKERS[kind](gen, size, area)
    if not mask.any():
        mask = _spot_mask(gen, size, max(area, 4.0))
    out = image.copy()
    n = int(mask.sum())
    delta = (CONTRAST_FLOOR + 0.05 + 0.1 * gen.random(size=(3, n))).astype(np.float32)
    vals = out[:, mask]
    direction = np.where(vals < 0.5, 1.0, -1.0).astype(np.float32)
    out[:, mask] = np.clip(vals + direction * delta, 0.0, 1.0)
    return out, mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# corpus generation / loading
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate(spec: CorpusSpec, out_dir) -> dict:
    """Write the corpus tree and manifest.json; returns the manifest."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    size = spec.image_size
    test_pixels = (spec.test_normal + spec.test_anomalous) * size * size
    manifest = {"format": 1, "master_seed": spec.master_seed, "image_size": size,
                "spec": spec.to_json(), "categories": []}
    for ci, cat in enumerate(spec.categories):
        style = category_style(cat, spec.master_seed, ci)
        img_gen = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=spec.master_seed, spawn_key=(ci, 1))))
        entry = {"name": cat.name, "target_ar": cat.target_ar, "images": []}
        for sub in ("train/good", "train/anomalous", "test/good", "test/anomalous"):
            (root / cat.name / sub).mkdir(parents=True, exist_ok=True)
        per_image_area = cat.target_ar * test_pixels / spec.test_anomalous
        anom_px = 0

        def emit(split, label, idx, anomalous):
            nonlocal anom_px
            img = render_normal(cat, style, img_gen, size)
            mask = np.zeros((size, size), dtype=np.uint8)
            if anomalous:
                img, mask = make_anomalous(img, img_gen, per_image_area, spec.anomaly_types)
                anom_px += int(mask.sum())
            rel = f"{cat.name}/{split}/{label}/{idx:03d}.ppm"
            fileio.write_ppm(root / rel, img)
            rec = {"id": f"{cat.name}/{split}/{label}/{idx:03d}", "path": rel,
                   "split": split, "label": label, "sha256": _sha256(root / rel),
                   "mask": None, "mask_sha256": None}
            if anomalous:
                mrel = f"{cat.name}/{split}/{label}/{idx:03d}_mask.pgm"
                fileio.write_pgm(root / mrel, mask * 255)
                rec["mask"] = mrel
                rec["mask_sha256"] = _sha256(root / mrel)
            entry["images"].append(rec)

        for i in range(spec.train_count):
            emit("train", "good", i, anomalous=False)
        for i in range(spec.test_normal):
            emit("test", "good", i, anomalous=False)
        for i in range(spec.test_anomalous):
            emit("test", "anomalous", i, anomalous=True)

        entry["anomalous_pixels"] = anom_px
        entry["total_test_pixels"] = test_pixels
        entry["measured_ar"] = anom_px / test_pixels
        rel_err = abs(entry["measured_ar"] - cat.target_ar) / cat.target_ar
        if rel_err > 0.30:
            raise ValueError(
                f"{cat.name}: generated AR {entry['measured_ar']:.4f} misses target "
                f"{cat.target_ar:.4f} by {rel_err:.0%}")
        manifest["categories"].append(entry)

    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load(corpus_dir, split: str | None = None, category: str | None = None):
    """Stream samples in manifest order, verifying file hashes."""
    root = Path(corpus_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    size = manifest["image_size"]
    for entry in manifest["categories"]:
        if category is not None and entry["name"] != category:
            continue
        for rec in entry["images"]:
            if split is not None and rec["split"] != split:
                continue
            path = root / rec["path"]
            if _sha256(path) != rec["sha256"]:
                raise IntegrityError(f"hash mismatch for {rec['path']}")
            image = fileio.read_ppm(path)
            mask = np.zeros((size, size), dtype=np.uint8)
            if rec["mask"] is not None:
                mpath = root / rec["mask"]
                if _sha256(mpath) != rec["mask_sha256"]:
                    raise IntegrityError(f"hash mismatch for {rec['mask']}")
                mask = (fileio.read_pgm(mpath) > 127).astype(np.uint8)
            yield Sample(image=image, mask=mask, category=entry["name"],
                         split=rec["split"], label=rec["label"],
                         image_id=rec["id"], path=str(path))


def read_manifest(corpus_dir) -> dict:
    return json.loads((Path(corpus_dir) / "manifest.json").read_text())
