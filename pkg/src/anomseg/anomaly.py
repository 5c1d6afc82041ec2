"""Training objective and anomaly-map inference.

The loss sums, over levels, the mean channel-wise cosine distance between
reconstructed and filtered features plus their mean squared error. At
inference each level yields a per-pixel cosine-distance map, upsampled to
image size; the final score field is the pointwise product of all level maps,
so a pixel any level considers normal is vetoed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .autodiff import ShapeError, Tensor, node, tensor_mean
from .nnops import bilinear_upsample

_NORM_EPS = 1e-12


def channel_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel cosine similarity along the channel axis of (B,C,H,W) or
    (C,H,W) inputs. Pixels where either vector's norm falls below 1e-12
    score similarity 1 (distance 0) and receive zero gradient."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine operands differ: {a.shape} vs {b.shape}")
    if a.ndim not in (3, 4):
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {a.shape}")
    ax = a.ndim - 3
    ad, bd = a.data, b.data
    subs = "chw,chw->hw" if a.ndim == 3 else "bchw,bchw->bhw"
    dot = np.einsum(subs, ad, bd)
    na = np.sqrt(np.einsum(subs, ad, ad))
    nb = np.sqrt(np.einsum(subs, bd, bd))
    valid = (na >= _NORM_EPS) & (nb >= _NORM_EPS)
    denom = np.where(valid, na * nb, 1.0)
    sim = np.where(valid, dot / denom, 1.0)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward_rule(g):
        gv = np.where(valid, g, 0.0)
        scale = np.expand_dims(gv / denom, ax)
        simx = np.expand_dims(np.where(valid, sim, 0.0), ax)
        denomx = np.expand_dims(denom, ax)
        ga = gb = None
        if need_a:
            na2 = np.expand_dims(np.where(valid, na * na, 1.0), ax)
            ga = scale * (bd - simx * ad * denomx / na2)
        if need_b:
            nb2 = np.expand_dims(np.where(valid, nb * nb, 1.0), ax)
            gb = scale * (ad - simx * bd * denomx / nb2)
        return ga, gb

    return node(sim, (a, b), backward_rule)


def mean_squared_error(a: Tensor, b: Tensor) -> Tensor:
    """Fused mean((a-b)^2) over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    data = np.mean(diff * diff)
    scale = 2.0 / diff.size
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward_rule(g):
        base = (g * scale) * diff
        return (base if need_a else None), (-base if need_b else None)

    return node(data, (a, b), backward_rule)


@dataclass
class LossBreakdown:
    """Per-level cosine and MSE terms plus the differentiable total."""

    cosine: list[float]
    mse: list[float]
    total: Tensor

    @property
    def total_value(self) -> float:
        return float(self.total.data)


def training_loss(recon: list[Tensor], targets: list[Tensor]) -> LossBreakdown:
    """Sum over levels of mean cosine distance plus mean squared error."""
    if len(recon) != len(targets):
        raise ShapeError(f"{len(recon)} reconstructions vs {len(targets)} targets")
    cos_terms: list[float] = []
    mse_terms: list[float] = []
    total: Tensor | None = None
    for zr, zo in zip(recon, targets):
        if zr.shape != zo.shape:
            raise ShapeError(f"level shapes differ: {zr.shape} vs {zo.shape}")
        cos = tensor_mean(1.0 - channel_cosine(zr, zo))
        mse = mean_squared_error(zr, zo)
        cos_terms.append(float(cos.data))
        mse_terms.append(float(mse.data))
        level_total = cos + mse
        total = level_total if total is None else total + level_total
    return LossBreakdown(cosine=cos_terms, mse=mse_terms, total=total)


def level_anomaly_map(zr: Tensor, zo: Tensor, out_h: int, out_w: int) -> Tensor:
    """1 - cosine similarity per pixel, bilinearly upsampled to (out_h, out_w)."""
    dist = 1.0 - channel_cosine(zr, zo)
    return bilinear_upsample(dist, out_h, out_w)


def aggregate_maps(factors: list[np.ndarray]) -> np.ndarray:
    """Pointwise product across levels; zeros veto."""
    out = np.array(factors[0], dtype=np.float64, copy=True)
    for f in factors[1:]:
        out *= f
    return out


@dataclass
class AnomalyMap:
    """Final score field, its per-level factors, and the source image id."""

    final: np.ndarray
    factors: list[np.ndarray]
    image_id: str = ""

    def validate(self, tol: float = 1e-6) -> None:
        for i, f in enumerate(self.factors, start=1):
            if f.min() < -tol or f.max() > 2.0 + tol:
                raise ValueError(f"factor {i} outside [0,2]: [{f.min()}, {f.max()}]")
        prod = aggregate_maps(self.factors)
        if np.max(np.abs(prod - self.final)) > tol:
            raise ValueError("final map is not the product of its factors")

    @property
    def image_score(self) -> float:
        """Max-pooled convenience score; not validated as an image-level metric."""
        return float(self.final.max())


def compute_anomaly_map(recon: list[Tensor], targets: list[Tensor],
                        out_h: int, out_w: int, image_id: str = "",
                        levels: list[int] | None = None) -> AnomalyMap:
    """Build the per-level factors and their product for one image.

    recon/targets are unbatched (C,H,W) per level; `levels` (1-based)
    restricts which factors enter the product (ablation mode) while factors
    are always computed for all levels.
    """
    factors = []
    for zr, zo in zip(recon, targets):
        fmap = level_anomaly_map(zr, zo, out_h, out_w)
        factors.append(np.asarray(fmap.data, dtype=np.float64))
    chosen = factors if levels is None else [factors[i - 1] for i in levels]
    return AnomalyMap(final=aggregate_maps(chosen), factors=factors, image_id=image_id)


def export_anomaly_map(amap: AnomalyMap, out_dir, stem: str) -> None:
    """Write final map as .ust plus min-max normalized PGM with a JSON sidecar
    recording the normalization bounds (and per-level factors as .ust)."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    fileio.write_ust(root / f"{stem}.ust", amap.final.astype(np.float32))
    for i, f in enumerate(amap.factors, start=1):
        fileio.write_ust(root / f"{stem}_level{i}.ust", f.astype(np.float32))
    lo = float(amap.final.min())
    hi = float(amap.final.max())
    span = hi - lo if hi > lo else 1.0
    fileio.write_pgm(root / f"{stem}.pgm", (amap.final - lo) / span)
    sidecar = {"image_id": amap.image_id, "min": lo, "max": hi,
               "levels": len(amap.factors)}
    (root / f"{stem}.json").write_text(json.dumps(sidecar, indent=1))
