"""Training and evaluation loops over a synthetic corpus.

One unified model is trained over all categories; the frozen provider's
pyramids are precomputed once per image since they never change. All compute
is pinned to single-threaded BLAS: the graphs are small, so thread fan-out
costs more than it saves, and fixed kernels keep runs byte-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import fileio
from .anomaly import AnomalyMap, aggregate_maps, compute_anomaly_map, \
    export_anomaly_map, level_anomaly_map, training_loss
from .autodiff import NumericError, Tensor, backward, no_grad
from .decoder import MultiLevelDecoder
from .frontend import GaussianKernel, TinyBackbone, filter_and_concat
from .metrics import (CategoryResult, EvalReport, ScoredMask, anomaly_rate,
                      dataset_dsc, pool, select_threshold, sweep_curve,
                      auroc as auroc_metric, average_precision)
from .optim import AdamW
from .synth import Sample


class DataError(RuntimeError):
    """Corpus violates a training precondition (e.g. anomalies in train)."""


@dataclass
class FeatureCache:
    """Per-image filtered targets and decoder inputs, all float32 arrays."""

    targets: list[list[np.ndarray]]  # [image][level] -> (C,H,W)
    inputs: list[list[np.ndarray]]   # [image][level] -> (2C,H,W)

    def __len__(self):
        return len(self.targets)


def build_feature_cache(samples: list[Sample], backbone: TinyBackbone,
                        kernel: GaussianKernel, batch_size: int = 16) -> FeatureCache:
    targets: list[list[np.ndarray]] = []
    inputs: list[list[np.ndarray]] = []
    with threadpool_limits(limits=1):
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images = Tensor(np.stack([s.image for s in chunk]))
            filtered, merged = filter_and_concat(backbone.extract(images), kernel)
            for bi in range(len(chunk)):
                targets.append([lv.data[bi] for lv in filtered.levels])
                inputs.append([lv.data[bi] for lv in merged.levels])
    return FeatureCache(targets=targets, inputs=inputs)


def _batch_tensors(cache: FeatureCache, idx: np.ndarray):
    levels = len(cache.targets[0])
    zc = [Tensor(np.stack([cache.inputs[i][lv] for i in idx])) for lv in range(levels)]
    zo = [Tensor(np.stack([cache.targets[i][lv] for i in idx])) for lv in range(levels)]
    return zc, zo


@dataclass
class EpochStats:
    epoch: int
    cosine: float
    mse: float
    total: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.cosine!r},{self.mse!r},{self.total!r}"


def train_model(model: MultiLevelDecoder, cache: FeatureCache, *, epochs: int,
                batch_size: int, optimizer: AdamW, decay_epochs: list[int],
                decay_factor: float, shuffle_gen: np.random.Generator,
                log_path=None, milestone_dir=None, progress=None) -> list[EpochStats]:
    """Run the optimization loop; returns per-epoch loss statistics.

    Raises NumericError as soon as the loss stops being finite.
    """
    n = len(cache)
    history: list[EpochStats] = []
    log_rows = ["epoch,cosine,mse,total"]
    with threadpool_limits(limits=1):
        for epoch in range(1, epochs + 1):
            if epoch in decay_epochs:
                optimizer.lr *= decay_factor
            perm = shuffle_gen.permutation(n)
            sums = np.zeros(3)
            for start in range(0, n, batch_size):
                idx = perm[start:start + batch_size]
                zc, zo = _batch_tensors(cache, idx)
                breakdown = training_loss(model.decode(zc), zo)
                if not np.isfinite(breakdown.total_value):
                    raise NumericError(f"non-finite loss at epoch {epoch}")
                optimizer.zero_grad()
                backward(breakdown.total)
                optimizer.step()
                sums += len(idx) * np.array([sum(breakdown.cosine),
                                             sum(breakdown.mse),
                                             breakdown.total_value])
            stats = EpochStats(epoch, *(sums / n))
            history.append(stats)
            log_rows.append(stats.csv_row())
            if progress is not None:
                progress(stats)
            if milestone_dir is not None and (epoch in decay_epochs or epoch == epochs):
                fileio.save_checkpoint(Path(milestone_dir) / f"checkpoint_ep{epoch:04d}.ckpt",
                                       model.state_dict())
    if log_path is not None:
        Path(log_path).write_text("\n".join(log_rows) + "\n")
    return history


def guard_train_split(samples: list[Sample]) -> None:
    for s in samples:
        if s.label != "good" or s.mask.any():
            raise DataError(f"anomalous sample in train split: {s.image_id}")


def evaluate_model(model: MultiLevelDecoder, backbone: TinyBackbone,
                   kernel: GaussianKernel, samples: list[Sample], *,
                   levels: list[int] | None = None, batch_size: int = 16,
                   heatmap_dir=None, curve_dir=None) -> EvalReport:
    """Pixel metrics over the test split, pooled per category."""
    by_category: dict[str, list[Sample]] = {}
    for s in samples:
        by_category.setdefault(s.category, []).append(s)

    results: dict[str, CategoryResult] = {}
    with threadpool_limits(limits=1):
        for name, group in by_category.items():
            scored: list[ScoredMask] = []
            for start in range(0, len(group), batch_size):
                chunk = group[start:start + batch_size]
                images = np.stack([s.image for s in chunk])
                h, w = images.shape[-2:]
                with no_grad():
                    filtered, merged = filter_and_concat(
                        backbone.extract(Tensor(images)), kernel)
                    recon = model.decode(merged.levels)
                    factor_stack = [level_anomaly_map(zr, zo, h, w).data
                                    for zr, zo in zip(recon, filtered.levels)]
                for bi, s in enumerate(chunk):
                    factors = [np.asarray(f[bi], dtype=np.float64) for f in factor_stack]
                    chosen = factors if levels is None else [factors[i - 1] for i in levels]
                    amap = AnomalyMap(final=aggregate_maps(chosen), factors=factors,
                                      image_id=s.image_id)
                    scored.append(ScoredMask(amap.final, s.mask))
                    if heatmap_dir is not None:
                        export_anomaly_map(amap, Path(heatmap_dir) / name,
                                           s.image_id.replace("/", "_"))
            pooled_scores, pooled_truth = pool(scored)
            curve = sweep_curve(pooled_scores, pooled_truth)
            thr = select_threshold(curve)
            mean_dsc, per_image = dataset_dsc(scored, thr)
            results[name] = CategoryResult(
                auroc=auroc_metric(pooled_scores, pooled_truth),
                pap=average_precision(pooled_scores, pooled_truth),
                dsc=mean_dsc,
                ar=anomaly_rate([s.truth for s in scored]),
                threshold=thr,
                per_image_dsc=per_image,
            )
            if curve_dir is not None:
                out = Path(curve_dir)
                out.mkdir(parents=True, exist_ok=True)
                (out / f"{name}.csv").write_text("\n".join(curve.csv_rows()) + "\n")
    return EvalReport(categories=results, levels=levels)
