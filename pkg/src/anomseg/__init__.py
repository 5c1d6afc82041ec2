"""Unified anomaly segmentation at desk scale.

A one-for-all feature-reconstruction pipeline: a frozen provider extracts a
multi-scale pyramid, a hybrid transformer/CNN decoder reconstructs it level
by level, and per-level cosine-distance maps multiply into a pixel anomaly
map. Ships with an imbalance-aware metrics suite (AUROC, pixel AP, Dice) and
a deterministic synthetic corpus generator.
"""
from .autodiff import Tensor, backward, no_grad
from .decoder import DecoderConfig, MultiLevelDecoder
from .frontend import FeaturePyramid, GaussianKernel, TinyBackbone, filter_and_concat
from .metrics import EvalReport, auroc, average_precision, dsc, inflation_demo
from .synth import CorpusSpec, generate, load

__all__ = [
    "Tensor", "backward", "no_grad",
    "DecoderConfig", "MultiLevelDecoder",
    "FeaturePyramid", "GaussianKernel", "TinyBackbone", "filter_and_concat",
    "EvalReport", "auroc", "average_precision", "dsc", "inflation_demo",
    "CorpusSpec", "generate", "load",
]
