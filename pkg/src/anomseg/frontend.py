"""Feature extraction frontend: a pluggable provider yields a multi-scale
pyramid, which is Gaussian-filtered and concatenated with its residual.

Providers are frozen: their weights never enter an optimizer. The bundled
TinyBackbone is a fixed-seed strided CNN standing in for a pretrained
pyramid extractor; FileProvider replays pyramids stored on disk.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .autodiff import ShapeError, Tensor, gelu, no_grad
from .inits import kaiming_uniform
from .nnops import conv2d


@dataclass
class GaussianKernel:
    """Normalized k x k Gaussian weights (k odd)."""

    size: int = 3
    sigma: float = 1.0
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.size % 2 == 0 or self.size < 1:
            raise ShapeError(f"Gaussian kernel size must be odd, got {self.size}")
        half = self.size // 2
        ax = np.arange(-half, half + 1, dtype=np.float64)
        sq = ax[:, None] ** 2 + ax[None, :] ** 2
        w = np.exp(-sq / (2.0 * self.sigma ** 2))
        self.weights = w / w.sum()


@dataclass
class FeaturePyramid:
    """K feature maps (C_i, H_i, W_i) with exactly halving resolution."""

    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ShapeError("pyramid needs at least one level")
        for a, b in zip(self.levels, self.levels[1:]):
            ha, wa = a.shape[-2:]
            hb, wb = b.shape[-2:]
            if hb * 2 != ha or wb * 2 != wa:
                raise ShapeError(f"levels must halve exactly: {a.shape} -> {b.shape}")

    def __len__(self):
        return len(self.levels)

    @property
    def channels(self) -> list[int]:
        return [lv.shape[-3] for lv in self.levels]

    @property
    def extents(self) -> list[tuple[int, int]]:
        return [lv.shape[-2:] for lv in self.levels]


def gaussian_filter(z: Tensor, kernel: GaussianKernel) -> Tensor:
    """Depthwise smooth each channel; reflect padding keeps the shape."""
    x = z.data
    k = kernel.size
    if x.shape[-1] < k or x.shape[-2] < k:
        raise ShapeError(f"spatial extent {x.shape[-2:]} smaller than kernel {k}")
    half = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (half, half)]
    xp = np.pad(x, pad, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(-2, -1))
    out = np.einsum("...ij,ij->...", win, kernel.weights.astype(np.float64))
    return Tensor(out.astype(x.dtype))


def filter_and_concat(raw: FeaturePyramid, kernel: GaussianKernel | None = None
                      ) -> tuple[FeaturePyramid, FeaturePyramid]:
    """-> (filtered pyramid, filtered++residual pyramid with doubled channels).

    The residual is filtered-minus-raw; concat order is [filtered, residual]
    along the channel axis.
    """
    kernel = kernel or GaussianKernel()
    filtered, merged = [], []
    for z in raw.levels:
        smooth = gaussian_filter(z, kernel)
        residual = smooth.data - z.data
        filtered.append(smooth)
        merged.append(Tensor(np.concatenate([smooth.data, residual], axis=-3)))
    return FeaturePyramid(filtered), FeaturePyramid(merged)


class TinyBackbone:
    """Fixed-seed strided CNN pyramid: per level one stride-2 conv + GELU.

    Each level is a non-overlapping 2x2 stride-2 conv, so spatial extents
    halve exactly. Weights are frozen at construction and never appear in an
    optimizer's parameter set; extraction is deterministic for a given image
    and seed.
    """

    def __init__(self, channels: tuple[int, ...] = (8, 16, 24, 32), seed: int = 0):
        self.channels = tuple(channels)
        self.seed = seed
        gen = np.random.Generator(np.random.PCG64(seed))
        self.weights: list[Tensor] = []
        cin = 3
        for cout in self.channels:
            w = kaiming_uniform(gen, (cout, cin, 2, 2), fan_in=cin * 4)
            self.weights.append(Tensor(w))  # requires_grad stays False
            cin = cout

    @property
    def num_levels(self) -> int:
        return len(self.channels)

    def extract(self, image: Tensor) -> FeaturePyramid:
        if image.shape[-3] != 3:
            raise ShapeError(f"expected RGB image (3,H,W), got {image.shape}")
        h, w = image.shape[-2:]
        div = 2 ** self.num_levels
        if h % div or w % div:
            raise ShapeError(f"image extent {h}x{w} not divisible by 2^{self.num_levels}")
        levels = []
        x = image
        with no_grad():
            for wgt in self.weights:
                x = gelu(conv2d(x, wgt, stride=2, pad=0))
                levels.append(x)
        return FeaturePyramid(levels)


class FileProvider:
    """Replays one precomputed pyramid per directory of .ust level files."""

    def __init__(self, path, expected_channels: tuple[int, ...] | None = None):
        self.path = Path(path)
        arrays = fileio.load_pyramid_dir(self.path)
        if expected_channels is not None:
            got = tuple(a.shape[0] for a in arrays)
            if got != tuple(expected_channels):
                raise ShapeError(f"{self.path}: channels {got} != expected {tuple(expected_channels)}")
        self._pyramid = FeaturePyramid([Tensor(a) for a in arrays])

    @property
    def num_levels(self) -> int:
        return len(self._pyramid)

    def extract(self, image: Tensor) -> FeaturePyramid:
        h1, w1 = self._pyramid.levels[0].shape[-2:]
        h, w = image.shape[-2:]
        if h != 2 * h1 or w != 2 * w1:
            raise ShapeError(f"stored pyramid level 1 is {h1}x{w1}; image {h}x{w} does not match")
        return self._pyramid


def provide(image: Tensor, provider) -> FeaturePyramid:
    """Run the provider and enforce the pyramid contract."""
    pyramid = provider.extract(image)
    h, w = image.shape[-2:]
    for i, lv in enumerate(pyramid.levels, start=1):
        eh, ew = lv.shape[-2:]
        if eh != h >> i or ew != w >> i:
            raise ShapeError(f"level {i} extent {eh}x{ew} != expected {h >> i}x{w >> i}")
    return pyramid


def save_pyramid(path, pyramid: FeaturePyramid) -> None:
    fileio.save_pyramid_dir(path, [lv.data for lv in pyramid.levels])


def load_pyramid(path) -> FeaturePyramid:
    return FeaturePyramid([Tensor(a) for a in fileio.load_pyramid_dir(path)])
