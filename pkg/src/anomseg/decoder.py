"""Multi-level hybrid reconstruction decoder.

Each level pairs a pre-norm transformer layer (cross-attention on that
level's patch tokens, then self-attention and a feed-forward block) with a
gated multi-granularity CNN for local refinement. A learnable query, reweighted
per sample by channel/spatial attention over the highest-level embedding,
seeds the first layer; levels run from the highest (coarsest) down to the
lowest, and every level emits a reconstruction through an unpatchify +
transposed-convolution head whose output matches that level's feature shape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ShapeError, Tensor, amax, concat, gelu, heads_view,
                       layer_norm, linear, matmul, merge_heads, parameter,
                       permute, reshape, sigmoid, softmax, tensor_mean)
from .inits import kaiming_uniform, trunc_normal
from .nnops import conv2d, conv_transpose2d


@dataclass
class DecoderConfig:
    feature_channels: tuple[int, ...] = (8, 16, 24, 32)
    embed_dim: int = 32
    heads: int = 4
    ffn_dim: int = 256
    grid_h: int = 4
    grid_w: int = 4
    patch_sizes: tuple[int, ...] = (8, 4, 2, 1)
    channel_attention: bool = False
    local_refine: bool = True
    reduction_ratio: int = 16
    spatial_kernel: int = 7

    def __post_init__(self):
        if len(self.patch_sizes) != len(self.feature_channels):
            raise ShapeError("patch_sizes and feature_channels must align per level")
        if self.embed_dim % self.heads:
            raise ShapeError(f"heads {self.heads} must divide embed dim {self.embed_dim}")
        if self.patch_sizes[-1] != 1:
            raise ShapeError("highest level must use patch size 1 (its extent is the grid)")
        for p_cur, p_next in zip(self.patch_sizes, self.patch_sizes[1:]):
            if p_cur != 2 * p_next:
                raise ShapeError(f"patch sizes must halve level to level, got {self.patch_sizes}")

    @property
    def num_levels(self) -> int:
        return len(self.feature_channels)

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def level_extent(self, level: int) -> tuple[int, int]:
        p = self.patch_sizes[level - 1]
        return self.grid_h * p, self.grid_w * p

    @classmethod
    def toy(cls, **overrides) -> "DecoderConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "DecoderConfig":
        base = dict(feature_channels=(24, 32, 56, 160), embed_dim=256, heads=4,
                    ffn_dim=2048, grid_h=14, grid_w=14, patch_sizes=(8, 4, 2, 1),
                    channel_attention=True)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_corpus(cls, image_size: int, feature_channels: tuple[int, ...],
                   **overrides) -> "DecoderConfig":
        k = len(feature_channels)
        grid = image_size >> k
        if grid < 1:
            raise ShapeError(f"image size {image_size} too small for {k} levels")
        patches = tuple(2 ** (k - i) for i in range(1, k + 1))
        return cls(feature_channels=tuple(feature_channels), grid_h=grid, grid_w=grid,
                   patch_sizes=patches, **overrides)


def _to_grid(tokens: Tensor, h: int, w: int) -> Tensor:
    """(B,N,C) -> (B,C,H,W), row-major token order."""
    b, n, c = tokens.shape
    return reshape(permute(tokens, (0, 2, 1)), (b, c, h, w))


def _to_tokens(grid: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,N,C)."""
    b, c, h, w = grid.shape
    return permute(reshape(grid, (b, c, h * w)), (0, 2, 1))


class LayerNormParams:
    def __init__(self, dim: int):
        self.gamma = parameter(np.ones(dim, dtype=np.float32))
        self.beta = parameter(np.zeros(dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, axis=-1)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class Linear:
    def __init__(self, gen, d_in: int, d_out: int):
        self.w = parameter(trunc_normal(gen, (d_in, d_out)))
        self.b = parameter(np.zeros(d_out, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def params(self):
        return [("weight", self.w), ("bias", self.b)]


class MultiHeadAttention:
    """Spatial attention over tokens, or (transposed) attention over channels."""

    def __init__(self, gen, dim: int, heads: int, channel_mode: bool = False):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.channel_mode = channel_mode
        self.wq = Linear(gen, dim, dim)
        self.wk = Linear(gen, dim, dim)
        self.wv = Linear(gen, dim, dim)
        self.wo = Linear(gen, dim, dim)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        t = self.channel_mode  # transposed layout swaps token and channel roles
        q = heads_view(self.wq(q_tokens), self.heads, transposed=t)
        k = heads_view(self.wk(kv_tokens), self.heads, transposed=not t)
        v = heads_view(self.wv(kv_tokens), self.heads, transposed=t)
        scale = 1.0 / np.sqrt(q.shape[-1])
        attn = softmax(matmul(q, k) * scale, axis=-1)
        out = merge_heads(matmul(attn, v), transposed=t)
        return self.wo(out)

    def params(self):
        out = []
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.extend((f"{name}/{p}", t) for p, t in lin.params())
        return out


class FeedForward:
    def __init__(self, gen, dim: int, hidden: int):
        self.lin1 = Linear(gen, dim, hidden)
        self.lin2 = Linear(gen, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(gelu(self.lin1(x)))

    def params(self):
        return ([(f"lin1/{p}", t) for p, t in self.lin1.params()]
                + [(f"lin2/{p}", t) for p, t in self.lin2.params()])


class TransformerLayer:
    """Pre-norm cross-attention, self-attention, feed-forward; optionally a
    channel-attention twin after the spatial pass."""

    def __init__(self, gen, dim: int, heads: int, ffn_dim: int, channel_attention: bool):
        self.ln_q = LayerNormParams(dim)
        self.ln_kv = LayerNormParams(dim)
        self.cross = MultiHeadAttention(gen, dim, heads)
        self.ln_sa = LayerNormParams(dim)
        self.self_attn = MultiHeadAttention(gen, dim, heads)
        self.ln_ffn = LayerNormParams(dim)
        self.ffn = FeedForward(gen, dim, ffn_dim)
        self.channel_attention = channel_attention
        if channel_attention:
            self.ln_ca = LayerNormParams(dim)
            self.chan = MultiHeadAttention(gen, dim, heads, channel_mode=True)
            self.ln_cffn = LayerNormParams(dim)
            self.cffn = FeedForward(gen, dim, ffn_dim)

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        x = q + self.cross(self.ln_q(q), self.ln_kv(kv))
        normed = self.ln_sa(x)
        x = x + self.self_attn(normed, normed)
        x = x + self.ffn(self.ln_ffn(x))
        if self.channel_attention:
            normed = self.ln_ca(x)
            x = x + self.chan(normed, normed)
            x = x + self.cffn(self.ln_cffn(x))
        return x

    def params(self):
        groups = [("ln_q", self.ln_q), ("ln_kv", self.ln_kv), ("cross", self.cross),
                  ("ln_sa", self.ln_sa), ("self_attn", self.self_attn),
                  ("ln_ffn", self.ln_ffn), ("ffn", self.ffn)]
        if self.channel_attention:
            groups += [("ln_ca", self.ln_ca), ("chan", self.chan),
                       ("ln_cffn", self.ln_cffn), ("cffn", self.cffn)]
        out = []
        for gname, comp in groups:
            out.extend((f"{gname}/{p}", t) for p, t in comp.params())
        return out


class PatchEmbed:
    """Stride-equals-kernel projection of a feature level into N tokens,
    plus a learned additive positional embedding on the token grid."""

    def __init__(self, gen, in_channels: int, embed_dim: int, patch: int, n_tokens: int):
        self.patch = patch
        self.weight = parameter(trunc_normal(gen, (embed_dim, in_channels, patch, patch)))
        self.bias = parameter(np.zeros(embed_dim, dtype=np.float32))
        self.pos = parameter(trunc_normal(gen, (n_tokens, embed_dim)))

    def __call__(self, z: Tensor) -> Tensor:
        x = conv2d(z, self.weight, stride=self.patch, pad=0, bias=self.bias)
        return _to_tokens(x) + self.pos

    def params(self):
        return [("weight", self.weight), ("bias", self.bias), ("pos", self.pos)]


class ConvBlock:
    def __init__(self, gen, dim: int, kernel: int):
        self.kernel = kernel
        self.weight = parameter(kaiming_uniform(gen, (dim, dim, kernel, kernel),
                                                fan_in=dim * kernel * kernel))
        self.bias = parameter(np.zeros(dim, dtype=np.float32))

    def __call__(self, grid: Tensor) -> Tensor:
        pad = (self.kernel - 1) // 2
        return conv2d(grid, self.weight, stride=1, pad=pad, bias=self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class MultiGranularityGatedCNN:
    """Four gated branches summed: a 1x1 conv plus 3x3 stacks of depth 1, 2,
    and 3, giving receptive fields 1/3/5/7. Every conv output passes a GELU
    gate, including each stacked block."""

    def __init__(self, gen, dim: int, grid_h: int, grid_w: int):
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.branches: list[list[ConvBlock]] = [[ConvBlock(gen, dim, 1)]]
        for depth in (1, 2, 3):
            self.branches.append([ConvBlock(gen, dim, 3) for _ in range(depth)])

    def __call__(self, tokens: Tensor) -> Tensor:
        b, n, c = tokens.shape
        if n != self.grid_h * self.grid_w:
            raise ShapeError(f"{n} tokens do not tile a {self.grid_h}x{self.grid_w} grid")
        grid = _to_grid(tokens, self.grid_h, self.grid_w)
        total = None
        for blocks in self.branches:
            x = grid
            for block in blocks:
                x = gelu(block(x))
            total = x if total is None else total + x
        return _to_tokens(total)

    def params(self):
        out = []
        for bi, blocks in enumerate(self.branches):
            for ki, block in enumerate(blocks):
                out.extend((f"branch{bi}/conv{ki}/{p}", t) for p, t in block.params())
        return out


class ReconstructionHead:
    """Unpatchify to the token grid, then a transposed conv with kernel ==
    stride == patch size back to the level's feature shape."""

    def __init__(self, gen, embed_dim: int, out_channels: int, patch: int,
                 grid_h: int, grid_w: int):
        self.patch = patch
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.weight = parameter(kaiming_uniform(gen, (embed_dim, out_channels, patch, patch),
                                                fan_in=embed_dim * patch * patch))
        self.bias = parameter(np.zeros(out_channels, dtype=np.float32))

    def __call__(self, tokens: Tensor) -> Tensor:
        grid = _to_grid(tokens, self.grid_h, self.grid_w)
        return conv_transpose2d(grid, self.weight, stride=self.patch, pad=0, bias=self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class QueryReweighter:
    """Channel and spatial gates computed from the highest-level embedding."""

    def __init__(self, gen, dim: int, reduction: int, spatial_kernel: int):
        hidden = max(1, dim // reduction)
        self.mlp1 = Linear(gen, dim, hidden)
        self.mlp2 = Linear(gen, hidden, dim)
        self.spatial_kernel = spatial_kernel
        self.conv_w = parameter(kaiming_uniform(
            gen, (1, 2, spatial_kernel, spatial_kernel), fan_in=2 * spatial_kernel ** 2))
        self.conv_b = parameter(np.zeros(1, dtype=np.float32))

    def channel_weights(self, grid: Tensor) -> Tensor:
        avg = tensor_mean(grid, axis=(-2, -1))          # (B,C)
        mx = amax(grid, axis=(-2, -1))                  # (B,C)
        return sigmoid(self.mlp2(gelu(self.mlp1(avg + mx))))

    def spatial_weights(self, grid: Tensor) -> Tensor:
        avg = tensor_mean(grid, axis=1, keepdims=True)  # (B,1,H,W)
        mx = amax(grid, axis=1, keepdims=True)
        stacked = concat([avg, mx], axis=1)
        pad = (self.spatial_kernel - 1) // 2
        out = conv2d(stacked, self.conv_w, stride=1, pad=pad, bias=self.conv_b)
        return sigmoid(out)                             # (B,1,H,W)

    def params(self):
        return ([(f"channel/mlp1/{p}", t) for p, t in self.mlp1.params()]
                + [(f"channel/mlp2/{p}", t) for p, t in self.mlp2.params()]
                + [("spatial/conv/weight", self.conv_w), ("spatial/conv/bias", self.conv_b)])


class SampleAwareQuery:
    """Learnable base query modulated per sample by the reweighter gates."""

    def __init__(self, gen, dim: int, grid_h: int, grid_w: int,
                 reduction: int, spatial_kernel: int):
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.base = parameter(trunc_normal(gen, (grid_h * grid_w, dim)))
        self.reweighter = QueryReweighter(gen, dim, reduction, spatial_kernel)

    def __call__(self, top_tokens: Tensor) -> Tensor:
        b, n, c = top_tokens.shape
        if n != self.grid_h * self.grid_w:
            raise ShapeError(f"top-level tokens {n} do not match query grid "
                             f"{self.grid_h}x{self.grid_w}")
        grid = _to_grid(top_tokens, self.grid_h, self.grid_w)
        wc = reshape(self.reweighter.channel_weights(grid), (b, 1, c))
        ws = reshape(self.reweighter.spatial_weights(grid), (b, n, 1))
        return self.base * wc * ws

    def params(self):
        return [("base", self.base)] + self.reweighter.params()


class MultiLevelDecoder:
    """Full decoder: per-level patch embeds, hybrid blocks consumed from the
    highest level down, reconstruction heads per level."""

    def __init__(self, config: DecoderConfig, gen: np.random.Generator):
        self.config = config
        c = config
        self.query = SampleAwareQuery(gen, c.embed_dim, c.grid_h, c.grid_w,
                                      c.reduction_ratio, c.spatial_kernel)
        self.embeds = []
        self.layers = []
        self.refiners = []
        self.heads = []
        for level in range(1, c.num_levels + 1):
            cin = 2 * c.feature_channels[level - 1]
            patch = c.patch_sizes[level - 1]
            self.embeds.append(PatchEmbed(gen, cin, c.embed_dim, patch, c.num_tokens))
            self.layers.append(TransformerLayer(gen, c.embed_dim, c.heads, c.ffn_dim,
                                                c.channel_attention))
            self.refiners.append(
                MultiGranularityGatedCNN(gen, c.embed_dim, c.grid_h, c.grid_w)
                if c.local_refine else None)
            self.heads.append(ReconstructionHead(gen, c.embed_dim,
                                                 c.feature_channels[level - 1],
                                                 patch, c.grid_h, c.grid_w))

    def _check_input(self, zc_levels):
        c = self.config
        if len(zc_levels) != c.num_levels:
            raise ShapeError(f"expected {c.num_levels} levels, got {len(zc_levels)}")
        for level, z in enumerate(zc_levels, start=1):
            if z.ndim != 4:
                raise ShapeError(f"level {level}: expected batched (B,C,H,W), got {z.shape}")
            want_c = 2 * c.feature_channels[level - 1]
            want_hw = c.level_extent(level)
            if z.shape[1] != want_c or tuple(z.shape[2:]) != want_hw:
                raise ShapeError(f"level {level}: got {tuple(z.shape[1:])}, expected "
                                 f"({want_c}, {want_hw[0]}, {want_hw[1]})")

    def embed_levels(self, zc_levels: list[Tensor]) -> list[Tensor]:
        self._check_input(zc_levels)
        return [emb(z) for emb, z in zip(self.embeds, zc_levels)]

    def decode(self, zc_levels: list[Tensor]) -> list[Tensor]:
        """-> reconstructions [level 1 .. level K], shapes matching the
        filtered feature pyramid."""
        tokens = self.embed_levels(zc_levels)
        k = self.config.num_levels
        q = self.query(tokens[k - 1])
        recon: list[Tensor | None] = [None] * k
        for level in range(k, 0, -1):
            d = self.layers[level - 1](q, tokens[level - 1])
            q = self.refiners[level - 1](d) if self.refiners[level - 1] is not None else d
            recon[level - 1] = self.heads[level - 1](q)
        return recon

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"decoder/query/{n}", t) for n, t in self.query.params()]
        for level in range(1, self.config.num_levels + 1):
            i = level - 1
            out += [(f"decoder/level{level}/embed/{n}", t) for n, t in self.embeds[i].params()]
            out += [(f"decoder/level{level}/attn/{n}", t) for n, t in self.layers[i].params()]
            if self.refiners[i] is not None:
                out += [(f"decoder/level{level}/mgg/{n}", t) for n, t in self.refiners[i].params()]
            out += [(f"decoder/level{level}/head/{n}", t) for n, t in self.heads[i].params()]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)[:3]}, "
                             f"unexpected {sorted(extra)[:3]}")
        for name, tensor in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != tensor.data.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {tensor.data.shape}")
            tensor.data = arr.copy()
