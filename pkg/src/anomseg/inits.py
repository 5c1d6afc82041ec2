"""Seeded weight initializers shared by the backbone and the decoder."""
from __future__ import annotations

import math

import numpy as np


def trunc_normal(gen: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) clipped to +-2 std, float32."""
    x = gen.normal(0.0, std, size=shape)
    return np.clip(x, -2.0 * std, 2.0 * std).astype(np.float32)


def kaiming_uniform(gen: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / fan_in), float32."""
    bound = math.sqrt(6.0 / fan_in)
    return gen.uniform(-bound, bound, size=shape).astype(np.float32)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible named stream derived from one master seed."""
    import hashlib

    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, key])))
