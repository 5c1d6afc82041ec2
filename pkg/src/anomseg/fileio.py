"""Binary file formats: .ust raw tensors, model checkpoints, PPM/PGM images.

.ust layout: magic "USTENS01", u32 little-endian rank, u32 extents, then the
float32 payload, row-major. Checkpoints: magic "UASCKPT1", u32 version, u32
entry count, then per entry a u32 name length + utf-8 name, u32 rank, u32
extents, float32 payload. Everything little-endian; round-trips are bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

UST_MAGIC = b"USTENS01"
CKPT_MAGIC = b"UASCKPT1"
CKPT_VERSION = 1


class FormatError(ValueError):
    """File does not conform to the expected binary layout."""


def write_ust(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(UST_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_ust(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != UST_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise FormatError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    """Write named arrays; names are stable hierarchical paths."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(state)))
        for name, array in state.items():
            arr = np.ascontiguousarray(array, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    state: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise FormatError(f"{path}: truncated entry {name}")
            state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return state


# ---------------------------------------------------------------------------
# netpbm images
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """image: (3,H,W) float in [0,1] or uint8."""
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """-> (3,H,W) float32 in [0,1]."""
    w, h, raw = _read_pnm(path, b"P6", 3)
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float32) / 255.0


def write_pgm(path, image: np.ndarray) -> None:
    """image: (H,W) uint8, or float in [0,1]."""
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    """-> (H,W) uint8."""
    w, h, raw = _read_pnm(path, b"P5", 1)
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def _read_pnm(path, magic, channels):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    raw = data[pos:pos + w * h * channels]
    if len(raw) != w * h * channels:
        raise FormatError(f"{path}: truncated pixel data")
    return w, h, raw


# ---------------------------------------------------------------------------
# feature pyramid directories
# ---------------------------------------------------------------------------

def save_pyramid_dir(path, levels: list[np.ndarray]) -> None:
    """level_1.ust .. level_K.ust plus meta.json (extents, channels, K)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"levels": len(levels),
            "extents": [[int(s) for s in lv.shape[-2:]] for lv in levels],
            "channels": [int(lv.shape[-3]) for lv in levels]}
    for i, lv in enumerate(levels, start=1):
        write_ust(root / f"level_{i}.ust", lv)
    (root / "meta.json").write_text(json.dumps(meta, indent=1))


def load_pyramid_dir(path) -> list[np.ndarray]:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    levels = []
    for i in range(1, meta["levels"] + 1):
        lv = read_ust(root / f"level_{i}.ust")
        expect = (meta["channels"][i - 1], *meta["extents"][i - 1])
        if lv.shape != expect:
            raise FormatError(f"{root}/level_{i}.ust: shape {lv.shape} != meta {expect}")
        levels.append(lv)
    return levels
