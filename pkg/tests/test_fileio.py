import numpy as np
import pytest

from anomseg import fileio


def test_ust_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 5, 4)).astype(np.float32)
    path = tmp_path / "t.ust"
    fileio.write_ust(path, arr)
    back = fileio.read_ust(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)
    raw = path.read_bytes()
    assert raw[:8] == b"USTENS01"
    # rank and extents are little-endian u32
    assert int.from_bytes(raw[8:12], "little") == 3
    assert int.from_bytes(raw[12:16], "little") == 3
    assert int.from_bytes(raw[16:20], "little") == 5


def test_ust_bad_magic(tmp_path):
    path = tmp_path / "bad.ust"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(fileio.FormatError):
        fileio.read_ust(path)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    gen = np.random.default_rng(1)
    state = {
        "decoder/level3/mgg/branch2/conv0/weight": gen.normal(size=(4, 4, 3, 3)).astype(np.float32),
        "decoder/query/base": gen.normal(size=(16, 8)).astype(np.float32),
        "scalar/step": np.float32(3.0).reshape(()),
    }
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    fileio.save_checkpoint(p1, state)
    loaded = fileio.load_checkpoint(p1)
    assert list(loaded) == list(state)
    for k in state:
        np.testing.assert_array_equal(loaded[k], state[k])
    fileio.save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:8] == b"UASCKPT1"


def test_ppm_pgm_round_trip(tmp_path):
    gen = np.random.default_rng(2)
    img = gen.random(size=(3, 6, 5)).astype(np.float32)
    fileio.write_ppm(tmp_path / "i.ppm", img)
    back = fileio.read_ppm(tmp_path / "i.ppm")
    # quantized to u8, so exact after one round trip of the quantized values
    fileio.write_ppm(tmp_path / "j.ppm", back)
    assert (tmp_path / "i.ppm").read_bytes() == (tmp_path / "j.ppm").read_bytes()

    mask = (gen.random(size=(4, 7)) > 0.5).astype(np.uint8)
    fileio.write_pgm(tmp_path / "m.pgm", mask * 255)
    got = fileio.read_pgm(tmp_path / "m.pgm")
    np.testing.assert_array_equal(got, mask * 255)


def test_pyramid_dir_round_trip(tmp_path):
    gen = np.random.default_rng(3)
    levels = [gen.normal(size=(8, 16, 16)).astype(np.float32),
              gen.normal(size=(16, 8, 8)).astype(np.float32)]
    fileio.save_pyramid_dir(tmp_path / "pyr", levels)
    back = fileio.load_pyramid_dir(tmp_path / "pyr")
    for a, b in zip(levels, back):
        np.testing.assert_array_equal(a, b)
