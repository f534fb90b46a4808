import numpy as np
import pytest

from mrnet.rawio import RawFormatError, load_image, read_array, save_png, to_uint8, write_array


def test_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(2, 5, 7)).astype(np.float32)
    p = write_array(tmp_path / "a.raw", a, (-3.0, 3.0))
    b, header = read_array(p)
    assert np.array_equal(a, b)
    assert header["shape"] == [2, 5, 7]


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.raw"
    p.write_bytes(b"nope" + bytes(20))
    with pytest.raises(RawFormatError):
        read_array(p)


def test_truncated(tmp_path):
    p = write_array(tmp_path / "a.raw", np.zeros((4, 4), np.float32))
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(RawFormatError):
        read_array(p)


def test_png_and_load(tmp_path):
    img = np.linspace(-1, 1, 64, dtype=np.float32).reshape(8, 8)
    assert to_uint8(img).min() == 0 and to_uint8(img).max() == 255
    save_png(tmp_path / "x.png", img)
    back = load_image(tmp_path / "x.png")
    assert back.shape == (8, 8)
    assert np.abs(back - img).max() <= 1.0 / 127
    write_array(tmp_path / "x.raw", img[None])
    assert np.array_equal(load_image(tmp_path / "x.raw"), img)
