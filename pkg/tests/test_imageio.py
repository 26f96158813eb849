import numpy as np
import pytest

from monorecon.imageio import (ImageFormatError, ImageIOError, check_buffer, load_image, read_pfm, save_image,
                               write_pfm)


def test_png_rgb_roundtrip_within_quantization(tmp_path):
    img = np.full((4, 4, 3), 0.5)
    save_image(tmp_path / "a.png", img)
    back = load_image(tmp_path / "a.png", channels=3)
    assert back.shape == (4, 4, 3)
    assert np.max(np.abs(back - 0.5)) <= 1 / 255


def test_png_random_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(7, 5, 3))
    save_image(tmp_path / "r.png", img)
    assert np.max(np.abs(load_image(tmp_path / "r.png") - img)) <= 0.5 / 255 + 1e-12


def test_png_mask_is_single_channel(tmp_path):
    m = np.zeros((6, 6))
    m[2:4, 2:4] = 1
    save_image(tmp_path / "m.png", m)
    back = load_image(tmp_path / "m.png", channels=1)
    assert back.shape == (6, 6)
    np.testing.assert_array_equal(back, m)


def test_pfm_bit_exact(tmp_path):
    d = np.array([[0.0, 1.5], [1e6, 0.25]])
    write_pfm(tmp_path / "d.pfm", d)
    back = read_pfm(tmp_path / "d.pfm")
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, d)


def test_pfm_header_and_row_order(tmp_path):
    d = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    write_pfm(tmp_path / "d.pfm", d)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    body = np.frombuffer(raw[len(b"Pf\n3 2\n-1.0\n"):], dtype="<f4")
    # bottom row first
    np.testing.assert_array_equal(body, [4, 5, 6, 1, 2, 3])


def test_pfm_float32_values_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    d = rng.uniform(0, 10, size=(9, 11)).astype(np.float32).astype(np.float64)
    save_image(tmp_path / "x.pfm", d)
    np.testing.assert_array_equal(load_image(tmp_path / "x.pfm"), d)


def test_truncated_png_raises(tmp_path):
    save_image(tmp_path / "a.png", np.full((16, 16, 3), 0.3))
    raw = (tmp_path / "a.png").read_bytes()
    (tmp_path / "t.png").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ImageIOError):
        load_image(tmp_path / "t.png")


def test_truncated_pfm_raises(tmp_path):
    write_pfm(tmp_path / "d.pfm", np.ones((4, 4)))
    raw = (tmp_path / "d.pfm").read_bytes()
    (tmp_path / "t.pfm").write_bytes(raw[:-5])
    with pytest.raises(ImageIOError):
        read_pfm(tmp_path / "t.pfm")


def test_garbage_pfm_raises(tmp_path):
    (tmp_path / "g.pfm").write_bytes(b"hello world")
    with pytest.raises(ImageIOError):
        read_pfm(tmp_path / "g.pfm")


def test_missing_file(tmp_path):
    with pytest.raises(ImageIOError, match="no such file"):
        load_image(tmp_path / "nope.png")


def test_channel_mismatch(tmp_path):
    save_image(tmp_path / "a.png", np.full((4, 4, 3), 0.2))
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "a.png", channels=1)


def test_check_buffer_ranges():
    check_buffer(np.zeros((2, 2, 3)), "rgb")
    check_buffer(np.full((2, 2), 5.0), "depth")
    with pytest.raises(ImageFormatError):
        check_buffer(np.full((2, 2, 3), 1.5), "rgb")
    with pytest.raises(ImageFormatError):
        check_buffer(np.full((2, 2), -1.0), "depth")
    with pytest.raises(ImageFormatError):
        check_buffer(np.zeros((2, 2)), "rgb")
