import numpy as np
import pytest

from turbsplat.errors import FileFormatError, UsageError
from turbsplat.imgcore import (FlowField, Image, read_flow, read_image,
                               to_grayscale, write_flow, write_image)


def test_image_clamps_and_validates():
    img = Image(np.array([[[1.5], [-0.2]], [[0.5], [0.0]]]))
    assert img.data.max() <= 1.0 and img.data.min() >= 0.0
    assert img.data.dtype == np.float32
    with pytest.raises(UsageError):
        Image(np.full((4, 4, 1), np.nan))
    with pytest.raises(UsageError):
        Image(np.zeros((4, 4, 2)))  # 2 channels unsupported


def test_png8_known_samples(tmp_path):
    # 2x2 8-bit gray with samples {0, 128, 255, 64}
    data = np.array([[0, 128], [255, 64]], dtype=np.float64) / 255.0
    write_image(Image(data[:, :, None]), tmp_path / "q.png", bit_depth=8)
    back = read_image(tmp_path / "q.png")
    assert np.array_equal(back.data[:, :, 0], data.astype(np.float32))


def test_png_all_zero(tmp_path):
    write_image(Image(np.zeros((5, 7, 1))), tmp_path / "z.png")
    assert np.all(read_image(tmp_path / "z.png").data == 0.0)


def test_rawfloat_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = Image(rng.uniform(0, 1, (9, 13, 3)).astype(np.float32))
    write_image(img, tmp_path / "r.f32")
    back = read_image(tmp_path / "r.f32")
    assert np.array_equal(back.data, img.data)


def test_png8_quantization_bound(tmp_path):
    rng = np.random.default_rng(1)
    img = Image(rng.uniform(0, 1, (16, 16, 1)))
    write_image(img, tmp_path / "q8.png", bit_depth=8)
    back = read_image(tmp_path / "q8.png")
    assert np.abs(back.data - img.data).max() <= 1.0 / 255.0 + 1e-7
    # 0.5 lands on 127/255 or 128/255
    write_image(Image(np.full((4, 4, 1), 0.5)), tmp_path / "half.png")
    v = read_image(tmp_path / "half.png").data[0, 0, 0]
    assert v in (np.float32(127 / 255), np.float32(128 / 255))


def test_png16_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    img = Image(rng.uniform(0, 1, (8, 8, 1)))
    write_image(img, tmp_path / "q16.png", bit_depth=16)
    back = read_image(tmp_path / "q16.png")
    assert np.abs(back.data - img.data).max() <= 1.0 / 65535.0 + 1e-9


def test_png_3channel_order(tmp_path):
    img = np.zeros((4, 4, 3))
    img[:, :, 0] = 1.0   # pure red
    img[0, 0] = [0.0, 1.0, 0.0]
    write_image(Image(img), tmp_path / "rgb.png")
    back = read_image(tmp_path / "rgb.png")
    assert back.channels == 3
    assert np.array_equal(back.data[1, 1], np.array([1, 0, 0], np.float32))
    assert np.array_equal(back.data[0, 0], np.array([0, 1, 0], np.float32))


def test_flow_roundtrips(tmp_path):
    rng = np.random.default_rng(3)
    flow = FlowField(rng.normal(0, 2, (6, 8)).astype(np.float32),
                     rng.normal(0, 2, (6, 8)).astype(np.float32))
    write_flow(flow, tmp_path / "f.flo32")
    back = read_flow(tmp_path / "f.flo32")
    assert np.array_equal(back.dx, flow.dx)
    assert np.array_equal(back.dy, flow.dy)

    const = FlowField(np.full((4, 4), 1.5, np.float32), np.full((4, 4), -2.25, np.float32))
    write_flow(const, tmp_path / "c.flo32")
    back = read_flow(tmp_path / "c.flo32")
    assert np.all(back.dx == 1.5) and np.all(back.dy == -2.25)

    zero = FlowField(np.zeros((4, 4), np.float32), np.zeros((4, 4), np.float32))
    write_flow(zero, tmp_path / "z.flo32")
    back = read_flow(tmp_path / "z.flo32")
    assert np.all(back.dx == 0) and np.all(back.dy == 0)


def test_payload_header_mismatch(tmp_path):
    img = Image(np.zeros((4, 4, 1)))
    write_image(img, tmp_path / "a.f32")
    (tmp_path / "a.f32").write_bytes(b"\x00" * 12)  # truncate payload
    with pytest.raises(FileFormatError):
        read_image(tmp_path / "a.f32")


def test_missing_file_errors(tmp_path):
    with pytest.raises(FileFormatError):
        read_image(tmp_path / "absent.png")
    with pytest.raises(FileFormatError):
        read_image(tmp_path / "absent.f32")


def test_grayscale_bt601():
    img = np.zeros((2, 2, 3))
    img[0, 0] = [1.0, 0.0, 0.0]
    img[0, 1] = [0.0, 1.0, 0.0]
    img[1, 0] = [0.0, 0.0, 1.0]
    gray = to_grayscale(Image(img))
    assert gray.channels == 1
    assert np.allclose(gray.data[0, 0, 0], 0.299, atol=1e-6)
    assert np.allclose(gray.data[0, 1, 0], 0.587, atol=1e-6)
    assert np.allclose(gray.data[1, 0, 0], 0.114, atol=1e-6)


def test_read_never_yields_out_of_range(tmp_path):
    rng = np.random.default_rng(5)
    for seed in range(3):
        img = Image(rng.uniform(0, 1, (6, 6, 1)))
        write_image(img, tmp_path / f"s{seed}.f32")
        back = read_image(tmp_path / f"s{seed}.f32")
        assert np.all(np.isfinite(back.data))
        assert back.data.min() >= 0.0 and back.data.max() <= 1.0
