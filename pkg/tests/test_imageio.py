import numpy as np
import pytest

from covernet import imageio
from covernet.errors import ImageDecodeError


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_bytes(data)
    return p


def test_ppm_round_trip(rng):
    px = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    got, maxval = imageio.decode_pnm(imageio.encode_ppm(px))
    assert maxval == 255
    np.testing.assert_array_equal(got, px)


def test_header_with_comments_and_16bit():
    px = np.array([[[0, 1000, 65535]]], dtype=">u2")
    data = b"P6\n# made by hand\n1 1\n65535\n" + px.tobytes()
    got, maxval = imageio.decode_pnm(data)
    assert maxval == 65535
    assert got.tolist() == [[[0, 1000, 65535]]]


def test_ascii_and_grey():
    got, _ = imageio.decode_pnm(b"P3 2 1 255\n1 2 3  4 5 6\n")
    assert got.tolist() == [[[1, 2, 3], [4, 5, 6]]]
    got, _ = imageio.decode_pnm(b"P5 1 1 255\n\x07")
    assert got.tolist() == [[[7, 7, 7]]]


@pytest.mark.parametrize("data", [b"P6\n2 2\n255\n\x00\x00", b"JUNK", b"P6\n0 2\n255\n", b"P6\n2"])
def test_bad_pnm(data):
    with pytest.raises(ImageDecodeError):
        imageio.decode_pnm(data)


def test_missing_file(tmp_path):
    with pytest.raises(ImageDecodeError):
        imageio.load_image(tmp_path / "nope.ppm", 4, 4)


def test_same_size_is_exact(tmp_path, rng):
    px = rng.integers(0, 256, (6, 5, 3), dtype=np.uint8)
    out = imageio.load_image(write(tmp_path, "a.ppm", imageio.encode_ppm(px)), 6, 5, np.float64)
    assert out.shape == (1, 6, 5, 3)
    np.testing.assert_array_equal(out[0], px / 255.0)


def test_checkerboard_upscale_hand_weights(tmp_path):
    board = np.zeros((2, 2, 3), np.uint8)
    board[0, 0] = board[1, 1] = 255
    out = imageio.load_image(write(tmp_path, "c.ppm", imageio.encode_ppm(board)), 4, 4, np.float64)[0, :, :, 0]
    m = np.array([[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    expected = m @ (board[:, :, 0] / 255.0) @ m.T
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)
    assert out[1, 2] == pytest.approx(95.625 / 255)
    assert out[0, 0] == 1.0 and out[0, 3] == 0.0


def test_both_network_sizes_from_one_source(tmp_path, rng):
    p = write(tmp_path, "s.ppm", imageio.encode_ppm(rng.integers(0, 256, (300, 200, 3), dtype=np.uint8)))
    for size in (56, 227):
        out = imageio.load_image(p, size, size)
        assert out.shape == (1, size, size, 3)
        assert out.dtype == np.float32
        assert out.min() >= 0 and out.max() <= 1


def test_resize_constant_image_stays_constant():
    img = np.full((3, 9, 3), 77.0)
    np.testing.assert_allclose(imageio.bilinear_resize(img, 10, 4), 77.0)


def test_pillow_formats(tmp_path, rng):
    Image = pytest.importorskip("PIL.Image")
    px = rng.integers(0, 256, (4, 4, 3), dtype=np.uint8)
    path = tmp_path / "x.png"
    Image.fromarray(px).save(path)
    np.testing.assert_array_equal(imageio.load_image(path, 4, 4, np.float64)[0], px / 255.0)
    bad = write(tmp_path, "bad.jpg", b"\xff\xd8garbage")
    with pytest.raises(ImageDecodeError):
        imageio.load_image(bad, 4, 4)
