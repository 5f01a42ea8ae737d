import numpy as np
import pytest
from PIL import Image

from tpsalign.errors import ImageIOError
from tpsalign.imageio import load_image, save_image


def write_pgm(path, rows, header=None):
    arr = np.asarray(rows, dtype=np.uint8)
    head = header or b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0])
    path.write_bytes(head + arr.tobytes())


def test_pgm_scaling(tmp_path):
    p = tmp_path / "a.pgm"
    write_pgm(p, [[0, 255], [128, 64]])
    img = load_image(p)
    assert img.shape == (2, 2)
    assert np.allclose(img, [[0, 1], [0.50196, 0.25098]], atol=1e-5)


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    write_pgm(p, [[1, 2, 3]], header=b"P5 # made by hand\n3\t1 # width height\n255\n")
    assert np.array_equal(load_image(p) * 255, [[1, 2, 3]])


@pytest.mark.parametrize(
    "data,reason",
    [
        (b"P5\n2 2\n65535\n" + bytes(8), "8-bit"),
        (b"P5\n4 4\n255\n" + bytes(3), "truncated"),
        (b"P5\nx 4\n255\n", "header"),
        (b"GIF89a....", "unsupported"),
    ],
)
def test_bad_files(tmp_path, data, reason):
    p = tmp_path / "bad.pgm"
    p.write_bytes(data)
    with pytest.raises(ImageIOError, match=reason) as info:
        load_image(p)
    assert str(p) in str(info.value)


def test_missing_file_names_path(tmp_path):
    p = tmp_path / "nope.png"
    with pytest.raises(ImageIOError) as info:
        load_image(p)
    assert info.value.path == str(p)


def test_png_color_and_gray(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    Image.fromarray(rgb).save(tmp_path / "c.png")
    img = load_image(tmp_path / "c.png")
    assert img.shape == (5, 7, 3)
    assert np.array_equal(np.rint(img * 255), rgb)
    Image.fromarray(rgb[..., 0]).save(tmp_path / "g.png")
    assert load_image(tmp_path / "g.png").shape == (5, 7)


def test_png_16bit_rejected(tmp_path):
    Image.fromarray(np.full((4, 4), 1000, dtype=np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(ImageIOError, match="mode"):
        load_image(tmp_path / "deep.png")


@pytest.mark.parametrize("ext", [".pgm", ".png"])
def test_roundtrip_quantization(tmp_path, ext):
    x = np.random.default_rng(1).uniform(size=(9, 11))
    p = tmp_path / f"r{ext}"
    assert save_image(x, p) == 0
    assert np.max(np.abs(load_image(p) - x)) < 1 / 255 + 1e-9
    assert np.max(np.abs(load_image(p) - x)) < 0.0040


def test_roundtrip_color_png(tmp_path):
    x = np.random.default_rng(2).uniform(size=(6, 6, 3))
    save_image(x, tmp_path / "c.png")
    assert np.max(np.abs(load_image(tmp_path / "c.png") - x)) < 1 / 255 + 1e-9


def test_byte_values_and_clamping(tmp_path):
    p = tmp_path / "v.pgm"
    x = np.array([[1.0, -0.1], [0.5, 1.0 / 510]])
    assert save_image(x, p) == 1
    raw = p.read_bytes()[-4:]
    # 0.5*255 = 127.5 and 0.5 both round half up
    assert list(raw) == [255, 0, 128, 1]


def test_save_errors(tmp_path):
    with pytest.raises(ImageIOError):
        save_image(np.zeros((2, 2, 3)), tmp_path / "x.pgm")
    with pytest.raises(ImageIOError):
        save_image(np.zeros((2, 2)), tmp_path / "x.bmp")
    with pytest.raises(ImageIOError):
        save_image(np.zeros((2, 2)), tmp_path / "missing" / "x.pgm")


def test_save_is_deterministic(tmp_path):
    x = np.random.default_rng(3).uniform(size=(16, 16, 3))
    save_image(x, tmp_path / "a.png")
    save_image(x, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
