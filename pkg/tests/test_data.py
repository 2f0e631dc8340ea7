import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from img2img.data import (DatasetManifest, PairedDataset, PairedSample, jitter_and_mirror, load_paired, png_decode,
                          png_encode, read_png, split_manifests, triptych, u8_to_unit, unit_to_u8, write_png)
from img2img.errors import DataError, ImageDecodeError, UnsupportedDepthError
from img2img.tensor import RngState
from img2img.train import AugmentConfig


def pil_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_pair(path, x_u8, y_u8):
    Image.fromarray(np.concatenate([x_u8, y_u8], axis=1)).save(path)


# -- PNG boundary ---------------------------------------------------------------------

def test_white_pixel():
    a = png_decode(pil_png(Image.new("RGB", (1, 1), (255, 255, 255))))
    assert a.shape == (3, 1, 1) and a.dtype == np.float32
    assert (a == 1.0).all()


def test_grayscale_keeps_one_channel():
    a = png_decode(pil_png(Image.new("L", (2, 3), 0)))
    assert a.shape == (1, 3, 2) and (a == -1.0).all()


def test_pixel_mapping_symmetric():
    v = u8_to_unit(np.array([0, 127, 128, 255], np.uint8))
    np.testing.assert_allclose(v, [-1, -1 / 255, 1 / 255, 1], atol=1e-6)
    assert abs(v[1] + v[2]) < 1e-6


def test_all_u8_values_round_trip():
    u = np.arange(256, dtype=np.uint8)
    assert np.array_equal(unit_to_u8(u8_to_unit(u)), u)
    img = np.stack([np.tile(u, (4, 1))] * 3)
    back = png_decode(png_encode(u8_to_unit(img)))
    assert np.array_equal(unit_to_u8(back), img)


def test_encode_clips_out_of_range():
    a = png_decode(png_encode(np.array([[[-3.0, 3.0]]])))
    assert a.tolist() == [[[-1.0, 1.0]]]


def test_sixteen_bit_rejected():
    data = pil_png(Image.fromarray(np.full((2, 2), 40000, np.uint16)))
    with pytest.raises(UnsupportedDepthError):
        png_decode(data)


@pytest.mark.parametrize("data", [b"", b"not a png at all", b"\x89PNG\r\n\x1a\n" + b"\0" * 40])
def test_malformed_streams(data):
    with pytest.raises(ImageDecodeError):
        png_decode(data)


def test_truncated_png(tmp_path):
    good = pil_png(Image.new("RGB", (8, 8), (1, 2, 3)))
    p = tmp_path / "t.png"
    p.write_bytes(good[: len(good) // 2])
    with pytest.raises(ImageDecodeError, match="t.png"):
        read_png(p)
    with pytest.raises(DataError):
        read_png(tmp_path / "missing.png")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]), st.integers(0, 2**31))
def test_png_round_trip_property(h, w, c, seed):
    u = np.random.default_rng(seed).integers(0, 256, (c, h, w), dtype=np.uint8)
    assert np.array_equal(png_decode(png_encode(u8_to_unit(u))), u8_to_unit(u))


# -- paired samples -------------------------------------------------------------------

def test_side_by_side_split(tmp_path):
    x = np.zeros((4, 4, 3), np.uint8)
    y = np.full((4, 4, 3), 255, np.uint8)
    save_pair(tmp_path / "a.png", x, y)
    s = load_paired(tmp_path / "a.png")
    assert s.x.shape == s.y.shape == (3, 4, 4)
    assert (s.x == -1).all() and (s.y == 1).all() and s.id == "a"


def test_odd_width_rejected(tmp_path):
    Image.new("RGB", (5, 4)).save(tmp_path / "odd.png")
    with pytest.raises(DataError, match="odd width"):
        load_paired(tmp_path / "odd.png")


def test_two_folders_layout(tmp_path):
    (tmp_path / "A").mkdir()
    (tmp_path / "B").mkdir()
    Image.new("L", (4, 4), 0).save(tmp_path / "A/p.png")
    Image.new("RGB", (4, 4), (255, 0, 0)).save(tmp_path / "B/p.png")
    s = load_paired(tmp_path / "A/p.png", "two_folders")
    assert s.x.shape == (1, 4, 4) and s.y.shape == (3, 4, 4)
    with pytest.raises(DataError):
        load_paired(tmp_path / "A/p.png", "stacked")


def test_mismatched_sizes_rejected():
    with pytest.raises(DataError):
        PairedSample(np.zeros((3, 4, 4), np.float32), np.zeros((3, 4, 5), np.float32))


def test_triptych_mixed_channels():
    g = triptych(np.zeros((1, 2, 2)), np.ones((3, 2, 2)), np.ones((3, 2, 2)))
    assert g.shape == (3, 2, 6)


# -- augmentation ---------------------------------------------------------------------

def test_no_jitter_no_mirror_is_identity():
    s = PairedSample(np.random.default_rng(0).uniform(-1, 1, (3, 8, 8)).astype(np.float32),
                     np.random.default_rng(1).uniform(-1, 1, (3, 8, 8)).astype(np.float32))
    out = jitter_and_mirror(s, AugmentConfig(False, False, 8, 8), RngState(0))
    assert np.array_equal(out.x, s.x) and np.array_equal(out.y, s.y)


def test_jitter_output_size():
    s = PairedSample(np.zeros((3, 256, 256), np.float32), np.zeros((3, 256, 256), np.float32))
    out = jitter_and_mirror(s, AugmentConfig(), RngState(0))
    assert out.x.shape == out.y.shape == (3, 256, 256)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 31), st.integers(0, 31))
def test_marker_registers_in_x_and_y(seed, r, c):
    x = np.full((1, 32, 32), -1.0, np.float32)
    y = np.full((3, 32, 32), -1.0, np.float32)
    x[0, r, c] = 1.0
    y[:, r, c] = 1.0
    out = jitter_and_mirror(PairedSample(x, y), AugmentConfig.for_crop(32), RngState(seed, (5, 0)))
    assert np.array_equal(out.x[0], out.y[0]) and np.array_equal(out.y[0], out.y[2])


def test_mirror_is_horizontal_and_seeded():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    cfg = AugmentConfig(False, True, 4, 4)
    flips = []
    for seed in range(20):
        out = jitter_and_mirror(PairedSample(x, x.copy()), cfg, RngState(seed))
        assert np.array_equal(out.x, x) or np.array_equal(out.x, x[:, :, ::-1])
        flips.append(not np.array_equal(out.x, x))
        again = jitter_and_mirror(PairedSample(x, x.copy()), cfg, RngState(seed))
        assert np.array_equal(again.x, out.x)
    assert 0 < sum(flips) < 20


# -- manifests ------------------------------------------------------------------------

def make_dir(root, n=10, size=4):
    root.mkdir(exist_ok=True)
    for i in range(n):
        save_pair(root / f"img{i:02d}.png", np.full((size, size, 3), i, np.uint8),
                  np.full((size, size, 3), 255 - i, np.uint8))
    return root


def test_split_eight_two_deterministic(tmp_path):
    root = make_dir(tmp_path / "d")
    tr, te = split_manifests(root, seed=3)
    assert len(tr.entries) == 8 and len(te.entries) == 2
    assert not set(tr.entries) & set(te.entries)
    tr2, te2 = split_manifests(root, seed=3)
    assert tr2.entries == tr.entries and te2.entries == te.entries


def test_manifest_round_trip_and_dataset(tmp_path):
    root = make_dir(tmp_path / "d", n=3)
    tr, _ = split_manifests(root, split_frac=1.0)
    tr.write(tmp_path / "train.manifest")
    back = DatasetManifest.read(tmp_path / "train.manifest")
    assert back.entries == tr.entries and back.root == root and back.split == "train"
    ds = PairedDataset(back)
    assert len(ds) == 3 and ds[0] is ds[0]


def test_split_errors(tmp_path):
    with pytest.raises(DataError):
        split_manifests(tmp_path / "nope")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError, match="no PNG"):
        split_manifests(tmp_path / "empty")
    root = make_dir(tmp_path / "d", n=2)
    (root / "bad.png").write_bytes(b"junk")
    with pytest.raises(DataError, match="bad.png"):
        split_manifests(root)
