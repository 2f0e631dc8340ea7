import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from img2img.errors import ShapeError
from img2img.metrics import (LAB_BINS, ClassPalette, LabHistogram, confusion_matrix, hist_intersection, l1_error,
                             lab_intersections, lab_marginal_hist, quantize_to_labels, render_labels, seg_metrics,
                             srgb_to_lab)


def solid(rgb, h=2, w=2):
    return np.broadcast_to(np.asarray(rgb, np.float64)[:, None, None], (3, h, w)).copy()


def gray_l_reference(v):
    """L* of an sRGB gray with component v in [0, 1], written out longhand."""
    lin = v / 12.92 if v <= 0.04045 else ((v + 0.055) / 1.055) ** 2.4
    y = lin  # the luminance row of the sRGB matrix sums to 1
    f = y ** (1 / 3) if y > (6 / 29) ** 3 else y / (3 * (6 / 29) ** 2) + 4 / 29
    return 116 * f - 16


# -- Lab ------------------------------------------------------------------------------

def test_white_and_black_fixed_points():
    w = srgb_to_lab(solid([1, 1, 1]))[:, 0, 0]
    k = srgb_to_lab(solid([-1, -1, -1]))[:, 0, 0]
    np.testing.assert_allclose(w, [100, 0, 0], atol=1e-3)
    np.testing.assert_allclose(k, [0, 0, 0], atol=1e-3)


def test_mid_gray():
    lab = srgb_to_lab(solid([0, 0, 0]))[:, 0, 0]
    assert abs(lab[0] - gray_l_reference(0.5)) < 1e-3
    assert abs(lab[0] - 53.389) < 1e-2
    np.testing.assert_allclose(lab[1:], 0, atol=1e-3)


def test_matches_skimage_on_random_colors():
    skc = pytest.importorskip("skimage.color")
    rgb = np.random.default_rng(0).uniform(-1, 1, (3, 6, 6))
    ours = srgb_to_lab(rgb).transpose(1, 2, 0)
    theirs = skc.rgb2lab((rgb.transpose(1, 2, 0) + 1) / 2)
    np.testing.assert_allclose(ours, theirs, atol=5e-3)


def test_lab_shape_and_errors():
    assert srgb_to_lab(np.zeros((2, 3, 4, 5))).shape == (2, 3, 4, 5)
    with pytest.raises(ShapeError):
        srgb_to_lab(np.zeros((1, 4, 4)))


@settings(max_examples=40, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_gray_axis_monotone(a, b):
    if a == b:
        return
    lo, hi = sorted((a, b))
    if hi - lo < 1e-6:
        return
    assert srgb_to_lab(solid([lo] * 3, 1, 1))[0, 0, 0] < srgb_to_lab(solid([hi] * 3, 1, 1))[0, 0, 0]


# -- histograms -----------------------------------------------------------------------

def test_uniform_image_single_bin():
    h = lab_marginal_hist(solid([0.2, -0.3, 0.5], 4, 4), "a")
    assert h.probs.shape == (LAB_BINS,) and np.count_nonzero(h.probs) == 1 and h.probs.max() == 1.0


def test_two_disjoint_images_pooled():
    h = lab_marginal_hist([solid([1, 1, 1]), solid([-1, -1, -1])], "L")
    assert sorted(h.probs[h.probs > 0].tolist()) == [0.5, 0.5]


def test_stack_equals_list():
    imgs = np.random.default_rng(1).uniform(-1, 1, (3, 3, 5, 5))
    for c in "Lab":
        assert np.array_equal(lab_marginal_hist(imgs, c).probs, lab_marginal_hist(list(imgs), c).probs)


def test_intersection_examples():
    img = np.random.default_rng(2).uniform(-1, 1, (3, 8, 8))
    assert lab_intersections(img, img) == {"L": 1.0, "a": 1.0, "b": 1.0}
    p = lab_marginal_hist(solid([1, 1, 1]), "L")
    q = lab_marginal_hist(solid([-1, -1, -1]), "L")
    assert hist_intersection(p, q) == 0.0
    with pytest.raises(ValueError):
        hist_intersection(p, lab_marginal_hist(solid([1, 1, 1]), "a"))
    with pytest.raises(ValueError):
        hist_intersection(p, lab_marginal_hist(solid([1, 1, 1]), "L", bins=32))


def test_plot_data_pairs():
    h = lab_marginal_hist(solid([1, 1, 1]), "L")
    pts = h.plot_data()
    assert len(pts) == LAB_BINS and pts[-1][1] == 0.0 and pts[0][1] == math.log(1e-12)


probs = hnp.arrays(np.float64, 8, elements=st.floats(0, 1)).filter(lambda a: a.sum() > 0).map(lambda a: a / a.sum())


@settings(max_examples=60, deadline=None)
@given(probs, probs)
def test_intersection_properties(p, q):
    edges = np.linspace(0, 1, 9)
    hp, hq = LabHistogram("L", edges, p), LabHistogram("L", edges, q)
    assert abs(hist_intersection(hp, hp) - 1.0) < 1e-12
    assert hist_intersection(hp, hq) == hist_intersection(hq, hp)
    assert -1e-12 <= hist_intersection(hp, hq) <= 1 + 1e-12


# -- label maps -----------------------------------------------------------------------

PALETTE = ClassPalette([0, 1, 2], np.array([[0, 0, 0], [255, 0, 0], [0, 0, 255]]))


def test_palette_validation_and_file(tmp_path):
    with pytest.raises(ValueError):
        ClassPalette([0, 1], np.array([[1, 2, 3], [1, 2, 3]]))
    p = tmp_path / "pal.txt"
    p.write_text("# classes\n2 0 0 255\n0 0 0 0  # void\n1 255 0 0\n")
    pal = ClassPalette.read(p)
    assert pal.ids == [0, 1, 2] and pal.colors[2].tolist() == [0, 0, 255]
    pal.write(tmp_path / "out.txt")
    assert ClassPalette.read(tmp_path / "out.txt").ids == [0, 1, 2]


def test_quantize_tie_goes_to_lowest_id():
    mid = solid([0, -1, -1], 1, 1)  # 127.5 red: equidistant from black (0) and red (1)
    assert quantize_to_labels(mid, PALETTE).tolist() == [[0]]


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.int64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(0, 2)),
       st.integers(0, 2**31))
def test_render_then_quantize_is_identity(labels, seed):
    img = render_labels(labels, PALETTE)
    assert np.array_equal(quantize_to_labels(img, PALETTE), labels)
    noisy = img + np.random.default_rng(seed).normal(0, 0.05, img.shape)
    assert np.array_equal(quantize_to_labels(noisy, PALETTE), labels)


# -- segmentation metrics -------------------------------------------------------------

def test_seg_examples():
    m = seg_metrics(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
    assert m.per_pixel_acc == 0.75 and m.per_class_acc == 0.75
    assert abs(m.class_iou - (0.5 + 2 / 3) / 2) < 1e-12
    m = seg_metrics(np.zeros((2, 2), int), np.array([[0, 0], [1, 1]]), 2)
    assert (m.per_pixel_acc, m.per_class_acc, m.class_iou) == (0.5, 0.5, 0.25)
    gt = np.array([[0, 2], [2, 1]])
    assert (seg_metrics(gt, gt, 4).per_pixel_acc, seg_metrics(gt, gt, 4).class_iou) == (1.0, 1.0)


def test_absent_classes_excluded():
    m = seg_metrics(np.array([[0, 3]]), np.array([[0, 0]]), 4)
    assert [r["class"] for r in m.per_class] == [0]
    assert m.per_class_acc == 0.5 and m.class_iou == 0.5


def test_seg_errors():
    with pytest.raises(ShapeError):
        seg_metrics(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(ValueError):
        seg_metrics(np.array([[2]]), np.array([[0]]), 2)
    with pytest.raises(ValueError):
        confusion_matrix(np.array([[-1]]), np.array([[0]]), 2)


def brute_force(pred, gt, n):
    """Pixel-by-pixel enumeration, no confusion matrix."""
    pred, gt = pred.ravel().tolist(), gt.ravel().tolist()
    correct = sum(p == g for p, g in zip(pred, gt))
    recalls, ious = [], []
    for c in range(n):
        in_gt = [i for i, g in enumerate(gt) if g == c]
        if not in_gt:
            continue
        hit = sum(1 for i in in_gt if pred[i] == c)
        union = sum(1 for p, g in zip(pred, gt) if p == c or g == c)
        recalls.append(hit / len(in_gt))
        ious.append(hit / union)
    return correct / len(gt), sum(recalls) / len(recalls), sum(ious) / len(ious)


def test_seg_matches_brute_force_on_random_maps():
    r = np.random.default_rng(0)
    for _ in range(200):
        n = int(r.integers(1, 5))
        shape = tuple(int(s) for s in r.integers(1, 9, 2))
        pred, gt = r.integers(0, n, shape), r.integers(0, n, shape)
        m = seg_metrics(pred, gt, n)
        bp, bc, bi = brute_force(pred, gt, n)
        assert abs(m.per_pixel_acc - bp) < 1e-12 and abs(m.per_class_acc - bc) < 1e-12
        assert abs(m.class_iou - bi) < 1e-12


# -- l1 -------------------------------------------------------------------------------

def test_l1_error():
    a = np.random.default_rng(3).uniform(-1, 1, (3, 4, 4))
    assert l1_error(a, a) == 0.0
    assert abs(l1_error(a, a + 0.1) - 0.1) < 1e-12
    b = a[::-1].copy()
    assert l1_error(a, b) == l1_error(b, a)
    with pytest.raises(ShapeError):
        l1_error(a, a[:2])
