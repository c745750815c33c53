import numpy as np
import pytest

from pseudolabel.geometry import BBox, iou
from pseudolabel.views import (AugmentationPolicy, AugmentDraw, ViewSpec, ViewTransform,
                               apply_draw, apply_strong, apply_weak, forward_box,
                               forward_raster, identity_view, inverse_box, parse_view_name,
                               sample_strong, sample_weak)

from conftest import random_box


def test_box_examples():
    assert forward_box(ViewTransform("mirror", 100, 100),
                       BBox(10, 5, 30, 25)).coords() == (70, 5, 90, 25)
    s = ViewTransform("scale", 100, 100, 0.5)
    assert forward_box(s, BBox(10, 20, 30, 40)).coords() == (5, 10, 15, 20)
    assert inverse_box(s, BBox(5, 10, 15, 20)).coords() == (10, 20, 30, 40)
    b = BBox(1.5, 2, 3, 4.25)
    assert forward_box(identity_view(100, 100), b) == b


def test_forward_box_keeps_labels():
    b = BBox(10, 5, 30, 25, class_id=3, score=0.6)
    m = forward_box(ViewTransform("mirror", 100, 100), b)
    assert (m.class_id, m.score) == (3, 0.6)


@pytest.mark.parametrize("t", [
    ViewTransform("mirror", 128, 96),
    ViewTransform("scale", 128, 96, 0.75),
    ViewTransform("scale", 128, 96, 0.5),
    identity_view(128, 96),
])
def test_inverse_law(rng, t):
    for _ in range(10_000):
        b = random_box(rng, 96)
        back = inverse_box(t, forward_box(t, b))
        np.testing.assert_allclose(back.coords(), b.coords(), rtol=0, atol=1e-9)


def test_mirror_is_involution(rng):
    t = ViewTransform("mirror", 100, 80)
    for _ in range(100):
        b = random_box(rng, 80)
        assert inverse_box(t, b) == forward_box(t, b)
        b = random_box(rng, 80, integer=True)
        assert forward_box(t, forward_box(t, b)) == b


def test_integer_boxes_map_exactly_under_three_quarter_scale(rng):
    t = ViewTransform("scale", 128, 128, 0.75)
    for _ in range(1000):
        b = random_box(rng, 128, integer=True)
        assert inverse_box(t, forward_box(t, b)) == b


def test_iou_invariant_under_mirror_and_scale(rng):
    for t in (ViewTransform("mirror", 100, 100), ViewTransform("scale", 100, 100, 0.75)):
        for _ in range(500):
            a, b = random_box(rng), random_box(rng)
            assert iou(forward_box(t, a), forward_box(t, b)) == pytest.approx(iou(a, b),
                                                                             abs=1e-12)


def test_raster_examples(rng):
    img = rng.integers(0, 256, size=(80, 100), dtype=np.uint8)
    m = ViewTransform("mirror", 100, 80)
    assert np.array_equal(forward_raster(m, forward_raster(m, img)), img)
    assert np.array_equal(forward_raster(ViewTransform("scale", 100, 80, 1.0), img), img)
    half = forward_raster(ViewTransform("scale", 100, 80, 0.5), img)
    assert half.shape == (40, 50)
    assert half.dtype == np.uint8
    assert ViewTransform("scale", 100, 80, 0.5).output_size == (50, 40)


def test_raster_mirror_matches_box_mirror():
    img = np.zeros((20, 30), dtype=np.uint8)
    img[5:10, 2:8] = 255
    t = ViewTransform("mirror", 30, 20)
    out = forward_raster(t, img)
    b = forward_box(t, BBox(2, 5, 8, 10))
    ys, xs = np.nonzero(out)
    assert (xs.min(), xs.max() + 1, ys.min(), ys.max() + 1) == (b.x1, b.x2, b.y1, b.y2)


def test_raster_nearest_interpolation_keeps_values(rng):
    img = rng.choice([0, 50, 200], size=(40, 40)).astype(np.uint8)
    out = forward_raster(ViewTransform("scale", 40, 40, 0.75, "nearest"), img)
    assert set(np.unique(out)) <= {0, 50, 200}


def test_raster_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        forward_raster(ViewTransform("mirror", 10, 10), np.zeros((5, 10)))


def test_degenerate_policy_is_identity(rng):
    img = rng.integers(0, 256, size=(32, 48), dtype=np.uint8)
    pol = AugmentationPolicy(0.0, 0.0, (0.0, 0.0))
    for seed in range(10):
        assert np.array_equal(apply_weak(pol, img, seed), img)
        assert np.array_equal(apply_strong(pol, img, seed), img)


def test_augmentation_determinism(rng):
    img = rng.integers(0, 256, size=(32, 48), dtype=np.uint8)
    pol = AugmentationPolicy()
    for seed in range(20):
        assert np.array_equal(apply_strong(pol, img, seed), apply_strong(pol, img, seed))
        assert sample_weak(pol, seed) == sample_weak(pol, seed)


def test_blur_preserves_shape_and_range(rng):
    img = rng.integers(0, 256, size=(33, 47), dtype=np.uint8)
    out = apply_draw(AugmentDraw(False, 1.5), img)
    assert out.shape == img.shape and out.dtype == img.dtype
    f = rng.random((20, 20))
    out = apply_draw(AugmentDraw(True, 2.0), f)
    assert out.min() >= f.min() - 1e-12 and out.max() <= f.max() + 1e-12


def test_strong_draw_samples_blur_in_range():
    pol = AugmentationPolicy(blur_sigma_range=(0.5, 1.0))
    sigmas = [sample_strong(pol, s).blur_sigma for s in range(200)]
    assert min(sigmas) >= 0.5 and max(sigmas) <= 1.0
    flips = [sample_strong(pol, s).flip for s in range(200)]
    assert 0 < sum(flips) < 200


def test_weak_draw_never_blurs():
    assert all(sample_weak(AugmentationPolicy(), s).blur_sigma == 0.0 for s in range(50))


@pytest.mark.parametrize("kw", [
    {"weak_flip_prob": 1.5}, {"strong_flip_prob": -0.1}, {"blur_sigma_range": (2.0, 1.0)},
    {"blur_sigma_range": (-1.0, 1.0)},
])
def test_invalid_policy_rejected(kw):
    with pytest.raises(ValueError):
        AugmentationPolicy(**kw)


def test_invalid_transforms_rejected():
    with pytest.raises(ValueError):
        ViewTransform("rotate", 10, 10)
    with pytest.raises(ValueError):
        ViewTransform("scale", 10, 10, 0.0)


def test_view_names_round_trip():
    specs = [ViewSpec("mirror"), ViewSpec("scale", 0.75)]
    for spec in specs + [ViewSpec("identity")]:
        t = spec.bind(64, 48)
        assert parse_view_name(t.name, 64, 48, specs) == t
    with pytest.raises(ValueError, match="scale"):
        parse_view_name("scale", 64, 48)
