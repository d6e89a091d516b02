import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedseg.augment import (CUTOUT_BOX, PRESETS, AugmentKind, cutout, fixmatch_pair, gaussian_noise,
                            intensity_scale_shift, supervised_augment)

images = arrays(np.float32, (2, 12, 12), elements=st.floats(0, 1, width=32))


def test_scale_shift_forced_draws():
    img = np.full((8, 8), 0.5, np.float32)
    out = intensity_scale_shift(img, np.random.default_rng(0), 0.2, scale=1.1, shift=0.05)
    assert out.shape == img.shape
    np.testing.assert_allclose(out, 0.6, atol=1e-6)


def test_scale_shift_tiny_magnitude_is_near_identity():
    img = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    out = intensity_scale_shift(img, np.random.default_rng(1), 1e-9)
    np.testing.assert_allclose(out, img, atol=1e-7)


def test_scale_shift_draw_ranges():
    rng = np.random.default_rng(0)
    # two pixel values that never reach the clamp, so a and b can be recovered
    img = np.full((4000, 1, 2), 0.4, np.float32)
    img[:, 0, 1] = 0.6
    out = intensity_scale_shift(img, rng, 0.1).astype(np.float64)
    a = (out[:, 0, 1] - out[:, 0, 0]) / 0.2
    b = out[:, 0, 0] - 0.4 * a
    assert a.min() >= 0.9 - 1e-5 and a.max() <= 1.1 + 1e-5
    assert b.min() >= -0.1 - 1e-5 and b.max() <= 0.1 + 1e-5
    assert a.min() < 0.905 and a.max() > 1.095 and abs(a.mean() - 1) < 0.005
    assert b.min() < -0.095 and b.max() > 0.095 and abs(b.mean()) < 0.005


@pytest.mark.parametrize("m", [0.0, 1.0, -0.1, 1.5])
def test_scale_shift_magnitude_errors(m):
    with pytest.raises(ValueError):
        intensity_scale_shift(np.zeros((4, 4)), np.random.default_rng(0), m)


def test_gaussian_zero_sigma_identity():
    img = np.random.default_rng(0).random((8, 8)).astype(np.float32)
    np.testing.assert_array_equal(gaussian_noise(img, np.random.default_rng(0), 0.0), img)
    with pytest.raises(ValueError):
        gaussian_noise(img, np.random.default_rng(0), -0.1)


def test_gaussian_noise_mean_statistical_oracle():
    sigma = 0.01
    img = np.full((1000, 1000), 0.5, np.float32)  # far from the clamp
    out = gaussian_noise(img, np.random.default_rng(3), sigma)
    diff = out.astype(np.float64) - img
    assert abs(diff.mean()) < 3 * sigma / 1000
    assert diff.std() == pytest.approx(sigma, rel=0.01)


def test_gauss_presets_variance_ordering():
    rng = np.random.default_rng(0)
    img = rng.random((4, 64, 64)).astype(np.float32)
    mae = {}
    for name in ("Gauss_0.1", "Gauss_0.9"):
        src, pert = PRESETS[name](img, np.random.default_rng(5))
        np.testing.assert_array_equal(src, img)
        mae[name] = np.abs(pert - img).mean()
    assert mae["Gauss_0.9"] > mae["Gauss_0.1"]
    assert PRESETS["Gauss_0.9"].sigma == pytest.approx(np.sqrt(0.9))


def test_cutout_single_box_counts():
    img = np.random.default_rng(0).uniform(0.1, 1.0, (64, 64)).astype(np.float32)
    out = cutout(img, np.random.default_rng(1), 1)
    zero = out == 0
    assert zero.sum() == CUTOUT_BOX[0] * CUTOUT_BOX[1] == 100
    assert (out == img).sum() == 64 * 64 - 100
    rows, cols = np.nonzero(zero)
    assert rows.max() - rows.min() == 9 and cols.max() - cols.min() == 9


def test_cutout_forced_tiling_zeroes_everything():
    img = np.ones((20, 20), np.float32)
    out = cutout(img, None, 4, 10, 10, positions=[(0, 0), (0, 10), (10, 0), (10, 10)])
    assert not out.any()


def test_cutout_many_boxes_bounded_and_errors():
    img = np.ones((3, 64, 64), np.float32)
    out = cutout(img, np.random.default_rng(0), 5)
    for o in out:
        assert 100 <= (o == 0).sum() <= 500
    with pytest.raises(ValueError):
        cutout(np.ones((8, 8)), np.random.default_rng(0), 1, 10, 10)
    with pytest.raises(ValueError):
        cutout(np.ones((8, 8)), np.random.default_rng(0), 0, 2, 2)


def test_cutout_positions_cover_image_uniformly():
    img = np.ones((4000, 8, 8), np.float32)
    hits = (cutout(img, np.random.default_rng(0), 1, 1, 1) == 0).sum(axis=0)
    assert hits.sum() == 4000
    # 62.5 expected per pixel; +-5 sigma band
    assert hits.min() > 62.5 - 5 * np.sqrt(62.5) and hits.max() < 62.5 + 5 * np.sqrt(62.5)


def test_fixmatch_magnitudes():
    rng = np.random.default_rng(0)
    img = np.full((4000, 1, 2), 0.25, np.float32)
    img[:, 0, 1] = 0.75
    weak, strong = fixmatch_pair(img, rng, 0.1)
    gap_w = np.abs((weak[:, 0, 1] - weak[:, 0, 0]) / 0.5 - 1).max()
    gap_s = np.abs((strong[:, 0, 1] - strong[:, 0, 0]) / 0.5 - 1).max()
    assert gap_w <= 0.1 + 1e-5 and gap_s > 0.5


def test_fixmatch_forced_identity_and_errors():
    img = np.random.default_rng(0).random((8, 8)).astype(np.float32)
    w, s = fixmatch_pair(img, np.random.default_rng(0), 0.25, weak=(1.0, 0.0), strong=(1.0, 0.0))
    np.testing.assert_array_equal(w, img)
    np.testing.assert_array_equal(s, img)
    for y in (0.0, 0.6):
        with pytest.raises(ValueError):
            fixmatch_pair(img, np.random.default_rng(0), y)


def test_fixmatch_kind_returns_weak_then_strong():
    img = np.random.default_rng(0).random((2, 8, 8)).astype(np.float32)
    kind = AugmentKind("fixmatch", y=0.25)
    a = kind(img, np.random.default_rng(4))
    b = fixmatch_pair(img, np.random.default_rng(4), 0.25)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@settings(max_examples=60, deadline=None)
@given(images, st.sampled_from(sorted(PRESETS)), st.integers(0, 2 ** 31))
def test_all_augmentations_stay_in_unit_interval(img, name, seed):
    src, pert = PRESETS[name](img, np.random.default_rng(seed))
    for out in (src, pert):
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(sorted(PRESETS)), st.integers(0, 2 ** 31))
def test_augmentations_deterministic(name, seed):
    img = np.random.default_rng(0).random((2, 16, 16)).astype(np.float32)
    a = PRESETS[name](img, np.random.default_rng(seed))
    b = PRESETS[name](img, np.random.default_rng(seed))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_augment_kind_validation_and_roundtrip():
    for bad in (dict(variant="blur"), dict(variant="scale_shift", magnitude=1.0),
                dict(variant="gaussian", sigma=-1), dict(variant="cutout", count=0),
                dict(variant="fixmatch", y=0.7)):
        with pytest.raises(ValueError):
            AugmentKind(**bad)
    for kind in PRESETS.values():
        assert AugmentKind.from_dict(kind.to_dict()) == kind
    img = np.zeros((4, 4), np.float32)
    src, pert = AugmentKind("identity")(img, None)
    assert src is img and pert is img


# -- supervised augmentation ----------------------------------------------------------------------

def test_supervised_forced_identity_and_double_flip():
    rng = np.random.default_rng(0)
    patch = rng.random((8, 8)).astype(np.float32)
    label = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    p, l = supervised_augment(patch, label, rng, flip_h=False, flip_v=False, k=0, offset=0.0)
    np.testing.assert_array_equal(p, patch)
    np.testing.assert_array_equal(l, label)
    p1, l1 = supervised_augment(patch, label, rng, flip_h=True, flip_v=False, k=0, offset=0.0)
    p2, l2 = supervised_augment(p1, l1, rng, flip_h=True, flip_v=False, k=0, offset=0.0)
    np.testing.assert_array_equal(p2, patch)
    np.testing.assert_array_equal(l2, label)


@pytest.mark.parametrize("fh", [False, True])
@pytest.mark.parametrize("fv", [False, True])
@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_supervised_spatial_transform_commutes(fh, fv, k):
    # a patch whose intensity encodes a delta at (r, c) must move with the label's delta
    r, c = 2, 5
    patch = np.zeros((8, 8), np.float32)
    patch[r, c] = 1.0
    label = np.zeros((8, 8), np.uint8)
    label[r, c] = 1
    p, l = supervised_augment(patch, label, np.random.default_rng(0), flip_h=fh, flip_v=fv, k=k, offset=0.0)
    assert l.sum() == 1 and set(np.unique(l)) <= {0, 1}
    np.testing.assert_array_equal(np.argwhere(p == 1.0), np.argwhere(l == 1))
    # explicit expected location
    rr, cc = r, c
    if fh:
        cc = 7 - cc
    if fv:
        rr = 7 - rr
    for _ in range(k):
        rr, cc = 7 - cc, rr
    assert l[rr, cc] == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_supervised_label_binary_and_count_preserved(seed):
    rng = np.random.default_rng(seed)
    patch = rng.random((10, 10)).astype(np.float32)
    label = (rng.random((10, 10)) > 0.6).astype(np.uint8)
    p, l = supervised_augment(patch, label, rng)
    assert l.sum() == label.sum() and set(np.unique(l)) <= {0, 1}
    assert p.min() >= 0 and p.max() <= 1


def test_supervised_shift_applies_to_patch_only():
    patch = np.full((4, 4), 0.5, np.float32)
    label = np.eye(4, dtype=np.uint8)
    p, l = supervised_augment(patch, label, None, flip_h=False, flip_v=False, k=0, offset=0.1)
    np.testing.assert_allclose(p, 0.6, atol=1e-6)
    np.testing.assert_array_equal(l, label)
    with pytest.raises(ValueError):
        supervised_augment(patch, label[:3], None)
