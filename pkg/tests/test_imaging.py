import colorsys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from leukomil import imaging as im
from oracles import disk_image, histogram_oracle, otsu_bruteforce


# --- colour ----------------------------------------------------------------

def test_rgb_to_hsv_matches_colorsys():
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, size=(500, 3), dtype=np.uint8)
    hsv = im.rgb_to_hsv(px[None])[0]
    for (r, g, b), (h, s, v) in zip(px, hsv):
        eh, es, ev = colorsys.rgb_to_hsv(r / 255, g / 255, b / 255)
        assert abs(s - es) < 1e-6 and abs(v - ev) < 1e-6
        if es > 0:
            d = abs(h - eh * 360) % 360
            assert min(d, 360 - d) < 1e-3


def test_saturation_equals_hsv_channel_bitwise():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(40, 30, 3), dtype=np.uint8)
    np.testing.assert_array_equal(im.saturation(img), im.rgb_to_hsv(img)[..., 1])


def test_hsv_round_trip_is_exact_on_uint8():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    np.testing.assert_array_equal(im.hsv_to_rgb(im.rgb_to_hsv(img)), img)


def test_black_pixel_has_zero_saturation():
    assert im.saturation(np.zeros((1, 1, 3), np.uint8))[0, 0] == 0


# --- Otsu ------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=40))
def test_otsu_cut_matches_bruteforce(hist):
    expected = otsu_bruteforce(hist)
    if expected is None:
        with pytest.raises(im.DegenerateInputError):
            im.otsu_cut(hist)
    else:
        assert im.otsu_cut(hist) == expected


def test_otsu_bimodal_cut_between_modes():
    hist = [0] * 256
    hist[40] = 100
    hist[200] = 100
    assert 41 <= im.otsu_cut(hist) <= 200


def test_otsu_two_gaussian_clusters():
    rng = np.random.default_rng(7)
    channel = np.clip(np.r_[rng.normal(0.2, 0.05, 5000), rng.normal(0.8, 0.05, 5000)], 0, 1)
    assert 0.35 < im.otsu_threshold(channel) < 0.65


def test_otsu_constant_channel_is_degenerate():
    with pytest.raises(im.DegenerateInputError):
        im.otsu_threshold(np.full((10, 10), 0.3))


def test_histogram_bins_match_oracle_on_edges():
    vals = np.r_[0.0, np.arange(1, 256) / 256, np.arange(0, 256) / 256 + 1 / 512, 1.0]
    counts = np.bincount(im.histogram_bins(vals, 256), minlength=256)
    np.testing.assert_array_equal(counts, histogram_oracle(vals, 256))


def test_foreground_is_value_above_threshold():
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, size=(50, 50, 3), dtype=np.uint8)
    sat = im.saturation(img)
    t = im.otsu_threshold(sat)
    cut = round(t * 256)
    np.testing.assert_array_equal(im.histogram_bins(sat) >= cut, sat > t)


# --- morphology ------------------------------------------------------------

def test_opening_keeps_full_mask():
    mask = np.ones((50, 50), bool)
    np.testing.assert_array_equal(im.binary_opening(mask, 2), mask)


def test_opening_removes_small_blob_keeps_large_disk():
    mask = np.zeros((60, 60), bool)
    mask[5:8, 5:8] = True
    yy, xx = np.mgrid[:60, :60]
    big = (yy - 35) ** 2 + (xx - 35) ** 2 <= 15 ** 2
    mask |= big
    out = im.binary_opening(mask, 3)
    assert not out[5:8, 5:8].any()
    np.testing.assert_array_equal(out, big)


def test_opening_radius_must_be_positive():
    with pytest.raises(ValueError):
        im.binary_opening(np.ones((5, 5), bool), 0)


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (24, 24)), st.integers(1, 3))
def test_opening_is_idempotent_and_anti_extensive(mask, r):
    once = im.binary_opening(mask, r)
    assert not (once & ~mask).any()
    np.testing.assert_array_equal(im.binary_opening(once, r), once)


# --- watershed and blobs -----------------------------------------------------

def test_watershed_splits_touching_disks():
    img = disk_image((120, 160), [(60, 55), (60, 100)], 26)
    mask = im.segment_mask(img)
    labels = im.watershed_split(mask, 20)
    blobs = im.filter_blobs(labels, 200)
    assert len(blobs) == 2
    assert abs(blobs[0].centroid[1] - 55) < 6 and abs(blobs[1].centroid[1] - 100) < 6


def test_watershed_cuts_a_neck_between_disks():
    # radius-15 disks 40 px apart joined by a 4-px wide bridge
    yy, xx = np.mgrid[:60, :100]
    mask = ((yy - 30) ** 2 + (xx - 30) ** 2 <= 15 ** 2) | ((yy - 30) ** 2 + (xx - 70) ** 2 <= 15 ** 2)
    mask[28:32, 30:71] = True
    assert im.filter_blobs(im.watershed_split(mask, 1_000), 1)[0].area == mask.sum()
    labels = im.watershed_split(mask, 20)
    assert len(np.unique(labels[mask])) == 2
    assert labels[30, 30] != labels[30, 70] and labels[30, 30] > 0 and labels[30, 70] > 0
    cut = [c for c in range(30, 71) if labels[30, c] != labels[30, 30]][0]
    assert 45 <= cut <= 55


def test_watershed_labels_every_foreground_pixel():
    rng = np.random.default_rng(5)
    mask = im.binary_opening(rng.random((80, 80)) < 0.6, 2)
    labels = im.watershed_split(mask, 5)
    np.testing.assert_array_equal(labels > 0, mask)


def test_filter_blobs_area_boundary():
    labels = np.zeros((10, 10), np.int32)
    labels[0, :4] = 1
    labels[5, :5] = 2
    blobs = im.filter_blobs(labels, 5)
    assert [b.label for b in blobs] == [2]
    assert blobs[0].centroid == (5.0, 2.0)


# --- cropping ----------------------------------------------------------------

def test_crop_interior_is_plain_slice():
    rng = np.random.default_rng(6)
    img = rng.integers(0, 256, size=(400, 500, 3), dtype=np.uint8)
    p = im.crop_patch(img, (210.4, 250.5))
    assert p.pixels.shape == (200, 200, 3)
    np.testing.assert_array_equal(p.pixels, img[110:310, 151:351])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.floats(-30, 70), st.floats(-30, 70), st.integers(4, 30))
def test_crop_reflection_matches_numpy_pad(h, w, r, c, size):
    size -= size % 2
    img = np.arange(h * w * 3, dtype=np.int64).reshape(h, w, 3) % 251
    img = img.astype(np.uint8)
    p = im.crop_patch(img, (r, c), size)
    ri, ci = int(np.floor(r + 0.5)), int(np.floor(c + 0.5))
    pad = size + 100
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    top, left = ri - size // 2 + pad, ci - size // 2 + pad
    np.testing.assert_array_equal(p.pixels, padded[top:top + size, left:left + size])


def test_patch_image_validates_dtype():
    with pytest.raises(ValueError):
        im.PatchImage(np.zeros((4, 4, 3), np.float32))


# --- pipeline ------------------------------------------------------------------

def test_blank_field_yields_no_patches():
    assert im.segment_field(np.full((100, 100, 3), 200, np.uint8)) == []


def test_segment_field_finds_disks():
    centers = [(100, 100), (100, 300), (300, 200)]
    img = disk_image((400, 400), centers, 25)
    patches = im.segment_field(img, source_id="f")
    assert len(patches) == 3
    found = sorted(p.centroid for p in patches)
    for (r, c), (er, ec) in zip(found, sorted(centers)):
        assert abs(r - er) < 1 and abs(c - ec) < 1
    assert all(p.pixels.shape == (200, 200, 3) and p.source_id == "f" for p in patches)


def test_segment_field_ten_separated_disks():
    centers = [(80 + 160 * (i // 5), 80 + 160 * (i % 5)) for i in range(10)]
    img = disk_image((340, 820), centers, 22)
    patches = im.segment_field(img)
    assert len(patches) == 10
    for p, (r, c) in zip(sorted(patches, key=lambda p: p.centroid), sorted(centers)):
        assert np.hypot(p.centroid[0] - r, p.centroid[1] - c) <= 3


def test_segment_field_is_deterministic():
    img = disk_image((300, 300), [(80, 80), (200, 210)], 24)
    a = im.segment_field(img)
    b = im.segment_field(img)
    assert [p.centroid for p in a] == [p.centroid for p in b]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.pixels, y.pixels)


# --- scoring ---------------------------------------------------------------------

def test_precision_recall_reported_counts():
    # 71 annotated cells, 4 missed, 6 spurious
    p, r = im.precision_recall(67, 6, 4)
    assert round(r, 2) == 0.94 and round(p, 2) == 0.92


def test_precision_recall_empty_is_zero():
    assert im.precision_recall(0, 0, 0) == (0.0, 0.0)


def test_match_centroids_greedy_by_distance():
    pred = [(0, 0), (0, 3)]
    truth = [(0, 2), (0, 10)]
    assert im.match_centroids(pred, truth, 5) == [(1, 0)]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), max_size=12),
       st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), max_size=12))
def test_match_centroids_is_one_to_one_within_radius(pred, truth):
    pairs = im.match_centroids(pred, truth, 4)
    assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})
    for i, j in pairs:
        assert np.hypot(pred[i][0] - truth[j][0], pred[i][1] - truth[j][1]) <= 4
