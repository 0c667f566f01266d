import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from leukomil.augment import (
    AugmentConfig,
    augment,
    augment_batch,
    content_streams,
    geometric,
    spectral,
)
from leukomil.imaging import PatchImage, rgb_to_hsv


def _img(seed=0, side=16):
    return np.random.default_rng(seed).integers(0, 256, size=(side, side, 3), dtype=np.uint8)


def test_disabled_config_is_identity():
    x = _img()
    out = augment(x, AugmentConfig.disabled(), np.random.default_rng(0))
    np.testing.assert_array_equal(out, x)
    stack = np.stack([_img(1), _img(2)])
    np.testing.assert_array_equal(augment_batch(stack, AugmentConfig.disabled(), np.random.default_rng(0)), stack)


def test_same_rng_state_same_output():
    x = _img()
    a = augment(x, AugmentConfig(), np.random.default_rng(7))
    b = augment(x, AugmentConfig(), np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_patch_image_in_patch_image_out():
    p = PatchImage(_img(), "s1", (3.0, 4.0))
    out = augment(p, AugmentConfig(), np.random.default_rng(0))
    assert isinstance(out, PatchImage) and out.source_id == "s1" and out.centroid == (3.0, 4.0)
    assert out.pixels.dtype == np.uint8 and out.pixels.shape == p.pixels.shape


@pytest.mark.parametrize("k", range(4))
@pytest.mark.parametrize("fh", [False, True])
@pytest.mark.parametrize("fv", [False, True])
def test_geometric_is_a_pixel_permutation(k, fh, fv):
    x = _img(3, 8)
    y = geometric(x, k, fh, fv)
    assert sorted(map(tuple, x.reshape(-1, 3))) == sorted(map(tuple, y.reshape(-1, 3)))


def test_geometric_quarter_turn():
    x = np.arange(4 * 3, dtype=np.uint8).reshape(2, 2, 3)
    np.testing.assert_array_equal(geometric(x, 1, False, False), np.rot90(x))
    np.testing.assert_array_equal(geometric(x, 4, False, False), x)


def test_spectral_hue_shift_rotates_hue():
    x = np.zeros((4, 4, 3), np.uint8)
    x[..., 0] = 200
    x[..., 2] = 50
    h0 = rgb_to_hsv(x)[0, 0, 0]
    y = spectral(x, 30.0, 1.0, None)
    h1 = rgb_to_hsv(y)[0, 0, 0]
    d = (h1 - h0) % 360
    assert abs(d - 30) < 1.0


def test_spectral_gamma_changes_value_only():
    x = np.full((2, 2, 3), (180, 90, 60), np.uint8)
    y = spectral(x, 0.0, 1.5, None)
    hx, hy = rgb_to_hsv(x)[0, 0], rgb_to_hsv(y)[0, 0]
    assert abs(hx[0] - hy[0]) < 1.0
    assert hy[2] == pytest.approx(hx[2] ** 1.5, abs=1 / 255)


def test_batch_matches_sequential_calls():
    stack = np.stack([_img(i) for i in range(5)])
    cfg = AugmentConfig()
    batch = augment_batch(stack, cfg, np.random.default_rng(11))
    rng = np.random.default_rng(11)
    seq = np.stack([augment(x, cfg, rng) for x in stack])
    np.testing.assert_array_equal(batch, seq)


def test_batch_with_generator_per_image():
    stack = np.stack([_img(i) for i in range(3)])
    cfg = AugmentConfig()
    out = augment_batch(stack, cfg, [np.random.default_rng(i) for i in range(3)])
    for i in range(3):
        np.testing.assert_array_equal(out[i], augment(stack[i], cfg, np.random.default_rng(i)))
    with pytest.raises(ValueError):
        augment_batch(stack, cfg, [np.random.default_rng(0)])


def test_content_streams_key_on_image_bytes():
    a, b = _img(1), _img(2)
    stack = np.stack([a, b, a])
    out = augment_batch(stack, AugmentConfig(), content_streams(stack, 5))
    np.testing.assert_array_equal(out[0], out[2])
    flipped = augment_batch(stack[::-1].copy(), AugmentConfig(), content_streams(stack[::-1], 5))
    np.testing.assert_array_equal(flipped[::-1], out)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_output_stays_uint8(seed):
    out = augment(_img(seed % 17), AugmentConfig(noise_sigma_max=50.0), np.random.default_rng(seed))
    assert out.dtype == np.uint8


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(gamma_range=(1.2, 0.8))
    with pytest.raises(ValueError):
        AugmentConfig(noise_sigma_max=-1.0)


def test_noise_is_zero_mean():
    # 1000 noise-only copies of a flat patch; each copy draws sigma ~ U(0, max),
    # so one pixel has variance max^2 / 3 plus 1/12 from rounding
    cfg = AugmentConfig(geometric=False, hue=False, gamma=False, noise_sigma_max=12.0)
    flat = np.full((8, 8, 3), 128, np.uint8)
    rng = np.random.default_rng(21)
    copies = np.stack([augment(flat, cfg, rng) for _ in range(1000)]).astype(np.float64)
    sd = np.sqrt(12.0 ** 2 / 3 + 1 / 12) / np.sqrt(1000)
    dev = np.abs(copies.mean(axis=0) - 128)
    # 192 pixels: a fixed 3-sigma band is exceeded by about one in 370 pixels by chance
    assert np.mean(dev <= 3 * sd) >= 0.99
    assert dev.max() <= 4.5 * sd
    assert abs(copies.mean() - 128) <= 3 * sd / np.sqrt(dev.size)


def test_different_seeds_give_different_outputs():
    x = _img(30, 32)
    same = sum(np.array_equal(augment(x, AugmentConfig(), np.random.default_rng(s)),
                              augment(x, AugmentConfig(), np.random.default_rng(s + 1000)))
               for s in range(100))
    assert same <= 1
