import numpy as np
import pytest
from hypothesis import given, strategies as st

from femseg.augment import (
    AugmentConfig,
    add_gaussian_noise,
    augment_sample,
    brightness,
    draw_params,
    scale_3d,
    scale_3d_mask,
)
from femseg.volgrid import Mask3, Spacing3, Volume3

SP = Spacing3(1.0, 1.0, 1.0)


def _ball(n, r):
    c = (n - 1) / 2
    z, y, x = np.indices((n, n, n))
    return (x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2 <= r * r


def _radius_map(n):
    c = (n - 1) / 2
    z, y, x = np.indices((n, n, n))
    return np.sqrt((x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2)


def test_noise_zero_sigma_identity():
    v = Volume3(np.random.default_rng(0).random((4, 5, 6)), SP)
    assert np.array_equal(add_gaussian_noise(v, 0.0, 1).data, v.data)


def test_noise_statistics():
    v = Volume3(np.full((64, 64, 64), 50.0), SP)
    out = add_gaussian_noise(v, 10.0, 123).data.astype(np.float64)
    assert abs(out.mean() - 50.0) <= 3 * 10 / np.sqrt(64**3)
    assert abs(out.std() - 10.0) <= 0.5


def test_noise_seeded():
    v = Volume3(np.zeros((8, 8, 8)), SP)
    assert np.array_equal(add_gaussian_noise(v, 2.0, 5).data, add_gaussian_noise(v, 2.0, 5).data)
    assert not np.array_equal(add_gaussian_noise(v, 2.0, 5).data, add_gaussian_noise(v, 2.0, 6).data)
    with pytest.raises(ValueError):
        add_gaussian_noise(v, -1.0, 0)


def test_brightness_examples():
    v = Volume3(np.full((2, 2, 2), 10.0), SP)
    assert np.array_equal(brightness(v, 1, 0).data, v.data)
    assert np.all(brightness(v, 2, -5).data == 15.0)
    rnd = Volume3(np.random.default_rng(1).random((3, 3, 3)), SP)
    assert np.all(brightness(rnd, 0, 7.5).data == 7.5)


def test_scale_identity():
    rng = np.random.default_rng(2)
    v = Volume3(rng.random((6, 7, 8)), SP)
    m = Mask3(rng.random((6, 7, 8)) < 0.5, SP)
    assert np.array_equal(scale_3d(v, 1.0).data, v.data)
    assert np.array_equal(scale_3d_mask(m, 1.0).data, m.data)


@pytest.mark.parametrize("factor", [0.7, 0.93, 1.1, 2.0])
def test_scale_constant(factor):
    v = Volume3(np.full((9, 10, 11), 3.25), SP)
    assert np.allclose(scale_3d(v, factor).data, 3.25, atol=1e-6)


def test_scale_sphere_factor_two():
    n = 41
    m = Mask3(_ball(n, 8), SP)
    out = scale_3d_mask(m, 2.0)
    ref = _ball(n, 16).sum()
    assert abs(out.count() - ref) / ref <= 0.10
    assert out.data.dtype == np.bool_


@pytest.mark.parametrize("factor", [0.9, 1.1, 1.6])
def test_scaled_image_and_mask_agree_up_to_surface(factor):
    n = 33
    ball = _ball(n, 9)
    img = scale_3d(Volume3(ball.astype(np.float32), SP), factor).data > 0.5
    msk = scale_3d_mask(Mask3(ball, SP), factor).data
    diff = img != msk
    r = _radius_map(n)
    # one source voxel spans `factor` output voxels
    assert np.all(np.abs(r[diff] - 9 * factor) <= max(1.0, factor))


def test_identity_config_leaves_sample_unchanged():
    rng = np.random.default_rng(3)
    v = Volume3(rng.random((8, 8, 8)) * 100, SP)
    m = Mask3(rng.random((8, 8, 8)) < 0.3, SP)
    out, (om,), _ = augment_sample(v, [m], AugmentConfig.identity(), seed=9)
    assert np.array_equal(out.data, v.data)
    assert np.array_equal(om.data, m.data)


def test_augment_seeded():
    rng = np.random.default_rng(4)
    v = Volume3(rng.random((10, 12, 12)) * 100, SP)
    m = Mask3(_ball(12, 4)[:10], SP)
    a = augment_sample(v, [m], AugmentConfig(), seed=77)
    b = augment_sample(v, [m], AugmentConfig(), seed=77)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1][0].data, b[1][0].data)
    assert a[2] == b[2]


def test_draws_inside_ranges():
    cfg = AugmentConfig()
    data = np.random.default_rng(5).random((6, 6, 6)).astype(np.float32) * 1000
    std = float(data.std())
    span = float(data.max() - data.min())
    for seed in range(100):
        p = draw_params(cfg, data, seed)
        assert 0.0 <= p.noise_sigma <= 0.05 * std
        assert 0.9 <= p.brightness_scale <= 1.1
        assert -0.05 * span <= p.brightness_shift <= 0.05 * span
        assert 0.9 <= p.scale_factor <= 1.1


@given(st.integers(0, 10_000))
def test_masks_stay_binary_and_untouched_by_intensity_ops(seed):
    rng = np.random.default_rng(seed)
    v = Volume3(rng.random((8, 9, 10)) * 500, SP)
    m = Mask3(rng.random((8, 9, 10)) < 0.4, SP)
    cfg = AugmentConfig(scale_factor_range=(1.0, 1.0))
    out, (om,), _ = augment_sample(v, [m], cfg, seed)
    assert om.data.dtype == np.bool_
    assert np.array_equal(om.data, m.data)
    out, (om,), _ = augment_sample(v, [m], AugmentConfig(), seed)
    assert set(np.unique(om.data.view(np.uint8)).tolist()) <= {0, 1}


@pytest.mark.parametrize(
    "kw",
    [
        dict(scale_factor_range=(0.0, 1.0)),
        dict(brightness_scale_range=(1.2, 1.1)),
        dict(noise_sigma_range=(-0.1, 0.0)),
        dict(brightness_shift_range=(0.0, float("inf"))),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        AugmentConfig(**kw)
