"""Training-time augmentation: Gaussian noise, brightness, isotropic 3D zoom.

Zooming keeps the grid size and scales content about the grid centre, using
trilinear interpolation for intensities and nearest neighbour for masks.
Both paths share the same coordinate map, so an image and its masks stay
paired. Samples that fall outside the grid take the nearest edge value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .volgrid import Mask3, Volume3


def _check_range(name, r, positive=False):
    lo, hi = r
    if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
        raise ValueError(f"{name}: need a closed interval lo <= hi, got {r}")
    if positive and lo <= 0:
        raise ValueError(f"{name}: values must be strictly positive")


@dataclass(frozen=True)
class AugmentConfig:
    # noise sigma as a fraction of the input's intensity std
    noise_sigma_range: tuple = (0.0, 0.05)
    brightness_scale_range: tuple = (0.9, 1.1)
    # shift as a fraction of the input's intensity range (max - min)
    brightness_shift_range: tuple = (-0.05, 0.05)
    scale_factor_range: tuple = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_sigma_range", "brightness_scale_range",
                     "brightness_shift_range", "scale_factor_range"):
            value = tuple(float(v) for v in getattr(self, name))
            object.__setattr__(self, name, value)
            _check_range(name, value, positive=name == "scale_factor_range")
        if self.noise_sigma_range[0] < 0:
            raise ValueError("noise sigma must be nonnegative")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (1.0, 1.0))


@dataclass(frozen=True)
class AugmentParams:
    noise_sigma: float  # absolute
    brightness_scale: float
    brightness_shift: float  # absolute
    scale_factor: float
    noise_seed: int


def add_gaussian_noise(vol: Volume3, sigma: float, seed) -> Volume3:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return Volume3(vol.data.copy(), vol.spacing)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(vol.data.shape) * sigma
    return Volume3(vol.data + noise, vol.spacing)


def brightness(vol: Volume3, scale: float, shift: float) -> Volume3:
    return Volume3(vol.data * np.float32(scale) + np.float32(shift), vol.spacing)


def _zoom_coords(shape, factor):
    # output voxel i samples input at c + (i - c) / factor
    axes = []
    for n in shape:
        c = (n - 1) / 2.0
        axes.append(c + (np.arange(n, dtype=np.float64) - c) / factor)
    return np.meshgrid(*axes, indexing="ij")


def _zoom(data: np.ndarray, factor: float, order: int) -> np.ndarray:
    if factor <= 0:
        raise ValueError("scale factor must be > 0")
    if factor == 1.0:
        return data.copy()
    coords = _zoom_coords(data.shape, factor)
    return map_coordinates(data, coords, order=order, mode="nearest")


def scale_3d(vol: Volume3, factor: float) -> Volume3:
    return Volume3(_zoom(vol.data, factor, order=1), vol.spacing)


def scale_3d_mask(mask: Mask3, factor: float) -> Mask3:
    out = _zoom(mask.data.astype(np.uint8), factor, order=0)
    return Mask3(out.astype(np.bool_), mask.spacing)


def draw_params(config: AugmentConfig, intensity: np.ndarray, seed) -> AugmentParams:
    rng = np.random.default_rng(seed)
    std = float(intensity.std())
    span = float(intensity.max() - intensity.min()) if intensity.size else 0.0
    u = lambda r: float(rng.uniform(r[0], r[1])) if r[1] > r[0] else r[0]
    return AugmentParams(
        noise_sigma=u(config.noise_sigma_range) * std,
        brightness_scale=u(config.brightness_scale_range),
        brightness_shift=u(config.brightness_shift_range) * span,
        scale_factor=u(config.scale_factor_range),
        noise_seed=int(rng.integers(0, 2**63 - 1)),
    )


def augment_sample(intensity: Volume3, masks, config: AugmentConfig, seed):
    """Zoom image and masks together, then brightness and noise on the image.

    Returns ``(intensity, masks, params)`` with ``masks`` in input order.
    """
    params = draw_params(config, intensity.data, seed)
    vol = scale_3d(intensity, params.scale_factor)
    out_masks = [scale_3d_mask(m, params.scale_factor) for m in masks]
    vol = brightness(vol, params.brightness_scale, params.brightness_shift)
    vol = add_gaussian_noise(vol, params.noise_sigma, params.noise_seed)
    return vol, out_masks, params
