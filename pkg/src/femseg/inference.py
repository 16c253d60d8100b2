"""Sliding-window prediction, Otsu binarization and the two-stage cascade.

A model here is anything with ``predict_proba(x)`` mapping an array of shape
``(N, 1, D, H, W)`` to class probabilities ``(N, C, D, H, W)``; channel 1 is
foreground. :class:`Segmenter` wraps a network with its fixed intensity
normalization so callers pass raw intensities.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation

from .errors import DegenerateHistogram, ShapeMismatch
from .volgrid import Mask3, Volume3

OTSU_BINS = 256


@dataclass(frozen=True)
class WindowPlan:
    window_depth: int
    in_plane: tuple  # (nx, ny)
    starts: tuple
    pad_before: int = 0
    pad_after: int = 0

    @property
    def padded_depth(self) -> int:
        return self.starts[-1] + self.window_depth

    @property
    def num_slices(self) -> int:
        return self.padded_depth - self.pad_before - self.pad_after

    def coverage(self) -> np.ndarray:
        """Number of windows covering each padded slice."""
        cov = np.zeros(self.padded_depth, dtype=np.int64)
        for s in self.starts:
            cov[s:s + self.window_depth] += 1
        return cov


def plan_windows(num_slices: int, window_depth: int = 64, in_plane=(192, 192), stride: int = 1) -> WindowPlan:
    """Depth-wise windows; ``stride`` > 1 is only used for quick validation.

    With a stride the final window is still anchored at ``S - w`` so every
    slice is covered.
    """
    if num_slices < 1 or window_depth < 1 or stride < 1:
        raise ValueError("num_slices, window_depth and stride must be >= 1")
    if num_slices < window_depth:
        pad = window_depth - num_slices
        before = pad // 2
        return WindowPlan(window_depth, tuple(in_plane), (0,), before, pad - before)
    last = num_slices - window_depth
    starts = list(range(0, last + 1, stride))
    if starts[-1] != last:
        starts.append(last)
    return WindowPlan(window_depth, tuple(in_plane), tuple(starts))


@dataclass
class Segmenter:
    """Network plus the fixed intensity normalization it was trained with."""

    model: object
    offset: float = 0.0
    scale: float = 1000.0

    def normalize(self, data: np.ndarray) -> np.ndarray:
        return (data - np.float32(self.offset)) / np.float32(self.scale)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.model.predict_proba(self.normalize(x))


def predict_volume(model, vol: Volume3, plan: WindowPlan) -> Volume3:
    nx, ny, nz = vol.dims
    if (nx, ny) != tuple(plan.in_plane):
        raise ShapeMismatch(f"volume in-plane {(nx, ny)} != plan {tuple(plan.in_plane)}")
    if nz != plan.num_slices:
        raise ShapeMismatch(f"volume has {nz} slices, plan expects {plan.num_slices}")
    data = vol.data
    if plan.pad_before or plan.pad_after:
        data = np.pad(data, ((plan.pad_before, plan.pad_after), (0, 0), (0, 0)), mode="edge")
    w = plan.window_depth
    total = np.zeros(data.shape, dtype=np.float64)
    for s in plan.starts:
        window = data[s:s + w][None, None]
        proba = np.asarray(model.predict_proba(window))
        if proba.shape[2:] != window.shape[2:]:
            raise ShapeMismatch(f"model output {proba.shape} for window {window.shape}")
        total[s:s + w] += proba[0, 1]
    total /= plan.coverage()[:, None, None]
    out = total[plan.pad_before:plan.pad_before + nz]
    return Volume3(np.clip(out, 0.0, 1.0), vol.spacing)


# -- Otsu -------------------------------------------------------------------

def histogram_bins(values: np.ndarray, bins: int = OTSU_BINS) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0 or v.min() < 0.0 or v.max() > 1.0:
        raise ValueError("probabilities must be non-empty and lie in [0, 1]")
    idx = np.minimum(np.floor(v * bins).astype(np.int64), bins - 1)
    return np.bincount(idx, minlength=bins)


def otsu_threshold(prob, bins: int = OTSU_BINS) -> float:
    """Bin boundary ``k / bins`` maximizing between-class variance.

    Comparisons are done in exact integer arithmetic; ties go to the lowest
    boundary. Raises :class:`DegenerateHistogram` when one bin holds every
    value.
    """
    data = prob.data if isinstance(prob, Volume3) else prob
    hist = [int(h) for h in histogram_bins(data, bins)]
    if sum(1 for h in hist if h) < 2:
        raise DegenerateHistogram("all values fall into a single histogram bin")
    n = sum(hist)
    s = sum(h * (2 * i + 1) for i, h in enumerate(hist))
    best_k, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for k in range(1, bins):
        n0 += hist[k - 1]
        s0 += hist[k - 1] * (2 * k - 1)
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (n * s0 - n0 * s) ** 2
        den = n0 * n1
        if best_k is None or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k / bins


def binarize(prob: Volume3, threshold: float) -> Mask3:
    return Mask3(prob.data > threshold, prob.spacing)


def threshold_or_default(prob: Volume3, default: float = 0.5) -> tuple[float, bool]:
    """Otsu threshold, falling back to ``default`` on a degenerate histogram."""
    try:
        return otsu_threshold(prob), False
    except DegenerateHistogram:
        return default, True


# -- cascade ----------------------------------------------------------------

@dataclass
class CascadeResult:
    periosteal_prob: Volume3
    periosteal: Mask3
    endosteal_prob: Volume3
    endosteal: Mask3
    thresholds: tuple
    seconds: dict = field(default_factory=dict)
    fallbacks: tuple = (False, False)


def stage2_input(vol: Volume3, periosteal: np.ndarray, margin: int = 1) -> Volume3:
    """Intensity zeroed outside the periosteal mask dilated by ``margin`` voxels."""
    keep = periosteal
    if margin > 0:
        keep = binary_dilation(periosteal, structure=np.ones((3, 3, 3), dtype=bool), iterations=margin)
    return Volume3(np.where(keep, vol.data, np.float32(0.0)), vol.spacing)


def cascade_segment(periosteal_model, endosteal_model, vol: Volume3, window_depth: int = 64,
                    margin: int = 1, mask_input: bool = True) -> CascadeResult:
    """Periosteal stage, then endosteal stage on the masked intensity.

    ``mask_input=False`` feeds the raw intensity to stage 2 (ablation); the
    final intersection with the periosteal mask is applied either way.
    """
    nx, ny, nz = vol.dims
    plan = plan_windows(nz, window_depth, (nx, ny))

    t0 = time.perf_counter()
    p_prob = predict_volume(periosteal_model, vol, plan)
    t_peri, fb1 = threshold_or_default(p_prob)
    p_mask = binarize(p_prob, t_peri)
    t1 = time.perf_counter()

    stage2 = stage2_input(vol, p_mask.data, margin) if mask_input else vol
    e_prob = predict_volume(endosteal_model, stage2, plan)
    t_endo, fb2 = threshold_or_default(e_prob)
    e_mask = Mask3(binarize(e_prob, t_endo).data & p_mask.data, vol.spacing)
    t2 = time.perf_counter()

    return CascadeResult(
        periosteal_prob=p_prob,
        periosteal=p_mask,
        endosteal_prob=e_prob,
        endosteal=e_mask,
        thresholds=(t_peri, t_endo),
        seconds={"periosteal": t1 - t0, "endosteal": t2 - t1},
        fallbacks=(fb1, fb2),
    )
