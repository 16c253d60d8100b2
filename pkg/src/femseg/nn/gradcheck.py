"""Central finite differences for checking backward passes (use float64)."""

from __future__ import annotations

import numpy as np


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place).

    ``indices`` restricts the check to a subset of flat positions; the other
    entries of the result are left as NaN.
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def relative_error(analytic, numeric, floor: float = 0.0) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes.

    ``floor`` bounds the scale from below, for gradients that are identically
    zero (e.g. a conv bias followed by batch norm).
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(n)
    a, n = a[mask], n[mask]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)
