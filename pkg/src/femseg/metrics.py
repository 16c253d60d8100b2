"""Overlap, surface-distance and volume-error metrics, plus the text report.

Surface voxels are foreground voxels with at least one background neighbour
along the six face directions; anything outside the grid counts as
background. Distances are between voxel centres in millimeters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree

from .errors import BothEmpty, EmptyDenominator, EmptyMask, EmptySurface, GeometryMismatch, ZeroGroundTruth
from .volgrid import Mask3, Spacing3, Volume3, mask_volume_cm3


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _same(a, b):
    if not a.same_geometry(b):
        raise GeometryMismatch(f"{a.dims}@{a.spacing} vs {b.dims}@{b.spacing}")


def confusion(pred: Mask3, truth: Mask3) -> ConfusionCounts:
    _same(pred, truth)
    p, t = pred.data, truth.data
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dsc(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    if den == 0:
        raise BothEmpty("DSC undefined: prediction and truth are both empty")
    return 2 * c.tp / den


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise EmptyDenominator("sensitivity undefined: truth is empty")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise EmptyDenominator("specificity undefined: truth covers the whole grid")
    return c.tn / (c.tn + c.fp)


# -- surfaces ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SurfaceSet:
    indices: np.ndarray  # (K, 3) voxel indices in (z, y, x) order
    coords: np.ndarray  # (K, 3) voxel-centre positions in mm, (x, y, z) order
    spacing: Spacing3
    shape: tuple  # grid (nz, ny, nx)

    def __len__(self) -> int:
        return len(self.indices)


_SIX = generate_binary_structure(3, 1)


def surface_mask(mask: Mask3) -> np.ndarray:
    interior = binary_erosion(mask.data, structure=_SIX, border_value=0)
    return mask.data & ~interior


def extract_surface(mask: Mask3) -> SurfaceSet:
    if not mask.data.any():
        raise EmptyMask("cannot extract the surface of an empty mask")
    idx = np.argwhere(surface_mask(mask))
    coords = idx[:, ::-1] * np.array(mask.spacing.as_tuple())
    return SurfaceSet(idx, coords, mask.spacing, mask.data.shape)


def _check_surfaces(a: SurfaceSet, b: SurfaceSet):
    if len(a) == 0 or len(b) == 0:
        raise EmptySurface("surface distance needs two nonempty surfaces")


def surface_distance_map(pred_surface: SurfaceSet, truth_surface: SurfaceSet) -> np.ndarray:
    """Distance (mm) from each predicted surface voxel to the truth surface."""
    _check_surfaces(pred_surface, truth_surface)
    d, _ = cKDTree(truth_surface.coords).query(pred_surface.coords, k=1)
    return np.asarray(d, dtype=np.float64)


def asd(pred_surface: SurfaceSet, truth_surface: SurfaceSet) -> float:
    d_pg = surface_distance_map(pred_surface, truth_surface)
    d_gp = surface_distance_map(truth_surface, pred_surface)
    return (float(d_pg.sum()) + float(d_gp.sum())) / (len(d_pg) + len(d_gp))


def distance_map_volume(surface: SurfaceSet, distances: np.ndarray) -> Volume3:
    """Scatter per-surface-voxel distances into a grid (zero elsewhere)."""
    out = np.zeros(surface.shape, dtype=np.float32)
    z, y, x = surface.indices.T
    out[z, y, x] = distances
    return Volume3(out, surface.spacing)


# -- volume errors ----------------------------------------------------------

def _pairs(truth, pred):
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape or t.ndim != 1 or t.size == 0:
        raise ValueError("need two equal-length, nonempty 1D lists")
    return t, p


def mae(truth, pred) -> float:
    t, p = _pairs(truth, pred)
    return float(np.mean(np.abs(p - t)))


def rmse(truth, pred) -> float:
    t, p = _pairs(truth, pred)
    return float(math.sqrt(np.mean((p - t) ** 2)))


def re(truth: float, pred: float) -> float:
    """Relative error in percent, relative to the ground-truth value."""
    if truth == 0:
        raise ZeroGroundTruth("relative error undefined for zero ground truth")
    return abs(pred - truth) / truth * 100.0


# -- report -----------------------------------------------------------------

@dataclass
class StructureMetrics:
    # None marks an undefined value
    dsc: float | None
    asd: float | None
    sensitivity: float | None
    specificity: float | None
    truth_cm3: float
    pred_cm3: float


@dataclass
class VolumeErrorRow:
    truth_mean: float
    truth_sd: float
    pred_mean: float
    mae: float
    rmse: float
    re_mean: float
    re_min: float
    re_max: float


@dataclass
class MetricsReport:
    structures: dict = field(default_factory=dict)  # name -> StructureMetrics
    regions: dict = field(default_factory=dict)  # target -> VolumeErrorRow
    meta: dict = field(default_factory=dict)  # free-form string values

    def to_text(self) -> str:
        lines = ["# femseg metrics report v1"]
        for k, v in self.meta.items():
            lines.append(f"meta.{k} = {v}")
        for name, s in self.structures.items():
            for f in fields(s):
                lines.append(f"structure.{name}.{f.name} = {_fmt(getattr(s, f.name))}")
        for name, r in self.regions.items():
            for f in fields(r):
                lines.append(f"region.{name}.{f.name} = {_fmt(getattr(r, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        meta, structs, regions = {}, {}, {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition(" = ")
            if not sep:
                raise ValueError(f"bad report line {line!r}")
            kind, _, rest = key.partition(".")
            if kind == "meta":
                meta[rest] = value
                continue
            name, _, attr = rest.rpartition(".")
            target = {"structure": structs, "region": regions}.get(kind)
            if target is None or not name:
                raise ValueError(f"bad report key {key!r}")
            target.setdefault(name, {})[attr] = _parse(value)
        return cls(
            {k: StructureMetrics(**v) for k, v in structs.items()},
            {k: VolumeErrorRow(**v) for k, v in regions.items()},
            meta,
        )


def _fmt(v) -> str:
    return "undefined" if v is None else repr(float(v))


def _parse(s: str):
    return None if s == "undefined" else float(s)


def _defined(fn, *args):
    try:
        return fn(*args)
    except (BothEmpty, EmptyDenominator, EmptyMask, EmptySurface):
        return None


def structure_metrics(pred: Mask3, truth: Mask3) -> StructureMetrics:
    c = confusion(pred, truth)
    surface_asd = None
    if pred.data.any() and truth.data.any():
        surface_asd = asd(extract_surface(pred), extract_surface(truth))
    return StructureMetrics(
        dsc=_defined(dsc, c),
        asd=surface_asd,
        sensitivity=_defined(sensitivity, c),
        specificity=_defined(specificity, c),
        truth_cm3=mask_volume_cm3(truth),
        pred_cm3=mask_volume_cm3(pred),
    )


def evaluate_pair(pred: dict, truth: dict) -> MetricsReport:
    """Metrics for each named structure, e.g. ``{"periosteal": m, "endosteal": m}``."""
    if set(pred) != set(truth):
        raise ValueError(f"structure names differ: {sorted(pred)} vs {sorted(truth)}")
    return MetricsReport({name: structure_metrics(pred[name], truth[name]) for name in truth})


def mean_structures(reports) -> dict:
    """Per-structure mean over subjects, skipping undefined entries."""
    out = {}
    names = reports[0].structures.keys()
    for name in names:
        values = {}
        for f in fields(StructureMetrics):
            xs = [getattr(r.structures[name], f.name) for r in reports]
            xs = [x for x in xs if x is not None]
            values[f.name] = float(np.mean(xs)) if xs else None
        out[name] = StructureMetrics(**values)
    return out
