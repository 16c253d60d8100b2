"""Femur region partition (FH/FN/TR/IT) and region volume accounting.

Two partition sources exist. Phantoms carry analytic labels for the whole
grid, and a mask is partitioned by reading those labels. Elsewhere,
configurable plane cuts along one axis are used. Both are stand-ins for a
proprietary partition, and the provenance string travels with the result.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, EmptyMask, GeometryMismatch
from .metrics import VolumeErrorRow, mae, re, rmse
from .phantom import FH, FN, IT, NONE, TR
from .volgrid import Mask3, voxel_volume_mm3

LABELS = (FH, FN, TR, IT)
AXES = {"x": 2, "y": 1, "z": 0}

TARGETS = (
    ("femur_head", "Femur head"),
    ("femur_neck", "Femur neck"),
    ("combination", "Combination"),
    ("cortical_neck", "Cortical bone in femur neck"),
    ("cortical_combination", "Cortical bone in combination"),
)


@dataclass(frozen=True)
class PlaneCutParams:
    """Cuts at fractions of the mask's extent along ``axis``.

    Slice ``k`` sits at ``(k - k0 + 0.5) / L`` where ``k0`` is the first
    occupied slice and ``L`` the occupied length. Segment ``j`` holds the
    slices with ``fractions[j-1] <= pos < fractions[j]`` and gets
    ``labels[j]``. Segments run from low to high index.
    """

    axis: str = "z"
    fractions: tuple = (0.3, 0.5, 0.75)
    labels: tuple = (IT, TR, FN, FH)

    def validate(self):
        f = tuple(self.fractions)
        if self.axis not in AXES:
            raise DegenerateGeometry(f"unknown axis {self.axis!r}")
        if len(self.labels) != len(f) + 1:
            raise DegenerateGeometry("need one more label than cut fractions")
        if any(not 0 < x < 1 for x in f) or any(b <= a for a, b in zip(f, f[1:])):
            raise DegenerateGeometry(f"cut fractions must increase strictly inside (0, 1): {f}")
        if any(lab not in LABELS for lab in self.labels):
            raise DegenerateGeometry(f"labels must be drawn from {LABELS}")


@dataclass(eq=False)
class RegionPartition:
    labels: np.ndarray  # uint8 grid, NONE outside the femur mask
    provenance: str
    params: object = None

    def region(self, label: int) -> np.ndarray:
        return self.labels == label


def _nonempty(mask: Mask3):
    if not mask.data.any():
        raise EmptyMask("cannot partition an empty femur mask")


def partition_analytic(periosteal: Mask3, label_field: np.ndarray) -> RegionPartition:
    """Restrict a full-grid analytic label field to the femur mask."""
    _nonempty(periosteal)
    if label_field.shape != periosteal.data.shape:
        raise GeometryMismatch("label field and mask differ in shape")
    inside = periosteal.data
    if np.any(label_field[inside] == NONE):
        raise DegenerateGeometry("label field leaves femur voxels unlabelled")
    labels = np.where(inside, label_field, NONE).astype(np.uint8)
    return RegionPartition(labels, "analytic phantom labels (stand-in partition)")


def partition_planes(periosteal: Mask3, params: PlaneCutParams = PlaneCutParams()) -> RegionPartition:
    _nonempty(periosteal)
    params.validate()
    axis = AXES[params.axis]
    other = tuple(a for a in range(3) if a != axis)
    occupied = np.flatnonzero(periosteal.data.any(axis=other))
    k0, k1 = int(occupied[0]), int(occupied[-1])
    length = k1 - k0 + 1
    pos = (np.arange(periosteal.data.shape[axis]) - k0 + 0.5) / length
    seg = np.searchsorted(np.asarray(params.fractions), pos, side="right")
    slice_label = np.asarray(params.labels, dtype=np.uint8)[seg]
    shape = [1, 1, 1]
    shape[axis] = -1
    labels = np.where(periosteal.data, slice_label.reshape(shape), NONE).astype(np.uint8)
    return RegionPartition(labels, f"plane cuts along {params.axis} at {tuple(params.fractions)} (stand-in partition)", params)


def partition(periosteal: Mask3, params=None, label_field=None) -> RegionPartition:
    """Analytic labels when a field is given, otherwise plane cuts."""
    if label_field is not None:
        return partition_analytic(periosteal, label_field)
    return partition_planes(periosteal, params or PlaneCutParams())


@dataclass
class RegionVolumes:
    femur_head: float
    femur_neck: float
    combination: float
    cortical_neck: float
    cortical_combination: float
    # label -> (total cm3, cortical cm3)
    per_label: dict = field(default_factory=dict, compare=False)

    def targets(self) -> dict:
        return {name: getattr(self, name) for name, _ in TARGETS}


def region_volumes(part: RegionPartition, periosteal: Mask3, endosteal: Mask3) -> RegionVolumes:
    if not periosteal.same_geometry(endosteal) or part.labels.shape != periosteal.data.shape:
        raise GeometryMismatch("partition and masks must share geometry")
    unit = voxel_volume_mm3(periosteal.spacing) / 1000.0
    cortical = periosteal.data & ~endosteal.data
    counts = {}
    for lab in LABELS:
        r = part.labels == lab
        counts[lab] = (int(np.count_nonzero(r)), int(np.count_nonzero(r & cortical)))
    comb = (FN, TR, IT)
    return RegionVolumes(
        femur_head=counts[FH][0] * unit,
        femur_neck=counts[FN][0] * unit,
        combination=sum(counts[l][0] for l in comb) * unit,
        cortical_neck=counts[FN][1] * unit,
        cortical_combination=sum(counts[l][1] for l in comb) * unit,
        per_label={lab: (t * unit, c * unit) for lab, (t, c) in counts.items()},
    )


def volume_error_table(truth: list, pred: list) -> dict:
    """Per-target error summary over matched subjects.

    Truth spread is the sample standard deviation (zero for one subject).
    """
    if len(truth) != len(pred) or not truth:
        raise ValueError("need matched, nonempty subject lists")
    out = {}
    for name, _ in TARGETS:
        t = [getattr(v, name) for v in truth]
        p = [getattr(v, name) for v in pred]
        rel = [re(a, b) for a, b in zip(t, p)]
        out[name] = VolumeErrorRow(
            truth_mean=float(np.mean(t)),
            truth_sd=float(np.std(t, ddof=1)) if len(t) > 1 else 0.0,
            pred_mean=float(np.mean(p)),
            mae=mae(t, p),
            rmse=rmse(t, p),
            re_mean=float(np.mean(rel)),
            re_min=float(np.min(rel)),
            re_max=float(np.max(rel)),
        )
    return out


CSV_COLUMNS = ("target", "truth_cm3", "mae_cm3", "rmse_cm3", "re_mean_pct", "re_min_pct", "re_max_pct", "partition")


def table_rows(table: dict, provenance: str) -> list[dict]:
    rows = []
    for name, title in TARGETS:
        r = table[name]
        rows.append({
            "target": title,
            "truth_cm3": f"{r.truth_mean:.2f}±{r.truth_sd:.2f}",
            "mae_cm3": f"{r.mae:.2f}",
            "rmse_cm3": f"{r.rmse:.2f}",
            "re_mean_pct": f"{r.re_mean:.2f}",
            "re_min_pct": f"{r.re_min:.2f}",
            "re_max_pct": f"{r.re_max:.2f}",
            "partition": provenance,
        })
    return rows


def write_table_csv(table: dict, path, provenance: str):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        w.writerows(table_rows(table, provenance))
