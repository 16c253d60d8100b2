"""Synthetic proximal-femur phantoms with exact ground truth.

The solid is the union of a head sphere, a neck cylinder ending at the head
centre, and a vertical shaft cylinder hanging down from the neck base. All
ground truth comes from analytic signed distances:

* periosteal: voxel centres with union SDF <= 0
* endosteal: union of the parts inset by their cortical thickness
  (sphere radius r - t; cylinder radius r - t, shortened by t at both caps)
* regions: FH inside the head sphere, FN inside the neck and not FH, the rest
  of the shaft split into TR (upper) and IT (lower) at ``shaft_split`` of its
  length. This is a stand-in partition, not an anatomical one.

Intensities are piecewise constant (background / trabecular / cortical), then
blurred with separable Gaussians truncated at 3 sigma, then given additive
Gaussian noise from numpy's PCG64 generator seeded with ``spec.seed``.

Coordinates are millimeters with the centre of voxel (0, 0, 0) at the origin;
vectors are (x, y, z).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import SpecOutOfBounds
from .volgrid import (
    Mask3,
    Spacing3,
    Volume3,
    read_labels,
    read_mask,
    read_volume,
    write_labels,
    write_mask,
    write_volume,
)

NONE, FH, FN, TR, IT = 0, 1, 2, 3, 4
REGION_NAMES = {FH: "FH", FN: "FN", TR: "TR", IT: "IT"}

DEFAULT_DIMS = (96, 96, 48)
DEFAULT_SPACING = Spacing3(1.0, 1.0, 1.5)


@dataclass(frozen=True)
class PhantomSpec:
    head_center: tuple = (58.0, 48.0, 51.5)
    head_radius: float = 11.0
    # unit vector from the neck base towards the head centre
    neck_axis: tuple = (math.sqrt(0.5), 0.0, math.sqrt(0.5))
    neck_radius: float = 6.5
    neck_length: float = 24.0
    shaft_radius: float = 9.0
    shaft_length: float = 25.0
    # cortical thickness per part: head, neck, shaft
    cortical_thickness: tuple = (2.0, 2.5, 3.0)
    # background, trabecular, cortical
    intensity_levels: tuple = (100.0, 300.0, 1200.0)
    blur_sigma: float = 0.6
    noise_sigma: float = 60.0
    shaft_split: float = 0.4
    seed: int = 0

    def __post_init__(self):
        axis = np.asarray(self.neck_axis, dtype=np.float64)
        norm = float(np.linalg.norm(axis))
        if self.has_neck and not norm > 0:
            raise ValueError("neck_axis must be nonzero")
        if norm > 0:
            object.__setattr__(self, "neck_axis", tuple(float(a) for a in axis / norm))
        object.__setattr__(self, "head_center", tuple(float(c) for c in self.head_center))
        for name in ("cortical_thickness", "intensity_levels"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        t_head, t_neck, t_shaft = self.cortical_thickness
        checks = [(self.head_radius, t_head, "head")]
        if self.has_neck:
            checks.append((self.neck_radius, t_neck, "neck"))
        if self.has_shaft:
            checks.append((self.shaft_radius, t_shaft, "shaft"))
        for radius, thickness, part in checks:
            if not radius > thickness > 0:
                raise ValueError(f"{part}: need radius > cortical thickness > 0")
        background, trabecular, cortical = self.intensity_levels
        if not cortical > trabecular > background:
            raise ValueError("need cortical > trabecular > background intensity")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur and noise sigmas must be nonnegative")
        if not 0 < self.shaft_split < 1:
            raise ValueError("shaft_split must lie in (0, 1)")

    @property
    def has_neck(self) -> bool:
        return self.neck_length > 0 and self.neck_radius > 0

    @property
    def has_shaft(self) -> bool:
        return self.shaft_length > 0 and self.shaft_radius > 0

    def neck_base(self) -> np.ndarray:
        return np.asarray(self.head_center) - self.neck_length * np.asarray(self.neck_axis)

    def shaft_segment(self) -> tuple[np.ndarray, np.ndarray]:
        top = self.neck_base() if self.has_neck else np.asarray(self.head_center)
        return top, top - np.array([0.0, 0.0, self.shaft_length])

    def parts(self) -> list[tuple[str, tuple]]:
        """Solid parts as (name, geometry) for the SDF routines."""
        out = [("head", (np.asarray(self.head_center), self.head_radius))]
        if self.has_neck:
            out.append(("neck", (self.neck_base(), np.asarray(self.head_center), self.neck_radius)))
        if self.has_shaft:
            a, b = self.shaft_segment()
            out.append(("shaft", (a, b, self.shaft_radius)))
        return out


def sphere_only(radius: float, center, thickness: float, **kw) -> PhantomSpec:
    return PhantomSpec(
        head_center=center, head_radius=radius, neck_length=0.0, shaft_length=0.0,
        cortical_thickness=(thickness, thickness, thickness), **kw,
    )


@dataclass(eq=False)
class PhantomSample:
    intensity: Volume3
    periosteal: Mask3
    endosteal: Mask3
    regions: np.ndarray  # uint8 labels, zero outside periosteal
    spec: PhantomSpec
    # labels for every voxel (nearest part outside the solid); used to
    # partition predicted masks with the same analytic rule
    region_field: np.ndarray = field(repr=False, default=None)

    @property
    def spacing(self) -> Spacing3:
        return self.intensity.spacing


# -- geometry ---------------------------------------------------------------

def voxel_centers(dims, spacing: Spacing3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Broadcastable x, y, z coordinate arrays in (z, y, x) layout."""
    nx, ny, nz = dims
    x = (np.arange(nx) * spacing.dx)[None, None, :]
    y = (np.arange(ny) * spacing.dy)[None, :, None]
    z = (np.arange(nz) * spacing.dz)[:, None, None]
    return x, y, z


def sphere_sdf(p, center, radius):
    x, y, z = p
    return np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2) - radius


def _cylinder_terms(p, a, b):
    x, y, z = p
    ba = np.asarray(b) - np.asarray(a)
    length = float(np.linalg.norm(ba))
    u = ba / length
    rx, ry, rz = x - a[0], y - a[1], z - a[2]
    t = rx * u[0] + ry * u[1] + rz * u[2]
    radial = np.sqrt(np.maximum(rx * rx + ry * ry + rz * rz - t * t, 0.0))
    return t, radial, length


def capped_cylinder_sdf(p, a, b, radius):
    """Exact signed distance to the flat-capped cylinder with axis a->b."""
    t, radial, length = _cylinder_terms(p, a, b)
    d_r = radial - radius
    d_a = np.abs(t - 0.5 * length) - 0.5 * length
    inside = np.minimum(np.maximum(d_r, d_a), 0.0)
    outside = np.sqrt(np.maximum(d_r, 0.0) ** 2 + np.maximum(d_a, 0.0) ** 2)
    return inside + outside


def part_sdf(name, geom, p):
    if name == "head":
        return sphere_sdf(p, *geom)
    return capped_cylinder_sdf(p, *geom)


def _bounding_box(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for name, geom in spec.parts():
        if name == "head":
            c, r = geom
            lo = np.minimum(lo, c - r)
            hi = np.maximum(hi, c + r)
        else:
            a, b, r = geom
            u = (b - a) / np.linalg.norm(b - a)
            ext = r * np.sqrt(np.clip(1.0 - u * u, 0.0, None))
            lo = np.minimum(lo, np.minimum(a, b) - ext)
            hi = np.maximum(hi, np.maximum(a, b) + ext)
    return lo, hi


def check_fits(spec: PhantomSpec, dims, spacing: Spacing3, margin_voxels: int = 2):
    lo, hi = _bounding_box(spec)
    step = np.array(spacing.as_tuple())
    grid_hi = (np.array(dims) - 1 - margin_voxels) * step
    grid_lo = margin_voxels * step
    if np.any(lo < grid_lo) or np.any(hi > grid_hi):
        raise SpecOutOfBounds(
            f"solid bounding box {lo.round(2)}..{hi.round(2)} mm leaves the grid "
            f"interior {grid_lo}..{grid_hi} mm"
        )


def region_field(spec: PhantomSpec, dims, spacing: Spacing3) -> np.ndarray:
    """Analytic region label for every voxel of the grid.

    Inside the solid the priority rule applies (FH, then FN, then shaft).
    Outside, each voxel takes the label of the nearest part, so predicted
    masks that spill over the true surface are still partitioned.
    """
    p = voxel_centers(dims, spacing)
    shape = (dims[2], dims[1], dims[0])
    parts = spec.parts()
    sdfs = {name: np.broadcast_to(part_sdf(name, geom, p), shape) for name, geom in parts}
    label = np.full(shape, NONE, dtype=np.uint8)

    if "shaft" in sdfs:
        a, b = spec.shaft_segment()
        t, _, length = _cylinder_terms(p, a, b)
        frac = np.broadcast_to(t / length, shape)
        shaft_label = np.where(frac < spec.shaft_split, TR, IT).astype(np.uint8)
    names = [n for n, _ in parts]
    stack = np.stack([sdfs[n] for n in names])
    nearest = np.argmin(stack, axis=0)
    codes = {"head": FH, "neck": FN}
    for i, n in enumerate(names):
        sel = nearest == i
        label[sel] = shaft_label[sel] if n == "shaft" else codes[n]
    # priority inside the solid
    if "shaft" in sdfs:
        inside = sdfs["shaft"] <= 0
        label[inside] = shaft_label[inside]
    if "neck" in sdfs:
        label[sdfs["neck"] <= 0] = FN
    label[sdfs["head"] <= 0] = FH
    return label


def _blur(data: np.ndarray, sigma_mm: float, spacing: Spacing3) -> np.ndarray:
    if sigma_mm <= 0:
        return data
    for axis, step in zip((2, 1, 0), spacing.as_tuple()):
        data = gaussian_filter1d(data, sigma_mm / step, axis=axis, mode="nearest", truncate=3.0)
    return data


def generate(spec: PhantomSpec, dims=DEFAULT_DIMS, spacing: Spacing3 = DEFAULT_SPACING) -> PhantomSample:
    check_fits(spec, dims, spacing)
    p = voxel_centers(dims, spacing)
    shape = (dims[2], dims[1], dims[0])
    periosteal = np.zeros(shape, dtype=np.bool_)
    endosteal = np.zeros(shape, dtype=np.bool_)
    for (name, geom), thickness in zip(spec.parts(), _thickness_for(spec)):
        d = part_sdf(name, geom, p)
        periosteal |= d <= 0
        endosteal |= d <= -thickness

    background, trabecular, cortical = spec.intensity_levels
    levels = np.full(shape, background, dtype=np.float64)
    levels[periosteal] = cortical
    levels[endosteal] = trabecular
    levels = _blur(levels, spec.blur_sigma, spacing)
    if spec.noise_sigma > 0:
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        levels = levels + spec.noise_sigma * rng.standard_normal(shape)

    field_ = region_field(spec, dims, spacing)
    regions = np.where(periosteal, field_, NONE).astype(np.uint8)
    return PhantomSample(
        intensity=Volume3(levels.astype(np.float32), spacing),
        periosteal=Mask3(periosteal, spacing),
        endosteal=Mask3(endosteal, spacing),
        regions=regions,
        spec=spec,
        region_field=field_,
    )


def _thickness_for(spec: PhantomSpec) -> list[float]:
    by_part = dict(zip(("head", "neck", "shaft"), spec.cortical_thickness))
    return [by_part[name] for name, _ in spec.parts()]


# -- cohorts ----------------------------------------------------------------

@dataclass(frozen=True)
class Jitter:
    """Uniform per-sample perturbations.

    Relative fields draw ``base * (1 + U(-f, f))``; ``center_shift`` draws an
    absolute offset ``U(-s, s)`` mm per axis for the whole solid.
    """

    head_radius: float = 0.0
    neck_radius: float = 0.0
    neck_length: float = 0.0
    shaft_radius: float = 0.0
    shaft_length: float = 0.0
    cortical_thickness: float = 0.0
    center_shift: float = 0.0

    def intervals(self, base: PhantomSpec) -> dict:
        out = {}
        for name in ("head_radius", "neck_radius", "neck_length", "shaft_radius", "shaft_length"):
            f = getattr(self, name)
            v = getattr(base, name)
            out[name] = (v * (1 - f), v * (1 + f))
        return out


DEFAULT_JITTER = Jitter(
    head_radius=0.08, neck_radius=0.08, neck_length=0.08,
    shaft_radius=0.08, shaft_length=0.08, cortical_thickness=0.1, center_shift=2.0,
)


def draw_spec(base: PhantomSpec, jitter: Jitter, rng: np.random.Generator, seed: int) -> PhantomSpec:
    def rel(v, f):
        return v * (1.0 + rng.uniform(-f, f)) if f > 0 else v

    changes = {
        name: rel(getattr(base, name), getattr(jitter, name))
        for name in ("head_radius", "neck_radius", "neck_length", "shaft_radius", "shaft_length")
    }
    scale = rel(1.0, jitter.cortical_thickness)
    changes["cortical_thickness"] = tuple(t * scale for t in base.cortical_thickness)
    shift = rng.uniform(-jitter.center_shift, jitter.center_shift, 3) if jitter.center_shift > 0 else np.zeros(3)
    changes["head_center"] = tuple(np.asarray(base.head_center) + shift)
    changes["seed"] = seed
    return dataclasses.replace(base, **changes)


def cohort_specs(n: int, base: PhantomSpec, jitter: Jitter, seed: int) -> list[PhantomSpec]:
    """Specs for a cohort; sample ``i`` gets noise seed ``base.seed + i``."""
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    return [draw_spec(base, jitter, rng, base.seed + i) for i in range(n)]


def generate_cohort(n: int, base: PhantomSpec, jitter: Jitter = Jitter(), seed: int = 0,
                    dims=DEFAULT_DIMS, spacing: Spacing3 = DEFAULT_SPACING) -> list[PhantomSample]:
    return [generate(s, dims, spacing) for s in cohort_specs(n, base, jitter, seed)]


# -- persistence ------------------------------------------------------------

def spec_to_text(spec: PhantomSpec) -> str:
    lines = []
    for f in dataclasses.fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = " ".join(repr(float(x)) for x in v)
        else:
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> PhantomSpec:
    kw = {}
    types = {f.name: f.default for f in dataclasses.fields(PhantomSpec)}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ValueError(f"unknown phantom spec key {key!r}")
        default = types[key]
        if isinstance(default, tuple):
            kw[key] = tuple(float(x) for x in value.split())
        elif isinstance(default, int):
            kw[key] = int(value)
        else:
            kw[key] = float(value)
    return PhantomSpec(**kw)


def write_sample(sample: PhantomSample, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_volume(sample.intensity, d / "intensity.hdr")
    write_mask(sample.periosteal, d / "periosteal.hdr")
    write_mask(sample.endosteal, d / "endosteal.hdr")
    write_labels(sample.regions, sample.spacing, d / "regions.hdr")
    (d / "spec.txt").write_text(spec_to_text(sample.spec))


def read_sample(directory) -> PhantomSample:
    d = Path(directory)
    intensity = read_volume(d / "intensity.hdr")
    regions, _ = read_labels(d / "regions.hdr")
    spec = spec_from_text((d / "spec.txt").read_text())
    return PhantomSample(
        intensity=intensity,
        periosteal=read_mask(d / "periosteal.hdr"),
        endosteal=read_mask(d / "endosteal.hdr"),
        regions=regions,
        spec=spec,
        region_field=region_field(spec, intensity.dims, intensity.spacing),
    )
