"""Voxel grids with physical spacing, cropping, mask algebra and file I/O.

Arrays are stored as ``data[z, y, x]`` in C order, so the linear voxel order
is x-fastest and z-slowest. ``dims`` is always reported as ``(nx, ny, nz)``.

File format
-----------
A grid is stored as a plain-text header plus a raw payload file::

    VOLGRID 1
    # comments are allowed anywhere after the magic line
    dims: 96 96 48
    spacing: 0.8 0.8 0.987
    dtype: f32
    encoding: raw
    endian: little
    data file: intensity.raw

``dims``, ``spacing``, ``dtype``, ``encoding`` and ``data file`` are required.
``endian`` is optional and only ``little`` is accepted. ``dtype`` is ``f32``
(volumes) or ``u8`` (masks and label grids). ``encoding`` is ``raw`` or, for
masks only, ``bits`` (``numpy.packbits`` with little bit order, padded to a
whole byte). The ``data file`` path is relative to the header. Any other key
is rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    GeometryMismatch,
    MalformedHeader,
    OutOfBounds,
    SizeMismatch,
    UnsupportedEncoding,
)

MAGIC = "VOLGRID 1"


@dataclass(frozen=True)
class Spacing3:
    """Physical voxel edge lengths in millimeters."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        for v in (self.dx, self.dy, self.dz):
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"spacing must be positive and finite, got {self}")

    def as_zyx(self) -> np.ndarray:
        return np.array([self.dz, self.dy, self.dx], dtype=np.float64)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)


def _check_shape(data: np.ndarray):
    if data.ndim != 3:
        raise ValueError(f"grid data must be 3D (z, y, x), got shape {data.shape}")


@dataclass(frozen=True, eq=False)
class Volume3:
    """Dense float32 scalar grid."""

    data: np.ndarray
    spacing: Spacing3

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        _check_shape(data)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def same_geometry(self, other) -> bool:
        return self.data.shape == other.data.shape and self.spacing == other.spacing


@dataclass(frozen=True, eq=False)
class Mask3:
    """Binary grid, one byte per voxel in memory."""

    data: np.ndarray
    spacing: Spacing3

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.bool_:
            if not np.all((data == 0) | (data == 1)):
                raise ValueError("mask data must be binary")
            data = data.astype(np.bool_)
        _check_shape(data)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def same_geometry(self, other) -> bool:
        return self.data.shape == other.data.shape and self.spacing == other.spacing

    @classmethod
    def empty_like(cls, grid) -> "Mask3":
        return cls(np.zeros(grid.data.shape, dtype=np.bool_), grid.spacing)


def crop_centered(vol, center, size):
    """Copy the box of ``size`` voxels centred on ``center``; both given as (x, y, z).

    The box starts at ``center - size // 2`` on every axis. Boxes that leave the
    grid raise :class:`OutOfBounds`; nothing is padded here.
    """
    dims = vol.dims
    start = [int(c) - int(s) // 2 for c, s in zip(center, size)]
    stop = [b + int(s) for b, s in zip(start, size)]
    for axis, (b, e, n) in enumerate(zip(start, stop, dims)):
        if int(size[axis]) < 1 or b < 0 or e > n:
            raise OutOfBounds(
                f"crop axis {'xyz'[axis]}: [{b}, {e}) outside [0, {n})"
            )
    (x0, y0, z0), (x1, y1, z1) = start, stop
    return type(vol)(vol.data[z0:z1, y0:y1, x0:x1].copy(), vol.spacing)


def voxel_volume_mm3(spacing: Spacing3) -> float:
    return spacing.dx * spacing.dy * spacing.dz


def mask_volume_cm3(mask: Mask3) -> float:
    return mask.count() * voxel_volume_mm3(mask.spacing) / 1000.0


def _require_same(a, b):
    if not a.same_geometry(b):
        raise GeometryMismatch(
            f"grids differ: {a.dims}@{a.spacing} vs {b.dims}@{b.spacing}"
        )


def mask_and(a: Mask3, b: Mask3) -> Mask3:
    _require_same(a, b)
    return Mask3(a.data & b.data, a.spacing)


def mask_and_not(a: Mask3, b: Mask3) -> Mask3:
    """Voxels set in ``a`` but not in ``b`` (e.g. periosteal minus endosteal)."""
    _require_same(a, b)
    return Mask3(a.data & ~b.data, a.spacing)


def mask_or(a: Mask3, b: Mask3) -> Mask3:
    _require_same(a, b)
    return Mask3(a.data | b.data, a.spacing)


def mask_subset(a: Mask3, b: Mask3) -> bool:
    _require_same(a, b)
    return not np.any(a.data & ~b.data)


# ---------------------------------------------------------------------------
# file I/O

_REQUIRED = ("dims", "spacing", "dtype", "encoding", "data file")
_OPTIONAL = ("endian",)
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _parse_header(path: Path) -> dict:
    try:
        lines = path.read_text(encoding="ascii").splitlines()
    except (UnicodeDecodeError, OSError) as exc:
        raise MalformedHeader(f"{path}: {exc}") from exc
    if not lines or lines[0].strip() != MAGIC:
        raise MalformedHeader(f"{path}: missing magic line {MAGIC!r}")
    fields = {}
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep:
            raise MalformedHeader(f"{path}:{lineno}: expected 'key: value'")
        if key not in _REQUIRED and key not in _OPTIONAL:
            raise MalformedHeader(f"{path}:{lineno}: unknown field {key!r}")
        if key in fields:
            raise MalformedHeader(f"{path}:{lineno}: duplicate field {key!r}")
        fields[key] = value.strip()
    missing = [k for k in _REQUIRED if k not in fields]
    if missing:
        raise MalformedHeader(f"{path}: missing fields {missing}")

    try:
        dims = tuple(int(v) for v in fields["dims"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
    except ValueError as exc:
        raise MalformedHeader(f"{path}: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise MalformedHeader(f"{path}: bad dims {fields['dims']!r}")
    if len(spacing) != 3:
        raise MalformedHeader(f"{path}: bad spacing {fields['spacing']!r}")
    try:
        spacing = Spacing3(*spacing)
    except ValueError as exc:
        raise MalformedHeader(f"{path}: {exc}") from exc
    if fields["dtype"] not in _DTYPES:
        raise UnsupportedEncoding(f"{path}: dtype {fields['dtype']!r}")
    if fields["encoding"] not in ("raw", "bits"):
        raise UnsupportedEncoding(f"{path}: encoding {fields['encoding']!r}")
    if fields["encoding"] == "bits" and fields["dtype"] != "u8":
        raise UnsupportedEncoding(f"{path}: bit packing requires dtype u8")
    if fields.get("endian", "little") != "little":
        raise UnsupportedEncoding(f"{path}: endian {fields['endian']!r}")
    return {
        "dims": dims,
        "spacing": spacing,
        "dtype": fields["dtype"],
        "encoding": fields["encoding"],
        "data_file": path.parent / fields["data file"],
    }


def _read_payload(header_path) -> tuple[np.ndarray, Spacing3]:
    header_path = Path(header_path)
    h = _parse_header(header_path)
    nx, ny, nz = h["dims"]
    n = nx * ny * nz
    raw = h["data_file"].read_bytes()
    if h["encoding"] == "bits":
        expected = (n + 7) // 8
        if len(raw) != expected:
            raise SizeMismatch(f"{header_path}: {len(raw)} bytes, expected {expected}")
        flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n, bitorder="little")
    else:
        dtype = _DTYPES[h["dtype"]]
        if len(raw) != n * dtype.itemsize:
            raise SizeMismatch(
                f"{header_path}: payload holds {len(raw) / dtype.itemsize:g} scalars, "
                f"header declares {n}"
            )
        flat = np.frombuffer(raw, dtype=dtype)
    return flat.reshape(nz, ny, nx).copy(), h["spacing"]


def _write(header_path, data: np.ndarray, spacing: Spacing3, dtype: str, encoding: str):
    header_path = Path(header_path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    data_path = header_path.with_suffix(".raw")
    if encoding == "bits":
        payload = np.packbits(data.astype(np.uint8).ravel(), bitorder="little").tobytes()
    else:
        payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes()
    data_path.write_bytes(payload)
    nz, ny, nx = data.shape
    header_path.write_text(
        f"{MAGIC}\n"
        f"dims: {nx} {ny} {nz}\n"
        f"spacing: {spacing.dx!r} {spacing.dy!r} {spacing.dz!r}\n"
        f"dtype: {dtype}\n"
        f"encoding: {encoding}\n"
        f"endian: little\n"
        f"data file: {data_path.name}\n",
        encoding="ascii",
    )


def write_volume(vol: Volume3, path):
    _write(path, vol.data, vol.spacing, "f32", "raw")


def read_volume(path) -> Volume3:
    data, spacing = _read_payload(path)
    if data.dtype != np.float32:
        raise UnsupportedEncoding(f"{path}: expected dtype f32 for a volume")
    return Volume3(data, spacing)


def write_mask(mask: Mask3, path, packed: bool = False):
    _write(path, mask.data, mask.spacing, "u8", "bits" if packed else "raw")


def read_mask(path) -> Mask3:
    data, spacing = _read_payload(path)
    if data.dtype != np.uint8:
        raise UnsupportedEncoding(f"{path}: expected dtype u8 for a mask")
    if data.max(initial=0) > 1:
        raise SizeMismatch(f"{path}: mask payload holds values other than 0/1")
    return Mask3(data.astype(np.bool_), spacing)


def write_labels(labels: np.ndarray, spacing: Spacing3, path):
    """Write a small-integer label grid (e.g. region labels) as u8."""
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("labels must fit in u8")
    _write(path, labels.astype(np.uint8), spacing, "u8", "raw")


def read_labels(path) -> tuple[np.ndarray, Spacing3]:
    data, spacing = _read_payload(path)
    if data.dtype != np.uint8:
        raise UnsupportedEncoding(f"{path}: expected dtype u8 for a label grid")
    return data, spacing
