import numpy as np
import pytest
from hypothesis import given, strategies as st

from femseg.errors import GeometryMismatch, MalformedHeader, OutOfBounds, SizeMismatch, UnsupportedEncoding
from femseg.volgrid import (
    Mask3,
    Spacing3,
    Volume3,
    crop_centered,
    mask_and,
    mask_and_not,
    mask_or,
    mask_subset,
    mask_volume_cm3,
    read_labels,
    read_mask,
    read_volume,
    voxel_volume_mm3,
    write_labels,
    write_mask,
    write_volume,
)

ONE = Spacing3(1.0, 1.0, 1.0)


def test_spacing_rejects_nonpositive():
    with pytest.raises(ValueError):
        Spacing3(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        Spacing3(1.0, float("nan"), 1.0)


def test_volume_dims_are_xyz():
    v = Volume3(np.zeros((3, 4, 5)), ONE)
    assert v.dims == (5, 4, 3)
    assert v.data.dtype == np.float32


def test_volume_rejects_nonfinite():
    with pytest.raises(ValueError):
        Volume3(np.full((2, 2, 2), np.inf), ONE)


def test_crop_hand_indexed():
    data = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
    out = crop_centered(Volume3(data, ONE), (1, 1, 1), (2, 2, 2))
    assert out.dims == (2, 2, 2)
    # linear index = x + 4y + 16z with x, y, z in {0, 1}
    expected = sorted(x + 4 * y + 16 * z for x in (0, 1) for y in (0, 1) for z in (0, 1))
    assert sorted(out.data.ravel().tolist()) == expected
    assert out.data[1, 0, 1] == 1 + 16


def test_crop_identity():
    data = np.random.default_rng(0).random((6, 5, 4))
    v = Volume3(data, Spacing3(0.8, 0.8, 0.987))
    out = crop_centered(v, (2, 2, 3), v.dims)
    assert np.array_equal(out.data, v.data)
    assert out.spacing == v.spacing


def test_crop_large_in_plane():
    v = Volume3(np.zeros((3, 512, 512), dtype=np.float32), ONE)
    out = crop_centered(v, (380, 256, 1), (192, 192, 3))
    assert out.dims == (192, 192, 3)


def test_crop_out_of_bounds():
    v = Volume3(np.zeros((4, 4, 4)), ONE)
    with pytest.raises(OutOfBounds):
        crop_centered(v, (0, 1, 1), (2, 2, 2))
    with pytest.raises(OutOfBounds):
        crop_centered(v, (3, 2, 2), (3, 1, 1))


def test_crop_mask_keeps_type():
    m = Mask3(np.ones((4, 4, 4), dtype=bool), ONE)
    out = crop_centered(m, (2, 2, 2), (2, 2, 2))
    assert isinstance(out, Mask3) and out.count() == 8


@given(
    st.integers(2, 7), st.integers(2, 7), st.integers(2, 7),
    st.data(),
)
def test_crop_index_mapping(nx, ny, nz, data):
    rng = np.random.default_rng(nx * 100 + ny * 10 + nz)
    arr = rng.random((nz, ny, nx)).astype(np.float32)
    size = tuple(data.draw(st.integers(1, n)) for n in (nx, ny, nz))
    center = tuple(data.draw(st.integers(s // 2, n - s + s // 2)) for s, n in zip(size, (nx, ny, nz)))
    sp = Spacing3(0.5, 0.7, 1.3)
    out = crop_centered(Volume3(arr, sp), center, size)
    assert out.dims == size and out.spacing == sp
    x0, y0, z0 = (c - s // 2 for c, s in zip(center, size))
    for z in range(size[2]):
        for y in range(size[1]):
            for x in range(size[0]):
                assert out.data[z, y, x] == arr[z0 + z, y0 + y, x0 + x]


@pytest.mark.parametrize(
    "sp, expected",
    [((1, 1, 1), 1.0), ((0.8, 0.8, 0.987), 0.63168), ((0.5, 0.5, 2.0), 0.5)],
)
def test_voxel_volume(sp, expected):
    assert voxel_volume_mm3(Spacing3(*sp)) == pytest.approx(expected, rel=1e-12)


def test_mask_volume_examples():
    sp = Spacing3(0.8, 0.8, 0.987)
    assert mask_volume_cm3(Mask3(np.zeros((4, 4, 4), dtype=bool), sp)) == 0.0
    m = np.zeros((10, 10, 20), dtype=bool)
    m.reshape(-1)[:1000] = True
    assert mask_volume_cm3(Mask3(m, sp)) == pytest.approx(0.63168, rel=1e-12)
    assert mask_volume_cm3(Mask3(np.ones((10, 10, 10), dtype=bool), ONE)) == pytest.approx(1.0)


@given(st.integers(0, 2**32 - 1))
def test_mask_volume_additive(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, (5, 6, 7))
    sp = Spacing3(0.8, 0.8, 0.987)
    a, b = Mask3(labels == 1, sp), Mask3(labels == 2, sp)
    assert mask_volume_cm3(mask_or(a, b)) == pytest.approx(mask_volume_cm3(a) + mask_volume_cm3(b), rel=1e-12)


def _ball(shape, center, radius):
    z, y, x = np.indices(shape)
    return (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2 <= radius**2


def test_nested_sphere_shell_matches_scan():
    shape = (24, 24, 24)
    outer = Mask3(_ball(shape, (12, 12, 12), 8), ONE)
    inner = Mask3(_ball(shape, (12, 12, 12), 6), ONE)
    shell = mask_and_not(outer, inner)
    count = 0
    for z in range(24):
        for y in range(24):
            for x in range(24):
                d2 = (x - 12) ** 2 + (y - 12) ** 2 + (z - 12) ** 2
                count += 36 < d2 <= 64
    assert shell.count() == count
    assert mask_subset(inner, outer)
    assert mask_volume_cm3(shell) == pytest.approx(mask_volume_cm3(outer) - mask_volume_cm3(inner))


def test_mask_algebra_basics():
    rng = np.random.default_rng(3)
    a = Mask3(rng.random((4, 5, 6)) < 0.5, ONE)
    assert mask_and_not(a, a).count() == 0
    assert mask_subset(Mask3.empty_like(a), a)
    assert mask_and(a, a).count() == a.count()
    with pytest.raises(GeometryMismatch):
        mask_and(a, Mask3(np.zeros((4, 5, 6), dtype=bool), Spacing3(1, 1, 2)))
    with pytest.raises(GeometryMismatch):
        mask_subset(a, Mask3(np.zeros((4, 5, 7), dtype=bool), ONE))


def test_volume_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    v = Volume3(rng.standard_normal((8, 8, 8)), Spacing3(0.8, 0.8, 0.987))
    write_volume(v, tmp_path / "v.hdr")
    back = read_volume(tmp_path / "v.hdr")
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == Spacing3(0.8, 0.8, 0.987)


@pytest.mark.parametrize("packed", [False, True])
def test_mask_roundtrip(tmp_path, packed):
    rng = np.random.default_rng(8)
    m = Mask3(rng.random((5, 7, 3)) < 0.3, Spacing3(0.5, 0.5, 2.0))
    write_mask(m, tmp_path / "m.hdr", packed=packed)
    back = read_mask(tmp_path / "m.hdr")
    assert np.array_equal(back.data, m.data) and back.spacing == m.spacing


def test_labels_roundtrip(tmp_path):
    labels = np.random.default_rng(9).integers(0, 5, (3, 4, 5)).astype(np.uint8)
    write_labels(labels, ONE, tmp_path / "r.hdr")
    back, sp = read_labels(tmp_path / "r.hdr")
    assert np.array_equal(back, labels) and sp == ONE


def _header(dims="2 2 2", dtype="f32", encoding="raw", extra=""):
    return (
        f"VOLGRID 1\ndims: {dims}\nspacing: 0.8 0.8 0.987\ndtype: {dtype}\n"
        f"encoding: {encoding}\nendian: little\n{extra}data file: x.raw\n"
    )


def test_size_mismatch_seven_scalars(tmp_path):
    (tmp_path / "x.hdr").write_text(_header())
    (tmp_path / "x.raw").write_bytes(np.zeros(7, dtype="<f4").tobytes())
    with pytest.raises(SizeMismatch):
        read_volume(tmp_path / "x.hdr")


def test_header_spacing_echo(tmp_path):
    (tmp_path / "x.hdr").write_text(_header())
    (tmp_path / "x.raw").write_bytes(np.zeros(8, dtype="<f4").tobytes())
    assert read_volume(tmp_path / "x.hdr").spacing == Spacing3(0.8, 0.8, 0.987)


@pytest.mark.parametrize(
    "text, err",
    [
        (_header(extra="color: red\n"), MalformedHeader),
        (_header(extra="dims: 2 2 2\n"), MalformedHeader),
        (_header().replace("VOLGRID 1", "NRRD0004"), MalformedHeader),
        (_header(dims="2 2"), MalformedHeader),
        (_header(encoding="gzip"), UnsupportedEncoding),
        (_header(dtype="f64"), UnsupportedEncoding),
        (_header().replace("dtype: f32\n", ""), MalformedHeader),
    ],
)
def test_bad_headers(tmp_path, text, err):
    (tmp_path / "x.hdr").write_text(text)
    (tmp_path / "x.raw").write_bytes(np.zeros(8, dtype="<f4").tobytes())
    with pytest.raises(err):
        read_volume(tmp_path / "x.hdr")
