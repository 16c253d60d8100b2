import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from femseg.errors import SpecOutOfBounds
from femseg.phantom import (
    FH,
    FN,
    IT,
    NONE,
    TR,
    Jitter,
    PhantomSpec,
    cohort_specs,
    generate,
    generate_cohort,
    read_sample,
    sphere_only,
    spec_from_text,
    spec_to_text,
    write_sample,
)
from femseg.volgrid import Spacing3, mask_subset, voxel_volume_mm3

HALF = Spacing3(0.5, 0.5, 0.5)
SMALL_DIMS = (48, 48, 32)
SMALL_SPACING = Spacing3(2.0, 2.0, 3.0)


def _sample_equal(a, b):
    return (
        a.intensity.data.tobytes() == b.intensity.data.tobytes()
        and np.array_equal(a.periosteal.data, b.periosteal.data)
        and np.array_equal(a.endosteal.data, b.endosteal.data)
        and np.array_equal(a.regions, b.regions)
    )


def test_sphere_volume_within_two_percent():
    spec = sphere_only(12.0, (15.1, 15.2, 15.3), 2.0)
    s = generate(spec, (60, 60, 60), HALF)
    v = s.periosteal.count() * voxel_volume_mm3(HALF)
    assert abs(v - 7238.23) / 7238.23 < 0.02
    inner = s.endosteal.count() * voxel_volume_mm3(HALF)
    assert abs(inner - 4188.79) / 4188.79 < 0.02


def test_volume_converges_with_spacing():
    spec = sphere_only(6.3, (10.37, 10.21, 10.13), 1.5)
    exact = 4 / 3 * math.pi * 6.3**3
    errs = []
    for step, n in ((1.0, 22), (0.25, 88)):
        sp = Spacing3(step, step, step)
        s = generate(spec, (n, n, n), sp)
        errs.append(abs(s.periosteal.count() * voxel_volume_mm3(sp) - exact))
    assert errs[1] < errs[0]


def test_default_phantom_fits_and_is_deterministic():
    a = generate(PhantomSpec(seed=5))
    b = generate(PhantomSpec(seed=5))
    assert _sample_equal(a, b)
    c = generate(PhantomSpec(seed=6))
    assert a.intensity.data.tobytes() != c.intensity.data.tobytes()
    assert np.array_equal(a.periosteal.data, c.periosteal.data)


def test_default_phantom_invariants():
    s = generate(PhantomSpec())
    assert mask_subset(s.endosteal, s.periosteal)
    assert s.endosteal.count() > 0
    inside = s.regions != NONE
    assert np.array_equal(inside, s.periosteal.data)
    # every region is populated
    assert set(np.unique(s.regions[inside]).tolist()) == {FH, FN, TR, IT}
    # region field extends the labels to the whole grid
    assert np.array_equal(s.region_field[inside], s.regions[inside])
    assert np.all(s.region_field != NONE)


def test_three_levels_without_blur_or_noise():
    spec = PhantomSpec(blur_sigma=0.0, noise_sigma=0.0)
    s = generate(spec)
    assert np.unique(s.intensity.data).tolist() == [100.0, 300.0, 1200.0]


def test_out_of_bounds():
    with pytest.raises(SpecOutOfBounds):
        generate(sphere_only(12.0, (13.0, 30, 30), 2.0), (60, 60, 60), ONE_MM)
    # exactly at the margin is fine
    generate(sphere_only(12.0, (14.0, 30, 30), 2.0), (60, 60, 60), ONE_MM)


ONE_MM = Spacing3(1.0, 1.0, 1.0)


@pytest.mark.parametrize(
    "kw",
    [
        dict(head_radius=2.0),
        dict(cortical_thickness=(0.0, 2.0, 2.0)),
        dict(intensity_levels=(100.0, 1300.0, 1200.0)),
        dict(noise_sigma=-1.0),
        dict(shaft_split=1.0),
    ],
)
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw)


def test_region_rules_on_known_points():
    spec = PhantomSpec(blur_sigma=0.0, noise_sigma=0.0)
    s = generate(spec, (96, 96, 48), Spacing3(1.0, 1.0, 1.5))
    hx, hy, hz = spec.head_center
    # head centre voxel
    assert s.regions[round(hz / 1.5), round(hy), round(hx)] == FH
    base = spec.neck_base()
    mid = 0.5 * (base + np.array(spec.head_center))
    # neck midpoint is outside the head sphere (|mid - head| = 12 > 11)
    assert s.regions[round(mid[2] / 1.5), round(mid[1]), round(mid[0])] == FN
    top, bottom = spec.shaft_segment()
    upper = top + 0.2 * (bottom - top)
    lower = top + 0.8 * (bottom - top)
    assert s.regions[round(upper[2] / 1.5), round(upper[1]), round(upper[0])] == TR
    assert s.regions[round(lower[2] / 1.5), round(lower[1]), round(lower[0])] == IT


def test_cohort_single_zero_jitter_matches_generate():
    base = PhantomSpec(seed=11)
    (only,) = generate_cohort(1, base, Jitter(), seed=3)
    assert _sample_equal(only, generate(base))


def test_cohort_deterministic():
    base = PhantomSpec()
    j = Jitter(head_radius=0.05, center_shift=1.0)
    a = cohort_specs(10, base, j, seed=4)
    b = cohort_specs(10, base, j, seed=4)
    assert a == b
    assert len({s.seed for s in a}) == 10
    s0 = generate_cohort(2, base, j, seed=4)
    s1 = generate_cohort(2, base, j, seed=4)
    assert all(_sample_equal(x, y) for x, y in zip(s0, s1))


def test_cohort_radius_draws_in_range():
    base = PhantomSpec(head_radius=10.0)
    j = Jitter(head_radius=0.2)
    lo, hi = j.intervals(base)["head_radius"]
    specs = cohort_specs(10, base, j, seed=9)
    radii = [s.head_radius for s in specs]
    assert all(lo <= r <= hi for r in radii)
    assert len(set(radii)) == 10


def test_cohort_rejects_zero():
    with pytest.raises(ValueError):
        cohort_specs(0, PhantomSpec(), Jitter(), 0)


@settings(max_examples=15)
@given(
    st.floats(9.0, 12.0), st.floats(5.0, 7.0), st.floats(7.0, 10.0),
    st.floats(1.0, 2.5), st.floats(0.2, 0.8), st.integers(0, 1000),
)
def test_partition_and_nesting_properties(head_r, neck_r, shaft_r, cort, split, seed):
    spec = PhantomSpec(
        head_radius=head_r, neck_radius=neck_r, shaft_radius=shaft_r,
        cortical_thickness=(cort, cort, cort), shaft_split=split, seed=seed,
    )
    s = generate(spec, SMALL_DIMS, SMALL_SPACING)
    assert mask_subset(s.endosteal, s.periosteal)
    peri = s.periosteal.data
    labelled = s.regions != NONE
    assert np.array_equal(labelled, peri)
    counts = [np.count_nonzero(s.regions == r) for r in (FH, FN, TR, IT)]
    assert sum(counts) == s.periosteal.count()


def test_spec_text_roundtrip():
    spec = PhantomSpec(head_radius=10.25, seed=42, neck_axis=(0.6, 0.0, 0.8))
    assert spec_from_text(spec_to_text(spec)) == spec


def test_sample_directory_roundtrip(tmp_path):
    s = generate(PhantomSpec(seed=1))
    write_sample(s, tmp_path / "case")
    back = read_sample(tmp_path / "case")
    assert _sample_equal(s, back)
    assert back.spec == s.spec
    assert np.array_equal(back.region_field, s.region_field)
    assert (tmp_path / "case" / "spec.txt").read_text().startswith("head_center = ")


def test_jitter_intervals_keep_defaults_valid():
    base = PhantomSpec()
    j = Jitter(head_radius=0.1, shaft_length=0.1, center_shift=2.0)
    for spec in cohort_specs(5, base, j, seed=0):
        assert dataclasses.replace(spec) == spec
        generate(spec)
