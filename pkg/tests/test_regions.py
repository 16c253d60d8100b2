import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from femseg.errors import DegenerateGeometry, EmptyMask
from femseg.phantom import FH, FN, IT, NONE, TR, PhantomSpec, generate, sphere_only
from femseg.regions import (
    PlaneCutParams,
    RegionVolumes,
    partition,
    partition_planes,
    region_volumes,
    volume_error_table,
    write_table_csv,
)
from femseg.volgrid import Mask3, Spacing3

SP = Spacing3(1.0, 1.0, 1.0)


def _rv(head, neck, comb, c_neck, c_comb):
    return RegionVolumes(head, neck, comb, c_neck, c_comb)


def test_analytic_partition_passes_labels_through():
    s = generate(PhantomSpec())
    part = partition(s.periosteal, label_field=s.region_field)
    assert np.array_equal(part.labels, s.regions)
    assert "analytic" in part.provenance


def test_analytic_partition_of_larger_prediction():
    from scipy.ndimage import binary_dilation

    s = generate(PhantomSpec())
    pred = Mask3(binary_dilation(s.periosteal.data, iterations=2), s.spacing)
    part = partition(pred, label_field=s.region_field)
    assert np.array_equal(part.labels != NONE, pred.data)


def test_plane_cut_cylinder_interval_counts():
    nz = 20
    z, y, x = np.indices((nz, 12, 12))
    disk = (x - 5.5) ** 2 + (y - 5.5) ** 2 <= 16
    m = disk & (z >= 2) & (z <= 16)  # 15 occupied slices
    per_slice = int(disk[0].sum())
    part = partition_planes(Mask3(m, SP), PlaneCutParams("z", (0.3, 0.6), (IT, TR, FN)))
    # slice positions (k - 2 + 0.5) / 15 for k in 2..16, split at 0.3 and 0.6
    pos = [(k + 0.5) / 15 for k in range(15)]
    expected = [sum(1 for p in pos if p < 0.3), sum(1 for p in pos if 0.3 <= p < 0.6),
                sum(1 for p in pos if p >= 0.6)]
    assert expected == [4, 5, 6]
    got = [int((part.labels == lab).sum()) for lab in (IT, TR, FN)]
    assert got == [n * per_slice for n in expected]


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.sampled_from(["x", "y", "z"]))
def test_plane_partition_exhaustive_exclusive(seed, axis):
    rng = np.random.default_rng(seed)
    m = rng.random((6, 7, 8)) < 0.4
    m[0, 0, 0] = True
    part = partition_planes(Mask3(m, SP), PlaneCutParams(axis))
    assert np.array_equal(part.labels != NONE, m)
    assert set(np.unique(part.labels[m]).tolist()) <= {FH, FN, TR, IT}


@pytest.mark.parametrize(
    "params",
    [
        PlaneCutParams("z", (0.6, 0.3), (IT, TR, FN)),
        PlaneCutParams("z", (0.0, 0.5), (IT, TR, FN)),
        PlaneCutParams("z", (0.5,), (IT, TR, FN)),
        PlaneCutParams("w", (0.5,), (IT, TR)),
    ],
)
def test_plane_partition_degenerate(params):
    with pytest.raises(DegenerateGeometry):
        partition_planes(Mask3(np.ones((3, 3, 3), dtype=bool), SP), params)


def test_empty_mask():
    with pytest.raises(EmptyMask):
        partition_planes(Mask3(np.zeros((3, 3, 3), dtype=bool), SP))


def test_sphere_shell_volume_analytic():
    sp = Spacing3(0.5, 0.5, 0.5)
    s = generate(sphere_only(12.0, (15.1, 15.2, 15.3), 2.0), (60, 60, 60), sp)
    part = partition(s.periosteal, label_field=s.region_field)
    vols = region_volumes(part, s.periosteal, s.endosteal)
    total, cortical = vols.per_label[FH]
    shell = 4 / 3 * math.pi * (12**3 - 10**3) / 1000
    assert abs(cortical - shell) / shell < 0.02
    assert abs(vols.femur_head - 4 / 3 * math.pi * 12**3 / 1000) < 0.02 * 7.23823
    assert vols.combination == 0.0


def test_region_volume_additivity_and_containment():
    s = generate(PhantomSpec())
    part = partition(s.periosteal, label_field=s.region_field)
    v = region_volumes(part, s.periosteal, s.endosteal)
    pl = v.per_label
    assert v.combination == pytest.approx(pl[FN][0] + pl[TR][0] + pl[IT][0], rel=1e-12)
    assert v.combination >= v.femur_neck
    assert v.cortical_neck <= v.femur_neck and v.cortical_combination <= v.combination
    assert v.femur_head + v.combination == pytest.approx(s.periosteal.count() * 1.5 / 1000)


def test_error_table_identical():
    vols = [_rv(40, 30, 100, 10, 35), _rv(30, 20, 90, 8, 30)]
    tab = volume_error_table(vols, vols)
    for row in tab.values():
        assert row.mae == row.rmse == row.re_mean == row.re_min == row.re_max == 0.0


def test_error_table_hand_values():
    truth = [_rv(10, 10, 10, 10, 10), _rv(20, 20, 20, 20, 20)]
    pred = [_rv(11, 11, 11, 11, 11), _rv(18, 18, 18, 18, 18)]
    row = volume_error_table(truth, pred)["femur_head"]
    assert row.mae == pytest.approx(1.5)
    assert row.rmse == pytest.approx(math.sqrt(2.5))
    assert row.re_mean == pytest.approx(10.0)
    assert row.re_min == pytest.approx(10.0) and row.re_max == pytest.approx(10.0)
    assert row.truth_mean == 15.0
    assert row.truth_sd == pytest.approx(math.sqrt(50.0))


def test_error_table_single_subject_femur_head_example():
    row = volume_error_table([_rv(38.91, 5, 50, 2, 10)], [_rv(40.11, 5, 50, 2, 10)])["femur_head"]
    assert row.re_mean == row.re_min == row.re_max
    assert row.re_mean == pytest.approx(1.2 / 38.91 * 100)
    assert round(row.re_mean, 3) == 3.084
    assert row.mae == pytest.approx(1.2)


def test_csv_export(tmp_path):
    truth = [_rv(38.91, 5, 50, 2, 10), _rv(20, 4, 40, 1.5, 8)]
    pred = [_rv(40.11, 5.2, 49, 2.1, 10.5), _rv(21, 3.9, 41, 1.4, 8.1)]
    tab = volume_error_table(truth, pred)
    path = tmp_path / "regions.csv"
    write_table_csv(tab, path, "analytic")
    rows = list(csv.DictReader(open(path, encoding="utf-8")))
    assert [r["target"] for r in rows] == [
        "Femur head", "Femur neck", "Combination",
        "Cortical bone in femur neck", "Cortical bone in combination",
    ]
    mean, sd = rows[0]["truth_cm3"].split("±")
    assert float(mean) == pytest.approx(29.455, abs=0.01)
    assert float(sd) == pytest.approx(np.std([38.91, 20], ddof=1), abs=0.01)
