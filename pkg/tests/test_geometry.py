import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsebeam.errors import DegeneratePoint, Infeasible, InvalidCount, InvalidGeometry, SizeMismatch
from sparsebeam.geometry import (
    ScanGeometry,
    ViewAngleSet,
    ViewPlan,
    matching_cost,
    project_point,
    project_points,
    select_aux_angles,
    snap_to_candidates,
    source_position,
    uniform_half_scan_angles,
)


def unit_geom(**kw):
    return ScanGeometry.centered(det_cols=65, det_rows=65, det_spacing=1.0, vol_shape=(8, 8, 8),
                                 voxel_spacing=1.0, **kw)


@pytest.mark.parametrize("angle,expected", [(0, (800, 0, 0)), (90, (0, 800, 0)), (180, (-800, 0, 0))])
def test_source_position(angle, expected):
    np.testing.assert_allclose(source_position(unit_geom(), angle), expected, atol=1e-9)


def test_isocenter_projects_to_detector_center():
    g = unit_geom()
    for a in np.linspace(0, 359, 37):
        u, v = project_point(g, a, (0, 0, 0))
        assert abs(u - 32) < 1e-9 and abs(v - 32) < 1e-9


def test_similar_triangles():
    g = unit_geom()
    u, _ = project_point(g, 0.0, (0, 10, 0))
    assert u - 32 == pytest.approx(15.0, abs=1e-9)
    for a in (0.0, 33.0, 210.0):
        _, v = project_point(g, a, (0, 0, 20))
        assert v - 32 == pytest.approx(30.0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 359.9), st.floats(-30, 30), st.floats(-30, 30))
def test_isocenter_plane_magnification(angle, s, t):
    g = unit_geom()
    a = math.radians(angle)
    u_axis = np.array([-math.sin(a), math.cos(a), 0.0])
    p = s * u_axis + np.array([0, 0, t])
    u, v = project_point(g, angle, p)
    assert u - 32 == pytest.approx(s * 1.5, rel=1e-6, abs=1e-9)
    assert v - 32 == pytest.approx(t * 1.5, rel=1e-6, abs=1e-9)


def test_point_behind_source_rejected():
    g = unit_geom()
    with pytest.raises(DegeneratePoint):
        project_point(g, 0.0, (900, 0, 0))
    with pytest.raises(DegeneratePoint):
        project_points(g, 0.0, np.array([[0, 0, 0], [800, 5, 0]]))


def test_geometry_validation_and_json():
    with pytest.raises(InvalidGeometry):
        ScanGeometry.centered(dso=1200, dsd=800)
    with pytest.raises(InvalidGeometry):
        ScanGeometry.centered(vol_shape=(2000, 8, 8), voxel_spacing=1.0)
    g = unit_geom()
    assert ScanGeometry.from_json(g.to_json()) == g
    d = json.loads(g.to_json())
    d["extra"] = 1
    with pytest.raises(InvalidGeometry):
        ScanGeometry.from_dict(d)


def test_uniform_half_scan_angles():
    assert uniform_half_scan_angles(4).angles == (0, 45, 90, 135)
    assert uniform_half_scan_angles(2).angles == (0, 90)
    a = uniform_half_scan_angles(200).as_array()
    assert len(a) == 200 and np.allclose(np.diff(a), 0.9)
    with pytest.raises(InvalidCount):
        uniform_half_scan_angles(0)
    with pytest.raises(InvalidCount):
        uniform_half_scan_angles(4, offset=45)


def test_view_angle_set_validation():
    with pytest.raises(InvalidGeometry):
        ViewAngleSet((10.0, 5.0))
    with pytest.raises(InvalidGeometry):
        ViewAngleSet((360.0,))
    assert ViewAngleSet.of([30, 10]).angles == (10, 30)


def test_matching_cost_examples():
    assert matching_cost([0, 90], [0, 45]) == 45
    assert matching_cost([10, 20, 30], [12, 19, 33]) == 6
    assert matching_cost([1, 2, 3], [3, 1, 2]) == 0
    with pytest.raises(SizeMismatch):
        matching_cost([1], [1, 2])


def brute_matching(a, b):
    return min(sum(abs(x - y) for x, y in zip(a, perm)) for perm in itertools.permutations(b))


def test_matching_cost_vs_permutations():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(1, 8))
        a = rng.uniform(0, 180, n)
        b = rng.uniform(0, 180, n)
        assert matching_cost(a, b) == pytest.approx(brute_matching(a, b), abs=1e-9)


def test_select_aux_examples():
    sel = select_aux_angles(ViewAngleSet((0, 90)), ViewAngleSet((0, 45, 90, 135)), 2)
    assert sel.aux.angles == (45, 135) and sel.cost == 0 and not sel.approximate
    sel = select_aux_angles(ViewAngleSet((0,)), ViewAngleSet((0, 60, 120)), 1)
    assert sel.aux.angles == (60, 120)
    full = ViewAngleSet((0, 45, 90, 135))
    assert len(select_aux_angles(full, full, 4).aux) == 0
    with pytest.raises(Infeasible):
        select_aux_angles(ViewAngleSet((1, 2, 3)), ViewAngleSet((0, 90)), 3)


def brute_aux(sparse, dense):
    k = len(dense) - len(sparse)
    pool = [x for x in dense if x not in sparse]
    return min(matching_cost(list(sparse) + list(c), dense) for c in itertools.combinations(pool, k))


def test_select_aux_exhaustive_vs_bruteforce():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n_max = int(rng.integers(1, 9))
        n = int(rng.integers(1, n_max + 1))
        dense = ViewAngleSet.of(rng.choice(np.arange(0, 180, 0.9), n_max, replace=False))
        sparse = ViewAngleSet.of(rng.choice(np.arange(0, 180, 0.9), n, replace=False))
        sel = select_aux_angles(sparse, dense, n)
        assert sel.cost == pytest.approx(brute_aux(sparse, dense), abs=1e-9)
        plan = ViewPlan(sparse, sel.aux, dense)
        plan.check(1)


def test_greedy_fallback_is_feasible_and_flagged():
    dense = uniform_half_scan_angles(24)
    sparse = ViewAngleSet.of([1.0, 61.0, 121.0])
    sel = select_aux_angles(sparse, dense, 3, limit=10)
    assert sel.approximate and len(sel.aux) == 21
    ViewPlan(sparse, sel.aux, dense).check(3)
    exact = select_aux_angles(sparse, dense, 3)
    assert sel.cost >= exact.cost - 1e-9


def test_snap_to_candidates():
    cand = ViewAngleSet((0.0, 1.0, 2.0))
    assert snap_to_candidates([0.4, 0.5, 1.9], cand) == [0.0, 0.0, 2.0]
