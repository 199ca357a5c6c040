import math

import numpy as np
import pytest
import shapely
from hypothesis import assume, given, settings, strategies as st

from oracles import random_recording, windows_oracle
from riskfield.grid import GridSpec
from riskfield.ingest import AgentState, Frame, Recording
from riskfield.shadow import (
    EgoMissing, EmptyRoi, OcclusionWindow, Rect, SelectionZone, ShadowMask, compute_shadow_mask,
    ego_frame_transform, extract_occlusion_windows, hard_shadow, hidden_agent_ids, occlusion_ratio,
    segment_enters_rect,
)

GRID = GridSpec(60, 41, 1.0, 1.0, (0.0, -20.0))


def ego(x=0.0, y=0.0, psi=0.0):
    return AgentState(0, (x, y), (20.0, 0.0), heading=psi)


def truck(aid=1, x=20.0, y=0.0, psi=0.0, length=12.0, width=2.5):
    return AgentState(aid, (x, y), (20.0, 0.0), heading=psi, length=length, width=width, cls="truck")


def test_ego_frame_examples():
    assert ego_frame_transform((5, 2), (0, 0), 0.0) == (5.0, 2.0)
    r = ego_frame_transform((0, 1), (0, 0), math.pi / 2)
    assert r == pytest.approx((1.0, 0.0), abs=1e-12)
    r = ego_frame_transform((1, 0), (0, 0), math.pi / 4)
    assert r == pytest.approx((math.sqrt(2) / 2, -math.sqrt(2) / 2), abs=1e-12)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3),
       st.floats(-10, 10))
def test_ego_frame_preserves_norm(px, py, ex, ey, psi):
    r = ego_frame_transform((px, py), (ex, ey), psi)
    d = math.hypot(px - ex, py - ey)
    assert math.hypot(*r) == pytest.approx(d, rel=1e-9, abs=1e-9)


def test_no_heavy_vehicle_no_shadow():
    fr = Frame(0, 0.0, (ego(), AgentState(2, (20.0, 0.0))))
    m = compute_shadow_mask(fr, 0, GRID)
    assert m.S.values.max() == 0.0 and not m.occ.any()


def test_truck_hard_shadow_examples():
    fr = Frame(0, 0.0, (ego(), truck()))
    h = hard_shadow(fr, 0, GRID)
    assert h[20, 40]  # cell (40, 0) lies straight behind the truck
    assert not h[30, 20]  # cell (20, 10) beside it
    assert not h[20, 10]  # between ego and truck


def test_occluders_behind_or_containing_ego_ignored():
    behind = Frame(0, 0.0, (ego(30.0), truck(x=10.0)))
    assert not hard_shadow(behind, 0, GRID).any()
    around = Frame(0, 0.0, (ego(20.0), truck(x=20.0)))
    assert not hard_shadow(around, 0, GRID).any()


def test_missing_ego():
    with pytest.raises(EgoMissing):
        compute_shadow_mask(Frame(0, 0.0, (truck(),)), 0, GRID)


def _shapely_shadow(e, rect: Rect, px, py):
    poly = shapely.Polygon(rect.corners())
    seg = shapely.LineString([e, (px, py)])
    if not seg.intersects(poly):
        return False
    # grazing only at the cell centre itself does not shade the cell
    inter = seg.intersection(poly)
    return inter.length > 1e-9 or not inter.equals(shapely.Point(px, py))


@given(st.floats(8, 45), st.floats(-12, 12), st.floats(-math.pi, math.pi), st.floats(4, 18),
       st.floats(1.5, 3.0))
@settings(max_examples=60, deadline=None)
def test_hard_shadow_matches_shapely(x, y, psi, length, width):
    rect = Rect(x, y, psi, length, width)
    assume(not bool(rect.contains(0.0, 0.0)))
    X, Y = GRID.mesh()
    ours = segment_enters_rect(0.0, 0.0, X, Y, rect)
    poly = shapely.Polygon(rect.corners())
    # skip cells whose segment passes within a hair of a corner; both answers are defensible there
    for j in range(0, GRID.ny, 3):
        for i in range(0, GRID.nx, 3):
            px, py = X[j, i], Y[j, i]
            seg = shapely.LineString([(0.0, 0.0), (px, py)])
            near_corner = min(seg.distance(shapely.Point(c)) for c in rect.corners()) < 1e-6
            if near_corner or poly.exterior.distance(shapely.Point(px, py)) < 1e-6:
                continue
            assert bool(ours[j, i]) == _shapely_shadow((0.0, 0.0), rect, px, py), (i, j)


@given(st.floats(10, 40), st.floats(-10, 10), st.floats(-0.5, 0.5), st.floats(0.0, 6.0), st.floats(0.0, 1.5))
@settings(max_examples=40, deadline=None)
def test_enlarging_occluder_never_shrinks_shadow(x, y, psi, dl, dw):
    small = Frame(0, 0.0, (ego(), truck(x=x, y=y, psi=psi, length=8.0, width=2.0)))
    big = Frame(0, 0.0, (ego(), truck(x=x, y=y, psi=psi, length=8.0 + dl, width=2.0 + dw)))
    assume(not Rect(x, y, psi, 8.0 + dl, 2.0 + dw).contains(0.0, 0.0))
    a = compute_shadow_mask(small, 0, GRID)
    b = compute_shadow_mask(big, 0, GRID)
    assert np.all(b.S.values >= a.S.values - 1e-12)


def test_mask_range_threshold_and_rate():
    f0 = Frame(0, 0.0, (ego(), truck(x=20.0)))
    f1 = Frame(1, 0.05, (ego(), truck(x=21.0)))
    m0 = compute_shadow_mask(f0, 0, GRID)
    m1 = compute_shadow_mask(f1, 0, GRID, theta_s=0.5, prev=m0)
    for m in (m0, m1):
        assert m.S.values.min() >= 0.0 and m.S.values.max() <= 1.0
        assert np.array_equal(m.occ, m.S.values > 0.5)
    assert np.all(m0.dS_dt.values == 0.0)
    np.testing.assert_allclose(m1.dS_dt.values, (m1.S.values - m0.S.values) * 20.0)


def test_occlusion_ratio():
    spec = GridSpec(10, 10)
    m = ShadowMask.empty(spec)
    roi = np.ones(spec.shape, bool)
    assert occlusion_ratio(m, roi) == 0.0
    m.occ[:] = True
    assert occlusion_ratio(m, roi) == 1.0
    m.occ[:] = False
    m.occ[:5, :5] = True
    assert occlusion_ratio(m, roi) == 0.25
    with pytest.raises(EmptyRoi):
        occlusion_ratio(m, np.zeros(spec.shape, bool))


def test_hidden_agent_detection():
    car_behind = AgentState(2, (40.0, 0.0))
    car_beside = AgentState(3, (20.0, 8.0))
    fr = Frame(0, 0.0, (ego(), truck(), car_behind, car_beside))
    assert hidden_agent_ids(fr, 0) == {2}


def _rec(positions, rate=20.0, start=1):
    frames = []
    for n, p in enumerate(positions):
        agents = [ego()] + ([truck(x=p[0], y=p[1])] if p is not None else [])
        frames.append(Frame(start + n, (start + n) / rate, tuple(agents)))
    return Recording.from_frames(frames, rate)


def test_window_examples():
    rec = _rec([(50.0, 0.0)] * 100)
    assert extract_occlusion_windows(rec, 0) == [OcclusionWindow(1, 100)]
    assert extract_occlusion_windows(_rec([(120.0, 0.0)] * 100), 0) == []
    flags = set(range(10, 13)) | {100, 101}
    rec = _rec([(50.0, 0.0) if k in flags else (200.0, 0.0) for k in range(1, 201)])
    got = extract_occlusion_windows(rec, 0)
    assert [(w.start, w.end) for w in got] == [(1, 52), (60, 141)]
    assert [(w.start, w.end) for w in got] == windows_oracle(rec, 0)


def test_zone_edges_are_open():
    assert extract_occlusion_windows(_rec([(90.0, 0.0)] * 5), 0) == []
    assert extract_occlusion_windows(_rec([(30.0, 18.0)] * 5), 0) == []
    assert extract_occlusion_windows(_rec([(30.0, 17.9)] * 5), 0) == [OcclusionWindow(1, 5)]


def test_ego_never_present():
    with pytest.raises(EgoMissing):
        extract_occlusion_windows(_rec([(50.0, 0.0)] * 3), 7)


@pytest.mark.parametrize("seed", range(200))
def test_windows_match_oracle(seed):
    rng = np.random.default_rng(seed)
    rec, ego_id = random_recording(rng)
    t_pad = float(rng.choice([0.0, 0.5, 2.0]))
    ours = [(w.start, w.end) for w in extract_occlusion_windows(rec, ego_id, SelectionZone(), t_pad=t_pad)]
    assert ours == windows_oracle(rec, ego_id, t_pad=t_pad)
    for (_, b), (c, _) in zip(ours, ours[1:]):
        assert b + 1 < c
