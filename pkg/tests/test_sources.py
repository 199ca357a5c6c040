import math

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from riskfield.grid import GridSpec, VectorField
from riskfield.ingest import AgentState, Frame, LanePolyline
from riskfield.shadow import EgoMissing, ShadowMask
from riskfield.sources import (
    MergePolygon, MergeTopology, SourceParams, load_topology, q_merge, q_occ, q_veh, source_components,
    total_source, vehicle_kernel, velocity_field, write_topology,
)

GRID = GridSpec(81, 31, 1.0, 1.0, (-40.0, -15.0))
P = SourceParams()


def ego(x=-30.0, y=0.0, v=20.0):
    return AgentState(0, (x, y), (v, 0.0))


def car(aid, x, y, v=20.0, ax=0.0, psi=0.0):
    return AgentState(aid, (x, y), (v * math.cos(psi), v * math.sin(psi)), (ax, 0.0), heading=psi)


def square(x0, y0, x1, y1, lateral=(0.0, 1.0)):
    return MergePolygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], float), lateral)


# -- vehicle kernels ------------------------------------------------------------------------

def test_kernel_unit_weight_at_ego():
    k = vehicle_kernel(car(1, 0.0, 0.0), AgentState(0, (0.0, 0.0), (20.0, 0.0)), P)
    assert k.w == pytest.approx(1.0)
    assert k.mu == (0.0, 0.0)


def test_kernel_distance_attenuation():
    k = vehicle_kernel(car(1, 50.0, 0.0), AgentState(0, (0.0, 0.0), (20.0, 0.0)), P)
    assert k.w == pytest.approx(math.exp(-1.0))


def test_braking_kernel_weight_and_shift():
    k = vehicle_kernel(car(1, 0.0, 0.0, ax=-3.0), AgentState(0, (0.0, 0.0), (20.0, 0.0)), P)
    assert k.w == pytest.approx(1.8)
    assert k.mu == pytest.approx((2.25, 0.0))


def test_relative_speed_and_acceleration_factors():
    e = AgentState(0, (0.0, 0.0), (20.0, 0.0))
    assert vehicle_kernel(car(1, 0.0, 0.0, v=25.0), e, P).w == pytest.approx(2.0)
    assert vehicle_kernel(car(1, 0.0, 0.0, ax=3.0), e, P).w == pytest.approx(1.3)


def test_covariance_follows_heading():
    k = vehicle_kernel(car(1, 0.0, 0.0, psi=math.pi / 2), AgentState(0, (0.0, 0.0)), P)
    np.testing.assert_allclose(k.P, np.diag([P.sigma_y ** 2, P.sigma_x ** 2]), atol=1e-9)
    assert np.all(np.linalg.eigvalsh(k.P) > 0)


def test_q_veh_peak_on_grid():
    fr = Frame(0, 0.0, (ego(), car(1, -30.0, 0.0)))
    f = q_veh(fr, 0, GRID)
    assert f.values.max() == pytest.approx(1.0)
    assert f[10, 15] == pytest.approx(1.0)  # cell centre at (-30, 0)


def test_q_veh_needs_ego():
    with pytest.raises(EgoMissing):
        q_veh(Frame(0, 0.0, (car(1, 0.0, 0.0),)), 0, GRID)


agents = st.lists(st.tuples(st.floats(-40, 40), st.floats(-15, 15), st.floats(0, 35), st.floats(-5, 5),
                            st.floats(-math.pi, math.pi)), min_size=1, max_size=5)


@given(agents, st.tuples(st.floats(-40, 40), st.floats(-15, 15), st.floats(0, 35), st.floats(-5, 5),
                         st.floats(-math.pi, math.pi)))
@settings(max_examples=40, deadline=None)
def test_q_veh_bounds_and_monotone(spec, extra):
    others = tuple(car(i + 1, x, y, v, a, psi) for i, (x, y, v, a, psi) in enumerate(spec))
    fr = Frame(0, 0.0, (ego(),) + others)
    f = q_veh(fr, 0, GRID).values
    e = fr.agent(0)
    w_sum = sum(vehicle_kernel(a, e, P).w for a in others)
    assert f.min() >= 0.0 and f.max() <= w_sum + 1e-12
    more = Frame(0, 0.0, fr.agents + (car(99, *extra),))
    assert np.all(q_veh(more, 0, GRID).values >= f)


# -- occlusion source ---------------------------------------------------------------------

def _mask(S, theta=0.5):
    m = ShadowMask.empty(GRID)
    m.S.values[:] = S
    m.occ[:] = m.S.values > theta
    return m


def test_q_occ_examples():
    assert not q_occ(ShadowMask.empty(GRID), GRID).values.any()
    assert q_occ(_mask(1.0), GRID).values[5, 5] == 1.0
    assert q_occ(_mask(0.6), GRID).values[5, 5] == pytest.approx(0.6)
    assert q_occ(_mask(0.4), GRID).values[5, 5] == 0.0


def test_q_occ_depth_mode_attenuates_into_shadow():
    m = ShadowMask.empty(GRID)
    m.S.values[:, 40:] = 1.0
    m.occ[:, 40:] = True
    q = q_occ(m, GRID, SourceParams(p_mode="depth")).values
    assert q[0, 40] == pytest.approx(math.exp(-0.5 / 30.0))
    assert q[0, 70] == pytest.approx(math.exp(-30.5 / 30.0))
    assert q[0, 39] == 0.0


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 3.0))
@settings(max_examples=30)
def test_q_occ_bounded_by_gain(seed, g0):
    rng = np.random.default_rng(seed)
    m = _mask(rng.uniform(0, 1, GRID.shape))
    q = q_occ(m, GRID, SourceParams(g0=g0)).values
    assert q.max() <= g0 + 1e-12
    assert np.all(q[~m.occ] == 0.0)


# -- merge source ----------------------------------------------------------------------

TOPO = MergeTopology((square(-10, -5, 10, 5),), sigma_m=2.0)


def test_q_merge_examples():
    empty = Frame(0, 0.0, ())
    assert not q_merge(empty, MergeTopology(), GRID).values.any()
    assert not q_merge(empty, None, GRID).values.any()
    assert q_merge(empty, TOPO, GRID)[40, 15] == pytest.approx(0.08)
    fr = Frame(0, 0.0, (car(1, 0.0, 0.0),))
    assert q_merge(fr, TOPO, GRID)[40, 15] == pytest.approx(0.68)


def test_merge_density_taper():
    rho = TOPO.rho_merge(GRID)
    # centre of cell (52, 15) sits 2 m past the polygon edge at x = 10
    assert rho[15, 52] == pytest.approx(math.exp(-0.5))
    assert rho[15, 40] == 1.0


@given(st.lists(st.tuples(st.floats(-40, 40), st.floats(-15, 15)), max_size=8))
@settings(max_examples=30, deadline=None)
def test_q_merge_range(pos):
    fr = Frame(0, 0.0, tuple(car(i, x, y) for i, (x, y) in enumerate(pos)))
    q = q_merge(fr, TOPO, GRID).values
    assert q.min() >= 0.0 and q.max() <= P.k_amb + P.k_veh + 1e-12


def test_self_intersecting_polygon_rejected():
    bow = MergePolygon(np.array([[0, 0], [1, 1], [1, 0], [0, 1]], float))
    with pytest.raises(ValueError):
        MergeTopology((bow,))


def test_topology_file_round_trip(tmp_path):
    topo = MergeTopology((square(0, 0, 5, 2, (0.0, -1.0)), square(10, 0, 12, 3)))
    write_topology(topo, tmp_path / "topo.csv")
    back = load_topology(tmp_path / "topo.csv")
    assert len(back.polygons) == 2
    np.testing.assert_array_equal(back.polygons[0].vertices, topo.polygons[0].vertices)
    assert back.polygons[0].lateral == (0.0, -1.0)


# -- composition ----------------------------------------------------------------------

def _fixture(rng):
    others = tuple(car(i + 1, rng.uniform(-40, 40), rng.uniform(-15, 15), rng.uniform(0, 30),
                       rng.uniform(-4, 4)) for i in range(int(rng.integers(0, 5))))
    fr = Frame(0, 0.0, (ego(),) + others)
    return fr, _mask(rng.uniform(0, 1, GRID.shape))


def test_total_source_zero():
    fr = Frame(0, 0.0, (ego(),))
    assert not total_source(fr, 0, ShadowMask.empty(GRID), None, GRID).values.any()


def test_total_source_without_occlusion():
    rng = np.random.default_rng(1)
    fr, _ = _fixture(rng)
    Q = total_source(fr, 0, ShadowMask.empty(GRID), TOPO, GRID).values
    expected = q_veh(fr, 0, GRID).values + q_merge(fr, TOPO, GRID).values
    assert np.array_equal(Q, expected)


@pytest.mark.parametrize("seed", range(10))
def test_total_source_matches_cell_loop(seed):
    rng = np.random.default_rng(seed)
    fr, mask = _fixture(rng)
    Q = total_source(fr, 0, mask, TOPO, GRID).values
    parts = source_components(fr, 0, mask, TOPO, GRID)
    for j in range(0, GRID.ny, 4):
        for i in range(0, GRID.nx, 4):
            cell = parts["veh"].values[j, i] + parts["occ"].values[j, i] + parts["merge"].values[j, i]
            assert Q[j, i] == cell


@given(st.floats(-100, 100), st.floats(-100, 100), st.integers(0, 2 ** 32 - 1))
@example(-88.03237557805745, 0.0, 42463826)  # agent exactly on the velocity cutoff radius
@settings(max_examples=25, deadline=None)
def test_sources_translation_equivariant(sx, sy, seed):
    rng = np.random.default_rng(seed)
    fr, _ = _fixture(rng)
    moved = Frame(0, 0.0, tuple(AgentState(a.id, (a.position[0] + sx, a.position[1] + sy), a.velocity,
                                           a.acceleration, a.heading) for a in fr.agents))
    grid2 = GridSpec(GRID.nx, GRID.ny, GRID.dx, GRID.dy, (GRID.origin[0] + sx, GRID.origin[1] + sy))
    topo2 = MergeTopology((square(-10 + sx, -5 + sy, 10 + sx, 5 + sy),), sigma_m=2.0)
    a = total_source(fr, 0, None, TOPO, GRID).values
    b = total_source(moved, 0, None, topo2, grid2).values
    np.testing.assert_allclose(a, b, atol=1e-9)
    va = velocity_field(fr, TOPO, GRID)
    vb = velocity_field(moved, topo2, grid2)
    np.testing.assert_allclose(va.vx, vb.vx, atol=1e-9)
    np.testing.assert_allclose(va.vy, vb.vy, atol=1e-9)


# -- velocity ------------------------------------------------------------------------------

def test_velocity_single_agent_everywhere():
    v = velocity_field(Frame(0, 0.0, (car(1, 0.0, 0.0),)), None, GRID)
    np.testing.assert_allclose(v.vx, 20.0)
    np.testing.assert_allclose(v.vy, 0.0)


def test_velocity_empty_is_zero():
    v = velocity_field(Frame(0, 0.0, ()), None, GRID)
    assert not v.vx.any() and not v.vy.any()


def test_velocity_symmetric_midpoint():
    fr = Frame(0, 0.0, (car(1, -10.0, 0.0, v=10.0), car(2, 10.0, 0.0, v=30.0)))
    v = velocity_field(fr, None, GRID)
    assert v.vx[15, 40] == pytest.approx(20.0)
    assert v.vy[15, 40] == pytest.approx(0.0)


def test_velocity_lane_fallback_and_cap():
    lanes = (LanePolyline(1, np.array([[-100.0, 0.0], [100.0, 0.0]]), nominal_speed=30.0),)
    topo = MergeTopology((), lanes)
    # one agent far to the left: cells beyond 50 m fall back to the lane speed
    v = velocity_field(Frame(0, 0.0, (car(1, -200.0, 0.0, v=10.0),)), topo, GRID)
    assert np.all(v.vx == 30.0)
    fast = velocity_field(Frame(0, 0.0, (car(1, 0.0, 0.0, v=59.0),)), TOPO, GRID)
    assert isinstance(fast, VectorField)
    assert np.hypot(fast.vx, fast.vy).max() <= P.v_cap + 1e-9


def test_velocity_merge_lateral_drift():
    v = velocity_field(Frame(0, 0.0, ()), TOPO, GRID)
    assert v.vy[15, 40] == pytest.approx(1.0)
    assert v.vy[15, 0] < 1e-6
