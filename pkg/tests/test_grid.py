import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from riskfield.grid import (
    GridSpec, ScalarField, VectorField, cell_to_world, format_grid_binary, format_grid_text,
    integrate, make_field, read_grid, sample, world_to_cell, write_grid,
)


def test_make_field_default_grid_is_zero():
    f = make_field(GridSpec(), 0.0)
    assert f.values.size == 10500
    assert np.all(f.values == 0.0)
    assert f.t == 0.0
    assert integrate(f) == 0.0


def test_make_field_constant_fill():
    f = make_field(GridSpec(2, 2), 1.5)
    assert f.flat().tolist() == [1.5] * 4


@pytest.mark.parametrize("fill", [math.nan, math.inf, -math.inf])
def test_make_field_rejects_non_finite(fill):
    with pytest.raises(ValueError):
        make_field(GridSpec(2, 2), fill)


def test_scalar_field_rejects_bad_values():
    spec = GridSpec(3, 2)
    with pytest.raises(ValueError):
        ScalarField(spec, np.zeros(5))
    with pytest.raises(ValueError):
        ScalarField(spec, np.array([0, 1, 2, 3, 4, np.nan]))


@pytest.mark.parametrize("kw", [dict(nx=1), dict(ny=1), dict(dx=0.0), dict(dy=-1.0), dict(frame_rate=0.0)])
def test_grid_spec_invariants(kw):
    with pytest.raises(ValueError):
        GridSpec(**kw)


def test_vector_field_cap():
    spec = GridSpec(2, 2)
    VectorField(spec, np.full(4, 60.0), np.zeros(4))
    with pytest.raises(ValueError):
        VectorField(spec, np.full(4, 60.5), np.zeros(4))


def test_world_to_cell_examples():
    spec = GridSpec(origin=(-5.0, 2.0))
    assert world_to_cell(spec, spec.origin) == (0, 0)
    assert world_to_cell(spec, (spec.origin[0] + spec.dx, spec.origin[1])) == (1, 0)
    assert world_to_cell(spec, (1000.0 + 150, 0.0)) is None
    assert world_to_cell(spec, (-1000.0, 2.0)) is None
    assert world_to_cell(spec, (math.nan, 2.0)) is None


def test_world_to_cell_half_cell_edges():
    spec = GridSpec(4, 3, 2.0, 0.5)
    # half a cell below the first centre still belongs to cell 0, just past the last edge does not
    assert world_to_cell(spec, (-0.999, 0.0)) == (0, 0)
    assert world_to_cell(spec, (-1.001, 0.0)) is None
    assert world_to_cell(spec, (6.999, 1.2)) == (3, 2)
    assert world_to_cell(spec, (7.001, 1.2)) is None


@given(st.integers(2, 40), st.integers(2, 40), st.floats(0.1, 5.0), st.floats(0.1, 5.0),
       st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.data())
def test_cell_round_trip(nx, ny, dx, dy, ox, oy, data):
    spec = GridSpec(nx, ny, dx, dy, (ox, oy))
    i = data.draw(st.integers(0, nx - 1))
    j = data.draw(st.integers(0, ny - 1))
    assert world_to_cell(spec, cell_to_world(spec, i, j)) == (i, j)


def test_integrate_examples():
    assert integrate(make_field(GridSpec(), 1.0)) == 10500.0
    spec = GridSpec(3, 3, 0.5, 0.5)
    v = np.zeros(spec.shape)
    v[1, 2] = 2.0
    assert integrate(ScalarField(spec, v)) == pytest.approx(0.5, abs=0)


@given(st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 2**32 - 1))
def test_integrate_is_linear(a, b, seed):
    spec = GridSpec(7, 5, 0.7, 1.3)
    rng = np.random.default_rng(seed)
    F = ScalarField(spec, rng.normal(size=spec.size))
    G = ScalarField(spec, rng.normal(size=spec.size))
    lhs = integrate(ScalarField(spec, a * F.values + b * G.values))
    rhs = a * integrate(F) + b * integrate(G)
    scale = max(1.0, abs(a) * np.abs(F.values).sum() + abs(b) * np.abs(G.values).sum())
    assert abs(lhs - rhs) <= 1e-9 * scale


def test_sample_and_indexing():
    spec = GridSpec(3, 2)
    f = ScalarField(spec, np.arange(6.0))
    assert f[2, 1] == 5.0
    assert sample(f, (1.0, 0.0)) == 1.0
    assert sample(f, (10.0, 0.0)) is None


def test_text_dump_layout():
    spec = GridSpec(3, 2, 0.5, 1.0, (1.0, -2.0))
    f = ScalarField(spec, [0.0, 1.0, 2.0, 3.0, 4.5, 5.0], t=0.25)
    lines = format_grid_text(f).splitlines()
    assert lines[0] == "DRIFTGRID v1 3 2 0.5 1.0 1.0 -2.0 0.25"
    assert lines[1:] == ["0 1 2", "3 4.5 5"]


def test_binary_dump_layout():
    spec = GridSpec(2, 2)
    f = ScalarField(spec, [1.0, 2.0, 3.0, 4.0])
    raw = format_grid_binary(f)
    head, body = raw.split(b"\n", 1)
    assert head.startswith(b"DRIFTGRID v1 2 2 ")
    assert np.frombuffer(body, "<f4").tolist() == [1.0, 2.0, 3.0, 4.0]


@pytest.mark.parametrize("binary", [False, True])
def test_dump_round_trip(tmp_path, binary):
    spec = GridSpec(5, 4, 1.0, 0.5, (3.0, 4.0))
    rng = np.random.default_rng(0)
    f = ScalarField(spec, rng.uniform(0, 10, spec.size).astype(np.float32), t=1.5)
    g = read_grid(write_grid(f, tmp_path / "f.grid", binary))
    assert g.spec == spec and g.t == 1.5
    np.testing.assert_allclose(g.values, f.values, rtol=1e-7)
