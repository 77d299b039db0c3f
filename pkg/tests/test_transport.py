import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpconvex import boundary_chart, geometry, poisson
from vpconvex import transport as tr
from vpconvex.errors import (AdmissibilityError, ConfigError, DegenerateNormalizationError,
                             FlatnessError)

BALL = geometry.ConvexDomain.unit_ball()
QUAD = geometry.boundary_quadrature(BALL)


def _one_marker(mass):
    return tr.Markers.from_arrays([[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], [1.0], mass)


def test_constant_profile_inside_the_domain():
    spec = tr.InitialDataSpec("constant", {"value": 2.0},
                              support_bounds=((-.3, -.3, -.3, -1, -1, -1), (.3, .3, .3, 1, 1, 1)))
    m = tr.sample_initial(spec, BALL, 4)
    assert len(m) == 4**6
    assert np.all(m.f_value == 2.0)
    assert m.mass() == pytest.approx(2.0 * 0.6**3 * 2.0**3, rel=1e-14)


def test_zero_profile_gives_an_empty_collection():
    spec = tr.InitialDataSpec("flat_bump", {"radius_x": 0.5, "amplitude": 0.0})
    m = tr.sample_initial(spec, BALL, 8)
    assert len(m) == 0 and m.mass() == 0.0


def test_flat_bump_mass_converges_to_the_exact_integral():
    spec = tr.InitialDataSpec("flat_bump", {"radius_x": 0.5, "radius_v": 1.25})
    # the bump (1 - s^2)^2 integrates to 4 pi r^3 * 8/105 in three dimensions
    exact = (4 * np.pi * 0.5**3 * 8 / 105) * (4 * np.pi * 1.25**3 * 8 / 105)
    m = tr.sample_initial(spec, BALL, 16)
    assert m.mass() == pytest.approx(exact, rel=2e-2)
    assert m.lp(np.inf) <= 1.0


def test_flatness_violation_names_lattice_points():
    spec = tr.InitialDataSpec("constant", {"value": 1.0},
                              support_bounds=((-1,) * 6, (1,) * 6))
    with pytest.raises(FlatnessError) as info:
        tr.sample_initial(spec, BALL, 6)
    assert info.value.points and "x, v" in str(info.value)


def test_spec_validation():
    with pytest.raises(ConfigError):
        tr.InitialDataSpec("nope")
    with pytest.raises(ConfigError):
        tr.InitialDataSpec("constant", support_bounds=((0,) * 6, (0,) * 6))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 2 * np.pi), st.floats(0.1, 3.0), st.floats(0.0, 0.15),
       st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3))
def test_datum_is_invariant_under_reflection(theta, phi, depth, v):
    spec = tr.InitialDataSpec("flat_bump", {"radius_x": 0.95, "radius_v": 1.5})
    n = np.array([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)])
    x = (1.0 - depth) * n
    v = np.array(v)
    vr = boundary_chart.specular_reflect(n, v)
    f1, _ = tr.evaluate(spec, BALL, x, v)
    f2, _ = tr.evaluate(spec, BALL, x, vr)
    assert f1[0, 0] == pytest.approx(f2[0, 0], abs=1e-13)


@pytest.mark.parametrize("mass, base, expected", [
    (4 * np.pi, 2.0, 1.0), (4 * np.pi, 1.0, 1.0), (2 * np.pi, 1.0, 0.5)])
def test_normalize_flux(mass, base, expected):
    h = tr.normalize_flux(_one_marker(mass), poisson.BoundaryFlux.uniform(base), QUAD)
    assert np.allclose(h(QUAD.points), expected, rtol=1e-12)


def test_normalize_flux_errors():
    with pytest.raises(AdmissibilityError):
        tr.normalize_flux(_one_marker(1.0), poisson.BoundaryFlux.tilted(1.5), QUAD)
    with pytest.raises(DegenerateNormalizationError):
        tr.normalize_flux(tr.Markers.empty(), poisson.BoundaryFlux.uniform(), QUAD)


def _bump_markers():
    spec = tr.InitialDataSpec("flat_bump", {"radius_x": 0.5, "radius_v": 1.25})
    return tr.sample_initial(spec, BALL, 6)


def test_pushforward_zero_step_is_identity():
    m = _bump_markers()
    out = tr.pushforward(BALL, m, None, 0.0)
    assert np.array_equal(out.x, m.x) and np.array_equal(out.v, m.v)


def test_pushforward_keeps_values_and_follows_chords():
    m = _bump_markers()
    out = tr.pushforward(BALL, m, None, 1.5)
    assert out.mass() == m.mass()
    assert out.lp(np.inf) == m.lp(np.inf)
    assert out.lp(2) == m.lp(2)
    assert np.all(BALL.level(out.x) <= 1e-12)
    # zero field keeps every speed
    assert np.allclose(np.linalg.norm(out.v, axis=1), np.linalg.norm(m.v, axis=1), rtol=1e-13)
    # the original collection is untouched
    assert not np.array_equal(out.x, m.x)


def test_snapshot_round_trip(tmp_path):
    m = _bump_markers()
    path = tmp_path / "m.csv"
    tr.write_snapshot(m, path)
    back = tr.read_snapshot(path, m.lattice)
    assert np.array_equal(back.x, m.x) and np.array_equal(back.v, m.v)
    assert np.array_equal(back.f_value, m.f_value) and np.array_equal(back.index, m.index)
