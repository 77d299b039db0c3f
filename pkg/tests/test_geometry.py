import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpconvex import geometry
from vpconvex.errors import ChartSingularityError, DomainError, OutOfTubeError

BALL = geometry.ConvexDomain.unit_ball()
ELL = geometry.ConvexDomain.ellipsoid(2.0, 1.0, 1.0)


def test_point_from_chart_on_the_ball():
    mu = geometry.mu_from_boundary(BALL, np.array([1.0, 0.0, 0.0]), geometry.CHART_Z)
    assert np.allclose(geometry.point_from_chart(BALL, mu, 0.0), [1.0, 0.0, 0.0], atol=1e-15)
    assert np.allclose(geometry.point_from_chart(BALL, mu, 0.1), [0.9, 0.0, 0.0], atol=1e-15)
    mu = geometry.mu_from_boundary(BALL, np.array([0.0, 0.0, 1.0]), geometry.CHART_X)
    assert np.allclose(geometry.point_from_chart(BALL, mu, 0.05, geometry.CHART_X),
                       [0.0, 0.0, 0.95], atol=1e-15)


def test_point_from_chart_rejects_depth_outside_tube():
    with pytest.raises(DomainError):
        geometry.point_from_chart(BALL, np.array([1.0, 0.5]), 0.3)


def test_chart_from_point_on_the_ball():
    cp = geometry.chart_from_point(BALL, np.array([0.9, 0.0, 0.0]))
    p = geometry.boundary_point(BALL, cp.mu, int(cp.chart))
    assert np.allclose(p, [1.0, 0.0, 0.0], atol=1e-14)
    assert cp.x_perp == pytest.approx(0.1, abs=1e-14)
    cp = geometry.chart_from_point(BALL, np.array([0.0, 0.95, 0.0]))
    assert cp.x_perp == pytest.approx(0.05, abs=1e-14)


def test_nearest_boundary_on_ellipsoid_matches_brute_force():
    x = np.array([1.9, 0.0, 0.0])
    # oracle: dense search over the surface followed by local refinement
    theta = np.linspace(0.0, np.pi, 721)
    phi = np.linspace(-np.pi, np.pi, 1441)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    pts = ELL.axes * np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1)
    d = np.linalg.norm(pts - x, axis=-1)
    i, j = np.unravel_index(np.argmin(d), d.shape)
    t2 = np.linspace(theta[max(i - 1, 0)], theta[min(i + 1, 720)], 401)
    p2 = np.linspace(phi[max(j - 1, 0)], phi[min(j + 1, 1440)], 401)
    T, P = np.meshgrid(t2, p2, indexing="ij")
    pts = ELL.axes * np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1)
    d = np.linalg.norm(pts - x, axis=-1)
    k = np.unravel_index(np.argmin(d), d.shape)
    foot, dist = geometry.nearest_boundary(ELL, x)
    assert np.allclose(foot, pts[k], atol=1e-6)
    assert dist == pytest.approx(d[k], abs=1e-8)
    assert np.allclose(foot, [2.0, 0.0, 0.0], atol=1e-12)
    assert dist == pytest.approx(0.1, abs=1e-12)


def test_chart_from_point_rejects_outside_and_deep_points():
    with pytest.raises(DomainError):
        geometry.chart_from_point(BALL, np.array([1.1, 0.0, 0.0]))
    with pytest.raises(OutOfTubeError):
        geometry.chart_from_point(BALL, np.array([0.5, 0.0, 0.0]))


def test_sphere_tensors_at_the_equator():
    t = geometry.surface_tensors(BALL, np.array([np.pi / 2, 0.0]), geometry.CHART_Z)
    assert np.allclose(t.n, [1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(t.u1, [0.0, 0.0, -1.0], atol=1e-9)
    assert np.allclose(t.u2, [0.0, 1.0, 0.0], atol=1e-9)
    assert t.k1 == pytest.approx(1.0, abs=1e-6)
    assert t.k2 == pytest.approx(1.0, abs=1e-6)
    # convex body: the second form is negative definite
    assert t.b1 < 0.0 and t.b2 < 0.0


def test_degenerate_ellipsoid_reproduces_ball_tensors():
    round_ell = geometry.ConvexDomain((1.0, 1.0, 1.0), 0.2)
    mu = np.array([[0.7, 0.3], [1.9, -2.0], [1.2, 2.5]])
    a = geometry.surface_tensors(BALL, mu)
    b = geometry.surface_tensors(round_ell, mu)
    for name in ("u1", "u2", "n", "metric", "shape", "second", "christoffel", "k1", "k2"):
        assert np.allclose(getattr(a, name), getattr(b, name), atol=1e-8)


def test_ellipsoid_curvature_at_axis_tip():
    # at (2, 0, 0) on the ellipsoid (2, 1, 1) both principal curvatures are a / b^2 = 2
    t = geometry.surface_tensors(ELL, np.array([np.pi / 2, 0.0]))
    assert t.k1 == pytest.approx(2.0, rel=1e-5)
    assert t.k2 == pytest.approx(2.0, rel=1e-5)


def test_pole_margin_is_enforced():
    with pytest.raises(ChartSingularityError):
        geometry.surface_tensors(BALL, np.array([0.01, 0.0]))


def test_ray_boundary_hit():
    t, p = geometry.ray_boundary_hit(BALL, np.zeros(3), np.array([1.0, 0.0, 0.0]))
    assert t == pytest.approx(1.0) and np.allclose(p, [1.0, 0.0, 0.0])
    t, _ = geometry.ray_boundary_hit(BALL, np.array([0.5, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    assert t == pytest.approx(0.5)
    t, _ = geometry.ray_boundary_hit(BALL, np.array([0.5, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]))
    assert t == pytest.approx(1.5)


def test_boundary_quadrature_area_and_flux():
    q = geometry.boundary_quadrature(BALL)
    assert q.integrate(np.ones(len(q.weights))) == pytest.approx(4.0 * np.pi, rel=1e-12)
    # divergence theorem: the flux of x through the wall is 3 |Omega|
    q = geometry.boundary_quadrature(ELL)
    flux = np.sum(q.points * q.normals, axis=1)
    assert q.integrate(flux) == pytest.approx(3.0 * ELL.volume, rel=1e-10)


def test_domain_validation():
    with pytest.raises(DomainError):
        geometry.ConvexDomain((1.0, 1.0), 0.1)
    with pytest.raises(DomainError):
        geometry.ConvexDomain((1.0, 1.0, 1.0), 1.5)
    with pytest.raises(DomainError):
        geometry.ConvexDomain((1.0, 1.0, 1.0), 0.1, geo_step=0.1)


@settings(max_examples=60, deadline=None)
@given(
    axes=st.tuples(*[st.floats(0.6, 1.8)] * 3),
    theta=st.floats(0.0, np.pi),
    phi=st.floats(-np.pi, np.pi),
    depth=st.floats(0.0, 0.99),
)
def test_tube_round_trip_property(axes, theta, phi, depth):
    dom = geometry.ConvexDomain.ellipsoid(*axes)
    p = geometry.boundary_point(dom, np.array([theta, phi]))
    chart = int(geometry.select_chart(dom, p))
    mu = geometry.mu_from_boundary(dom, p, chart)
    # the selected chart always keeps clear of its poles
    geometry.check_pole_margin(dom, mu)
    x = geometry.point_from_chart(dom, mu, depth * dom.delta_tube, chart)
    cp = geometry.chart_from_point(dom, x, chart)
    back = geometry.point_from_chart(dom, cp.mu, cp.x_perp, chart)
    assert np.linalg.norm(back - x) <= 1e-9
    assert cp.x_perp == pytest.approx(depth * dom.delta_tube, abs=1e-9)
