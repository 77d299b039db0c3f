"""Convex domains bounded by an ellipsoid (the unit ball is the special case).

A boundary point is addressed by surface parameters ``mu = (theta, phi)`` in one
of two spherical-type charts:

* ``CHART_Z`` has its poles on the z axis,
  ``x_par = (a sin(theta) cos(phi), b sin(theta) sin(phi), c cos(theta))``;
* ``CHART_X`` has its poles on the x axis,
  ``x_par = (a cos(theta), b sin(theta) cos(phi), c sin(theta) sin(phi))``.

Every boundary point is at least ``arccos(sqrt(2/3))`` away from the poles of one
of the two charts, so ``select_chart`` always finds a chart whose pole margin is
respected.  Points near the wall are written in tubular coordinates
``x = x_par(mu) - x_perp * n(mu)`` with ``n`` the outer unit normal and
``x_perp >= 0`` inside the domain.

All functions broadcast over leading axes.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    ChartSingularityError,
    DomainError,
    GeometryConvergenceError,
    OutOfTubeError,
)

CHART_Z = 0
CHART_X = 1

_NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class ConvexDomain:
    """Axis-aligned ellipsoid ``sum(x_i^2 / a_i^2) < 1``."""

    semi_axes: tuple
    delta_tube: float
    geo_step: float = 1e-5
    kind: str = "ellipsoid"
    pole_margin: float = 0.1

    def __post_init__(self):
        axes = tuple(float(s) for s in self.semi_axes)
        if len(axes) != 3 or min(axes) <= 0.0:
            raise DomainError(f"semi-axes must be three positive numbers, got {self.semi_axes}")
        if not 0.0 < self.geo_step <= 1e-3:
            raise DomainError(f"geo_step must lie in (0, 1e-3], got {self.geo_step}")
        # the tube must stay inside the focal surface, i.e. below the smallest
        # radius of curvature min(a_i)^2 / max(a_i)
        reach = min(axes) ** 2 / max(axes)
        if not 0.0 < self.delta_tube < reach:
            raise DomainError(f"delta_tube must lie in (0, {reach:.4g}), got {self.delta_tube}")
        object.__setattr__(self, "semi_axes", axes)

    @classmethod
    def unit_ball(cls, delta_tube=0.2, geo_step=1e-5):
        return cls((1.0, 1.0, 1.0), delta_tube, geo_step, kind="ball")

    @classmethod
    def ellipsoid(cls, a, b, c, delta_tube=None, geo_step=1e-5):
        if delta_tube is None:
            delta_tube = 0.2 * min(a, b, c)
        return cls((a, b, c), delta_tube, geo_step, kind="ellipsoid")

    @property
    def axes(self):
        return np.asarray(self.semi_axes)

    @property
    def is_ball(self):
        return self.semi_axes == (1.0, 1.0, 1.0)

    @property
    def volume(self):
        a, b, c = self.semi_axes
        return 4.0 / 3.0 * np.pi * a * b * c

    def level(self, x):
        """Implicit function ``sum(x_i^2/a_i^2) - 1``: negative inside."""
        y = np.asarray(x, dtype=float) / self.axes
        return np.einsum("...i,...i->...", y, y) - 1.0

    def contains(self, x, tol=0.0):
        return self.level(x) <= tol

    def normal(self, x):
        """Outer unit normal of the level set through ``x``."""
        g = np.asarray(x, dtype=float) / self.axes**2
        return g / np.linalg.norm(g, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# charts


def _unit_sphere(mu, chart):
    theta, phi = mu[..., 0], mu[..., 1]
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    if chart == CHART_Z:
        return np.stack([st * cp, st * sp, ct], axis=-1)
    if chart == CHART_X:
        return np.stack([ct, st * cp, st * sp], axis=-1)
    raise ValueError(f"unknown chart {chart}")


def boundary_point(domain, mu, chart=CHART_Z):
    """``x_par(mu)`` on the boundary."""
    mu = np.asarray(mu, dtype=float)
    return domain.axes * _unit_sphere(mu, chart)


def boundary_normal(domain, mu, chart=CHART_Z):
    """Outer unit normal ``n(mu)``."""
    return domain.normal(boundary_point(domain, mu, chart))


def mu_from_boundary(domain, p, chart):
    """Invert ``boundary_point`` for points on the boundary."""
    q = np.asarray(p, dtype=float) / domain.axes
    if chart == CHART_Z:
        theta = np.arctan2(np.hypot(q[..., 0], q[..., 1]), q[..., 2])
        phi = np.arctan2(q[..., 1], q[..., 0])
    elif chart == CHART_X:
        theta = np.arctan2(np.hypot(q[..., 1], q[..., 2]), q[..., 0])
        phi = np.arctan2(q[..., 2], q[..., 1])
    else:
        raise ValueError(f"unknown chart {chart}")
    return np.stack([theta, phi], axis=-1)


def select_chart(domain, p):
    """Chart whose poles are farther from the boundary point ``p``.

    Returns an integer array (or scalar) of chart ids.
    """
    q = np.asarray(p, dtype=float) / domain.axes
    sin_z = np.hypot(q[..., 0], q[..., 1])
    sin_x = np.hypot(q[..., 1], q[..., 2])
    return np.where(sin_z >= sin_x, CHART_Z, CHART_X)


def check_pole_margin(domain, mu):
    theta = np.asarray(mu, dtype=float)[..., 0]
    m = domain.pole_margin
    if np.any((theta < m) | (theta > np.pi - m)):
        raise ChartSingularityError(
            f"surface parameter theta within {m} of a chart pole; switch chart"
        )


def point_from_chart(domain, mu, x_perp, chart=CHART_Z):
    """Position ``x_par(mu) - x_perp n(mu)`` for ``x_perp`` in ``[0, delta]``."""
    x_perp = np.asarray(x_perp, dtype=float)
    if np.any((x_perp < 0.0) | (x_perp > domain.delta_tube)):
        raise DomainError(f"x_perp must lie in [0, {domain.delta_tube}]")
    p = boundary_point(domain, mu, chart)
    return p - x_perp[..., None] * domain.normal(p)


def nearest_boundary(domain, x):
    """Closest boundary point and signed wall distance for points near the wall.

    The distance is positive inside.  Points may lie slightly outside, which the
    Poisson ghost cells rely on.  Newton iteration on the secular equation
    ``sum(a_i^2 x_i^2 / (a_i^2 + s)^2) = 1``; from the starting point ``s = 0``
    the iteration brackets the root after at most one step.
    """
    x = np.asarray(x, dtype=float)
    a2 = domain.axes**2
    if domain.is_ball:
        r = np.linalg.norm(x, axis=-1)
        if np.any(r == 0.0):
            raise OutOfTubeError("the centre of the ball has no unique foot point")
        p = x / r[..., None]
        return p, 1.0 - r
    s = np.zeros(x.shape[:-1])
    lower = -a2.min()
    for _ in range(_NEWTON_MAX_ITER):
        t = a2 / (a2 + s[..., None])
        y = t * x
        g = np.sum(y**2 / a2, axis=-1) - 1.0
        dg = -2.0 * np.sum(y**2 / (a2 * (a2 + s[..., None])), axis=-1)
        s_new = s - g / dg
        # damping: never jump past the pole of the secular function
        bad = s_new <= lower
        s_new = np.where(bad, 0.5 * (s + lower), s_new)
        done = np.abs(s_new - s) <= 1e-15 * (1.0 + np.abs(s))
        s = s_new
        if np.all(done):
            break
    else:
        raise GeometryConvergenceError("nearest boundary point: Newton did not converge")
    p = a2 / (a2 + s[..., None]) * x
    # exact projection onto the surface removes residual rounding
    p = p / np.sqrt(np.sum((p / domain.axes) ** 2, axis=-1))[..., None]
    n = domain.normal(p)
    return p, np.sum((p - x) * n, axis=-1)


@dataclass(frozen=True)
class ChartPoint:
    mu: np.ndarray
    x_perp: np.ndarray
    chart: np.ndarray


def chart_from_point(domain, x, chart=None):
    """Tubular coordinates ``(mu, x_perp, chart)`` of points inside the tube.

    If ``chart`` is None the chart is chosen per point by ``select_chart``.
    """
    x = np.asarray(x, dtype=float)
    if np.any(domain.level(x) > 1e-12):
        raise DomainError("point lies outside the closed domain")
    p, dist = nearest_boundary(domain, x)
    dist = np.maximum(dist, 0.0)
    if np.any(dist >= domain.delta_tube):
        raise OutOfTubeError(f"point farther than delta_tube={domain.delta_tube} from the wall")
    if chart is None:
        chart = select_chart(domain, p)
    chart = np.broadcast_to(np.asarray(chart), dist.shape)
    mu = np.where(
        (chart == CHART_Z)[..., None],
        mu_from_boundary(domain, p, CHART_Z),
        mu_from_boundary(domain, p, CHART_X),
    )
    return ChartPoint(mu, dist, chart)


def ray_boundary_hit(domain, x, d):
    """Forward exit time and exit point of the ray ``x + t d`` from inside.

    Solves ``level(x + t d) = 0`` in the cancellation-free form of the
    quadratic formula.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    inv_a2 = 1.0 / domain.axes**2
    qa = np.sum(d * d * inv_a2, axis=-1)
    qb = 2.0 * np.sum(x * d * inv_a2, axis=-1)
    qc = np.sum(x * x * inv_a2, axis=-1) - 1.0
    if np.any(qc > 1e-12):
        raise DomainError("ray origin lies outside the domain")
    qc = np.minimum(qc, 0.0)
    root = np.sqrt(np.maximum(qb * qb - 4.0 * qa * qc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(qb <= 0.0, (root - qb) / (2.0 * qa), -2.0 * qc / (qb + root))
    t = np.asarray(t)
    return t, x + t[..., None] * d


# ---------------------------------------------------------------------------
# surface tensors


@dataclass(frozen=True)
class SurfaceTensors:
    """First and second fundamental forms of the boundary at ``mu``.

    ``shape[i, j]`` are the Weingarten coefficients ``d_i n = shape[i, j] u_j``
    and ``second[i, j] = d_j u_i . n``; for a convex surface ``second`` is
    negative definite and the principal curvatures ``k1 <= k2`` are positive.
    ``christoffel[l, i, j]`` is the tangential part of ``d_j u_i`` along ``u_l``.
    """

    point: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    n: np.ndarray
    metric: np.ndarray
    shape: np.ndarray
    second: np.ndarray
    christoffel: np.ndarray
    k1: np.ndarray
    k2: np.ndarray

    @property
    def b1(self):
        return self.second[..., 0, 0]

    @property
    def b2(self):
        return self.second[..., 1, 1]

    @property
    def b12(self):
        return self.second[..., 0, 1]

    @property
    def basis(self):
        """Tangent basis stacked as ``(..., 2, 3)``."""
        return np.stack([self.u1, self.u2], axis=-2)


# fourth-order central stencils
_D1 = ((-2, 1.0 / 12.0), (-1, -8.0 / 12.0), (1, 8.0 / 12.0), (2, -1.0 / 12.0))
_D2 = ((-2, -1.0 / 12.0), (-1, 16.0 / 12.0), (0, -30.0 / 12.0), (1, 16.0 / 12.0), (2, -1.0 / 12.0))


def _shift(mu, axis, amount):
    out = mu.copy()
    out[..., axis] += amount
    return out


def _first(fn, mu, axis, h):
    return sum(c * fn(_shift(mu, axis, k * h)) for k, c in _D1) / h


def _second(fn, mu, axis, h):
    return sum(c * fn(_shift(mu, axis, k * h)) for k, c in _D2) / h**2


def _mixed(fn, mu, h):
    return sum(c * _first(fn, _shift(mu, 0, k * h), 1, h) for k, c in _D1) / h


def surface_tensors(domain, mu, chart=CHART_Z):
    """Tangent basis, curvature and Christoffel symbols by finite differences.

    First derivatives use step ``geo_step``; second derivatives use a step
    a hundred times larger, which balances truncation and rounding error for
    the fourth-order stencils.
    """
    mu = np.asarray(mu, dtype=float)
    check_pole_margin(domain, mu)
    h1 = domain.geo_step
    h2 = min(100.0 * h1, 1e-2)

    def xpar(m):
        return boundary_point(domain, m, chart)

    def nrm(m):
        return boundary_normal(domain, m, chart)

    p = xpar(mu)
    u = np.stack([_first(xpar, mu, 0, h1), _first(xpar, mu, 1, h1)], axis=-2)
    cross = np.cross(u[..., 0, :], u[..., 1, :])
    area = np.linalg.norm(cross, axis=-1)
    if np.any(area < 1e-12):
        raise ChartSingularityError("degenerate tangent basis")
    n = nrm(mu)
    dn = np.stack([_first(nrm, mu, 0, h1), _first(nrm, mu, 1, h1)], axis=-2)
    d2 = np.empty(mu.shape[:-1] + (2, 2, 3))
    d2[..., 0, 0, :] = _second(xpar, mu, 0, h2)
    d2[..., 1, 1, :] = _second(xpar, mu, 1, h2)
    d2[..., 0, 1, :] = d2[..., 1, 0, :] = _mixed(xpar, mu, h2)

    metric = np.einsum("...ik,...jk->...ij", u, u)
    inv_metric = np.linalg.inv(metric)
    # d_i n . u_k = shape[i, j] g_jk
    shape = np.einsum("...ik,...jk,...jl->...il", dn, u, inv_metric)
    second = np.einsum("...ijk,...k->...ij", d2, n)
    second = 0.5 * (second + np.swapaxes(second, -1, -2))
    christoffel = np.einsum("...ijk,...mk,...ml->...lij", d2, u, inv_metric)
    weingarten = -np.einsum("...ij,...jk->...ik", inv_metric, second)
    k = np.sort(np.linalg.eigvals(weingarten).real, axis=-1)
    return SurfaceTensors(
        point=p,
        u1=u[..., 0, :],
        u2=u[..., 1, :],
        n=n,
        metric=metric,
        shape=shape,
        second=second,
        christoffel=christoffel,
        k1=k[..., 0],
        k2=k[..., 1],
    )


# ---------------------------------------------------------------------------
# boundary quadrature


@dataclass(frozen=True)
class BoundaryQuadrature:
    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray

    def integrate(self, values):
        return float(np.dot(self.weights, values))


def boundary_quadrature(domain, n_theta=48, n_phi=96):
    """Gauss-Legendre in ``cos(theta)`` times the trapezoid rule in ``phi``.

    The area element of the ellipsoid in these variables is smooth and
    periodic, so the rule converges spectrally.
    """
    t, wt = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    T, P = np.meshgrid(t, phi, indexing="ij")
    st = np.sqrt(1.0 - T**2)
    a, b, c = domain.semi_axes
    pts = np.stack([a * st * np.cos(P), b * st * np.sin(P), c * T], axis=-1)
    # |d x/d t x d x/d phi| with t = cos(theta)
    jac = np.sqrt(
        (b * c * st * np.cos(P)) ** 2 + (a * c * st * np.sin(P)) ** 2 + (a * b * T) ** 2
    )
    w = wt[:, None] * (2.0 * np.pi / n_phi) * jac
    pts = pts.reshape(-1, 3)
    return BoundaryQuadrature(pts, domain.normal(pts), w.reshape(-1))
