"""Near-wall phase-space coordinates and the invariant pair (alpha, beta).

A phase point close to the wall is written as

    x = x_par(mu) - x_perp n(mu),    v = w_1 u_1 + w_2 u_2 - v_perp n(mu).

The curvature convention is ``d_j n = W_j^k u_k`` with ``W`` positive definite
for a convex body, so the tube metric factor is ``I - x_perp W``.  In
lines-of-curvature coordinates ``W = diag(k_1, k_2)`` and the factor reduces to
``1 - k_j x_perp``.  The formulas below use the full matrices so that the same
code is valid in the ellipsoid charts that are not lines of curvature.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .errors import MetricDegeneracyError, SingularSetError

_TWO_PI = 2.0 * np.pi


def specular_reflect(n, v):
    """``v - 2 (n.v) n``."""
    n = np.asarray(n, dtype=float)
    v = np.asarray(v, dtype=float)
    return v - 2.0 * np.sum(n * v, axis=-1, keepdims=True) * n


@dataclass(frozen=True)
class BoundaryChartState:
    mu: np.ndarray
    x_perp: float
    w: np.ndarray
    v_perp: float
    chart: int = geometry.CHART_Z
    bounce_count: int = 0


@dataclass(frozen=True)
class AlphaBeta:
    alpha: float
    beta: float


@dataclass(frozen=True)
class ChartRates:
    mu: np.ndarray
    w: np.ndarray
    x_perp: float
    v_perp: float


def velocity_chart(tensors, v):
    """Split ``v`` into tangential coordinates ``w`` and ``v_perp = -v.n``."""
    v = np.asarray(v, dtype=float)
    proj = np.einsum("...ik,...k->...i", tensors.basis, v)
    w = np.einsum("...ij,...j->...i", np.linalg.inv(tensors.metric), proj)
    v_perp = -np.sum(v * tensors.n, axis=-1)
    return w, v_perp


def velocity_from_chart(tensors, w, v_perp):
    w = np.asarray(w, dtype=float)
    v_par = np.einsum("...i,...ik->...k", w, tensors.basis)
    return v_par - np.asarray(v_perp)[..., None] * tensors.n


def field_components(tensors, E):
    """Tangential coordinates ``(E_1, E_2)`` and ``E_perp = -E.n``."""
    return velocity_chart(tensors, E)


def _tube_factor_inverse(tensors, x_perp):
    """``(I - x_perp W)^{-T}``, which maps ``w`` to ``d mu / dt``."""
    x_perp = np.asarray(x_perp, dtype=float)
    m = np.eye(2) - x_perp[..., None, None] * tensors.shape
    # eigenvalues of W are the principal curvatures; the factor degenerates
    # once 1 - k_j x_perp reaches zero
    if np.any(1.0 - np.maximum(tensors.k1, tensors.k2) * x_perp <= 0.0):
        raise MetricDegeneracyError("x_perp beyond the focal distance 1/k")
    return np.linalg.inv(np.swapaxes(m, -1, -2))


def mu_rate(tensors, w, x_perp):
    inv = _tube_factor_inverse(tensors, x_perp)
    return np.einsum("...ij,...j->...i", inv, np.asarray(w, dtype=float))


def coefficient_F(tensors, E, w, x_perp):
    """Normal acceleration ``E_perp + II(mu_dot, w)``.

    With lines of curvature this is ``E_perp + sum_j b_j w_j^2 / (1 - k_j x_perp)``.
    """
    _, e_perp = field_components(tensors, E)
    mdot = mu_rate(tensors, w, x_perp)
    curv = np.einsum("...ij,...i,...j->...", tensors.second, mdot, np.asarray(w, dtype=float))
    return e_perp + curv


def coefficient_sigma(tensors, E, w, v_perp, x_perp):
    """Tangential accelerations ``dw_l/dt``.

    ``sigma_l = E_l + v_perp (W^T mu_dot)_l - Gamma^l_ij mu_dot_i w_j``.
    """
    e_par, _ = field_components(tensors, E)
    w = np.asarray(w, dtype=float)
    mdot = mu_rate(tensors, w, x_perp)
    turn = np.einsum("...ij,...i->...j", tensors.shape, mdot)
    geo = np.einsum("...lij,...i,...j->...l", tensors.christoffel, mdot, w)
    return e_par + np.asarray(v_perp)[..., None] * turn - geo


def chart_vector_field(chart_state, tensors, E):
    """Time derivative of ``(mu, w, x_perp, v_perp)`` at ``chart_state``."""
    w = np.asarray(chart_state.w, dtype=float)
    x_perp = chart_state.x_perp
    v_perp = chart_state.v_perp
    return ChartRates(
        mu=mu_rate(tensors, w, x_perp),
        w=coefficient_sigma(tensors, E, w, v_perp, x_perp),
        x_perp=v_perp,
        v_perp=coefficient_F(tensors, E, w, x_perp),
    )


def alpha_beta(chart_state, F0):
    """Invariant coordinates; ``F0`` is ``F`` at the wall foot point (``x_perp = 0``)."""
    F0 = np.asarray(F0, dtype=float)
    if np.any(F0 >= 0.0):
        raise SingularSetError("alpha requires F0 < 0")
    v_perp = np.asarray(chart_state.v_perp, dtype=float)
    alpha = 0.5 * v_perp**2 - F0 * np.asarray(chart_state.x_perp, dtype=float)
    if np.any(alpha <= 0.0):
        raise SingularSetError("alpha vanished: the point lies on the grazing set")
    ratio = np.clip(v_perp / np.sqrt(2.0 * alpha), -1.0, 1.0)
    beta = _TWO_PI * np.asarray(chart_state.bounce_count) + np.pi * (1.0 - ratio)
    return AlphaBeta(alpha=alpha, beta=beta)


def from_alpha_beta(alpha, beta, bounce_count, F0):
    """Inverse map ``(alpha, beta) -> (x_perp, v_perp)``."""
    phase = 1.0 - (np.asarray(beta) - _TWO_PI * np.asarray(bounce_count)) / np.pi
    v_perp = np.sqrt(2.0 * alpha) * phase
    x_perp = -alpha / F0 * (1.0 - phase**2)
    return x_perp, v_perp


def to_chart(domain, x, v, chart=None, bounce_count=0):
    """Chart state and tensors of a near-wall phase point."""
    cp = geometry.chart_from_point(domain, x, chart)
    chart_id = int(cp.chart)
    tensors = geometry.surface_tensors(domain, cp.mu, chart_id)
    w, v_perp = velocity_chart(tensors, v)
    state = BoundaryChartState(cp.mu, float(cp.x_perp), w, float(v_perp), chart_id, bounce_count)
    return state, tensors


def from_chart(domain, state, tensors=None):
    x = geometry.point_from_chart(domain, state.mu, state.x_perp, state.chart)
    if tensors is None:
        tensors = geometry.surface_tensors(domain, state.mu, state.chart)
    return x, velocity_from_chart(tensors, state.w, state.v_perp)


def wall_F(domain, tensors, w, field_at):
    """``F0``: the normal coefficient at the wall foot point.

    ``field_at`` maps boundary positions to field vectors.
    """
    return coefficient_F(tensors, field_at(tensors.point), w, np.zeros(np.shape(w)[:-1]))


# ---------------------------------------------------------------------------
# chart-form integration (used to cross-check the Cartesian pusher)


@dataclass
class ChartBatch:
    """Vectorized chart states sharing one chart id per row."""

    mu: np.ndarray
    w: np.ndarray
    x_perp: np.ndarray
    v_perp: np.ndarray
    chart: np.ndarray
    bounces: np.ndarray

    def copy(self):
        return ChartBatch(*(np.array(a, copy=True) for a in (
            self.mu, self.w, self.x_perp, self.v_perp, self.chart, self.bounces)))


def tensors_for(domain, mu, chart):
    """Surface tensors for rows that may use different charts."""
    out = None
    for cid in (geometry.CHART_Z, geometry.CHART_X):
        rows = np.nonzero(chart == cid)[0]
        if rows.size == 0:
            continue
        t = geometry.surface_tensors(domain, mu[rows], cid)
        if out is None:
            out = {f: np.empty((len(mu),) + getattr(t, f).shape[1:]) for f in t.__dataclass_fields__}
        for f in out:
            out[f][rows] = getattr(t, f)
    return geometry.SurfaceTensors(**out)


def _rates(domain, y, chart, field_fn):
    mu, w, xp, vp = y[:, 0:2], y[:, 2:4], y[:, 4], y[:, 5]
    t = tensors_for(domain, mu, chart)
    if field_fn is None:
        E = np.zeros((len(y), 3))
    else:
        x = t.point - xp[:, None] * t.n
        E = field_fn(x)
    out = np.empty_like(y)
    out[:, 0:2] = mu_rate(t, w, xp)
    out[:, 2:4] = coefficient_sigma(t, E, w, vp, xp)
    out[:, 4] = vp
    out[:, 5] = coefficient_F(t, E, w, xp)
    return out


def _rk4(domain, y, chart, dt, field_fn):
    dt = np.asarray(dt, dtype=float)[:, None]
    k1 = _rates(domain, y, chart, field_fn)
    k2 = _rates(domain, y + 0.5 * dt * k1, chart, field_fn)
    k3 = _rates(domain, y + 0.5 * dt * k2, chart, field_fn)
    k4 = _rates(domain, y + dt * k3, chart, field_fn)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _pack(batch):
    return np.column_stack([batch.mu, batch.w, batch.x_perp, batch.v_perp])


def integrate_chart(domain, batch, duration, dt, field_fn=None):
    """Integrate the chart equations with RK4 and exact wall events.

    When a step would carry ``x_perp`` below zero, the crossing time is found
    by secant iteration on the RK4 sub-step, ``v_perp`` is flipped (which is
    specular reflection at ``x_perp = 0``) and the remainder of the step is
    taken from the wall.  ``field_fn`` maps positions to field vectors; None
    means zero field.
    """
    batch = batch.copy()
    y = _pack(batch)
    chart = batch.chart
    n_steps = int(round(duration / dt))
    if not np.isclose(n_steps * dt, duration, rtol=1e-12, atol=0.0):
        raise ValueError("duration must be a multiple of dt")
    full = np.full(len(y), dt)
    for _ in range(n_steps):
        y_new = _rk4(domain, y, chart, full, field_fn)
        hit = np.nonzero(y_new[:, 4] < 0.0)[0]
        if hit.size:
            y_new[hit] = _step_with_bounce(domain, y[hit], chart[hit], dt, field_fn)
            batch.bounces[hit] += 1
        y = y_new
    batch.mu, batch.w = y[:, 0:2], y[:, 2:4]
    batch.x_perp, batch.v_perp = y[:, 4], y[:, 5]
    return batch


def _step_with_bounce(domain, y, chart, dt, field_fn):
    # secant iteration on tau -> x_perp(tau); x_perp(0) > 0 > x_perp(dt)
    lo = np.zeros(len(y))
    hi = np.full(len(y), dt)
    f_lo = y[:, 4].copy()
    f_hi = _rk4(domain, y, chart, hi, field_fn)[:, 4]
    tau = hi.copy()
    for _ in range(60):
        tau = hi - f_hi * (hi - lo) / (f_hi - f_lo)
        tau = np.clip(tau, lo, hi)
        f_tau = _rk4(domain, y, chart, tau, field_fn)[:, 4]
        pos = f_tau > 0.0
        lo = np.where(pos, tau, lo)
        f_lo = np.where(pos, f_tau, f_lo)
        hi = np.where(pos, hi, tau)
        f_hi = np.where(pos, f_hi, f_tau)
        if np.all(np.abs(f_tau) < 1e-15):
            break
    at_wall = _rk4(domain, y, chart, tau, field_fn)
    at_wall[:, 4] = 0.0
    at_wall[:, 5] = -at_wall[:, 5]
    return _rk4(domain, at_wall, chart, dt - tau, field_fn)


def batch_from_cartesian(domain, x, v):
    cp = geometry.chart_from_point(domain, x)
    chart = np.array(cp.chart, dtype=np.int64)
    t = tensors_for(domain, cp.mu, chart)
    w, v_perp = velocity_chart(t, v)
    return ChartBatch(cp.mu, w, cp.x_perp, v_perp, chart, np.zeros(len(x), dtype=np.int64))


def batch_to_cartesian(domain, batch):
    t = tensors_for(domain, batch.mu, batch.chart)
    x = t.point - batch.x_perp[:, None] * t.n
    return x, velocity_from_chart(t, batch.w, batch.v_perp)


def with_bounces(state, bounce_count):
    return replace(state, bounce_count=bounce_count)
