"""Characteristics ``dX/ds = V``, ``dV/ds = E(s, X)`` with specular reflection.

One macro step is kick-drift-kick: a half kick with the step field, a free
flight in which every wall crossing is located exactly and reflected, and a
second half kick.  Free flights in a quadric are straight lines, so the
reflection points are exact up to rounding.  A step with negative ``dt``
runs the same scheme backwards in time and inverts the forward step.
"""

from dataclasses import dataclass, field

import numpy as np

from . import boundary_chart, geometry, kernels
from .errors import GrazingCascadeError, HistoryError, NonComparableError, SingularSetError

MAX_BOUNCES_PER_STEP = 64
ALPHA_FLOOR = 1e-12


@dataclass
class TrajectoryState:
    x: np.ndarray
    v: np.ndarray
    s: float = 0.0
    bounces: int = 0
    alpha_log: list = field(default_factory=list)


@dataclass
class PhaseArrays:
    """Positions, velocities and reflection bookkeeping of many trajectories."""

    x: np.ndarray
    v: np.ndarray
    bounces: np.ndarray
    last_bounce: np.ndarray
    v_pre: np.ndarray

    @classmethod
    def new(cls, x, v):
        x = np.array(x, dtype=float, order="C").reshape(-1, 3)
        v = np.array(v, dtype=float, order="C").reshape(-1, 3)
        n = len(x)
        return cls(x, v, np.zeros(n, dtype=np.int64), np.full(n, -np.inf), np.zeros((n, 3)))

    def copy(self):
        return PhaseArrays(self.x.copy(), self.v.copy(), self.bounces.copy(),
                           self.last_bounce.copy(), self.v_pre.copy())


def kick(x, v, field_state, dt):
    """``v += dt * E(x)`` in place; ``None`` stands for the zero field."""
    if field_state is None or dt == 0.0:
        return
    field_state.accelerate(x, v, dt)


def drift(domain, ph, tau, t0=0.0, max_bounces=MAX_BOUNCES_PER_STEP):
    """Free flight for time ``tau`` (either sign) with exact reflections."""
    if tau == 0.0:
        return
    if tau < 0.0:
        ph.v *= -1.0
    failed = kernels.drift(ph.x, ph.v, abs(tau), domain.axes, ph.bounces, t0,
                           ph.last_bounce, ph.v_pre, max_bounces)
    if tau < 0.0:
        ph.v *= -1.0
        # times and pre-bounce velocities are recorded in the reversed frame
        ph.v_pre *= -1.0
    if failed >= 0:
        raise GrazingCascadeError(
            f"trajectory {failed} reflected more than {max_bounces} times in one step"
        )


def bounce_correction(domain, ph, field_state, dt, flight_start, bounces_before):
    """Second-order repair of a reflection inside a kick-drift-kick step.

    The drift reflects the whole opening half kick, while the exact flow
    reflects only the impulse gathered before the hit.  For a single hit at
    signed offset ``s`` from the start of the step the velocity misses
    ``2 (n.E) n (dt/2 - s)``; that jump is applied at the hit point, which
    moves the rest of the straight flight with it.  Applying the same rule to
    the reversed step undoes it exactly.  Rows with several hits in the step,
    or whose corrected flight would leave the domain, are left alone.
    ``flight_start`` is the time passed to ``drift``.

    The repaired step is continuous across step boundaries but no longer
    exactly volume preserving, so ``push`` does not use it; the self-consistent
    driver does, for its energy accuracy.
    """
    if field_state is None:
        return
    rows = np.nonzero(ph.bounces - bounces_before == 1)[0]
    if rows.size == 0:
        return
    flight = ph.last_bounce[rows] - flight_start
    s = flight if dt > 0.0 else -flight
    after = (dt - s)[:, None]
    hit = np.ascontiguousarray(ph.x[rows] - after * ph.v[rows])
    n = domain.normal(hit)
    E = np.empty_like(hit)
    field_state.force(hit, E)
    dv = (2.0 * np.einsum("ij,ij->i", n, E) * (0.5 * dt - s))[:, None] * n
    x_new = ph.x[rows] + after * dv
    keep = domain.level(x_new) < 0.0
    rows, dv, x_new = rows[keep], dv[keep], x_new[keep]
    ph.v[rows] += dv
    ph.x[rows] = x_new


def push(domain, ph, field_state, dt, t0=0.0, field_end=None, max_bounces=MAX_BOUNCES_PER_STEP,
         repair=False):
    """One kick-drift-kick step of length ``dt`` in place.

    ``field_end`` (default ``field_state``) is used for the closing half kick;
    passing the field at the end of the step gives the leapfrog scheme.
    ``repair`` applies ``bounce_correction`` after the drift.
    """
    kick(ph.x, ph.v, field_state, 0.5 * dt)
    start = t0 + dt if dt < 0.0 else t0
    before = ph.bounces.copy() if repair else None
    drift(domain, ph, dt, start, max_bounces)
    if repair:
        bounce_correction(domain, ph, field_state, dt, start, before)
    kick(ph.x, ph.v, field_state if field_end is None else field_end, 0.5 * dt)


def advance(domain, state, field_state, dt, max_bounces=MAX_BOUNCES_PER_STEP):
    """Single-trajectory macro step; returns a new ``TrajectoryState``."""
    if dt <= 0.0:
        raise ValueError("advance needs dt > 0")
    ph = PhaseArrays.new(state.x, state.v)
    push(domain, ph, field_state, dt, state.s, max_bounces=max_bounces)
    return TrajectoryState(ph.x[0], ph.v[0], state.s + dt,
                           state.bounces + int(ph.bounces[0]), list(state.alpha_log))


@dataclass
class FieldHistory:
    """Field snapshots at macro-step times.

    The field used on step ``[times[k], times[k+1]]`` is the average of the two
    end snapshots, i.e. the field frozen at the step midpoint.
    """

    times: np.ndarray
    snapshots: list
    _mid: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.snapshots) or len(self.times) < 1:
            raise ValueError("one snapshot per time is required")

    @classmethod
    def constant(cls, field_state, t0, t1, n_steps):
        return cls(np.linspace(t0, t1, n_steps + 1), [field_state] * (n_steps + 1))

    @property
    def n_steps(self):
        return len(self.times) - 1

    def step_field(self, k):
        f = self._mid.get(k)
        if f is None:
            a, b = self.snapshots[k], self.snapshots[k + 1]
            f = a if a is b or a is None else a.averaged(b)
            self._mid[k] = f
        return f

    def covers(self, t):
        span = self.times[-1] - self.times[0]
        tol = 1e-12 * max(1.0, abs(span))
        return self.times[0] - tol <= t <= self.times[-1] + tol

    def step_index(self, t, forward):
        """Step containing ``t`` in the direction of integration."""
        tol = 1e-12 * max(1.0, abs(self.times[-1]))
        if forward:
            k = int(np.searchsorted(self.times, t + tol, side="right")) - 1
        else:
            k = int(np.searchsorted(self.times, t - tol, side="left")) - 1
        return min(max(k, 0), self.n_steps - 1)


def trace(domain, x, v, t, s_target, history, max_bounces=MAX_BOUNCES_PER_STEP):
    """Characteristic through ``(x, v)`` at time ``t`` evaluated at ``s_target``.

    Works for one phase point or a batch; returns ``(X, V, bounces)``.
    """
    if not (history.covers(t) and history.covers(s_target)):
        raise HistoryError(
            f"times {t}, {s_target} outside the stored history "
            f"[{history.times[0]}, {history.times[-1]}]"
        )
    single = np.ndim(x) == 1
    ph = PhaseArrays.new(x, v)
    tol = 1e-12 * max(1.0, abs(history.times[-1]))
    cur = float(t)
    forward = s_target > t
    while abs(s_target - cur) > tol:
        k = history.step_index(cur, forward)
        edge = history.times[k + 1] if forward else history.times[k]
        end = min(edge, s_target) if forward else max(edge, s_target)
        push(domain, ph, history.step_field(k), end - cur, cur, max_bounces=max_bounces)
        cur = end
    if single:
        return ph.x[0], ph.v[0], int(ph.bounces[0])
    return ph.x, ph.v, ph.bounces


def transport(domain, ph, history, t0, t1, max_bounces=MAX_BOUNCES_PER_STEP):
    """Push a batch in place from ``t0`` to ``t1`` through ``history``."""
    X, V, B = trace(domain, ph.x, ph.v, t0, t1, history, max_bounces)
    ph.x[...] = X
    ph.v[...] = V
    ph.bounces += B
    return ph


def simplex_volume(points):
    """Volume of the 6-simplex with the given 7 vertices in phase space."""
    edges = points[1:] - points[0]
    return abs(np.linalg.det(edges)) / 720.0


def liouville_check(domain, field_state, base_x, base_v, eps, dt, duration,
                    max_bounces=MAX_BOUNCES_PER_STEP):
    """Volume ratio of a small phase-space simplex carried by the flow.

    The simplex has one vertex at the base point and the others displaced by
    ``eps`` along the six phase-space coordinate axes.  All vertices must
    reflect in the same macro steps: the discrete flow jumps by O(dt) where
    a reflection moves across a step boundary, and a simplex cut by that
    jump says nothing about the volume of the flow.
    """
    base = np.concatenate([np.asarray(base_x, dtype=float), np.asarray(base_v, dtype=float)])
    verts = np.tile(base, (7, 1))
    verts[1:] += eps * np.eye(6)
    ph = PhaseArrays.new(verts[:, :3], verts[:, 3:])
    n_steps = int(round(duration / dt))
    t = 0.0
    for _ in range(n_steps):
        push(domain, ph, field_state, dt, t, max_bounces=max_bounces)
        t += dt
        if np.any(ph.bounces != ph.bounces[0]):
            raise NonComparableError("simplex vertices reflected in different steps")
    final = np.column_stack([ph.x, ph.v])
    return simplex_volume(final) / simplex_volume(verts)


def alpha_samples(domain, x, v, field_state, bounce_count=None, alpha_floor=ALPHA_FLOOR):
    """Invariant pair ``(alpha, beta)`` of the points inside the tube.

    Returns ``(mask, alpha, beta, x_perp, v_perp)`` with NaN outside the tube.
    ``F0`` uses the current field at each point's wall foot point.  A value of
    alpha at or below ``alpha_floor`` raises ``SingularSetError``.
    """
    from .poisson import field_eval

    x = np.asarray(x, dtype=float).reshape(-1, 3)
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    n = len(x)
    alpha = np.full(n, np.nan)
    beta = np.full(n, np.nan)
    xp = np.full(n, np.nan)
    vp = np.full(n, np.nan)
    foot, dist = geometry.nearest_boundary(domain, x)
    mask = dist < domain.delta_tube
    rows = np.nonzero(mask)[0]
    if rows.size == 0:
        return mask, alpha, beta, xp, vp
    chart = geometry.select_chart(domain, foot[rows])
    mu = np.where((chart == geometry.CHART_Z)[:, None],
                  geometry.mu_from_boundary(domain, foot[rows], geometry.CHART_Z),
                  geometry.mu_from_boundary(domain, foot[rows], geometry.CHART_X))
    t = boundary_chart.tensors_for(domain, mu, chart)
    w, v_perp = boundary_chart.velocity_chart(t, v[rows])
    E_wall = (np.zeros((rows.size, 3)) if field_state is None
              else field_eval(field_state, t.point))
    F0 = boundary_chart.coefficient_F(t, E_wall, w, np.zeros(rows.size))
    d = np.maximum(dist[rows], 0.0)
    a = 0.5 * v_perp**2 - F0 * d
    if np.any(a <= alpha_floor):
        raise SingularSetError(f"alpha fell to {a.min():.3e}, at or below the floor {alpha_floor:g}")
    H = np.zeros(rows.size) if bounce_count is None else np.asarray(bounce_count)[rows]
    alpha[rows] = a
    beta[rows] = 2.0 * np.pi * H + np.pi * (1.0 - np.clip(v_perp / np.sqrt(2.0 * a), -1.0, 1.0))
    xp[rows] = d
    vp[rows] = v_perp
    return mask, alpha, beta, xp, vp
