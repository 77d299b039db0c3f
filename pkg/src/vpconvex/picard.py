"""Fixed-point iteration between linear transport and the field solve.

Iterate ``n`` transports the initial markers over ``[0, T]`` in the field
history of iterate ``n - 1`` and deposits its own density at every macro step,
which gives the field history for iterate ``n + 1``.  Iterate 0 is the initial
datum frozen in time.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import poisson
from .characteristics import FieldHistory, push
from .errors import CorrespondenceError, VPError


def solve_field(grid, x, charge, h, tol=1e-10, max_iter=500, compat_tol=1e-8,
                scheme="conservative"):
    """Deposit marker charge and solve the Neumann problem."""
    rho = poisson.deposit_density(x, charge, grid)
    load = grid.conservative.deposit(x, charge) if scheme == "conservative" else None
    return poisson.solve_neumann(grid, rho, h, tol=tol, max_iter=max_iter,
                                 compat_tol=compat_tol, scheme=scheme, load=load)


def default_ell_ref(markers):
    """Smallest step of the sampling lattice, or 1 if it is unknown."""
    if not markers.lattice:
        return 1.0
    n, lo, hi = markers.lattice
    return float(np.min((np.asarray(hi) - np.asarray(lo)) / n))


def _check_pair(a, b):
    if a.lattice != b.lattice or len(a) != len(b) or not np.array_equal(a.index, b.index):
        raise CorrespondenceError("marker collections come from different sampling lattices")


def _distance(xa, va, fa, xb, vb, fb, weight, ell_ref):
    value = np.sum(np.abs(fa - fb) * weight)
    disp = np.sqrt(np.sum((xa - xb) ** 2, axis=1) + np.sum((va - vb) ** 2, axis=1))
    return float(value + np.sum(fa * weight * np.minimum(1.0, disp / ell_ref)))


def l1_distance(a, b, ell_ref=None):
    """Correspondence distance between two collections sampled from one lattice.

    Value differences weighted by cell volume plus a phase-displacement term
    that saturates at the marker's full mass.
    """
    _check_pair(a, b)
    ell_ref = default_ell_ref(a) if ell_ref is None else float(ell_ref)
    return _distance(a.x, a.v, a.f_value, b.x, b.v, b.f_value, a.weight, ell_ref)


def q_support(markers, previous=0.0):
    """Running maximum of ``|v|`` over markers with positive value."""
    live = markers.f_value > 0.0
    if not np.any(live):
        return float(previous)
    speed2 = np.einsum("ij,ij->i", markers.v, markers.v)
    return max(float(previous), float(np.sqrt(np.max(speed2, where=live, initial=0.0))))


@dataclass
class PicardState:
    """One iterate: its trajectory snapshots and the two field histories.

    ``field_history`` drove this iterate; ``own_history`` holds the fields of
    this iterate's density and drives the next one.
    """

    iterate_index: int
    markers: object
    field_history: FieldHistory
    own_history: FieldHistory
    xs: np.ndarray
    vs: np.ndarray
    l1_history: list = field(default_factory=list)
    q_history: np.ndarray = None
    rho_linf: np.ndarray = None


def initial_state(domain, markers, grid, h, T, dt, solver=None):
    """Iterate 0: the initial datum frozen on ``[0, T]``."""
    solver = solver or {}
    n_steps = _steps(T, dt)
    f0 = solve_field(grid, markers.x, markers.charge, h, **solver)
    hist = FieldHistory.constant(f0, 0.0, n_steps * dt, n_steps)
    xs = np.broadcast_to(markers.x, (n_steps + 1,) + markers.x.shape)
    vs = np.broadcast_to(markers.v, (n_steps + 1,) + markers.v.shape)
    q = np.full(n_steps + 1, q_support(markers))
    rl = np.full(n_steps + 1, float(np.max(f0.rho)) if f0.rho.size else 0.0)
    return PicardState(0, markers, hist, hist, xs, vs, [], q, rl)


def _steps(T, dt):
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be a positive multiple of dt")
    return n


def picard_step(domain, prev, base, grid, h, dt, solver=None, ell_ref=None, on_step=None):
    """Next iterate driven by ``prev.own_history``.

    ``on_step(k, t, markers, field)`` is called after each macro step with the
    new marker positions and the field of their density.
    """
    solver = solver or {}
    hist = prev.own_history
    n_steps = hist.n_steps
    ell_ref = default_ell_ref(base) if ell_ref is None else ell_ref
    cur = base.copy()
    xs = np.empty((n_steps + 1,) + base.x.shape)
    vs = np.empty_like(xs)
    xs[0], vs[0] = base.x, base.v
    q = np.empty(n_steps + 1)
    q[0] = q_support(base)
    rl = np.empty(n_steps + 1)
    rl[0] = prev.rho_linf[0]
    fields = [hist.snapshots[0]]
    dist = 0.0
    w = base.weight
    for k in range(n_steps):
        t = hist.times[k]
        try:
            push(domain, cur.phase, hist.step_field(k), dt, t)
            fk = solve_field(grid, cur.x, cur.charge, h, **solver)
        except VPError as err:
            err.args = (f"iterate {prev.iterate_index + 1}, step {k}: {err}",)
            raise
        fields.append(fk)
        xs[k + 1], vs[k + 1] = cur.x, cur.v
        q[k + 1] = q_support(cur, q[k])
        rl[k + 1] = float(np.max(fk.rho))
        dist = max(dist, _distance(cur.x, cur.v, cur.f_value, prev.xs[k + 1], prev.vs[k + 1],
                                   prev.markers.f_value, w, ell_ref))
        if on_step is not None:
            on_step(k + 1, hist.times[k + 1], cur, fk)
    own = FieldHistory(hist.times, fields)
    return PicardState(prev.iterate_index + 1, cur, hist, own, xs, vs,
                       prev.l1_history + [dist], q, rl)


@dataclass
class PicardReport:
    converged: bool
    state: PicardState
    l1_history: list
    q_max: list
    seconds: list
    theta: float

    def rows(self):
        """``(iterate, l1_distance, max Q, seconds)`` per iterate."""
        return [(n + 1, d, q, s) for n, (d, q, s) in
                enumerate(zip(self.l1_history, self.q_max, self.seconds))]


def contraction_ratio(l1_history, start=2):
    """Largest ``d[n+1] / d[n]`` for 1-based ``n >= start``."""
    d = np.asarray(l1_history, dtype=float)
    if d.size < start + 1:
        return float("nan")
    with np.errstate(divide="ignore", invalid="ignore"):
        r = d[start:] / d[start - 1:-1]
    return float(np.max(r))


def run_picard(domain, base, grid, h, T, dt, tol=None, max_iter=25, solver=None,
               ell_ref=None, on_iterate=None):
    """Iterate until the correspondence distance drops below ``tol``.

    ``tol`` defaults to ``1e-6`` times the marker mass.  Non-convergence is
    reported through ``PicardReport.converged``, not raised.
    """
    tol = 1e-6 * base.mass() if tol is None else tol
    state = initial_state(domain, base, grid, h, T, dt, solver)
    seconds, q_max = [], []
    converged = False
    for _ in range(max_iter):
        t0 = time.perf_counter()
        state = picard_step(domain, state, base, grid, h, dt, solver, ell_ref)
        seconds.append(time.perf_counter() - t0)
        q_max.append(float(state.q_history[-1]))
        if on_iterate is not None:
            on_iterate(state)
        if state.l1_history[-1] <= tol:
            converged = True
            break
    return PicardReport(converged, state, list(state.l1_history), q_max, seconds,
                        contraction_ratio(state.l1_history))
