"""Time-stepping drivers that collect the run diagnostics.

``run_markers`` advances a marker collection either self-consistently
(leapfrog: the closing half kick uses the field of the drifted markers) or in
a fixed field.  Along the way it records the diagnostics rows, the support
radius, per-tracer invariant logs and, on request, the partition of the field
integral over windows ending at prescribed times.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diagnostics
from .characteristics import PhaseArrays, alpha_samples, bounce_correction, drift, kick, push
from .picard import q_support, solve_field


@dataclass
class WindowResult:
    t: float
    Q: float
    Q_start: float
    partition: diagnostics.PfaffelmoserPartition
    kinetic: float
    impulse: float
    reference: int
    bounced: bool
    probe: bool = False

    @property
    def increment_rate(self):
        return (self.Q - self.Q_start) / self.partition.Delta


@dataclass
class RunResult:
    records: list
    times: np.ndarray
    q_history: np.ndarray
    rho_linf: np.ndarray
    tracer_ids: np.ndarray
    alpha_logs: list
    tracer_bounces: np.ndarray
    windows: list = field(default_factory=list)
    markers: object = None
    field_state: object = None
    probes: object = None

    def rho_bound_ok(self, f_max):
        """``max rho <= f_max (4 pi / 3) Q^3`` at every step, and the tightest ratio."""
        bound = f_max * (4.0 * np.pi / 3.0) * self.q_history**3
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(bound > 0.0, self.rho_linf / bound, np.inf)
        return bool(np.all(self.rho_linf <= bound)), float(np.max(ratio))


class _Window:
    """Marker samples over the trailing part of a step sequence ending at ``t_end``."""

    def __init__(self, t_end, length):
        self.t_end = t_end
        self.length = length
        self.times, self.x, self.v, self.fields, self.q = [], [], [], [], []
        self.probe_x = []

    def add(self, t, markers, field_state, Q, probes=None):
        self.times.append(t)
        if probes is not None:
            self.probe_x.append(probes.x.copy())
        self.x.append(markers.x.astype(np.float32))
        self.v.append(markers.v.astype(np.float32))
        self.fields.append(field_state)
        self.q.append(Q)


def make_probes(count, speed=1.2, radius=0.1, seed=0):
    """``count`` chargeless references: positions on a sphere of ``radius``,
    velocities of magnitude ``speed``, directions drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, 3))
    e = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    e /= np.linalg.norm(e, axis=1)[:, None]
    return radius * d, speed * e


def _tracer_ids(n_markers, count):
    if count <= 0 or n_markers == 0:
        return np.zeros(0, dtype=np.int64)
    count = min(count, n_markers)
    return np.unique(np.linspace(0, n_markers - 1, count).round().astype(np.int64))


def _close_window(win, markers, Q, delta, c0, soften, probes=None):
    """Partition results for one window, one per reference trajectory.

    The references are the probe characteristics when given, otherwise the
    fastest marker at the window end (excluded from its own sums).  References
    slower than 1 at the window end are skipped, and so is the whole window
    while ``Q < 1``, where the partition scales are undefined.
    """
    if Q < 1.0:
        return []
    P, Delta, R = diagnostics.partition_scales(Q, delta, c0)
    times = np.array(win.times)
    tol = 1e-9 * max(1.0, win.t_end)
    # the stored samples start at a step boundary; the window starts at the last
    # boundary not later than t - Delta
    first = max(int(np.searchsorted(times, win.t_end - Delta + tol, side="right")) - 1, 0)
    sl = slice(first, len(times))
    if probes is None:
        speed = np.linalg.norm(markers.v, axis=1)
        refs = [int(np.argmax(np.where(markers.f_value > 0.0, speed, -1.0)))]
        phase, paths, exclude = markers.phase, win.x, True
    else:
        refs = range(len(probes.x))
        phase, paths, exclude = probes, win.probe_x, False
    out = []
    for ref in refs:
        vhat = phase.v[ref].copy()
        if np.linalg.norm(vhat) < 1.0:
            # slow references do not move the support radius; skipped by design
            continue
        bounced = bool(phase.last_bounce[ref] >= times[first] - tol)
        vplus = phase.v_pre[ref].copy() if bounced else None
        xref = np.array([x[ref] for x in paths[sl]], dtype=float)
        part = diagnostics.pfaffelmoser_partition(
            times[sl], win.x[sl], win.v[sl], markers.charge, xref, markers.v, vhat, vplus, Q,
            delta=delta, c0=c0, soften=soften, exclude=ref if exclude else None)
        E = diagnostics.field_along(xref, win.fields[sl])
        impulse = diagnostics.field_impulse(times[sl], E, win.t_end, times[-1] - times[first])
        out.append(WindowResult(win.t_end, Q, win.q[first], part, markers.kinetic(), impulse,
                                int(ref), bounced, not exclude))
    return out


class _WindowBook:
    """Opens windows early enough to cover their longest span and closes them on time."""

    def __init__(self, window_ends, delta, c0, soften, probes):
        self.pending = sorted(float(t) for t in window_ends)
        self.delta, self.c0, self.soften, self.probes = delta, c0, soften, probes
        self.open, self.closed = [], []

    def start(self, t, dt, markers, field_state, Q):
        # open every window whose longest possible span starts at this step
        while self.pending:
            _, longest, _ = diagnostics.partition_scales(max(Q, 1.0), self.delta, self.c0)
            if self.pending[0] - longest - dt > t + 1e-12:
                break
            win = _Window(self.pending.pop(0), longest)
            win.add(t, markers, field_state, Q, self.probes)
            self.open.append(win)

    def record(self, t, markers, field_state, Q):
        for win in list(self.open):
            win.add(t, markers, field_state, Q, self.probes)
            if t >= win.t_end - 1e-9 * max(1.0, t):
                self.closed.extend(_close_window(win, markers, Q, self.delta, self.c0,
                                                 self.soften, self.probes))
                self.open.remove(win)


def run_markers(domain, markers, grid, h, T, dt, static_field=None, tracers=0,
                window_ends=(), delta=0.05, c0=0.1, soften=None, solver=None,
                probes=None, on_step=None):
    """Advance ``markers`` (in place) to ``T`` with macro step ``dt``.

    With ``static_field`` the markers move in that fixed field; otherwise the
    field is re-solved from the markers after every drift.  Diagnostics always
    use the freshly solved field of the current markers.  ``probes`` is an
    optional ``(x, v)`` pair of chargeless reference characteristics moved in
    the same fields; they serve as the reference trajectories of the windows.
    """
    solver = solver or {}
    if probes is not None:
        probes = PhaseArrays.new(*probes)
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be a positive multiple of dt")
    soften = grid.h if soften is None else soften
    ids = _tracer_ids(len(markers), tracers)
    logs = [([], []) for _ in ids]
    times = dt * np.arange(n_steps + 1)
    q = np.empty(n_steps + 1)
    rl = np.empty(n_steps + 1)
    records = []

    current = solve_field(grid, markers.x, markers.charge, h, **solver)
    q[0] = q_support(markers)
    rec = diagnostics.energy_record(markers, current, 0.0, q[0], records)
    rl[0] = rec.rho_linf

    def log_alpha(t, fstate):
        if not ids.size:
            return
        ph = markers.phase
        mask, alpha, _, _, _ = alpha_samples(domain, ph.x[ids], ph.v[ids], fstate, ph.bounces[ids])
        for j in np.nonzero(mask)[0]:
            logs[j][0].append(t)
            logs[j][1].append(alpha[j])

    log_alpha(0.0, current)
    book = _WindowBook(window_ends, delta, c0, soften, probes)
    pull = None
    for k in range(n_steps):
        t = times[k]
        book.start(t, dt, markers, current, q[k])
        force = static_field if static_field is not None else current
        if pull is None:
            kick(markers.x, markers.v, force, 0.5 * dt)
        else:
            # same field at the same positions as the previous closing half kick
            markers.phase.v += (0.5 * dt) * pull
        before = markers.phase.bounces.copy()
        drift(domain, markers.phase, dt, t)
        bounce_correction(domain, markers.phase, force, dt, t, before)
        if probes is not None:
            kick(probes.x, probes.v, force, 0.5 * dt)
            before = probes.bounces.copy()
            drift(domain, probes, dt, t)
            bounce_correction(domain, probes, force, dt, t, before)
        current = solve_field(grid, markers.x, markers.charge, h, **solver)
        force = static_field if static_field is not None else current
        if pull is None:
            pull = np.empty_like(markers.x)
        force.force(markers.x, pull)
        markers.phase.v += (0.5 * dt) * pull
        if probes is not None:
            kick(probes.x, probes.v, force, 0.5 * dt)
        t1 = times[k + 1]
        q[k + 1] = q_support(markers, q[k])
        rec = diagnostics.energy_record(markers, current, t1, q[k + 1], records)
        rl[k + 1] = rec.rho_linf
        log_alpha(t1, current)
        book.record(t1, markers, current, q[k + 1])
        if on_step is not None:
            on_step(k + 1, t1, markers, current)

    alpha_logs = [(np.array(s), np.array(a)) for s, a in logs]
    bounces = markers.phase.bounces[ids].copy()
    return RunResult(records, times, q, rl, ids, alpha_logs, bounces, book.closed, markers,
                     current, probes)


def picard_records(state):
    """Diagnostics rows of a Picard iterate from its snapshots and own fields."""
    rows = []
    m = state.markers.copy()
    q = 0.0
    for k, t in enumerate(state.own_history.times):
        m.phase.x[...] = state.xs[k]
        m.phase.v[...] = state.vs[k]
        q = q_support(m, q)
        diagnostics.energy_record(m, state.own_history.snapshots[k], t, q, rows)
    return rows


def picard_windows(domain, state, window_ends, probes, delta=0.05, c0=0.1, soften=None):
    """Partition windows replayed from the stored trajectories of a Picard iterate.

    Probes move through the field history that drove the iterate; the field
    sampled along them is the iterate's own.
    """
    hist, own = state.field_history, state.own_history
    times = hist.times
    soften = hist.snapshots[0].grid.h if soften is None else soften
    ph = PhaseArrays.new(*probes)
    book = _WindowBook(window_ends, delta, c0, soften, ph)
    m = state.markers.copy()
    for k in range(hist.n_steps):
        dt = times[k + 1] - times[k]
        m.phase.x[...], m.phase.v[...] = state.xs[k], state.vs[k]
        book.start(times[k], dt, m, own.snapshots[k], state.q_history[k])
        push(domain, ph, hist.step_field(k), dt, times[k])
        m.phase.x[...], m.phase.v[...] = state.xs[k + 1], state.vs[k + 1]
        book.record(times[k + 1], m, own.snapshots[k + 1], state.q_history[k + 1])
    return book.closed


def static_run(domain, markers, grid, h, T, dt, **kw):
    """Linear transport in the field of the initial density."""
    f0 = solve_field(grid, markers.x, markers.charge, h, **(kw.get("solver") or {}))
    return run_markers(domain, markers, grid, h, T, dt, static_field=f0, **kw)

