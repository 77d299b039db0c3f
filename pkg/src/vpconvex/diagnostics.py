"""Conserved quantities, invariant logs and the velocity-space partition of the field integral."""

import csv
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import poisson
from .errors import OutOfRegimeError, SingularSetError


@dataclass
class DiagnosticsRecord:
    t: float
    mass: float
    kinetic: float
    field_energy: float
    total: float
    l1: float
    l2: float
    linf: float
    rho_linf: float
    rho_l53: float
    Q: float


DIAGNOSTIC_COLUMNS = [f.name for f in fields(DiagnosticsRecord)]


def rho_norms(field_state):
    """``(max |rho|, ||rho||_{5/3})`` over interior cells with their dual volumes."""
    vol = field_state.grid.volume
    rho = np.abs(field_state.rho)
    if not rho.size:
        return 0.0, 0.0
    return float(rho.max()), float(np.sum(rho ** (5.0 / 3.0) * vol) ** 0.6)


def energy_record(markers, field_state, t=0.0, Q=None, log=None):
    """Snapshot of mass, energies and norms; appended to ``log`` when given."""
    if field_state is None:
        fe, rl, r53 = 0.0, 0.0, 0.0
    else:
        fe = field_state.field_energy()
        rl, r53 = rho_norms(field_state)
    kin = markers.kinetic()
    if Q is None:
        live = markers.f_value > 0.0
        Q = float(np.sqrt(np.max(np.sum(markers.v[live] ** 2, axis=1)))) if np.any(live) else 0.0
    rec = DiagnosticsRecord(float(t), markers.mass(), kin, fe, kin + fe, markers.lp(1),
                            markers.lp(2), markers.lp(np.inf), rl, r53, float(Q))
    if log is not None:
        log.append(rec)
    return rec


def write_records(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAGNOSTIC_COLUMNS)
        for r in records:
            w.writerow([repr(float(v)) for v in astuple(r)])


def energy_drift(records):
    """``max |total(t) - total(0)| / total(0)``; zero when the total energy is zero."""
    tot = np.array([r.total for r in records])
    if tot[0] == 0.0:
        return 0.0
    return float(np.max(np.abs(tot - tot[0])) / abs(tot[0]))


# velocity lemma ----------------------------------------------------------------

@dataclass
class LemmaRow:
    min_ratio: float
    max_ratio: float
    rate: float


def _log_rate(s, alpha, contiguous):
    if len(s) < 2:
        return 0.0
    ds = np.diff(s)
    dl = np.abs(np.diff(np.log(alpha)))
    keep = ds > 0.0
    if contiguous is not None:
        keep &= ds <= contiguous * (1.0 + 1e-9)
    return float(np.max(dl[keep] / ds[keep])) if np.any(keep) else 0.0


def velocity_lemma_report(alpha_logs, contiguous=None):
    """Extremal ``alpha(s)/alpha(0)`` and ``max |d log alpha| / ds`` per log.

    Each log is ``(s, alpha)``.  With ``contiguous`` set, the rate is fitted
    only over sample pairs at most that far apart, so gaps in a log (time spent
    away from the wall) are checked against the rate instead of defining it.
    """
    rows = []
    for s, alpha in alpha_logs:
        s = np.asarray(s, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        if alpha.size == 0:
            # a tracer that never entered the tube
            rows.append(LemmaRow(1.0, 1.0, 0.0))
            continue
        if np.any(alpha <= 0.0):
            raise SingularSetError("alpha log contains a nonpositive sample")
        ratio = alpha / alpha[0]
        rows.append(LemmaRow(float(ratio.min()), float(ratio.max()), _log_rate(s, alpha, contiguous)))
    return rows


def lemma_bound_holds(alpha_logs, rate, slack=1e-12):
    """Whether every log stays within ``exp(+-rate (s - s0))`` of its first sample."""
    for s, alpha in alpha_logs:
        s = np.asarray(s, dtype=float)
        if s.size == 0:
            continue
        lr = np.abs(np.log(np.asarray(alpha) / alpha[0]))
        if np.any(lr > rate * (s - s[0]) + slack):
            return False
    return True


# field along a trajectory --------------------------------------------------------

def _window_weights(times, t_end, window):
    times = np.asarray(times, dtype=float)
    tol = 1e-9 * max(1.0, abs(t_end))
    sel = np.nonzero((times >= t_end - window - tol) & (times <= t_end + tol))[0]
    if sel.size < 2:
        return sel, np.zeros(sel.size)
    ts = times[sel]
    w = np.zeros(sel.size)
    d = np.diff(ts)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return sel, w


def field_impulse(times, field_values, t_end, window):
    """Trapezoidal ``int |E| ds`` over the samples in ``[t_end - window, t_end]``.

    ``field_values`` holds the field vector at each sample time.
    """
    sel, w = _window_weights(times, t_end, window)
    if not sel.size:
        return 0.0
    mag = np.linalg.norm(np.asarray(field_values, dtype=float)[sel], axis=-1)
    return float(np.sum(w * mag))


def field_along(positions, field_states):
    """Field vectors at one position per snapshot."""
    return np.array([poisson.field_eval(f, p[None, :])[0] for p, f in zip(positions, field_states)])


def velocity_gap(times, velocities, t_end, window, v_plus=None):
    """``max_s min(|V(s) - V(t)|, |V(s) - V+(t)|)`` over the window."""
    sel, _ = _window_weights(times, t_end, window)
    V = np.asarray(velocities, dtype=float)[sel]
    vt = V[-1]
    gap = np.linalg.norm(V - vt, axis=1)
    if v_plus is not None:
        gap = np.minimum(gap, np.linalg.norm(V - np.asarray(v_plus), axis=1))
    return float(gap.max()) if gap.size else 0.0


# partition ---------------------------------------------------------------------

@dataclass
class PfaffelmoserPartition:
    Q: float
    delta: float
    c0: float
    P: float
    Delta: float
    R: float
    good_integral: float
    bad_integral: float
    ugly_integral: float
    remainder: float
    vhat: np.ndarray
    vhat_plus: np.ndarray

    @property
    def total(self):
        return self.good_integral + self.bad_integral + self.ugly_integral + self.remainder


def partition_scales(Q, delta=0.05, c0=0.1, R=None):
    """``(P, Delta, R)`` for a velocity bound ``Q``."""
    if Q < 1.0:
        raise OutOfRegimeError(f"the partition needs Q >= 1, got {Q}")
    P = Q ** (0.75 - delta)
    return P, c0 * P / Q**2, Q ** (1.0 - delta) if R is None else float(R)


def eps0(R, v, vhat, vhat_plus=None):
    """Near/far radius for markers whose velocity at the window end is ``v``.

    The second term is present when the reference trajectory reflected inside
    the window.
    """
    v = np.asarray(v, dtype=float)
    speed2 = np.sum(v * v, axis=-1)
    with np.errstate(divide="ignore"):
        inv = 1.0 / np.linalg.norm(v - vhat, axis=-1)
        if vhat_plus is not None:
            inv = inv + 1.0 / np.linalg.norm(v - vhat_plus, axis=-1)
        return R / speed2 * inv


def classify(w, y, xref, v_end, vhat, vhat_plus, P, R, bounced):
    """Membership codes 0 good, 1 bad, 2 ugly, 3 remainder for samples at one time."""
    big = ((np.linalg.norm(w, axis=-1) >= P) & (np.linalg.norm(w - vhat, axis=-1) >= P)
           & (np.linalg.norm(w - vhat_plus, axis=-1) >= P))
    small = ((np.linalg.norm(w, axis=-1) <= P) & (np.linalg.norm(w - vhat, axis=-1) <= P)
             & (np.linalg.norm(w - vhat_plus, axis=-1) <= P))
    e0 = eps0(R, v_end, vhat, vhat_plus if bounced else None)
    near = np.linalg.norm(y - xref, axis=-1) <= e0
    code = np.full(len(w), 3, dtype=np.int8)
    code[big & ~near] = 2
    code[big & near] = 1
    # the good test takes precedence on the measure-zero overlap |w| = P
    code[small] = 0
    return code


def pfaffelmoser_partition(times, ys, ws, charge, xref, v_end, vhat, vhat_plus, Q,
                           delta=0.05, c0=0.1, R=None, soften=0.0, exclude=None,
                           bounced=None):
    """Split ``int ds sum f w / |y - Xref(s)|^2`` over the window into the three sets.

    ``ys[k], ws[k]`` are marker positions and velocities at ``times[k]``;
    ``xref[k]`` is the reference position.  ``v_end`` are marker velocities at
    the window end.  ``soften`` regularises the kernel as ``1/(r^2 + soften^2)``
    and ``exclude`` drops one marker (the reference itself) from the sums.
    ``vhat_plus`` is the reference velocity before its last reflection in the
    window, or ``None`` when it did not reflect.
    """
    P, Delta, R = partition_scales(Q, delta, c0, R)
    vhat = np.asarray(vhat, dtype=float)
    if np.linalg.norm(vhat) < 1.0:
        raise OutOfRegimeError("the reference velocity must satisfy |V| >= 1")
    if bounced is None:
        bounced = vhat_plus is not None
    vp = vhat if vhat_plus is None else np.asarray(vhat_plus, dtype=float)
    times = np.asarray(times, dtype=float)
    wts = np.zeros(len(times))
    d = np.diff(times)
    wts[:-1] += 0.5 * d
    wts[1:] += 0.5 * d
    q = np.asarray(charge, dtype=float).copy()
    if exclude is not None:
        q[exclude] = 0.0
    sums = np.zeros(4)
    for k in range(len(times)):
        y, w = np.asarray(ys[k], dtype=float), np.asarray(ws[k], dtype=float)
        code = classify(w, y, xref[k], v_end, vhat, vp, P, R, bounced)
        kern = q / (np.sum((y - xref[k]) ** 2, axis=-1) + soften**2)
        sums += wts[k] * np.bincount(code, weights=kern, minlength=4)
    return PfaffelmoserPartition(float(Q), delta, c0, P, Delta, R, float(sums[0]), float(sums[1]),
                                 float(sums[2]), float(sums[3]), vhat, vp)


def partition_constants(part, kinetic):
    """``(good / (Delta P^{4/3}), bad / (R Delta log Q), ugly R / kinetic)``."""
    logq = np.log(part.Q)
    bad = part.bad_integral / (part.R * part.Delta * logq) if logq > 0.0 else float("inf")
    return (part.good_integral / (part.Delta * part.P ** (4.0 / 3.0)), bad,
            part.ugly_integral * part.R / kinetic)


def growth_exponent(q_values, rates):
    """Least-squares slope of ``log rate`` against ``log Q`` over positive rates."""
    q = np.asarray(q_values, dtype=float)
    r = np.asarray(rates, dtype=float)
    keep = (r > 0.0) & (q > 0.0)
    if np.count_nonzero(keep) < 2:
        return float("nan"), float("nan")
    slope, icept = np.polyfit(np.log(q[keep]), np.log(r[keep]), 1)
    return float(slope), float(np.exp(icept))


PARTITION_COLUMNS = ["t", "P", "Delta", "R", "good", "bad", "ugly", "remainder", "reference", "Q"]


def write_partition(rows, path):
    """``rows`` are ``(t, partition, reference)`` triples; one line each."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARTITION_COLUMNS)
        for t, p, ref in rows:
            w.writerow([repr(float(v)) for v in (t, p.P, p.Delta, p.R, p.good_integral,
                                                  p.bad_integral, p.ugly_integral, p.remainder)]
                       + [str(int(ref)), repr(float(p.Q))])
