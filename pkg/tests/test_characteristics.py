import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpconvex import characteristics as ch
from vpconvex import geometry, poisson
from vpconvex.errors import GrazingCascadeError, HistoryError, NonComparableError

BALL = geometry.ConvexDomain.unit_ball()
GRID = poisson.Grid(BALL, 12)
ZERO = poisson.FieldState.zero(GRID)
DOWN = poisson.FieldState.uniform(GRID, (0.0, 0.0, -1.0))


def test_free_drift_without_bounce():
    s = ch.advance(BALL, ch.TrajectoryState(np.zeros(3), np.array([1.0, 0.0, 0.0])), ZERO, 0.5)
    assert np.allclose(s.x, [0.5, 0.0, 0.0]) and s.bounces == 0


def test_diameter_chord_returns_reversed():
    s = ch.advance(BALL, ch.TrajectoryState(np.zeros(3), np.array([1.0, 0.0, 0.0])), ZERO, 2.0)
    assert np.allclose(s.x, 0.0, atol=1e-15)
    assert np.allclose(s.v, [-1.0, 0.0, 0.0])
    assert s.bounces == 1


def test_uniform_field_matches_closed_form():
    x0, v0 = np.array([0.1, 0.2, 0.0]), np.array([0.3, -0.1, 0.2])
    s = ch.TrajectoryState(x0, v0)
    for _ in range(10):
        s = ch.advance(BALL, s, DOWN, 0.05)
    t = 0.5
    assert np.allclose(s.x, x0 + v0 * t - [0, 0, t * t / 2], atol=1e-13)
    assert np.allclose(s.v, v0 - [0, 0, t], atol=1e-13)


def test_bounce_bookkeeping():
    ph = ch.PhaseArrays.new([[0.5, 0.0, 0.0]], [[1.0, 0.0, 0.0]])
    ch.drift(BALL, ph, 1.0, t0=2.0)
    assert ph.bounces[0] == 1
    assert ph.last_bounce[0] == pytest.approx(2.5)
    assert np.allclose(ph.v_pre[0], [1.0, 0.0, 0.0])


def test_trace_identity_and_backward_drift():
    H = ch.FieldHistory.constant(ZERO, 0.0, 4.0, 8)
    x, v = np.array([0.5, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])
    X, V, b = ch.trace(BALL, x, v, 1.0, 1.0, H)
    assert np.array_equal(X, x) and np.array_equal(V, v) and b == 0
    X, V, _ = ch.trace(BALL, x, v, 1.0, 0.0, H)
    assert np.allclose(X, [-0.5, 0.0, 0.0]) and np.allclose(V, [1.0, 0.0, 0.0])


def test_trace_round_trip_through_a_bounce():
    H = ch.FieldHistory.constant(ZERO, 0.0, 4.0, 8)
    x, v = np.array([0.3, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])
    X, V, b = ch.trace(BALL, x, v, 0.0, 2.0, H)
    assert b == 1
    X2, V2, _ = ch.trace(BALL, X, V, 2.0, 0.0, H)
    assert np.allclose(X2, x, atol=1e-8) and np.allclose(V2, v, atol=1e-8)


def test_trace_outside_history_is_rejected():
    H = ch.FieldHistory.constant(ZERO, 0.0, 1.0, 4)
    with pytest.raises(HistoryError):
        ch.trace(BALL, np.zeros(3), np.ones(3), 0.0, 2.0, H)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batch_round_trip_in_uniform_field(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.5, 0.5, (50, 3))
    v = rng.normal(size=(50, 3))
    H = ch.FieldHistory.constant(DOWN, 0.0, 1.0, 16)
    X, V, _ = ch.trace(BALL, x, v, 0.0, 1.0, H)
    assert np.all(BALL.level(X) <= 1e-12)
    X2, V2, _ = ch.trace(BALL, X, V, 1.0, 0.0, H)
    assert np.allclose(X2, x, atol=1e-8) and np.allclose(V2, v, atol=1e-8)


def test_speed_is_kept_by_reflections_in_zero_field():
    rng = np.random.default_rng(1)
    dom = geometry.ConvexDomain.ellipsoid(1.5, 1.0, 0.8)
    ph = ch.PhaseArrays.new(rng.uniform(-0.4, 0.4, (200, 3)), 3.0 * rng.normal(size=(200, 3)))
    speed = np.linalg.norm(ph.v, axis=1)
    ch.drift(dom, ph, 2.0)
    assert ph.bounces.max() > 1
    assert np.allclose(np.linalg.norm(ph.v, axis=1), speed, rtol=1e-13)


def test_grazing_cascade_is_reported():
    # nearly tangential motion just inside the wall bounces many times per step
    ph = ch.PhaseArrays.new([[0.0, 0.999999, 0.0]], [[1.0, 1e-4, 0.0]])
    with pytest.raises(GrazingCascadeError):
        ch.drift(BALL, ph, 10.0, max_bounces=8)


def test_liouville_ratios():
    r = ch.liouville_check(BALL, ZERO, [0.1, 0.2, 0.3], [0.4, 0.1, -0.2], 1e-4, 0.1, 0.5)
    assert r == pytest.approx(1.0, abs=1e-10)
    r = ch.liouville_check(BALL, ZERO, [0.5, 0.2, 0.3], [1.4, 0.1, -0.2], 1e-4, 0.1, 1.0)
    assert r == pytest.approx(1.0, abs=1e-3)
    r = ch.liouville_check(BALL, DOWN, [0.1, 0.2, 0.3], [0.4, 0.1, -0.2], 1e-4, 0.1, 0.5)
    assert r == pytest.approx(1.0, abs=1e-8)


def test_liouville_rejects_a_simplex_split_by_a_step_boundary():
    # the base vertex reaches the wall just after t = 0.1, the x-shifted one just before
    with pytest.raises(NonComparableError):
        ch.liouville_check(BALL, ZERO, [0.89995, 0.0, 0.0], [1.0, 0.0, 0.0], 1e-4, 0.1, 0.3)


def _parabola_with_bounce(x0, v0, E, T):
    # exact motion in a uniform field with one reflection off the unit sphere
    from scipy.optimize import brentq
    x0, v0, E = map(np.asarray, (x0, v0, E))
    pos = lambda t: x0 + v0 * t + 0.5 * E * t**2
    th = brentq(lambda t: pos(t) @ pos(t) - 1.0, 0.0, T)
    n = pos(th)
    vh = v0 + E * th
    vr = vh - 2.0 * (n @ vh) * n
    s = T - th
    return n + vr * s + 0.5 * E * s**2, vr + E * s


def test_bounce_repair_is_second_order_and_reversible():
    E = np.array([0.0, 0.0, -1.0])
    hit = np.array([0.3, 0.0, -np.sqrt(0.91)])
    vh = np.array([0.2, 0.1, -1.0])
    errs = {False: [], True: []}
    for dt in (0.2, 0.1):
        # start a quarter step before the hit so both steps meet the wall alike
        tau = dt / 4
        x0, v0 = hit - vh * tau + 0.5 * E * tau**2, vh - E * tau
        X, V = _parabola_with_bounce(x0, v0, E, dt)
        for repair in (False, True):
            ph = ch.PhaseArrays.new(x0, v0)
            ch.push(BALL, ph, DOWN, dt, repair=repair)
            assert ph.bounces[0] == 1
            errs[repair].append(np.abs(ph.v[0] - V).max())
    # one step across a reflection: O(dt) velocity error plain, O(dt^2) repaired
    assert errs[False][0] / errs[False][1] == pytest.approx(2.0, rel=0.2)
    assert errs[True][0] / errs[True][1] > 3.5
    x0, v0 = hit - vh * 0.05, vh
    ph = ch.PhaseArrays.new(x0, v0)
    ch.push(BALL, ph, DOWN, 0.2, repair=True)
    assert ph.bounces[0] == 1
    ch.push(BALL, ph, DOWN, -0.2, 0.2, repair=True)
    assert np.allclose(ph.x[0], x0, atol=1e-12) and np.allclose(ph.v[0], v0, atol=1e-12)


def test_field_history_midpoint_average():
    a = poisson.FieldState.uniform(GRID, (1.0, 0.0, 0.0))
    b = poisson.FieldState.uniform(GRID, (3.0, 0.0, 0.0))
    H = ch.FieldHistory(np.array([0.0, 1.0]), [a, b])
    assert np.allclose(H.step_field(0).E[..., 0], 2.0)
    assert H.step_index(0.0, True) == 0 and H.step_index(1.0, False) == 0


def test_alpha_samples_in_zero_field_match_the_definition():
    x = np.array([[0.95, 0.0, 0.0], [0.2, 0.0, 0.0]])
    v = np.array([[0.5, 0.3, 0.0], [1.0, 0.0, 0.0]])
    mask, alpha, beta, xp, vp = ch.alpha_samples(BALL, x, v, ZERO)
    assert mask.tolist() == [True, False]
    # zero field: F0 is the curvature term -|w|^2 on the unit sphere
    F0 = -0.3**2
    assert vp[0] == pytest.approx(-0.5)
    assert alpha[0] == pytest.approx(0.5 * 0.25 - F0 * 0.05, rel=1e-6)
    assert np.isnan(alpha[1])
