"""The compiled kernels and the numpy fallback must agree to rounding."""

import numpy as np
import pytest

from vpconvex import geometry, kernels, poisson

BACKENDS = kernels.backends()
needs_both = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")

GRID = poisson.Grid(geometry.ConvexDomain.unit_ball(), 12)


def _points(n, seed=0, radius=0.98):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    return np.ascontiguousarray(d * radius * rng.uniform(0, 1, (n, 1)) ** (1 / 3))


def test_backend_name_is_consistent():
    assert kernels.BACKEND in BACKENDS
    assert "python" in BACKENDS


@needs_both
def test_interpolate_and_kick_agree():
    rng = np.random.default_rng(1)
    x = _points(500)
    E = np.ascontiguousarray(rng.normal(size=GRID.shape + (3,)))
    outs = []
    for mod in BACKENDS.values():
        out = np.empty_like(x)
        mod.interpolate(x, E, GRID.origin, GRID.h, out)
        v = np.ones_like(x)
        mod.kick(x, v, E, GRID.origin, GRID.h, 0.3)
        assert np.allclose(v, 1.0 + 0.3 * out, atol=1e-14)
        outs.append(out)
    assert np.allclose(outs[0], outs[1], atol=1e-13)


@needs_both
def test_spline_gradient_and_kick_agree():
    rng = np.random.default_rng(2)
    x = _points(500, 3)
    phi = np.ascontiguousarray(rng.normal(size=GRID.shape))
    outs = []
    for mod in BACKENDS.values():
        out = np.empty_like(x)
        mod.spline_gradient(x, phi, GRID.origin, GRID.h, out)
        v = np.zeros_like(x)
        mod.spline_kick(x, v, phi, GRID.origin, GRID.h, -0.5)
        assert np.allclose(v, -0.5 * out, atol=1e-13)
        outs.append(out)
    assert np.allclose(outs[0], outs[1], atol=1e-12)


@needs_both
@pytest.mark.parametrize("name", ["deposit", "spline_deposit"])
def test_deposits_agree(name):
    rng = np.random.default_rng(4)
    x = _points(800, 5)
    q = rng.uniform(0.1, 1.0, len(x))
    outs = []
    for mod in BACKENDS.values():
        out = np.zeros(GRID.size)
        lost = getattr(mod, name)(x, q, GRID.target, GRID.origin, GRID.h, *GRID.shape, out)
        assert lost == 0
        outs.append(out)
    assert np.allclose(outs[0], outs[1], atol=1e-13)
    assert outs[0].sum() == pytest.approx(q.sum(), rel=1e-13)


@needs_both
def test_reflecting_drift_agrees():
    rng = np.random.default_rng(6)
    axes = np.array([1.5, 1.0, 0.8])
    x0 = _points(400, 7, 0.7) * axes
    v0 = rng.normal(size=x0.shape) * 2.0
    results = []
    for mod in BACKENDS.values():
        x, v = x0.copy(), v0.copy()
        b = np.zeros(len(x), dtype=np.int64)
        last = np.full(len(x), -np.inf)
        pre = np.zeros_like(x)
        failed = mod.drift(x, v, 1.3, axes, b, 0.25, last, pre, 64)
        assert failed == -1
        results.append((x, v, b, last, pre))
    for a, c in zip(*results):
        assert np.allclose(a, c, atol=1e-12)
    x, v, b, last, _ = results[0]
    assert np.all(np.sum((x / axes) ** 2, axis=1) <= 1.0 + 1e-12)
    assert np.allclose(np.linalg.norm(v, axis=1), np.linalg.norm(v0, axis=1), rtol=1e-13)
    assert b.max() > 0
    assert np.all((last[b > 0] >= 0.25) & (last[b > 0] <= 1.55))


def test_spline_deposit_is_the_adjoint_of_interpolation():
    op = GRID.conservative
    rng = np.random.default_rng(8)
    x = _points(300, 9, 0.95)
    q = rng.normal(size=len(x))
    phi_int = rng.normal(size=op.cells.size)
    lhs = phi_int @ op.deposit(x, q)
    rhs = q @ op.potential(op.full(phi_int), x)
    assert lhs == pytest.approx(rhs, rel=1e-11)


def test_spline_gradient_is_the_derivative_of_the_potential():
    op = GRID.conservative
    rng = np.random.default_rng(10)
    phi = op.full(rng.normal(size=op.cells.size))
    x = _points(50, 11, 0.9)
    g = np.empty_like(x)
    kernels.spline_gradient(x, np.ascontiguousarray(phi), GRID.origin, GRID.h, g)
    eps = 1e-6
    for d in range(3):
        e = np.zeros(3)
        e[d] = eps
        fd = (op.potential(phi, x + e) - op.potential(phi, x - e)) / (2 * eps)
        assert np.allclose(g[:, d], fd, atol=1e-6 * np.abs(phi).max() / GRID.h)
