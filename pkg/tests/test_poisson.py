import numpy as np
import pytest

from vpconvex import geometry, poisson
from vpconvex.errors import CompatibilityError, DomainError

BALL = geometry.ConvexDomain.unit_ball()
G16 = poisson.Grid(BALL, 16)
G32 = poisson.Grid(BALL, 32)
UNIT = poisson.BoundaryFlux.uniform(1.0)


def _uniform_rho(grid, value=3.0):
    return np.where(grid.volume > 0.0, value, 0.0)


def test_cell_volumes_add_up_to_the_ball():
    assert G16.volume.sum() == pytest.approx(BALL.volume, rel=1e-12)


def test_deposit_conserves_charge_and_is_linear():
    x = np.array([[0.3, -0.2, 0.1]])
    rho = poisson.deposit_density(x, np.array([2.0]), G16)
    assert G16.integrate(rho) == pytest.approx(2.0, rel=1e-13)
    rho2 = poisson.deposit_density(np.vstack([x, x]), np.array([2.0, 2.0]), G16)
    assert np.allclose(rho2, 2.0 * rho)
    empty = poisson.deposit_density(np.zeros((0, 3)), np.zeros(0), G16)
    assert not np.any(empty)


def test_deposit_near_the_wall_keeps_charge():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(400, 3))
    x = 0.999 * d / np.linalg.norm(d, axis=1)[:, None]
    rho = poisson.deposit_density(x, np.ones(400), G16)
    assert G16.integrate(rho) == pytest.approx(400.0, rel=1e-12)


def test_compatibility_residual():
    assert poisson.check_compatibility(G16, _uniform_rho(G16), UNIT) == pytest.approx(0.0, abs=1e-10)
    res = poisson.check_compatibility(G16, _uniform_rho(G16), poisson.BoundaryFlux.uniform(2.0))
    assert res == pytest.approx(-4 * np.pi, rel=1e-10)
    zero = poisson.check_compatibility(G16, np.zeros(G16.shape), poisson.BoundaryFlux.uniform(0.0))
    assert zero == 0.0


def test_incompatible_data_is_rejected():
    with pytest.raises(CompatibilityError):
        poisson.solve_neumann(G16, _uniform_rho(G16), poisson.BoundaryFlux.uniform(2.0))


@pytest.mark.parametrize("scheme", ["ghost", "conservative"])
def test_uniform_ball_field_is_the_position(scheme):
    f = poisson.solve_neumann(G32, _uniform_rho(G32), UNIT, scheme=scheme)
    E = poisson.field_eval(f, np.array([[0.5, 0.0, 0.0], [0.0, -0.3, 0.4]]))
    assert np.allclose(E, [[0.5, 0.0, 0.0], [0.0, -0.3, 0.4]], atol=1e-2)
    # the wall value of the normal field reproduces h
    En = poisson.field_eval(f, np.array([[1.0, 0.0, 0.0]]))[0, 0]
    assert En == pytest.approx(1.0, abs=0.1)


@pytest.mark.parametrize("scheme", ["ghost", "conservative"])
def test_zero_data_gives_zero_field(scheme):
    f = poisson.solve_neumann(G16, np.zeros(G16.shape), poisson.BoundaryFlux.uniform(0.0),
                              scheme=scheme)
    assert not np.any(f.phi) and not np.any(f.E)


def test_uniform_ball_field_energy():
    f = poisson.solve_neumann(G32, _uniform_rho(G32), UNIT, scheme="conservative")
    # int |x|^2 over the unit ball
    assert f.field_energy() == pytest.approx(4 * np.pi / 5, rel=1e-3)


def test_field_eval_rejects_outside_points():
    f = poisson.FieldState.zero(G16)
    assert np.allclose(poisson.field_eval(f, np.array([[0.1, 0.2, 0.3]])), 0.0)
    with pytest.raises(DomainError):
        poisson.field_eval(f, np.array([[1.2, 0.0, 0.0]]))


def test_stiffness_matrix_structure():
    op = G16.conservative
    K = op.K
    assert abs(K - K.T).max() < 1e-14 * abs(K).max()
    assert np.abs(K @ np.ones(K.shape[0])).max() < 1e-9 * abs(K).max()
    assert op.vol.sum() == pytest.approx(BALL.volume, rel=1e-12)
    rng = np.random.default_rng(2)
    p = rng.normal(size=K.shape[0])
    assert p @ (K @ p) > 0.0


def test_spline_deposit_is_a_partition_of_unity():
    op = G16.conservative
    rng = np.random.default_rng(3)
    x = rng.uniform(-0.55, 0.55, (100, 3))
    b = op.deposit(x, np.ones(100))
    assert b.sum() == pytest.approx(100.0, rel=1e-13)


def test_conservative_energy_is_the_quadratic_form():
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.5, 0.5, (300, 3))
    q = np.full(300, 4 * np.pi / 300)
    rho = poisson.deposit_density(x, q, G16)
    load = G16.conservative.deposit(x, q)
    f = poisson.solve_neumann(G16, rho, UNIT, scheme="conservative", load=load)
    op = G16.conservative
    phi = f.phi.reshape(-1)[op.cells]
    assert f.field_energy() == pytest.approx(phi @ (op.K @ phi), rel=1e-14)
    # the Galerkin identity: phi^T K phi = phi . (H - b), the mean part dropping out
    rhs = op.wall_flux(UNIT) - load
    assert f.field_energy() == pytest.approx(phi @ rhs, rel=1e-7)


def test_green_response_decays_like_inverse_distance():
    consts = []
    for g in (G16, poisson.Grid(BALL, 24)):
        c = g.centres.reshape(-1, 3)
        src = int(np.argmin(np.linalg.norm(c - [0.2, 0.1, 0.0], axis=1)))
        phi, y = poisson.green_response(g, src)
        r = np.linalg.norm(c - y, axis=1)
        sel = g.inside.reshape(-1) & (r >= 2 * g.h)
        consts.append(np.max(np.abs(phi.reshape(-1)[sel]) * r[sel]))
    assert np.all(np.isfinite(consts))
    assert max(consts) / min(consts) <= 2.0


def test_tilted_flux_values():
    h = poisson.BoundaryFlux.tilted(0.5)
    assert h(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])).tolist() == [1.5, 0.5]
