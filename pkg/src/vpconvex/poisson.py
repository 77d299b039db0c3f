"""Neumann problem ``lap(phi) = rho`` in the domain, ``d phi / d n = h`` on the wall.

Discretization on a uniform cell-centred grid covering the bounding box:

* unknowns are the potentials of cells whose centre lies inside the domain;
* interior equations use the 7-point Laplacian;
* a neighbour whose centre lies outside is a ghost.  Its value is the
  evaluation of a local quadratic fitted by weighted least squares to nearby
  interior values, with the Neumann condition imposed exactly at the ghost's
  foot point on the wall.  The fit reproduces quadratics, so the scheme is
  exact for quadratic potentials;
* the constant null space is removed by a Lagrange multiplier (a uniform
  shift of the density) together with the zero-mean gauge
  ``sum(phi * vol) = 0``.

The field ``E = grad(phi)`` is formed by centred differences at interior
cells and by the gradient of the local fit at the exterior cells that
trilinear interpolation of points in the closed domain can touch.

Cell volumes are exact cut-cell volumes; the volume of an exterior cut cell
is credited to its nearest interior cell, which is also where cloud-in-cell
deposition sends weight that lands outside.  Hence ``sum(rho * vol)`` equals
the deposited charge and approximates the integral over the domain.

A second, energy-conserving discretization (``scheme="conservative"``) is
used for time stepping: a Galerkin method in the space of quadratic B-splines
on the same grid (see ``ConservativeOperator``).  Charge is deposited with the
splines and the force on a marker is the exact gradient of the spline
potential.  Deposit and force are then adjoint, and kinetic plus field energy
is conserved by the semi-discrete particle system; only the time integrator
changes it.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage
from scipy.spatial import cKDTree

from . import geometry, kernels
from .errors import CompatibilityError, DomainError, IntegrityError, LinearSolveError

_FIT_NEIGHBOURS = 30
# interior cells up to which the bordered system is factorized directly
_DIRECT_LIMIT = 30000


@dataclass(frozen=True)
class BoundaryFlux:
    """Static wall data ``h``: ``scale * func(points)`` on boundary points."""

    func: object
    scale: float = 1.0
    label: str = "custom"

    def __call__(self, points):
        return self.scale * np.asarray(self.func(np.asarray(points, dtype=float)), dtype=float)

    def scaled(self, factor):
        return BoundaryFlux(self.func, self.scale * factor, self.label)

    @classmethod
    def uniform(cls, value=1.0):
        return cls(lambda p: np.ones(p.shape[:-1]), float(value), "uniform")

    @classmethod
    def tilted(cls, amplitude, axis=2, semi_axes=(1.0, 1.0, 1.0)):
        """``1 + amplitude * x_axis / a_axis``, positive for ``|amplitude| < 1``."""
        a = float(semi_axes[axis])
        return cls(lambda p: 1.0 + amplitude * p[..., axis] / a, 1.0, f"tilted{amplitude:g}")


def _cell_fractions(domain, lo, h, m=24):
    """Volume fraction of the domain inside the cubes ``[lo, lo + h]``.

    The chord of the ellipsoid along the coordinate axis best aligned with the
    local normal is integrated exactly; the remaining two directions use an
    ``m x m`` midpoint rule.
    """
    if len(lo) == 0:
        return np.zeros(0)
    axes = domain.axes
    centre = lo + 0.5 * h
    nrm = np.abs(domain.normal(centre))
    along = np.argmax(nrm, axis=1)
    frac = np.empty(len(lo))
    s = (np.arange(m) + 0.5) / m * h
    for ax in range(3):
        rows = np.nonzero(along == ax)[0]
        if rows.size == 0:
            continue
        o1, o2 = [k for k in range(3) if k != ax]
        for chunk in np.array_split(rows, max(1, rows.size // 2000)):
            p1 = lo[chunk, o1][:, None, None] + s[None, :, None]
            p2 = lo[chunk, o2][:, None, None] + s[None, None, :]
            r = 1.0 - (p1 / axes[o1]) ** 2 - (p2 / axes[o2]) ** 2
            half = axes[ax] * np.sqrt(np.maximum(r, 0.0))
            z0 = lo[chunk, ax][:, None, None]
            top = np.minimum(z0 + h, half)
            bot = np.maximum(z0, -half)
            chord = np.where(r > 0.0, np.maximum(top - bot, 0.0), 0.0)
            frac[chunk] = chord.mean(axis=(1, 2)) / h
    return frac


def _face_apertures(domain, axis, lo, h, m=24):
    """Area fraction of the domain on the square faces ``{x_axis = lo_axis} x [lo, lo + h]^2``.

    The chord of the ellipse cross-section along one in-plane axis is exact;
    the other in-plane axis uses an ``m``-point midpoint rule.
    """
    if len(lo) == 0:
        return np.zeros(0)
    axes = domain.axes
    o1, o2 = [k for k in range(3) if k != axis]
    s = (np.arange(m) + 0.5) / m * h
    out = np.empty(len(lo))
    for chunk in np.array_split(np.arange(len(lo)), max(1, len(lo) // 20000)):
        p1 = lo[chunk, o1][:, None] + s[None, :]
        r = 1.0 - (lo[chunk, axis][:, None] / axes[axis]) ** 2 - (p1 / axes[o1]) ** 2
        half = axes[o2] * np.sqrt(np.maximum(r, 0.0))
        z0 = lo[chunk, o2][:, None]
        chord = np.where(r > 0.0, np.maximum(np.minimum(z0 + h, half) - np.maximum(z0, -half), 0.0), 0.0)
        out[chunk] = chord.mean(axis=1) / h
    return out


class Grid:
    """Uniform cell-centred grid over the bounding box, plus cut-cell data."""

    def __init__(self, domain, n, pad=3):
        self.domain = domain
        self.n = int(n)
        axes = domain.axes
        self.h = h = 2.0 * axes.max() / self.n
        half = np.ceil(axes / h - 1e-9).astype(int) + pad
        self.shape = tuple(int(2 * k) for k in half)
        self.origin = -half * h
        self.axis_centres = [self.origin[d] + (np.arange(self.shape[d]) + 0.5) * h for d in range(3)]
        X, Y, Z = np.meshgrid(*self.axis_centres, indexing="ij")
        self.centres = np.stack([X, Y, Z], axis=-1)
        self.inside = domain.level(self.centres) < 0.0
        self._build_volumes()
        self._operator = None
        self._conservative = None

    @property
    def size(self):
        return int(np.prod(self.shape))

    def _build_volumes(self):
        h = self.h
        c = self.centres.reshape(-1, 3)
        lvl = self.domain.level(c)
        grad = np.linalg.norm(2.0 * c / self.domain.axes**2, axis=1)
        approx = np.abs(lvl) / np.maximum(grad, 1e-300)
        near = np.nonzero(approx < 3.0 * h)[0]
        _, dist = geometry.nearest_boundary(self.domain, c[near])
        self.wall_distance = np.where(lvl < 0.0, np.inf, -np.inf)
        self.wall_distance[near] = dist
        cut = near[np.abs(dist) < 0.87 * h]
        frac = np.where(lvl < 0.0, 1.0, 0.0)
        frac[cut] = _cell_fractions(self.domain, c[cut] - 0.5 * h, h)
        # the quadrature error of the cut fractions is removed globally so that
        # the cell volumes add up to the exact volume of the ellipsoid
        full = float(frac.sum() - frac[cut].sum())
        frac[cut] *= (self.domain.volume / h**3 - full) / frac[cut].sum()
        self.fraction = frac.reshape(self.shape)

        inside = self.inside
        _, idx = ndimage.distance_transform_edt(~inside, return_indices=True)
        owner = np.ravel_multi_index(tuple(idx), self.shape)
        self.target = owner.reshape(-1).astype(np.int64)
        vol = np.zeros(self.size)
        np.add.at(vol, self.target, frac * h**3)
        self.volume = np.where(inside.reshape(-1), vol, 0.0).reshape(self.shape)

    @property
    def operator(self):
        if self._operator is None:
            self._operator = NeumannOperator(self)
        return self._operator

    @property
    def conservative(self):
        if self._conservative is None:
            self._conservative = ConservativeOperator(self)
        return self._conservative

    def operator_for(self, scheme):
        if scheme == "ghost":
            return self.operator
        if scheme == "conservative":
            return self.conservative
        raise ValueError(f"unknown Poisson scheme {scheme!r}")

    @property
    def quadrature(self):
        if not hasattr(self, "_quad"):
            self._quad = geometry.boundary_quadrature(self.domain)
        return self._quad

    def integrate(self, rho):
        """``sum(rho * vol)`` over interior cells."""
        return float(np.sum(np.asarray(rho) * self.volume))


def _basis(xi):
    x, y, z = xi[..., 0], xi[..., 1], xi[..., 2]
    one = np.ones_like(x)
    return np.stack([one, x, y, z, x * x, y * y, z * z, x * y, x * z, y * z], axis=-1)


def _basis_grad(xi):
    x, y, z = xi[..., 0], xi[..., 1], xi[..., 2]
    zero, one = np.zeros_like(x), np.ones_like(x)
    gx = np.stack([zero, one, zero, zero, 2 * x, zero, zero, y, z, zero], axis=-1)
    gy = np.stack([zero, zero, one, zero, zero, 2 * y, zero, x, zero, z], axis=-1)
    gz = np.stack([zero, zero, zero, one, zero, zero, 2 * z, zero, x, y], axis=-1)
    return np.stack([gx, gy, gz], axis=-2)


class NeumannOperator:
    """Assembled and factorized discrete Neumann problem for one grid."""

    scheme = "ghost"

    def __init__(self, grid):
        self.grid = grid
        h = grid.h
        inside = grid.inside.reshape(-1)
        self.cells = np.nonzero(inside)[0]
        n_int = self.cells.size
        self.index = np.full(grid.size, -1, dtype=np.int64)
        self.index[self.cells] = np.arange(n_int)
        tree = cKDTree(grid.centres.reshape(-1, 3)[self.cells])

        # neighbour table of interior cells
        ijk = np.array(np.unravel_index(self.cells, grid.shape)).T
        nbr = np.empty((n_int, 6), dtype=np.int64)
        for d in range(3):
            for s, col in ((1, 2 * d), (-1, 2 * d + 1)):
                o = ijk.copy()
                o[:, d] += s
                nbr[:, col] = np.ravel_multi_index(tuple(o.T), grid.shape)
        self.ghosts = np.unique(nbr[~inside[nbr]])
        ghost_id = np.full(grid.size, -1, dtype=np.int64)
        ghost_id[self.ghosts] = np.arange(self.ghosts.size)

        # exterior cells reachable by trilinear interpolation from the closed domain
        band = np.nonzero(~inside & (grid.wall_distance >= -1.8 * h))[0]
        self.band = np.union1d(band, self.ghosts)

        g_val, g_h, _, _ = self._fit(tree, self.ghosts, want_grad=False)
        b_val, b_hv, b_grad, b_hg = self._fit(tree, self.band, want_grad=True)
        self.ghost_coef, self.ghost_h = g_val, g_h
        self.band_grad, self.band_grad_h = b_grad, b_hg

        # Laplacian with ghosts eliminated
        rows, cols, vals = [np.arange(n_int)], [np.arange(n_int)], [np.full(n_int, -6.0 / h**2)]
        gh_rows, gh_cols = [], []
        for col in range(6):
            j = nbr[:, col]
            isin = inside[j]
            rows.append(np.nonzero(isin)[0])
            cols.append(self.index[j[isin]])
            vals.append(np.full(int(isin.sum()), 1.0 / h**2))
            gh_rows.append(np.nonzero(~isin)[0])
            gh_cols.append(ghost_id[j[~isin]])
        lap_int = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_int, n_int)
        )
        gr, gc = np.concatenate(gh_rows), np.concatenate(gh_cols)
        lap_gh = sp.csr_matrix((np.full(gr.size, 1.0 / h**2), (gr, gc)), shape=(n_int, self.ghosts.size))
        self.A = (lap_int + lap_gh @ self.ghost_coef).tocsr()
        self.lap_gh = lap_gh

        # centred differences with ghosts eliminated
        self.grad_int = []
        self.grad_int_h = []
        for d in range(3):
            rows, cols, vals = [], [], []
            g_rows, g_cols, g_vals = [], [], []
            for col, sign in ((2 * d, 0.5 / h), (2 * d + 1, -0.5 / h)):
                j = nbr[:, col]
                isin = inside[j]
                rows.append(np.nonzero(isin)[0])
                cols.append(self.index[j[isin]])
                vals.append(np.full(int(isin.sum()), sign))
                g_rows.append(np.nonzero(~isin)[0])
                g_cols.append(ghost_id[j[~isin]])
                g_vals.append(np.full(int((~isin).sum()), sign))
            D = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n_int, n_int))
            Dg = sp.csr_matrix((np.concatenate(g_vals), (np.concatenate(g_rows), np.concatenate(g_cols))),
                               shape=(n_int, self.ghosts.size))
            self.grad_int.append((D + Dg @ self.ghost_coef).tocsr())
            self.grad_int_h.append(Dg)

        # bordered system: [A 1; vol^T 0]
        self.vol = grid.volume.reshape(-1)[self.cells]
        self.system = _Bordered(self.A, self.vol, h)
        self._h_cache = {}

    def _fit(self, tree, targets, want_grad):
        """Constrained least-squares coefficients for the target cells.

        Returns sparse matrices mapping interior potentials to target values
        (and gradients), and dense vectors of the coefficient multiplying the
        wall data at each target's foot point.
        """
        grid = self.grid
        h = grid.h
        n_int = self.cells.size
        pts = grid.centres.reshape(-1, 3)[targets]
        foot, _ = geometry.nearest_boundary(grid.domain, pts)
        nrm = grid.domain.normal(foot)
        _, nb = tree.query(foot, k=_FIT_NEIGHBOURS)
        data = grid.centres.reshape(-1, 3)[self.cells[nb]]
        xi = (data - foot[:, None, :]) / h
        V = _basis(xi)
        wt = 1.0 / (1.0 + np.sum(xi**2, axis=-1)) ** 2
        nt = targets.size
        K = np.zeros((nt, 11, 11))
        K[:, :10, :10] = np.einsum("tki,tk,tkj->tij", V, wt, V)
        K[:, 10, 1:4] = nrm
        K[:, 1:4, 10] = nrm
        # rhs for data: [V^T W, 0]; rhs for wall value: h * e_10
        R = np.zeros((nt, 11, _FIT_NEIGHBOURS + 1))
        R[:, :10, :_FIT_NEIGHBOURS] = np.transpose(V * wt[..., None], (0, 2, 1))
        R[:, 10, _FIT_NEIGHBOURS] = h
        C = np.linalg.solve(K, R)[:, :10, :]
        xt = (pts - foot) / h
        ev = np.einsum("ti,tij->tj", _basis(xt), C)
        rows = np.repeat(np.arange(nt), _FIT_NEIGHBOURS)
        val = sp.csr_matrix((ev[:, :-1].reshape(-1), (rows, nb.reshape(-1))), shape=(nt, n_int))
        if targets is self.ghosts:
            self.ghost_foot = foot
        else:
            self.band_foot = foot
        if not want_grad:
            return val, ev[:, -1], None, None
        gr = np.einsum("tdi,tij->tdj", _basis_grad(xt), C) / h
        grads = [
            sp.csr_matrix((gr[:, d, :-1].reshape(-1), (rows, nb.reshape(-1))), shape=(nt, n_int))
            for d in range(3)
        ]
        return val, ev[:, -1], grads, gr[:, :, -1]

    def wall_values(self, flux):
        key = id(flux)
        hit = self._h_cache.get(key)
        if hit is None or hit[0] is not flux:
            hit = (flux, flux(self.ghost_foot), flux(self.band_foot))
            self._h_cache = {key: hit}
        return hit[1], hit[2]

    def solve(self, rho_int, flux, tol=1e-10, max_iter=500):
        """Potential on interior cells and the multiplier ``lam``.

        Small systems use the sparse LU factors with iterative refinement;
        large ones use restarted GMRES preconditioned by incomplete LU.  In
        both cases the relative residual of the bordered system must fall
        below ``tol`` within ``max_iter`` iterations.
        """
        hg, _ = self.wall_values(flux)
        return self.system.solve(rho_int - self.lap_gh @ (self.ghost_h * hg), tol, max_iter)

    def field(self, phi_int, flux):
        """Grid arrays ``phi`` (interior and ghost cells) and ``E``."""
        grid = self.grid
        hg, hb = self.wall_values(flux)
        phi = np.zeros(grid.size)
        phi[self.cells] = phi_int
        phi[self.ghosts] = self.ghost_coef @ phi_int + self.ghost_h * hg
        E = np.zeros((grid.size, 3))
        for d in range(3):
            E[self.cells, d] = self.grad_int[d] @ phi_int + self.grad_int_h[d] @ (self.ghost_h * hg)
            E[self.band, d] = self.band_grad[d] @ phi_int + self.band_grad_h[:, d] * hb
        return phi.reshape(grid.shape), E.reshape(grid.shape + (3,))



class _Bordered:
    """Factorized bordered system ``[A, c; vol^T/sum(vol), 0]``.

    The multiplier column ``c`` defaults to ``1/h^2``.
    """

    def __init__(self, A, vol, h, column=None):
        n = A.shape[0]
        self.n, self.h = n, h
        col = (np.ones(n) / h**2 if column is None else np.asarray(column)).reshape(n, 1)
        self.col_scale = 1.0 if column is None else h**2
        K = sp.bmat([[A, sp.csr_matrix(col)], [sp.csr_matrix((vol / vol.sum())[None, :]), None]],
                    format="csc")
        self.K = K.tocsr()
        if n <= _DIRECT_LIMIT:
            self.lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
            self.precond = None
        else:
            self.lu = None
            ilu = spla.spilu(K, drop_tol=1e-3, fill_factor=5, permc_spec="COLAMD")
            self.precond = spla.LinearOperator(K.shape, ilu.solve)

    def solve(self, b, tol, max_iter):
        n = self.n
        rhs = np.zeros(n + 1)
        rhs[:n] = b
        scale = np.linalg.norm(rhs)
        if scale == 0.0:
            return np.zeros(n), 0.0
        if self.lu is not None:
            sol = self.lu.solve(rhs)
            res = rhs - self.K @ sol
            it = 0
            while np.linalg.norm(res) > tol * scale and it < max_iter:
                sol += self.lu.solve(res)
                res = rhs - self.K @ sol
                it += 1
        else:
            restart = min(100, max_iter)
            sol, _ = spla.gmres(self.K, rhs, M=self.precond, rtol=tol, atol=0.0,
                                restart=restart, maxiter=max(1, -(-max_iter // restart)))
            res = rhs - self.K @ sol
        rel = np.linalg.norm(res) / scale
        if rel > tol and rel > 1e-12:
            raise LinearSolveError(f"Neumann solve stagnated: relative residual {rel:.3e}")
        return sol[:n], sol[n] * self.col_scale / self.h**2


class _SplineSystem:
    """``K phi = r + lam M`` for a stiffness ``K`` whose kernel is the constants.

    ``lam`` makes the right side compatible and the gauge is ``M . phi = 0``.
    Jacobi-preconditioned conjugate gradients started from the previous
    solution; in time stepping that start is one step old, which beats an
    algebraic multigrid preconditioner on this wide stencil.
    """

    def __init__(self, K, mass):
        self.K = K
        self.mass = mass
        inv_diag = 1.0 / K.diagonal()
        total = float(mass.sum())

        # P = I - 1 m^T / sum(m) removes the null space in the gauge M . phi = 0;
        # P D^-1 P^T keeps the preconditioner symmetric
        def apply(r):
            z = inv_diag * (r - mass * (r.sum() / total))
            return z - (mass @ z) / total

        self.M = spla.LinearOperator(K.shape, apply, dtype=float)
        self.history = []

    def solve(self, r, tol, max_iter, scale=None):
        """``scale`` sets the size the residual is measured against (default ``|r|``)."""
        total = float(self.mass.sum())
        lam = -float(r.sum()) / total
        rhs = r + lam * self.mass
        scale = np.linalg.norm(rhs) if scale is None else max(scale, np.linalg.norm(rhs))
        if scale == 0.0:
            return np.zeros_like(rhs), lam
        # consecutive solves in a time loop change smoothly; start from the
        # polynomial extrapolation of the last three
        h = self.history
        if len(h) == 3:
            x0 = 3.0 * (h[2] - h[1]) + h[0]
        elif len(h) == 2:
            x0 = 2.0 * h[1] - h[0]
        else:
            x0 = h[-1] if h else np.zeros_like(rhs)
        sol, info = spla.cg(self.K, rhs, x0=x0, rtol=0.0, atol=tol * scale,
                            maxiter=max_iter, M=self.M)
        sol -= (self.mass @ sol) / total
        rel = np.linalg.norm(rhs - self.K @ sol) / scale
        if rel > max(tol, 1e-12) * 10.0:
            raise LinearSolveError(f"spline Neumann solve stagnated: relative residual {rel:.3e}")
        self.history = self.history[-2:] + [sol]
        return sol, lam


def _gauss(m, order):
    """Composite Gauss nodes and weights on ``[0, 1]`` with ``m`` panels."""
    x, w = np.polynomial.legendre.leggauss(order)
    nodes = ((np.arange(m)[:, None] + 0.5 * (x + 1.0)) / m).reshape(-1)
    return nodes, np.tile(0.5 * w / m, m)


def _local_splines(s):
    """Values and ``d/ds`` of the three quadratic splines alive in a cell, at local ``s``."""
    val = np.stack([0.5 * (1.0 - s) ** 2, 0.75 - (s - 0.5) ** 2, 0.5 * s**2], axis=-1)
    der = np.stack([s - 1.0, 1.0 - 2.0 * s, s], axis=-1)
    return val, der


def _cell_tables(nodes):
    """Per-point spline values and stiffness products for a tensor point set.

    Returns ``S`` of shape ``(p, 27)`` and ``G`` of shape ``(p, 27, 27)`` with
    ``G = sum_d dS_a/ds_d * dS_b/ds_d``.
    """
    val, der = _local_splines(nodes)
    V = [val, val, val]
    S = np.einsum("ia,jb,kc->ijkabc", *V).reshape(-1, 27)
    grads = []
    for d in range(3):
        f = [der if e == d else val for e in range(3)]
        grads.append(np.einsum("ia,jb,kc->ijkabc", *f).reshape(-1, 27))
    G = sum(np.einsum("pa,pb->pab", g, g) for g in grads)
    return S, G


class ConservativeOperator:
    """Galerkin Neumann problem in the space of quadratic B-splines.

    The potential is ``phi_h = sum_c phi_c S_c`` with ``S_c`` the tensor
    quadratic spline centred on cell ``c``.  The discrete problem is
    ``K phi = H - b + lam M`` with the stiffness ``K_cd = int grad S_c . grad S_d``
    over the domain, ``b_c = sum_p q_p S_c(x_p)`` the spline deposit,
    ``H_c = int h S_c dS`` and ``M_c = int S_c``.  Markers feel
    ``grad phi_h``, the adjoint of the deposit, and the field energy is
    ``phi^T K phi = int |grad phi_h|^2``, so kinetic plus field energy is
    conserved along the semi-discrete flow.  Integrals over cut cells use
    composite Gauss points masked by the domain, rescaled to the cut volume.
    """

    scheme = "conservative"

    def __init__(self, grid, panels=4, mass_floor=1e-3):
        self.grid = grid
        h = grid.h
        shape = grid.shape
        frac = grid.fraction.reshape(-1)
        full = np.nonzero(frac >= 1.0)[0]
        cut = np.nonzero((frac > 0.0) & (frac < 1.0))[0]
        strides = np.array([shape[1] * shape[2], shape[2], 1])
        offs = np.array([np.dot(strides, np.array(a) - 1) for a in np.ndindex(3, 3, 3)])

        nodes, wts = _gauss(1, 3)
        S_f, G_f = _cell_tables(nodes)
        w_f = np.einsum("i,j,k->ijk", wts, wts, wts).reshape(-1)
        K_full = h * np.einsum("p,pab->ab", w_f, G_f)
        M_full = h**3 * (w_f @ S_f)

        nodes, wts = _gauss(panels, 2)
        S_c, G_c = _cell_tables(nodes)
        w_c = np.einsum("i,j,k->ijk", wts, wts, wts).reshape(-1)
        lo = grid.centres.reshape(-1, 3)[cut] - 0.5 * h
        grid_pts = np.stack(np.meshgrid(nodes, nodes, nodes, indexing="ij"), -1).reshape(-1, 3) * h
        W = np.empty((cut.size, w_c.size))
        for s in range(0, cut.size, 512):
            pts = lo[s:s + 512, None, :] + grid_pts[None]
            W[s:s + 512] = (grid.domain.level(pts) < 0.0) * w_c
        tot = W.sum(axis=1)
        W *= np.where(tot > 0.0, frac[cut] / np.maximum(tot, 1e-300), 0.0)[:, None]
        K_cut = h * (W @ G_c.reshape(w_c.size, -1))
        M_cut = h**3 * (W @ S_c)

        self._full, self._cut, self._offs = full, cut, offs
        self._M_full, self._M_cut = M_full, M_cut
        size = grid.size
        mass = np.zeros(size)
        for a in range(27):
            mass += np.bincount(full + offs[a], minlength=size) * M_full[a]
            mass += np.bincount(cut + offs[a], M_cut[:, a], minlength=size)
        live = np.nonzero(mass > 0.0)[0]
        live_index = np.full(size, -1, dtype=np.int64)
        live_index[live] = np.arange(live.size)

        # full cells share one element matrix; cut cells are added one by one
        n = live.size
        K = sp.csr_matrix((n, n))
        for a in range(27):
            ra = live_index[full + offs[a]]
            c = np.concatenate([live_index[full + offs[b]] for b in range(27)])
            v = np.repeat(K_full[a], full.size)
            r = np.tile(ra, 27)
            K = K + sp.csr_matrix((v, (r, c)), shape=(n, n))
        ia = live_index[cut[:, None] + offs[None, :]]
        r = np.repeat(ia, 27, axis=1).reshape(-1)
        c = np.tile(ia, (1, 27)).reshape(-1)
        keep = (r >= 0) & (c >= 0)
        K = K + sp.csr_matrix((K_cut.reshape(-1)[keep], (r[keep], c[keep])), shape=(n, n))

        # splines with little support in the domain are merged into the
        # nearest kept one (their coefficient is copied from it); the deposit,
        # the stiffness and the force all use the merged basis
        kept = np.zeros(size, dtype=bool)
        kept[live[mass[live] > mass_floor * h**3]] = True
        _, idx = ndimage.distance_transform_edt(~kept.reshape(shape), return_indices=True)
        self.target = np.ravel_multi_index(tuple(idx), shape).reshape(-1).astype(np.int64)
        self.cells = np.nonzero(kept)[0]
        self.index = np.full(size, -1, dtype=np.int64)
        self.index[self.cells] = np.arange(self.cells.size)
        P = sp.csr_matrix((np.ones(n), (np.arange(n), self.index[self.target[live]])),
                          shape=(n, self.cells.size))
        K = (P.T @ K @ P).tocsr()
        K.sum_duplicates()
        self.K = K
        self.vol = P.T @ mass[live]
        self.system = _SplineSystem(K, self.vol)

        n_theta = max(48, 4 * grid.n)
        self.quad = geometry.boundary_quadrature(grid.domain, n_theta, 2 * n_theta)
        self._h_cache = (None, None)

    def _spread(self, x, weights):
        q = np.zeros(self.grid.size)
        g = self.grid
        lost = kernels.spline_deposit(np.ascontiguousarray(x, dtype=float),
                                      np.ascontiguousarray(weights, dtype=float),
                                      self.target, g.origin, g.h, *g.shape, q)
        if lost:
            raise IntegrityError(f"{lost} deposition weights fell outside the grid band")
        return q[self.cells]

    def deposit(self, x, charge):
        """Load vector ``b_c = sum_p q_p S_c(x_p)``."""
        return self._spread(x, charge)

    def wall_flux(self, flux):
        """``H_c = int h S_c dS`` from a fine spectral quadrature of ``h``."""
        if self._h_cache[0] is not flux:
            H = self._spread(self.quad.points, flux(self.quad.points) * self.quad.weights)
            self._h_cache = (flux, H)
        return self._h_cache[1]

    def load_from_density(self, rho):
        """``b_c = int rho S_c`` for a cell density (cut pieces carry their owner's value)."""
        r = np.asarray(rho, dtype=float).reshape(-1)[self.grid.target]
        b = np.zeros(self.grid.size)
        size = self.grid.size
        for a in range(27):
            b += np.bincount(self._full + self._offs[a], r[self._full] * self._M_full[a], size)
            b += np.bincount(self._cut + self._offs[a], r[self._cut] * self._M_cut[:, a], size)
        return np.bincount(self.target, b, size)[self.cells]

    def solve(self, rho, flux, tol=1e-10, max_iter=500, load=None):
        """Spline coefficients and the multiplier of the null space.

        ``rho`` is the density grid; ``load``, when given, is the deposited
        vector ``b`` and takes its place.
        """
        b = self.load_from_density(rho) if load is None else load
        H = self.wall_flux(flux)
        # H and b nearly cancel; the residual is measured against their size
        return self.system.solve(H - b, tol, max_iter, scale=np.linalg.norm(H) + np.linalg.norm(b))

    def full(self, phi_int):
        """Grid array of spline coefficients, dropped splines copied from their target."""
        out = np.zeros(self.grid.size)
        out[self.cells] = phi_int
        return out[self.target].reshape(self.grid.shape)

    def field(self, phi_int, flux=None):
        grid = self.grid
        phi = self.full(phi_int)
        E = np.zeros((grid.size, 3))
        sel = np.nonzero(grid.fraction.reshape(-1) > 0.0)[0]
        out = np.empty((sel.size, 3))
        pts = grid.centres.reshape(-1, 3)[sel]
        # cut cells whose centre lies outside report the field at the wall
        outside = grid.domain.level(pts) > 0.0
        if np.any(outside):
            pts[outside] = geometry.nearest_boundary(grid.domain, pts[outside])[0]
        kernels.spline_gradient(np.ascontiguousarray(pts), phi, grid.origin, grid.h, out)
        E[sel] = out
        return phi, E.reshape(grid.shape + (3,))

    def potential(self, phi, pts):
        """``phi_h`` at points, from the coefficient grid."""
        g = self.grid
        s = (np.asarray(pts, dtype=float) - g.origin) / g.h - 0.5
        k = np.clip(np.floor(s + 0.5).astype(np.int64), 1, np.array(g.shape) - 2)
        d = np.clip(s - k, -0.5, 0.5)
        w = np.stack([0.5 * (0.5 - d) ** 2, 0.75 - d * d, 0.5 * (0.5 + d) ** 2], axis=-1)
        out = np.zeros(len(s))
        for a, b, c in np.ndindex(3, 3, 3):
            out += (w[:, 0, a] * w[:, 1, b] * w[:, 2, c]
                    * phi[k[:, 0] - 1 + a, k[:, 1] - 1 + b, k[:, 2] - 1 + c])
        return out

    def energy(self, phi_int):
        """``int |grad phi_h|^2`` over the domain."""
        return float(phi_int @ (self.K @ phi_int))

@dataclass
class FieldState:
    """Solved field on a grid.

    With the ghost scheme markers feel the trilinear interpolant of ``E``;
    with the conservative scheme they feel the gradient of the spline
    interpolant of ``phi`` and ``E`` holds that gradient at cell centres.
    """

    grid: Grid
    rho: np.ndarray
    phi: np.ndarray
    E: np.ndarray
    h: BoundaryFlux
    lam: float = 0.0
    info: dict = field(default_factory=dict)
    scheme: str = "ghost"

    @classmethod
    def zero(cls, grid, h=None):
        z = np.zeros(grid.shape)
        return cls(grid, z, z.copy(), np.zeros(grid.shape + (3,)), h or BoundaryFlux.uniform(0.0))

    @classmethod
    def uniform(cls, grid, vector):
        E = np.zeros(grid.shape + (3,))
        E[...] = np.asarray(vector, dtype=float)
        return cls(grid, np.zeros(grid.shape), np.zeros(grid.shape), E, BoundaryFlux.uniform(0.0))

    def field_energy(self):
        """Discrete ``int |E|^2 dx``.

        Ghost scheme: ``sum |E|^2 * vol`` over every cell that meets the
        domain.  Conservative scheme: ``int |grad phi_h|^2`` of the spline
        potential, exactly.
        """
        if self.scheme == "conservative":
            op = self.grid.conservative
            return op.energy(self.phi.reshape(-1)[op.cells])
        frac = self.grid.fraction
        return float(np.sum(np.sum(self.E**2, axis=-1) * frac) * self.grid.h**3)

    def force(self, pts, out):
        """Field felt by markers at ``pts`` (C-contiguous ``(n, 3)``) into ``out``."""
        g = self.grid
        if self.scheme == "conservative":
            kernels.spline_gradient(pts, np.ascontiguousarray(self.phi), g.origin, g.h, out)
        else:
            kernels.interpolate(pts, np.ascontiguousarray(self.E), g.origin, g.h, out)

    def accelerate(self, x, v, dt):
        """``v += dt * force(x)`` in place."""
        g = self.grid
        if self.scheme == "conservative":
            kernels.spline_kick(x, v, np.ascontiguousarray(self.phi), g.origin, g.h, dt)
        else:
            kernels.kick(x, v, np.ascontiguousarray(self.E), g.origin, g.h, dt)

    def averaged(self, other):
        """Field whose grids are the mean of ``self`` and ``other`` (same grid)."""
        return FieldState(
            self.grid,
            0.5 * (self.rho + other.rho),
            0.5 * (self.phi + other.phi),
            0.5 * (self.E + other.E),
            self.h,
            0.5 * (self.lam + other.lam),
            scheme=self.scheme,
        )


def deposit_density(x, charge, grid, tol=1e-9):
    """Cloud-in-cell density from markers at ``x`` carrying ``charge = f * weight``."""
    x = np.ascontiguousarray(x, dtype=float).reshape(-1, 3)
    charge = np.ascontiguousarray(charge, dtype=float).reshape(-1)
    if x.shape[0] and np.max(grid.domain.level(x)) > tol:
        raise IntegrityError("marker outside the closed domain during deposition")
    vol = grid.volume.reshape(-1)
    q = np.zeros(grid.size)
    lost = kernels.deposit(x, charge, grid.target, grid.origin, grid.h, *grid.shape, q)
    if lost:
        raise IntegrityError(f"{lost} deposition weights fell outside the grid band")
    rho = np.zeros(grid.size)
    ok = vol > 0.0
    rho[ok] = q[ok] / vol[ok]
    return rho.reshape(grid.shape)


def check_compatibility(grid, rho, h):
    """``int rho dx - int h dS`` with the grid volumes and boundary quadrature."""
    quad = grid.quadrature
    return grid.integrate(rho) - quad.integrate(h(quad.points))


def solve_neumann(grid, rho, h, tol=1e-10, max_iter=500, compat_tol=1e-8, scheme="ghost",
                  load=None):
    """Solve the Neumann problem for density grid ``rho`` and wall data ``h``.

    ``load`` is the spline deposit of the markers behind ``rho``; the
    conservative scheme uses it in place of ``rho`` when given.
    """
    rho = np.asarray(rho, dtype=float)
    res = check_compatibility(grid, rho, h)
    quad = grid.quadrature
    scale = max(abs(grid.integrate(rho)), abs(quad.integrate(h(quad.points))), 1e-300)
    if abs(res) > compat_tol * scale and abs(res) > 1e-14:
        raise CompatibilityError(
            f"compatibility residual {res:.3e} exceeds {compat_tol:g} x total charge"
        )
    op = grid.operator_for(scheme)
    rho_int = rho.reshape(-1)[op.cells]
    if scheme == "conservative":
        phi_int, lam = op.solve(rho, h, tol, max_iter, load=load)
    else:
        phi_int, lam = op.solve(rho_int, h, tol, max_iter)
    phi, E = op.field(phi_int, h)
    return FieldState(grid, rho, phi, E, h, lam, {"compat_residual": res}, scheme)


def field_eval(field, x, tol=1e-9):
    """Field felt by a marker at positions inside the closed domain."""
    x = np.asarray(x, dtype=float)
    pts = np.ascontiguousarray(x.reshape(-1, 3))
    if pts.shape[0] and np.max(field.grid.domain.level(pts)) > tol:
        raise DomainError("field evaluation outside the closed domain")
    out = np.empty_like(pts)
    field.force(pts, out)
    return out.reshape(x.shape)


def green_response(grid, source_cell, tol=1e-10):
    """Potential of a unit charge in one interior cell, balanced by uniform ``h``.

    Returns the potential grid and the source centre.
    """
    rho = np.zeros(grid.size)
    vol = grid.volume.reshape(-1)
    if vol[source_cell] <= 0.0:
        raise DomainError("source cell is not an interior cell")
    rho[source_cell] = 1.0 / vol[source_cell]
    quad = grid.quadrature
    area = float(quad.weights.sum())
    flux = BoundaryFlux.uniform(1.0 / area)
    f = solve_neumann(grid, rho.reshape(grid.shape), flux, tol=tol)
    return f.phi, grid.centres.reshape(-1, 3)[source_cell]


def dump_csv(field, path):
    """Write ``phi``, ``rho`` and ``E`` of interior cells as CSV."""
    grid = field.grid
    cells = np.nonzero(grid.inside.reshape(-1))[0]
    ijk = np.array(np.unravel_index(cells, grid.shape)).T
    c = grid.centres.reshape(-1, 3)[cells]
    E = field.E.reshape(-1, 3)[cells]
    cols = np.column_stack([ijk, c, field.phi.reshape(-1)[cells], field.rho.reshape(-1)[cells], E])
    header = "i,j,k,x,y,z,phi,rho,Ex,Ey,Ez"
    fmt = ["%d"] * 3 + ["%.17g"] * 8
    np.savetxt(path, cols, delimiter=",", header=header, comments="", fmt=fmt)
