"""Marker representation of the distribution function and admissible initial data.

A marker is a point of a uniform phase-space lattice that carries the value of
the initial datum at its lattice point and the lattice cell volume.  Both are
fixed for the life of the marker, so mass and every ``L^p`` norm are conserved
exactly; only positions and velocities move.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .characteristics import MAX_BOUNCES_PER_STEP, PhaseArrays, push
from .errors import (AdmissibilityError, ConfigError, DegenerateNormalizationError,
                     FlatnessError)

_PAIR_CHUNK = 2_000_000


@dataclass
class Markers:
    """Struct-of-arrays marker collection.

    ``index`` is the flat lattice label ``ix * n_v + iv`` and ``lattice`` a
    hashable description of the sampling lattice; together they define the
    marker-to-marker correspondence between collections.
    """

    phase: PhaseArrays
    f_value: np.ndarray
    weight: np.ndarray
    index: np.ndarray
    lattice: tuple = ()

    @classmethod
    def from_arrays(cls, x, v, f_value, weight, index=None, lattice=()):
        ph = PhaseArrays.new(x, v)
        n = len(ph.x)
        f_value = np.asarray(f_value, dtype=float).reshape(-1)
        weight = np.broadcast_to(np.asarray(weight, dtype=float), (n,)).copy()
        index = np.arange(n, dtype=np.int64) if index is None else np.asarray(index, dtype=np.int64)
        return cls(ph, f_value, weight, index, lattice)

    @classmethod
    def empty(cls, lattice=()):
        return cls.from_arrays(np.zeros((0, 3)), np.zeros((0, 3)), [], [], lattice=lattice)

    def __len__(self):
        return len(self.f_value)

    @property
    def x(self):
        return self.phase.x

    @property
    def v(self):
        return self.phase.v

    @property
    def charge(self):
        return self.f_value * self.weight

    def mass(self):
        return float(np.sum(self.charge))

    def lp(self, p):
        """``sum f^p w``; ``p = inf`` gives ``max f``."""
        if np.isinf(p):
            return float(self.f_value.max()) if len(self) else 0.0
        return float(np.sum(self.f_value**p * self.weight))

    def kinetic(self):
        return float(np.einsum("i,ij,ij->", self.charge, self.v, self.v))

    def copy(self):
        return Markers(self.phase.copy(), self.f_value, self.weight, self.index, self.lattice)


# initial data ------------------------------------------------------------------

def _bump(s):
    """``(1 - s^2)^2`` on ``s < 1``, zero outside."""
    return np.where(s < 1.0, (1.0 - np.minimum(s, 1.0) ** 2) ** 2, 0.0)


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10.0 + s * (-15.0 + 6.0 * s))


def _vec(value, name):
    out = np.asarray(value, dtype=float).reshape(-1)
    if out.size == 1:
        out = np.repeat(out, 3)
    if out.size != 3:
        raise ConfigError(f"{name} needs 1 or 3 components")
    return out


def _ball_inside(domain, centre, radius):
    if domain.level(centre) >= 0.0:
        return False
    if domain.is_ball:
        return bool(domain.axes[0] - np.linalg.norm(centre) > radius)
    _, d = geometry.nearest_boundary(domain, centre[None, :])
    return bool(d[0] > radius)


class FlatBump:
    """``A b(|x-cx|/rx) b(|v-cv|/rv)`` times a cutoff that vanishes near the grazing set.

    The cutoff is a quintic smoothstep in ``v_perp^2 + x_perp`` rising from 0 at
    ``c delta0`` to 1 at ``2 c delta0``, so the datum is identically zero on the
    shell ``v_perp^2 + x_perp <= c delta0`` and depends on ``v_perp`` only
    through its square there.
    """

    def __init__(self, domain, spec):
        p = dict(spec.params)
        self.cx = _vec(p.pop("center_x", 0.0), "center_x")
        self.cv = _vec(p.pop("center_v", 0.0), "center_v")
        self.rx = float(p.pop("radius_x", 0.5))
        self.rv = float(p.pop("radius_v", 1.0))
        self.amplitude = float(p.pop("amplitude", 1.0))
        if p:
            raise ConfigError(f"unknown flat_bump parameters: {sorted(p)}")
        if self.rx <= 0.0 or self.rv <= 0.0:
            raise ConfigError("bump radii must be positive")
        if np.any(self.cv != 0.0) and not _ball_inside(domain, self.cx, self.rx):
            # off-centre velocities break f(x, v) = f(x, v*) at the wall
            raise AdmissibilityError(
                "a bump with nonzero velocity centre must have its position support inside the domain"
            )

    def x_mask(self, x):
        return np.linalg.norm(x - self.cx, axis=-1) < self.rx

    def v_mask(self, v):
        return np.linalg.norm(v - self.cv, axis=-1) < self.rv

    def core(self, x, v):
        return (self.amplitude * _bump(np.linalg.norm(x - self.cx, axis=-1) / self.rx)
                * _bump(np.linalg.norm(v - self.cv, axis=-1) / self.rv))


class DoubleBump:
    """Two counter-streaming bumps at ``x = +-offset e_axis`` moving with ``-+speed e_axis``."""

    def __init__(self, domain, spec):
        p = dict(spec.params)
        offset = float(p.pop("offset", 0.4))
        speed = float(p.pop("speed", 0.5))
        axis = int(p.pop("axis", 0))
        rx = float(p.pop("radius_x", 0.3))
        rv = float(p.pop("radius_v", 0.8))
        amp = float(p.pop("amplitude", 1.0))
        if p:
            raise ConfigError(f"unknown double_bump parameters: {sorted(p)}")
        e = np.zeros(3)
        e[axis] = 1.0
        self.parts = []
        for sign in (1.0, -1.0):
            sub = InitialDataSpec("flat_bump", {"center_x": sign * offset * e,
                                                "center_v": -sign * speed * e,
                                                "radius_x": rx, "radius_v": rv,
                                                "amplitude": amp})
            self.parts.append(FlatBump(domain, sub))

    def x_mask(self, x):
        return self.parts[0].x_mask(x) | self.parts[1].x_mask(x)

    def v_mask(self, v):
        return self.parts[0].v_mask(v) | self.parts[1].v_mask(v)

    def core(self, x, v):
        return self.parts[0].core(x, v) + self.parts[1].core(x, v)


class ConstantBox:
    """``value`` on the product of two boxes and zero elsewhere (no cutoff)."""

    def __init__(self, domain, spec):
        p = dict(spec.params)
        self.value = float(p.pop("value", 1.0))
        lo, hi = spec.support_bounds
        self.x_lo = _vec(p.pop("x_lo", lo[:3]), "x_lo")
        self.x_hi = _vec(p.pop("x_hi", hi[:3]), "x_hi")
        self.v_lo = _vec(p.pop("v_lo", lo[3:]), "v_lo")
        self.v_hi = _vec(p.pop("v_hi", hi[3:]), "v_hi")
        if p:
            raise ConfigError(f"unknown constant parameters: {sorted(p)}")

    def x_mask(self, x):
        return np.all((x >= self.x_lo) & (x <= self.x_hi), axis=-1)

    def v_mask(self, v):
        return np.all((v >= self.v_lo) & (v <= self.v_hi), axis=-1)

    def core(self, x, v):
        return np.where(self.x_mask(x) & self.v_mask(v), self.value, 0.0)


PROFILES = {"flat_bump": FlatBump, "double_bump": DoubleBump, "constant": ConstantBox}

_CUTOFF_PROFILES = (FlatBump, DoubleBump)


@dataclass
class InitialDataSpec:
    """Named profile with parameters, flatness data and the lattice box.

    ``support_bounds`` is ``(lo, hi)`` with six components each, position
    first.  The datum must equal ``flat_value`` wherever
    ``v_perp^2 + x_perp <= flat_const * delta0``.
    """

    profile: str = "flat_bump"
    params: dict = field(default_factory=dict)
    delta0: float = 0.05
    flat_value: float = 0.0
    flat_const: float = 1.0
    support_bounds: tuple = ((-1.0, -1.0, -1.0, -2.5, -2.5, -2.5), (1.0, 1.0, 1.0, 2.5, 2.5, 2.5))

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=float).reshape(-1) for b in self.support_bounds)
        if lo.size != 6 or hi.size != 6 or np.any(hi <= lo):
            raise ConfigError("support_bounds must be two 6-vectors with lo < hi")
        self.support_bounds = (lo, hi)
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.delta0 <= 0.0 or self.flat_const <= 0.0:
            raise ConfigError("delta0 and flat_const must be positive")

    @property
    def shell(self):
        return self.flat_const * self.delta0

    def build(self, domain):
        return PROFILES[self.profile](domain, self)


def _wall_frame(domain, x):
    """Distance to the wall and outer normal at the foot point, for points near it.

    Points farther than the tube get infinite distance.
    """
    lvl = domain.level(x)
    grad = np.linalg.norm(2.0 * x / domain.axes**2, axis=1)
    approx = np.abs(lvl) / np.maximum(grad, 1e-300)
    near = np.nonzero(approx < 2.0 * domain.delta_tube)[0]
    dist = np.full(len(x), np.inf)
    nrm = np.zeros_like(x)
    if near.size:
        foot, d = geometry.nearest_boundary(domain, x[near])
        dist[near] = d
        nrm[near] = domain.normal(foot)
    return dist, nrm


def evaluate(spec, domain, x, v, profile=None):
    """Initial datum on all pairs of ``x`` (n, 3) and ``v`` (m, 3); returns (n, m).

    Also returns the grazing-shell indicator on the same pairs.
    """
    profile = profile or spec.build(domain)
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    dist, nrm = _wall_frame(domain, x)
    f = profile.core(x[:, None, :], v[None, :, :])
    v_perp = nrm @ v.T
    a = v_perp**2 + dist[:, None]
    if isinstance(profile, _CUTOFF_PROFILES):
        f = f * _smoothstep((a - spec.shell) / spec.shell)
    return f, a <= spec.shell


def lattice_axes(spec, n_per_dim):
    """Cell-centred lattice coordinates along the six phase-space axes."""
    lo, hi = spec.support_bounds
    step = (hi - lo) / n_per_dim
    return [lo[d] + (np.arange(n_per_dim) + 0.5) * step[d] for d in range(6)], step


def sample_initial(spec, domain, n_per_dim):
    """Markers on the uniform phase-space lattice restricted to the domain and ``f > 0``."""
    n = int(n_per_dim)
    if n < 1:
        raise ConfigError("n_per_dim must be positive")
    axes, step = lattice_axes(spec, n)
    weight = float(np.prod(step))
    lattice = (n, tuple(spec.support_bounds[0]), tuple(spec.support_bounds[1]))
    profile = spec.build(domain)

    gx = np.stack(np.meshgrid(*axes[:3], indexing="ij"), axis=-1).reshape(-1, 3)
    gv = np.stack(np.meshgrid(*axes[3:], indexing="ij"), axis=-1).reshape(-1, 3)
    ix = np.nonzero(domain.level(gx) < 0.0)[0]
    iv = np.arange(len(gv))
    if spec.flat_value == 0.0:
        # outside the profile support the datum is zero, which is also the flat value
        ix = ix[profile.x_mask(gx[ix])]
        iv = iv[profile.v_mask(gv[iv])]
    if ix.size == 0 or iv.size == 0:
        return Markers.empty(lattice)

    rows = max(1, _PAIR_CHUNK // iv.size)
    xs, vs, fs, labels = [], [], [], []
    bad_flat = []
    for start in range(0, ix.size, rows):
        cx = ix[start:start + rows]
        f, shell = evaluate(spec, domain, gx[cx], gv[iv], profile)
        if np.any(f < 0.0) or not np.all(np.isfinite(f)):
            r, c = np.nonzero(~(f >= 0.0))
            raise AdmissibilityError(
                f"initial datum negative or undefined at {r.size} lattice points, "
                f"first at x={gx[cx[r[0]]]}, v={gv[iv[c[0]]]}"
            )
        off = shell & (np.abs(f - spec.flat_value) > 1e-14 * max(1.0, abs(spec.flat_value)))
        if np.any(off):
            r, c = np.nonzero(off)
            bad_flat.extend(zip(cx[r].tolist(), iv[c].tolist()))
            continue
        r, c = np.nonzero(f > 0.0)
        xs.append(gx[cx[r]])
        vs.append(gv[iv[c]])
        fs.append(f[r, c])
        labels.append(cx[r].astype(np.int64) * len(gv) + iv[c])
    if bad_flat:
        pts = [(gx[a].tolist(), gv[b].tolist()) for a, b in bad_flat[:5]]
        err = FlatnessError(
            f"initial datum is not flat on the grazing shell at {len(bad_flat)} lattice points, "
            f"e.g. (x, v) = {pts}"
        )
        err.points = [(gx[a], gv[b]) for a, b in bad_flat]
        raise err
    if not fs:
        return Markers.empty(lattice)
    return Markers.from_arrays(np.concatenate(xs), np.concatenate(vs), np.concatenate(fs),
                               weight, np.concatenate(labels), lattice)


def normalize_flux(markers, h_base, quadrature):
    """Scale ``h_base`` so that its boundary integral equals the marker mass."""
    vals = h_base(quadrature.points)
    if np.any(vals <= 0.0):
        raise AdmissibilityError("h must be positive on the boundary")
    mass = markers.mass()
    if mass == 0.0:
        raise DegenerateNormalizationError("cannot normalize the wall flux to zero marker mass")
    return h_base.scaled(mass / quadrature.integrate(vals))


def pushforward(domain, markers, field_state, dt, t0=0.0, field_end=None,
                max_bounces=MAX_BOUNCES_PER_STEP):
    """New collection advanced by one macro step; values and weights are shared."""
    out = markers.copy()
    if dt != 0.0:
        push(domain, out.phase, field_state, dt, t0, field_end, max_bounces)
    return out


def write_snapshot(markers, path):
    """CSV rows ``index, x, y, z, vx, vy, vz, f_value, weight``."""
    cols = np.column_stack([markers.index, markers.x, markers.v, markers.f_value, markers.weight])
    fmt = ["%d"] + ["%.17g"] * 8
    np.savetxt(path, cols, delimiter=",", fmt=fmt, comments="",
               header="index,x,y,z,vx,vy,vz,f_value,weight")


def read_snapshot(path, lattice=()):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Markers.from_arrays(data[:, 1:4], data[:, 4:7], data[:, 7], data[:, 8],
                               data[:, 0].astype(np.int64), lattice)
