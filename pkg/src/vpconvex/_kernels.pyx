# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled marker kernels: field interpolation, kicks, reflecting drift, deposits.

Grid arrays are cell centred with centre ``origin + (i + 0.5) h``.  The
ellipsoid is given by its semi-axes; the unit ball is ``(1, 1, 1)``.
"""

from libc.math cimport sqrt, floor

import numpy as np


cdef inline void _locate(double x, double o, double h, Py_ssize_t n,
                         Py_ssize_t* i, double* t) noexcept nogil:
    cdef double s = (x - o) / h - 0.5
    cdef double fl = floor(s)
    cdef Py_ssize_t k = <Py_ssize_t>fl
    if k < 0:
        k = 0
        fl = 0.0
        s = 0.0
    elif k > n - 2:
        k = n - 2
        fl = k
        s = fl + 1.0
    i[0] = k
    t[0] = s - fl


def interpolate(double[:, ::1] x, double[:, :, :, ::1] E, double[::1] origin,
                double h, double[:, ::1] out):
    """Trilinear interpolation of the vector grid ``E`` at the points ``x``."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t nx = E.shape[0], ny = E.shape[1], nz = E.shape[2]
    cdef Py_ssize_t p, i, j, k, c
    cdef double tx, ty, tz, w000, w100, w010, w110, w001, w101, w011, w111
    with nogil:
        for p in range(n):
            _locate(x[p, 0], origin[0], h, nx, &i, &tx)
            _locate(x[p, 1], origin[1], h, ny, &j, &ty)
            _locate(x[p, 2], origin[2], h, nz, &k, &tz)
            w000 = (1 - tx) * (1 - ty) * (1 - tz)
            w100 = tx * (1 - ty) * (1 - tz)
            w010 = (1 - tx) * ty * (1 - tz)
            w110 = tx * ty * (1 - tz)
            w001 = (1 - tx) * (1 - ty) * tz
            w101 = tx * (1 - ty) * tz
            w011 = (1 - tx) * ty * tz
            w111 = tx * ty * tz
            for c in range(3):
                out[p, c] = (w000 * E[i, j, k, c] + w100 * E[i + 1, j, k, c]
                             + w010 * E[i, j + 1, k, c] + w110 * E[i + 1, j + 1, k, c]
                             + w001 * E[i, j, k + 1, c] + w101 * E[i + 1, j, k + 1, c]
                             + w011 * E[i, j + 1, k + 1, c] + w111 * E[i + 1, j + 1, k + 1, c])


def kick(double[:, ::1] x, double[:, ::1] v, double[:, :, :, ::1] E,
         double[::1] origin, double h, double dt):
    """``v += dt * E(x)`` with trilinear interpolation."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t nx = E.shape[0], ny = E.shape[1], nz = E.shape[2]
    cdef Py_ssize_t p, i, j, k, c
    cdef double tx, ty, tz, w000, w100, w010, w110, w001, w101, w011, w111
    with nogil:
        for p in range(n):
            _locate(x[p, 0], origin[0], h, nx, &i, &tx)
            _locate(x[p, 1], origin[1], h, ny, &j, &ty)
            _locate(x[p, 2], origin[2], h, nz, &k, &tz)
            w000 = (1 - tx) * (1 - ty) * (1 - tz)
            w100 = tx * (1 - ty) * (1 - tz)
            w010 = (1 - tx) * ty * (1 - tz)
            w110 = tx * ty * (1 - tz)
            w001 = (1 - tx) * (1 - ty) * tz
            w101 = tx * (1 - ty) * tz
            w011 = (1 - tx) * ty * tz
            w111 = tx * ty * tz
            for c in range(3):
                v[p, c] += dt * (w000 * E[i, j, k, c] + w100 * E[i + 1, j, k, c]
                                 + w010 * E[i, j + 1, k, c] + w110 * E[i + 1, j + 1, k, c]
                                 + w001 * E[i, j, k + 1, c] + w101 * E[i + 1, j, k + 1, c]
                                 + w011 * E[i, j + 1, k + 1, c] + w111 * E[i + 1, j + 1, k + 1, c])


def drift(double[:, ::1] x, double[:, ::1] v, double tau, double[::1] axes,
          long long[::1] bounces, double t0, double[::1] last_bounce,
          double[:, ::1] v_pre, int max_bounces):
    """Free flight for time ``tau >= 0`` with specular reflection at the wall.

    Returns the index of the first marker that exceeded ``max_bounces`` in
    this call, or -1.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t p
    cdef int nb
    cdef int failed = -1
    cdef double ia = 1.0 / (axes[0] * axes[0])
    cdef double ib = 1.0 / (axes[1] * axes[1])
    cdef double ic = 1.0 / (axes[2] * axes[2])
    cdef double rem, qa, qb, qc, disc, root, t, nx_, ny_, nz_, nn, vn, scale
    with nogil:
        for p in range(n):
            rem = tau
            nb = 0
            while True:
                qa = v[p, 0] * v[p, 0] * ia + v[p, 1] * v[p, 1] * ib + v[p, 2] * v[p, 2] * ic
                if qa == 0.0:
                    break
                qb = 2.0 * (x[p, 0] * v[p, 0] * ia + x[p, 1] * v[p, 1] * ib + x[p, 2] * v[p, 2] * ic)
                qc = x[p, 0] * x[p, 0] * ia + x[p, 1] * x[p, 1] * ib + x[p, 2] * x[p, 2] * ic - 1.0
                if qc > 0.0:
                    qc = 0.0
                disc = qb * qb - 4.0 * qa * qc
                if disc < 0.0:
                    disc = 0.0
                root = sqrt(disc)
                if qb <= 0.0:
                    t = (root - qb) / (2.0 * qa)
                else:
                    t = -2.0 * qc / (qb + root)
                if t >= rem:
                    x[p, 0] += rem * v[p, 0]
                    x[p, 1] += rem * v[p, 1]
                    x[p, 2] += rem * v[p, 2]
                    break
                x[p, 0] += t * v[p, 0]
                x[p, 1] += t * v[p, 1]
                x[p, 2] += t * v[p, 2]
                # pull the hit point exactly onto the surface
                scale = 1.0 / sqrt(x[p, 0] * x[p, 0] * ia + x[p, 1] * x[p, 1] * ib
                                   + x[p, 2] * x[p, 2] * ic)
                x[p, 0] *= scale
                x[p, 1] *= scale
                x[p, 2] *= scale
                nx_ = x[p, 0] * ia
                ny_ = x[p, 1] * ib
                nz_ = x[p, 2] * ic
                nn = 1.0 / sqrt(nx_ * nx_ + ny_ * ny_ + nz_ * nz_)
                nx_ *= nn
                ny_ *= nn
                nz_ *= nn
                v_pre[p, 0] = v[p, 0]
                v_pre[p, 1] = v[p, 1]
                v_pre[p, 2] = v[p, 2]
                vn = 2.0 * (v[p, 0] * nx_ + v[p, 1] * ny_ + v[p, 2] * nz_)
                v[p, 0] -= vn * nx_
                v[p, 1] -= vn * ny_
                v[p, 2] -= vn * nz_
                rem -= t
                last_bounce[p] = t0 + (tau - rem)
                bounces[p] += 1
                nb += 1
                if nb > max_bounces:
                    if failed < 0:
                        failed = p
                    break
    return failed


def deposit(double[:, ::1] x, double[::1] q, long long[::1] target,
            double[::1] origin, double h, Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
            double[::1] out):
    """Cloud-in-cell deposit of charges ``q`` onto the flat grid ``out``.

    Each corner weight goes to ``target[corner]``, which redirects cells outside
    the domain to an interior owner.  Returns the number of weights that found
    no target.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t p, i, j, k, a, b, c, cell
    cdef long long tg
    cdef double tx, ty, tz, wx, wy, wz
    cdef Py_ssize_t lost = 0
    with nogil:
        for p in range(n):
            _locate(x[p, 0], origin[0], h, nx, &i, &tx)
            _locate(x[p, 1], origin[1], h, ny, &j, &ty)
            _locate(x[p, 2], origin[2], h, nz, &k, &tz)
            for a in range(2):
                wx = tx if a else 1.0 - tx
                for b in range(2):
                    wy = ty if b else 1.0 - ty
                    for c in range(2):
                        wz = tz if c else 1.0 - tz
                        cell = ((i + a) * ny + (j + b)) * nz + (k + c)
                        tg = target[cell]
                        if tg < 0:
                            lost += 1
                        else:
                            out[tg] += q[p] * wx * wy * wz
    return lost


cdef inline void _spline(double x, double o, double h, Py_ssize_t n,
                         Py_ssize_t* i, double* w, double* dw) noexcept nogil:
    # quadratic B-spline weights of the three cells around the nearest centre
    # and their derivatives with respect to x
    cdef double s = (x - o) / h - 0.5
    cdef double fl = floor(s + 0.5)
    cdef Py_ssize_t k = <Py_ssize_t>fl
    cdef double d
    if k < 1:
        k = 1
        fl = 1.0
    elif k > n - 2:
        k = n - 2
        fl = k
    d = s - fl
    if d < -0.5:
        d = -0.5
    elif d > 0.5:
        d = 0.5
    i[0] = k - 1
    w[0] = 0.5 * (0.5 - d) * (0.5 - d)
    w[1] = 0.75 - d * d
    w[2] = 0.5 * (0.5 + d) * (0.5 + d)
    dw[0] = -(0.5 - d) / h
    dw[1] = -2.0 * d / h
    dw[2] = (0.5 + d) / h


cdef inline void _spline_grad(double[:, :, ::1] phi, double[::1] origin, double h,
                              double x0, double x1, double x2, double* g) noexcept nogil:
    cdef Py_ssize_t nx = phi.shape[0], ny = phi.shape[1], nz = phi.shape[2]
    cdef Py_ssize_t i, j, k, a, b, c
    cdef double wx[3]
    cdef double wy[3]
    cdef double wz[3]
    cdef double dx[3]
    cdef double dy[3]
    cdef double dz[3]
    cdef double f
    _spline(x0, origin[0], h, nx, &i, wx, dx)
    _spline(x1, origin[1], h, ny, &j, wy, dy)
    _spline(x2, origin[2], h, nz, &k, wz, dz)
    g[0] = 0.0
    g[1] = 0.0
    g[2] = 0.0
    for a in range(3):
        for b in range(3):
            for c in range(3):
                f = phi[i + a, j + b, k + c]
                g[0] += f * dx[a] * wy[b] * wz[c]
                g[1] += f * wx[a] * dy[b] * wz[c]
                g[2] += f * wx[a] * wy[b] * dz[c]


def spline_gradient(double[:, ::1] x, double[:, :, ::1] phi, double[::1] origin,
                    double h, double[:, ::1] out):
    """Gradient of the quadratic-spline interpolant of ``phi`` at the points ``x``."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t p
    cdef double g[3]
    with nogil:
        for p in range(n):
            _spline_grad(phi, origin, h, x[p, 0], x[p, 1], x[p, 2], g)
            out[p, 0] = g[0]
            out[p, 1] = g[1]
            out[p, 2] = g[2]


def spline_kick(double[:, ::1] x, double[:, ::1] v, double[:, :, ::1] phi,
                double[::1] origin, double h, double dt):
    """``v += dt * grad(phi)(x)`` with the quadratic-spline interpolant."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t p
    cdef double g[3]
    with nogil:
        for p in range(n):
            _spline_grad(phi, origin, h, x[p, 0], x[p, 1], x[p, 2], g)
            v[p, 0] += dt * g[0]
            v[p, 1] += dt * g[1]
            v[p, 2] += dt * g[2]


def spline_deposit(double[:, ::1] x, double[::1] q, long long[::1] target,
                   double[::1] origin, double h, Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                   double[::1] out):
    """Quadratic-spline deposit; the transpose of the spline interpolation."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t p, i, j, k, a, b, c, cell
    cdef long long tg
    cdef double wx[3]
    cdef double wy[3]
    cdef double wz[3]
    cdef double dx[3]
    cdef double dy[3]
    cdef double dz[3]
    cdef Py_ssize_t lost = 0
    with nogil:
        for p in range(n):
            _spline(x[p, 0], origin[0], h, nx, &i, wx, dx)
            _spline(x[p, 1], origin[1], h, ny, &j, wy, dy)
            _spline(x[p, 2], origin[2], h, nz, &k, wz, dz)
            for a in range(3):
                for b in range(3):
                    for c in range(3):
                        cell = ((i + a) * ny + (j + b)) * nz + (k + c)
                        tg = target[cell]
                        if tg < 0:
                            lost += 1
                        else:
                            out[tg] += q[p] * wx[a] * wy[b] * wz[c]
    return lost
