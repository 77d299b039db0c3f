"""Vectorized numpy versions of the compiled marker kernels.

Same signatures and arithmetic as ``_kernels.pyx``; used when the extension is
not built or when ``VPCONVEX_PURE_PYTHON=1``.
"""

import numpy as np


def _locate(x, o, h, n):
    s = (x - o) / h - 0.5
    k = np.floor(s)
    t = s - k
    low = k < 0
    high = k > n - 2
    k = np.clip(k, 0, n - 2).astype(np.int64)
    t = np.where(low, 0.0, np.where(high, 1.0, t))
    return k, t


def _weights(x, origin, h, shape):
    i, tx = _locate(x[:, 0], origin[0], h, shape[0])
    j, ty = _locate(x[:, 1], origin[1], h, shape[1])
    k, tz = _locate(x[:, 2], origin[2], h, shape[2])
    for a in (0, 1):
        wx = tx if a else 1.0 - tx
        for b in (0, 1):
            wy = ty if b else 1.0 - ty
            for c in (0, 1):
                wz = tz if c else 1.0 - tz
                yield i + a, j + b, k + c, wx * wy * wz


def interpolate(x, E, origin, h, out):
    out[...] = 0.0
    for i, j, k, w in _weights(x, origin, h, E.shape):
        out += w[:, None] * E[i, j, k]


def kick(x, v, E, origin, h, dt):
    acc = np.empty_like(v)
    interpolate(x, E, origin, h, acc)
    v += dt * acc


def drift(x, v, tau, axes, bounces, t0, last_bounce, v_pre, max_bounces):
    inv = 1.0 / np.asarray(axes) ** 2
    rem = np.full(len(x), float(tau))
    active = np.arange(len(x))
    count = np.zeros(len(x), dtype=np.int64)
    failed = -1
    while active.size:
        xa, va = x[active], v[active]
        qa = np.sum(va * va * inv, axis=1)
        qb = 2.0 * np.sum(xa * va * inv, axis=1)
        qc = np.minimum(np.sum(xa * xa * inv, axis=1) - 1.0, 0.0)
        root = np.sqrt(np.maximum(qb * qb - 4.0 * qa * qc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(qb <= 0.0, (root - qb) / (2.0 * qa), -2.0 * qc / (qb + root))
        still = qa != 0.0
        ra = rem[active]
        finish = still & (t >= ra)
        idx = active[finish]
        x[idx] += ra[finish, None] * v[idx]
        bounce = still & ~finish
        idx = active[bounce]
        tb = t[bounce]
        xh = x[idx] + tb[:, None] * v[idx]
        xh /= np.sqrt(np.sum(xh * xh * inv, axis=1))[:, None]
        x[idx] = xh
        nrm = xh * inv
        nrm /= np.sqrt(np.sum(nrm * nrm, axis=1))[:, None]
        v_pre[idx] = v[idx]
        vn = 2.0 * np.sum(v[idx] * nrm, axis=1)
        v[idx] -= vn[:, None] * nrm
        rem[idx] -= tb
        last_bounce[idx] = t0 + (tau - rem[idx])
        bounces[idx] += 1
        count[idx] += 1
        over = idx[count[idx] > max_bounces]
        if over.size and failed < 0:
            failed = int(over.min())
        active = idx[count[idx] <= max_bounces]
    return failed


def deposit(x, q, target, origin, h, nx, ny, nz, out):
    lost = 0
    for i, j, k, w in _weights(x, origin, h, (nx, ny, nz)):
        tg = target[(i * ny + j) * nz + k]
        ok = tg >= 0
        lost += int(np.count_nonzero(~ok))
        out += np.bincount(tg[ok], weights=q[ok] * w[ok], minlength=out.size)
    return lost


def _spline(x, o, h, n):
    s = (x - o) / h - 0.5
    k = np.clip(np.floor(s + 0.5), 1, n - 2)
    d = np.clip(s - k, -0.5, 0.5)
    w = np.stack([0.5 * (0.5 - d) ** 2, 0.75 - d * d, 0.5 * (0.5 + d) ** 2])
    dw = np.stack([-(0.5 - d), -2.0 * d, 0.5 + d]) / h
    return k.astype(np.int64) - 1, w, dw


def _spline_terms(x, origin, h, shape):
    i, wx, dx = _spline(x[:, 0], origin[0], h, shape[0])
    j, wy, dy = _spline(x[:, 1], origin[1], h, shape[1])
    k, wz, dz = _spline(x[:, 2], origin[2], h, shape[2])
    for a in range(3):
        for b in range(3):
            for c in range(3):
                yield (i + a, j + b, k + c, wx[a] * wy[b] * wz[c],
                       (dx[a] * wy[b] * wz[c], wx[a] * dy[b] * wz[c], wx[a] * wy[b] * dz[c]))


def spline_gradient(x, phi, origin, h, out):
    out[...] = 0.0
    for i, j, k, _, g in _spline_terms(x, origin, h, phi.shape):
        f = phi[i, j, k]
        for d in range(3):
            out[:, d] += f * g[d]


def spline_kick(x, v, phi, origin, h, dt):
    acc = np.empty_like(v)
    spline_gradient(x, phi, origin, h, acc)
    v += dt * acc


def spline_deposit(x, q, target, origin, h, nx, ny, nz, out):
    lost = 0
    for i, j, k, w, _ in _spline_terms(x, origin, h, (nx, ny, nz)):
        tg = target[(i * ny + j) * nz + k]
        ok = tg >= 0
        lost += int(np.count_nonzero(~ok))
        out += np.bincount(tg[ok], weights=q[ok] * w[ok], minlength=out.size)
    return lost
