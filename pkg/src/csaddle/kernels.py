"""Compiled multi-round loop for the deterministic compressors.

Performs exactly the per-round arithmetic of :func:`csaddle.engine._step`
(same payload discipline: receivers only see ``mirror + payload``), but runs
many rounds per call without Python overhead.  Stochastic and event-triggered
kinds carry per-stream state that is cheaper to keep in Python, so they always
use the reference path.
"""
import numpy as np
from numba import njit

KIND_CODES = {"identity": 0, "scaled": 1, "top_k": 2, "norm_quantizer": 3, "scalarized": 4}

# return codes of run_rounds
OK, TARGET_REACHED, DIVERGED = 0, 1, 2


@njit(cache=True)
def _compress(kind, kk, levels, factor, rnd, v, out):
    m = v.shape[0]
    for j in range(m):
        out[j] = 0.0
    if kind == 0:
        for j in range(m):
            out[j] = v[j]
    elif kind == 1:
        for j in range(m):
            out[j] = factor * v[j]
    elif kind == 2:
        # repeated arg-max with ties to the lowest index, same as a stable sort
        used = np.zeros(m, dtype=np.bool_)
        for _ in range(min(kk, m)):
            best = -1
            for j in range(m):
                if not used[j] and (best < 0 or abs(v[j]) > abs(v[best])):
                    best = j
            used[best] = True
            out[best] = v[best]
    elif kind == 3:
        scale = 0.0
        for j in range(m):
            scale = max(scale, abs(v[j]))
        if scale > 0:
            for j in range(m):
                out[j] = np.rint(levels * v[j] / scale) / levels * scale
    else:
        j = (rnd - 1) % m
        out[j] = v[j]


@njit(cache=True)
def _exchange(kind, kk, levels, factor, rnd, kappa0, state, sigma, mirror, dst, src, w, payload, agg):
    n = state.shape[0]
    m = state.shape[1]
    innov = np.empty(m)
    out = np.empty(m)
    for i in range(n):
        for j in range(m):
            innov[j] = state[i, j] - sigma[i, j]
        _compress(kind, kk, levels, factor, rnd, innov, out)
        for j in range(m):
            payload[i, j] = out[j]
    agg[:, :] = 0.0
    for e in range(dst.shape[0]):
        a, s = dst[e], src[e]
        for j in range(m):
            agg[a, j] += w[e] * ((sigma[a, j] + payload[a, j]) - (mirror[e, j] + payload[s, j]))
    for e in range(dst.shape[0]):
        s = src[e]
        for j in range(m):
            mirror[e, j] += kappa0 * payload[s, j]
    for i in range(n):
        for j in range(m):
            sigma[i, j] += kappa0 * payload[i, j]


@njit(cache=True)
def run_rounds(
    kind, kk, levels, factor, first_round, rounds,
    kappa, kappa0, eta, coupled, literal,
    Q, c, A, b, dst, src, w,
    x, nu, lam, z,
    sx, slam, sz, snu,
    mx, mlam, mz, mnu,
    x_star, target, guard,
):
    """Advance all arrays in place for up to ``rounds`` rounds.

    Returns ``(code, rounds_done)``.  ``target < 0`` disables the stop test.
    """
    n, d = x.shape
    q = nu.shape[1]
    px = np.empty((n, d))
    plam = np.empty((n, d))
    ax = np.empty((n, d))
    alam = np.empty((n, d))
    pz = np.empty((n, q))
    pnu = np.empty((n, q))
    az = np.zeros((n, q))
    anu = np.zeros((n, q))
    r = np.empty((n, q))
    gx = np.empty((n, d))
    for t in range(rounds):
        rnd = first_round + t
        _exchange(kind, kk, levels, factor, rnd, kappa0, x, sx, mx, dst, src, w, px, ax)
        _exchange(kind, kk, levels, factor, rnd, kappa0, lam, slam, mlam, dst, src, w, plam, alam)
        if coupled:
            _exchange(kind, kk, levels, factor, rnd, kappa0, z, sz, mz, dst, src, w, pz, az)
            _exchange(kind, kk, levels, factor, rnd, kappa0, nu, snu, mnu, dst, src, w, pnu, anu)
        for i in range(n):
            for a in range(q):
                acc = -b[i, a]
                for j in range(d):
                    acc += A[i, a, j] * x[i, j]
                r[i, a] = acc
        for i in range(n):
            for j in range(d):
                acc = c[i, j]
                for l in range(d):
                    acc += Q[i, j, l] * x[i, l]
                g = 0.0
                for a in range(q):
                    mult = nu[i, a]
                    if (not coupled) or literal:
                        mult += r[i, a]
                    g += A[i, a, j] * mult
                gx[i, j] = ax[i, j] + g + alam[i, j] + eta * acc
        big = 0.0
        for i in range(n):
            for j in range(d):
                x[i, j] -= kappa * gx[i, j]
                lam[i, j] += kappa * ax[i, j]
                big = max(big, abs(x[i, j]), abs(lam[i, j]))
            for a in range(q):
                nu[i, a] += kappa * (r[i, a] + az[i, a])
                big = max(big, abs(nu[i, a]))
                if coupled:
                    z[i, a] -= kappa * anu[i, a]
                    big = max(big, abs(z[i, a]))
        if not big <= guard:
            return DIVERGED, t + 1
        if target >= 0:
            res = 0.0
            for i in range(n):
                for j in range(d):
                    res += (x[i, j] - x_star[j]) ** 2
            if res <= target:
                return TARGET_REACHED, t + 1
    return OK, rounds
