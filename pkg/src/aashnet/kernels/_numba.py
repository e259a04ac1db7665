"""JIT-compiled twins of the kernels in ``_numpy`` (same signatures, same bits)."""

import numpy as np
from numba import njit

from ._numpy import CORRUPT, OK, OVERFLOW, VELOCITY_LIMIT, WORD_LIMIT


@njit(cache=True)
def _q(x, scale):
    return np.floor(x * scale + 0.5)


@njit(cache=True)
def fxp_forward(w, v, g, eta, num, decay_bits, frac_bits, rem):
    scale = 2.0 ** frac_bits
    inv = 2.0 ** -frac_bits
    omg = 1.0 - num / 2.0 ** decay_bits
    n = w.shape[0]
    for i in range(n):
        if abs(v[i]) >= VELOCITY_LIMIT:
            return OVERFLOW
    for i in range(n):
        prod = v[i] * np.int64(num)
        vd = prod >> decay_bits
        rem[i] = prod - (vd << decay_bits)
        dq = _q(omg * g[i], scale)
        if abs(dq) >= WORD_LIMIT:
            return OVERFLOW
        vn = vd - np.int64(dq)
        if abs(vn) >= VELOCITY_LIMIT:
            return OVERFLOW
        v[i] = vn
        dw = _q(eta * (vn * inv), scale)
        if abs(dw) >= WORD_LIMIT:
            return OVERFLOW
        wn = w[i] + np.int64(dw)
        if abs(wn) >= WORD_LIMIT:
            return OVERFLOW
        w[i] = wn
    return OK


@njit(cache=True)
def fxp_reverse_position(w, v, eta, frac_bits):
    scale = 2.0 ** frac_bits
    inv = 2.0 ** -frac_bits
    for i in range(w.shape[0]):
        dw = _q(eta * (v[i] * inv), scale)
        if abs(dw) >= WORD_LIMIT:
            return OVERFLOW
        w[i] -= np.int64(dw)
    return OK


@njit(cache=True)
def fxp_reverse_velocity(v, g, num, decay_bits, frac_bits, rem):
    scale = 2.0 ** frac_bits
    omg = 1.0 - num / 2.0 ** decay_bits
    for i in range(v.shape[0]):
        dq = _q(omg * g[i], scale)
        if abs(dq) >= WORD_LIMIT:
            return OVERFLOW
        vd = v[i] + np.int64(dq)
        prod = (vd << decay_bits) + np.int64(rem[i])
        if prod % num != 0:
            return CORRUPT
        v[i] = prod // num
    return OK


@njit(cache=True)
def lasso_cd(X, y, lam, beta, max_iter, tol):
    n, m = X.shape
    col_sq = np.zeros(m)
    for j in range(m):
        s = 0.0
        for i in range(n):
            s += X[i, j] * X[i, j]
        col_sq[j] = s / n
    r = y - X @ beta
    delta = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        delta = 0.0
        for j in range(m):
            if col_sq[j] == 0.0:
                beta[j] = 0.0
                continue
            old = beta[j]
            rho = 0.0
            for i in range(n):
                rho += X[i, j] * r[i]
            rho = rho / n + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if new != old:
                d = new - old
                for i in range(n):
                    r[i] -= X[i, j] * d
                beta[j] = new
                delta = max(delta, abs(d))
        if delta < tol:
            break
    return it, delta
