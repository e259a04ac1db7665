"""Pure-numpy kernels. Reference semantics for the JIT versions in ``_numba``.

Fixed-point conventions: values are int64 with ``frac_bits`` fractional
bits; a decay factor is the rational ``num / 2**decay_bits``. Every kernel
returns a status code (0 = ok) instead of raising, so the numba twins can
share the contract.
"""
import numpy as np

OK = 0
OVERFLOW = 1
CORRUPT = 2

# |v| below this keeps num * v inside int64 for any num < 2**16
VELOCITY_LIMIT = 1 << 46
WORD_LIMIT = 1 << 62


def _quantize(x, scale):
    y = np.floor(x * scale + 0.5)
    if not np.all(np.abs(y) < WORD_LIMIT):
        return None
    return y.astype(np.int64)


def fxp_forward(w, v, g, eta, num, decay_bits, frac_bits, rem):
    """One momentum step in place: decay ``v`` (remainders to ``rem``), subtract
    the quantized ``(1 - gamma) * g``, then add the quantized ``eta * v`` to ``w``."""
    scale = 2.0 ** frac_bits
    inv = 2.0 ** -frac_bits
    omg = 1.0 - num / 2.0 ** decay_bits
    if not np.all(np.abs(v) < VELOCITY_LIMIT):
        return OVERFLOW
    prod = v * np.int64(num)
    vd = prod >> decay_bits
    rem[:] = prod - (vd << decay_bits)
    dq = _quantize(omg * g, scale)
    if dq is None:
        return OVERFLOW
    vn = vd - dq
    if not np.all(np.abs(vn) < VELOCITY_LIMIT):
        return OVERFLOW
    v[:] = vn
    dw = _quantize(eta * (vn * inv), scale)
    if dw is None:
        return OVERFLOW
    wn = w + dw
    if not np.all(np.abs(wn) < WORD_LIMIT):
        return OVERFLOW
    w[:] = wn
    return OK


def fxp_reverse_position(w, v, eta, frac_bits):
    dw = _quantize(eta * (v * 2.0 ** -frac_bits), 2.0 ** frac_bits)
    if dw is None:
        return OVERFLOW
    w -= dw
    return OK


def fxp_reverse_velocity(v, g, num, decay_bits, frac_bits, rem):
    omg = 1.0 - num / 2.0 ** decay_bits
    dq = _quantize(omg * g, 2.0 ** frac_bits)
    if dq is None:
        return OVERFLOW
    vd = v + dq
    prod = (vd << decay_bits) + rem.astype(np.int64)
    if np.any(prod % num):
        return CORRUPT
    v[:] = prod // num
    return OK


def lasso_cd(X, y, lam, beta, max_iter, tol):
    """Cyclic coordinate descent on ``(1/2n)||y - X b||^2 + lam ||b||_1``.

    ``X`` and ``y`` must already be centred. ``beta`` is updated in place.
    Returns ``(iterations, last max coefficient change)``.
    """
    n, m = X.shape
    col_sq = np.einsum("ij,ij->j", X, X) / n
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
            rho = X[:, j] @ r / n + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if new != old:
                r -= X[:, j] * (new - old)
                beta[j] = new
                delta = max(delta, abs(new - old))
        if delta < tol:
            break
    return it, delta
