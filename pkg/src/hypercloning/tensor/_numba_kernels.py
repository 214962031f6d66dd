"""numba-compiled kernels.

Every kernel here has a twin in ``_numpy_kernels`` that performs the same
floating-point operations in the same order, so the two backends agree
bitwise. No fastmath: FMA contraction or reassociation would break that.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n), dtype=a.dtype)
    # rows in parallel; each c[i, j] accumulates over p in ascending order
    for i in prange(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                c[i, j] += aip * b[p, j]
    return c


@njit(parallel=True, cache=True)
def bmm(a, b):
    g, m, k = a.shape
    n = b.shape[2]
    c = np.zeros((g, m, n), dtype=a.dtype)
    for gi in prange(g * m):
        t = gi // m
        i = gi % m
        for p in range(k):
            aip = a[t, i, p]
            for j in range(n):
                c[t, i, j] += aip * b[t, p, j]
    return c


@njit(cache=True)
def row_sum(x):
    rows, length = x.shape
    out = np.zeros(rows, dtype=x.dtype)
    buf = np.empty(length, dtype=x.dtype)
    for r in range(rows):
        if length == 0:
            continue
        for i in range(length):
            buf[i] = x[r, i]
        n = length
        # fold the upper half onto the lower half; an odd tail element
        # is carried into the next round unchanged
        while n > 1:
            h = n // 2
            for i in range(h):
                buf[i] = buf[i] + buf[i + h]
            if n % 2 == 1:
                buf[h] = buf[2 * h]
                n = h + 1
            else:
                n = h
        out[r] = buf[0]
    return out


@njit(cache=True)
def jacobi_sv(vecs, tol, floor, max_sweeps):
    """One-sided Jacobi on the rows of ``vecs`` (modified in place).

    Pairs involving a row whose squared norm is at most ``floor`` are
    skipped. Returns (row norms, converged, sweeps used).
    """
    n, m = vecs.shape
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for r in range(m):
                    x = vecs[i, r]
                    y = vecs[j, r]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                # lines at rounding level are treated as zero
                if gamma == 0.0 or alpha <= floor or beta <= floor or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for r in range(m):
                    x = vecs[i, r]
                    y = vecs[j, r]
                    vecs[i, r] = c * x - s * y
                    vecs[j, r] = s * x + c * y
        if not rotated:
            converged = True
            break
    norms = np.empty(n)
    for i in range(n):
        acc = 0.0
        for r in range(m):
            acc += vecs[i, r] * vecs[i, r]
        norms[i] = np.sqrt(acc)
    return norms, converged, sweeps
