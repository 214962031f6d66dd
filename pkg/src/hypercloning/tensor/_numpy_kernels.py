"""Pure-numpy kernels, operation-for-operation twins of ``_numba_kernels``."""

import numpy as np


def matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n), dtype=a.dtype)
    for p in range(k):
        c += a[:, p, None] * b[None, p, :]
    return c


def bmm(a, b):
    g, m, k = a.shape
    n = b.shape[2]
    c = np.zeros((g, m, n), dtype=a.dtype)
    for p in range(k):
        c += a[:, :, p, None] * b[:, None, p, :]
    return c


def row_sum(x):
    rows, length = x.shape
    if length == 0:
        return np.zeros(rows, dtype=x.dtype)
    buf = x
    n = length
    while n > 1:
        h = n // 2
        folded = buf[:, :h] + buf[:, h : 2 * h]
        if n % 2 == 1:
            buf = np.concatenate([folded, buf[:, 2 * h : 2 * h + 1]], axis=1)
            n = h + 1
        else:
            buf = folded
            n = h
    return np.ascontiguousarray(buf[:, 0])


def jacobi_sv(vecs, tol, floor, max_sweeps):
    n, m = vecs.shape
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        sweeps += 1
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                x = vecs[i]
                y = vecs[j]
                # sequential sums, same order as the compiled loop
                alpha = float(np.cumsum(x * x)[-1])
                beta = float(np.cumsum(y * y)[-1])
                gamma = float(np.cumsum(x * y)[-1])
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
                xi = x.copy()
                vecs[i] = c * xi - s * y
                vecs[j] = s * xi + c * y
        if not rotated:
            converged = True
            break
    return np.sqrt(np.cumsum(vecs * vecs, axis=1)[:, -1]), converged, sweeps
