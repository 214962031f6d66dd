"""Deterministic dense kernels used by every other module.

Matrices are plain 2-D numpy arrays of float32 or float64. Row-wise ops
(softmax, norms) accept any array and work along the last axis.

Reductions run in a fixed order: matmul accumulates the shared dimension
in ascending index order, and row sums fold the upper half of a row onto
the lower half until one element is left. The latter makes the sum of an
n-fold stacked row exactly n times the sum of the source row for n a power
of two, so norms of cloned vectors are bitwise clones of the source norms.
"""

import numpy as np

from .. import _backend
from ..errors import ContractError, ConvergenceError

if _backend.HAVE_NUMBA:
    from . import _numba_kernels as _k
else:
    from . import _numpy_kernels as _k

FLOAT_DTYPES = (np.float32, np.float64)

_GELU_C = float(np.sqrt(2.0 / np.pi))


def _float(a, dtype=None):
    a = np.asarray(a)
    if dtype is not None:
        return np.ascontiguousarray(a, dtype=dtype)
    if a.dtype not in FLOAT_DTYPES:
        a = a.astype(np.float64)
    return np.ascontiguousarray(a)


def _common(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    dt = np.result_type(a, b)
    if dt not in FLOAT_DTYPES:
        dt = np.float64
    return _float(a, dt), _float(b, dt)


class Rng:
    """Seeded normal/uniform source (PCG64 under the hood).

    Same seed, same draw sequence, on any platform numpy supports.
    Not safe for concurrent use; make one instance per thread.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std=1.0, dtype=np.float64):
        if std < 0:
            raise ContractError(f"std must be >= 0, got {std}")
        out = self._gen.standard_normal(shape)
        return (out * std).astype(dtype, copy=False)

    def uniform(self, shape, dtype=np.float64):
        return self._gen.random(shape).astype(dtype, copy=False)

    def integers(self, high, size):
        return self._gen.integers(0, high, size=size)

    def spawn(self, tag):
        """Independent child stream keyed by (seed, tag); does not advance self."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, _tag_int(tag)])
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child


def _tag_int(tag):
    if isinstance(tag, int):
        return tag & 0xFFFFFFFF
    h = 2166136261
    for ch in str(tag).encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def gaussian(rng, rows, cols, std, dtype=np.float64):
    """I.i.d. N(0, std^2) matrix drawn from ``rng``."""
    return rng.normal((rows, cols), std, dtype)


def matmul(a, b):
    a, b = _common(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _k.matmul(a, b)


def bmm(a, b):
    """Batched matmul over matching leading dimensions."""
    a, b = _common(a, b)
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    lead = a.shape[:-2]
    m, k = a.shape[-2:]
    n = b.shape[-1]
    out = _k.bmm(a.reshape(-1, m, k), np.ascontiguousarray(b.reshape(-1, k, n)))
    return out.reshape(lead + (m, n))


def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` is (out, in)."""
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), np.ascontiguousarray(np.asarray(w).T))
    if b is not None:
        y += b
    return y.reshape(lead + (y.shape[-1],))


def row_sum(x):
    """Sum along the last axis with the fold-in-half order."""
    x = _float(x)
    lead = x.shape[:-1]
    return _k.row_sum(x.reshape(-1, x.shape[-1])).reshape(lead)


def row_mean(x):
    return row_sum(x) / x.shape[-1]


def softmax_rows(a):
    a = _float(a)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / row_sum(e)[..., None]


def _check_vec(x, *vecs):
    for v in vecs:
        if v is not None and np.shape(v)[-1] != x.shape[-1]:
            raise ContractError(f"length mismatch: {x.shape[-1]} vs {np.shape(v)[-1]}")


def layer_norm(x, gamma, beta=None, eps=1e-5):
    """(x - mean) / sqrt(var + eps) * gamma + beta, population variance."""
    x = _float(x)
    _check_vec(x, gamma, beta)
    if eps <= 0:
        raise ContractError("eps must be positive")
    d = x - row_mean(x)[..., None]
    inv = 1.0 / np.sqrt(row_mean(d * d) + eps)
    y = d * inv[..., None] * gamma
    if beta is not None:
        y = y + beta
    return y


def rms_norm(x, gamma, eps=1e-5):
    x = _float(x)
    _check_vec(x, gamma)
    if eps <= 0:
        raise ContractError("eps must be positive")
    inv = 1.0 / np.sqrt(row_mean(x * x) + eps)
    return x * inv[..., None] * gamma


def gelu(x):
    """tanh-approximation GELU."""
    x = _float(x)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_grad(x):
    x = _float(x)
    u = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du


def singular_values(a, tol=1e-12, max_sweeps=60):
    """Singular values of a 2-D array, descending, by one-sided Jacobi.

    Raises ConvergenceError (with the current estimate attached) if some
    rotation is still above ``tol`` after ``max_sweeps`` sweeps. Lines whose
    norm falls to rounding level (max(m, n) * eps * ||a||_F) count as zero,
    so exactly rank-deficient inputs converge.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"singular_values expects a 2-D array, got shape {a.shape}")
    if a.size == 0:
        return np.zeros(0)
    # rotate the shorter side's lines; each has max(m, n) entries
    vecs = np.array(a if a.shape[0] <= a.shape[1] else a.T, dtype=np.float64, order="C")
    floor = (max(a.shape) * np.finfo(np.float64).eps * np.sqrt(np.sum(vecs * vecs))) ** 2
    norms, converged, sweeps = _k.jacobi_sv(vecs, float(tol), float(floor), int(max_sweeps))
    sv = np.sort(norms)[::-1].copy()
    if not converged:
        raise ConvergenceError(f"Jacobi SVD did not converge in {sweeps} sweeps", estimate=sv)
    return sv
