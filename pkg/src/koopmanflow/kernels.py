"""Batched linear-algebra kernels for the localized-operator hot path.

The per-window operator fits are the only loops tight enough to matter at
deployment time, so they come in two flavors: numba-jitted and pure numpy.
The jitted path is used when numba imports cleanly; set KFLOW_DISABLE_NUMBA=1
to force the numpy fallback. `kflow bench-dmd` times both.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without the extra
    _HAVE_NUMBA = False

_DISABLED = os.environ.get("KFLOW_DISABLE_NUMBA", "").strip().lower() in (
    "1",
    "true",
    "yes",
)
NUMBA_ACTIVE = _HAVE_NUMBA and not _DISABLED


def backend_name() -> str:
    return "numba" if NUMBA_ACTIVE else "numpy"


# ---------------------------------------------------------------------------
# Cholesky solve, batched: X = A^-1 B for a stack of SPD matrices.


def cho_solve_batch_numpy(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(A)
    y = np.linalg.solve(L, B)
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _cho_solve_batch_jit(A, B):  # pragma: no cover - compiled
        n, d, m = B.shape
        out = np.empty((n, d, m))
        for i in range(n):
            L = np.linalg.cholesky(A[i])
            y = np.zeros((d, m))
            for r in range(d):
                y[r] = B[i, r]
                for c in range(r):
                    y[r] -= L[r, c] * y[c]
                y[r] /= L[r, r]
            x = np.zeros((d, m))
            for r in range(d - 1, -1, -1):
                x[r] = y[r]
                for c in range(r + 1, d):
                    x[r] -= L[c, r] * x[c]
                x[r] /= L[r, r]
            out[i] = x
        return out

    def cho_solve_batch_numba(A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return _cho_solve_batch_jit(
            np.ascontiguousarray(A), np.ascontiguousarray(B)
        )

else:
    cho_solve_batch_numba = None


# dispatch crossover: the jitted per-item loops win on the tiny stacks of
# the deployment path; batched LAPACK wins once the stack is large
_CHO_JIT_MAX_BATCH = 2
_SVD_JIT_MAX_BATCH = 8


def cho_solve_batch(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve A[i] X[i] = B[i] for every i via a Cholesky factorization."""
    if NUMBA_ACTIVE and A.shape[0] <= _CHO_JIT_MAX_BATCH:
        return cho_solve_batch_numba(A, B)
    return cho_solve_batch_numpy(A, B)


# ---------------------------------------------------------------------------
# Regularized local operator fit through a truncated SVD.
#
# For each window Z (columns = consecutive lifted states) with X = Z[:, :-1]
# and Y = Z[:, 1:], the damped normal-equations solution
#     K = Y X^T (X X^T + lam I)^-1
# reduces, through the thin SVD X = U S V^T, to
#     K = Y V diag(s / (s^2 + lam)) U^T
# which is exact at full rank and cheap because the windows are tall-thin.


def dmd_fit_svd_batch_numpy(Z: np.ndarray, lam: float, rank: int) -> np.ndarray:
    X = Z[:, :, :-1]
    Y = Z[:, :, 1:]
    if rank == 0:
        return np.zeros((Z.shape[0], Z.shape[1], Z.shape[1]))
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    U = U[:, :, :rank]
    s = s[:, :rank]
    V = np.swapaxes(Vt, -1, -2)[:, :, :rank]
    coef = s / (s * s + lam)
    return (Y @ V) * coef[:, None, :] @ np.swapaxes(U, -1, -2)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _dmd_fit_svd_batch_jit(Z, lam, rank):  # pragma: no cover - compiled
        n, d, w = Z.shape
        out = np.zeros((n, d, d))
        if rank == 0:
            return out
        for i in range(n):
            X = np.ascontiguousarray(Z[i, :, : w - 1])
            Y = np.ascontiguousarray(Z[i, :, 1:])
            U, s, Vt = np.linalg.svd(X, full_matrices=False)
            r = min(rank, s.shape[0])
            coef = s[:r] / (s[:r] * s[:r] + lam)
            YV = Y @ np.ascontiguousarray(Vt[:r].T)
            for c in range(r):
                YV[:, c] *= coef[c]
            out[i] = YV @ np.ascontiguousarray(U[:, :r].T)
        return out

    def dmd_fit_svd_batch_numba(Z: np.ndarray, lam: float, rank: int) -> np.ndarray:
        return _dmd_fit_svd_batch_jit(np.ascontiguousarray(Z), lam, rank)

else:
    dmd_fit_svd_batch_numba = None


def dmd_fit_svd_batch(Z: np.ndarray, lam: float, rank: int) -> np.ndarray:
    """Fit the local transition operator of every window in the stack."""
    if NUMBA_ACTIVE and Z.shape[0] <= _SVD_JIT_MAX_BATCH:
        return dmd_fit_svd_batch_numba(Z, lam, rank)
    return dmd_fit_svd_batch_numpy(Z, lam, rank)


def available_backends() -> dict:
    """Kernel implementations by backend name, for benchmarking."""
    table = {
        "numpy": {
            "cho_solve_batch": cho_solve_batch_numpy,
            "dmd_fit_svd_batch": dmd_fit_svd_batch_numpy,
        }
    }
    if _HAVE_NUMBA:
        table["numba"] = {
            "cho_solve_batch": cho_solve_batch_numba,
            "dmd_fit_svd_batch": dmd_fit_svd_batch_numba,
        }
    return table
