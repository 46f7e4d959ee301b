"""Dense kernels: symmetric eigendecomposition and complex linear solves.

Dense matrices are plain numpy arrays (float64 or complex128).  A matrix
passed as "symmetric" must satisfy ``max|A - A^T| <= 1e-12 * max|A|``.

The eigensolver is self-contained: Householder tridiagonalization followed by
implicit QL with Wilkinson-style shifts (tred2/tql2 lineage), returning
eigenvalues in ascending order with an orthogonal eigenvector matrix.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.linalg

from ..errors import NumericalError, PreconditionError, ShapeError, SingularMatrixError

__all__ = ["eigh", "solve_complex", "check_symmetric"]

_EPS = np.finfo(np.float64).eps


def check_symmetric(A: np.ndarray, tol: float = 1e-12) -> None:
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {A.shape}")
    scale = np.abs(A).max() if A.size else 0.0
    if scale and np.abs(A - A.T).max() > tol * scale:
        raise PreconditionError("matrix is not symmetric to working precision")


def _tridiagonalize(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Householder reduction Q^T A Q = T; returns (diag, subdiag, Q)."""
    n = A.shape[0]
    T = A.astype(np.float64, copy=True)
    Q = np.eye(n)
    for k in range(n - 2):
        x = T[k + 1 :, k]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            continue
        alpha = -np.copysign(norm_x, x[0] if x[0] != 0.0 else 1.0)
        v = x.copy()
        v[0] -= alpha
        vnorm2 = v @ v
        if vnorm2 <= _EPS * norm_x**2:
            continue
        u = v / np.sqrt(vnorm2)
        # Symmetric rank-2 update of the trailing block: (I-2uu^T) B (I-2uu^T).
        B = T[k + 1 :, k + 1 :]
        p = B @ u
        w = p - (u @ p) * u
        B -= 2.0 * (np.outer(u, w) + np.outer(w, u))
        T[k + 1 :, k] = 0.0
        T[k, k + 1 :] = 0.0
        T[k + 1, k] = alpha
        T[k, k + 1] = alpha
        Qb = Q[:, k + 1 :]
        Qb -= 2.0 * np.outer(Qb @ u, u)
    d = np.diag(T).copy()
    e = np.array([T[i + 1, i] for i in range(n - 1)] + [0.0])
    return d, e, Q


def _ql_implicit(d: np.ndarray, e: np.ndarray, Z: np.ndarray, max_iter: int = 50) -> None:
    """Implicit-shift QL on a symmetric tridiagonal (d, e), in place.

    e[i] couples d[i] and d[i+1]; rotations accumulate into the columns of Z.
    """
    n = d.shape[0]
    f = 0.0
    tst1 = 0.0
    for l in range(n):
        tst1 = max(tst1, abs(d[l]) + abs(e[l]))
        m = l
        while m < n and abs(e[m]) > _EPS * tst1:
            m += 1
        if m > l:
            for it in range(max_iter + 1):
                if it == max_iter:
                    raise NumericalError("eigensolver failed to converge")
                # Wilkinson-style shift from the leading 2x2.
                g = d[l]
                p = (d[l + 1] - g) / (2.0 * e[l])
                r = np.hypot(p, 1.0)
                if p < 0:
                    r = -r
                d[l] = e[l] / (p + r)
                d[l + 1] = e[l] * (p + r)
                dl1 = d[l + 1]
                h = g - d[l]
                d[l + 2 :] -= h
                f += h
                p = d[m]
                c = c2 = c3 = 1.0
                el1 = e[l + 1]
                s = s2 = 0.0
                for i in range(m - 1, l - 1, -1):
                    c3, c2, s2 = c2, c, s
                    g = c * e[i]
                    h = c * p
                    r = np.hypot(p, e[i])
                    e[i + 1] = s * r
                    s = e[i] / r
                    c = p / r
                    p = c * d[i] - s * g
                    d[i + 1] = h + s * (c * g + s * d[i])
                    zi, zi1 = Z[:, i].copy(), Z[:, i + 1].copy()
                    Z[:, i + 1] = s * zi + c * zi1
                    Z[:, i] = c * zi - s * zi1
                p = -s * s2 * c3 * el1 * e[l] / dl1
                e[l] = s * p
                d[l] = c * p
                if abs(e[l]) <= _EPS * tst1:
                    break
        d[l] += f
        e[l] = 0.0


def eigh(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a real symmetric matrix.

    Returns (lam, U) with lam ascending and A @ U == U @ diag(lam) up to
    round-off; columns of U are orthonormal.
    """
    A = np.asarray(A, dtype=np.float64)
    check_symmetric(A)
    n = A.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros((0, 0))
    if n == 1:
        return A[0, :1].copy(), np.ones((1, 1))
    # Work on the exactly symmetrized matrix so tiny asymmetries cannot bias
    # the similarity transforms.
    d, e, Q = _tridiagonalize(0.5 * (A + A.T))
    _ql_implicit(d, e, Q)
    order = np.argsort(d, kind="stable")
    return d[order], Q[:, order]


def solve_complex(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve A X = B for complex A with one step of iterative refinement.

    Raises SingularMatrixError when A is singular to working precision.
    """
    A = np.asarray(A, dtype=np.complex128)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"A must be square, got {A.shape}")
    B = np.asarray(B, dtype=np.complex128)
    if B.shape[0] != A.shape[0]:
        raise ShapeError(f"B rows {B.shape[0]} do not match A dimension {A.shape[0]}")
    b_norm = np.abs(B).max() if B.size else 0.0
    try:
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
            X = scipy.linalg.lu_solve((lu, piv), B, check_finite=False)
    except (ValueError, scipy.linalg.LinAlgError) as exc:
        raise SingularMatrixError(str(exc)) from None
    if not np.all(np.isfinite(X)):
        raise SingularMatrixError("solution overflowed; matrix singular to working precision")
    if b_norm == 0.0:
        return X
    resid = B - A @ X
    if np.abs(resid).max() > 1e-10 * b_norm:
        with np.errstate(all="ignore"):
            X = X + scipy.linalg.lu_solve((lu, piv), resid, check_finite=False)
        resid = B - A @ X
        if not np.all(np.isfinite(X)) or np.abs(resid).max() > 1e-10 * b_norm:
            raise SingularMatrixError("residual stagnated; matrix singular to working precision")
    return X
