"""Dense symmetric linear algebra used by the EKFAC preconditioner.

Matrices and vectors are plain float64 numpy arrays.
"""
from __future__ import annotations

import numpy as np

from .errors import EmptyBatchError, NumericalError, StructuralError

SYMMETRY_RTOL = 1e-10
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


def _as_symmetric(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise StructuralError(f"sym_eig needs a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("sym_eig input has non-finite entries")
    scale = np.linalg.norm(m)
    asym = np.linalg.norm(m - m.T)
    if asym > SYMMETRY_RTOL * max(scale, np.finfo(float).tiny):
        raise StructuralError(f"matrix is not symmetric (asymmetry {asym:.3e}, norm {scale:.3e})")
    return 0.5 * (m + m.T)


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.linalg.norm(off))


def jacobi_eig(m: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi eigensolver for an already-symmetric matrix.

    Returns unsorted ``(eigenvalues, eigenvectors)``. Converged when the
    off-diagonal Frobenius norm drops below ``tol * ||m||_F``.
    """
    a = np.array(m, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    target = tol * np.linalg.norm(a)
    off = 0.0
    for _ in range(max_sweeps):
        off = _off_norm(a)
        if off <= target:
            return np.diag(a).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # hypot would overflow; t ~ 1 / (2 theta)
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    off = _off_norm(a)
    if off <= target:
        return np.diag(a).copy(), v
    raise NumericalError(
        f"Jacobi eigensolver did not converge in {max_sweeps} sweeps "
        f"(off-diagonal residual {off:.3e}, target {target:.3e})"
    )


def sym_eig(m, method: str = "lapack"):
    """Eigendecomposition ``m = q @ diag(lam) @ q.T`` with ``lam`` descending.

    ``method="lapack"`` delegates to ``numpy.linalg.eigh``; ``"jacobi"`` runs
    the cyclic Jacobi solver above (pure numpy, slow beyond a few hundred rows).
    """
    m = _as_symmetric(m)
    if method == "lapack":
        lam, q = np.linalg.eigh(m)
    elif method == "jacobi":
        lam, q = jacobi_eig(m)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    order = np.argsort(-lam, kind="stable")  # ties keep their solver order
    lam = lam[order]
    q = q[:, order]
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(q))):
        raise NumericalError("eigendecomposition produced non-finite values")
    return q, lam


def eigenbasis_transform(qb, g, qa, inverse: bool = False) -> np.ndarray:
    """``qb.T @ g @ qa`` (into the Kronecker eigenbasis) or ``qb @ g @ qa.T`` back out."""
    qb = np.asarray(qb, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    qa = np.asarray(qa, dtype=np.float64)
    if g.ndim != 2 or qb.shape != (g.shape[0], g.shape[0]) or qa.shape != (g.shape[1], g.shape[1]):
        raise StructuralError(
            f"eigenbasis_transform shape mismatch: qb {qb.shape}, g {g.shape}, qa {qa.shape}"
        )
    if inverse:
        return qb @ g @ qa.T
    return qb.T @ g @ qa


def gram_matrix(x) -> np.ndarray:
    """Second-moment estimate ``x.T @ x / n`` over the rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise StructuralError(f"gram_matrix expects a 2-D array, got shape {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise EmptyBatchError("gram_matrix of an empty batch")
    g = x.T @ x / n
    return 0.5 * (g + g.T)
