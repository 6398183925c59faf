"""Orthogonal gradient memory and projection onto its complement."""
from __future__ import annotations

import numpy as np

from .errors import StructuralError

DESCENT_RTOL = 1e-6


class OrthoBasis:
    """Mutually orthogonal, un-normalized directions in parameter space.

    Vectors are kept as rows of a growable buffer together with their squared
    norms. With ``capacity`` set, adding past it evicts the oldest vector.
    """

    def __init__(self, dim: int, capacity: int | None = None, drop_tolerance: float = 1e-10,
                 reorthogonalize: bool = True):
        if dim < 1:
            raise StructuralError("basis dimension must be positive")
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive or None")
        self.dim = int(dim)
        self.capacity = capacity
        self.drop_tolerance = drop_tolerance
        self.reorthogonalize = reorthogonalize
        self._buf = np.empty((0, self.dim))
        self._sqnorms = np.empty(0)
        self._count = 0
        self.added = 0
        self.dropped = 0
        self.evicted = 0
        self.projections = 0

    def __len__(self) -> int:
        return self._count

    @property
    def vectors(self) -> np.ndarray:
        return self._buf[: self._count]

    @property
    def sq_norms(self) -> np.ndarray:
        return self._sqnorms[: self._count]

    def _check(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.dim,):
            raise StructuralError(f"vector of shape {g.shape} does not match basis dimension {self.dim}")
        return g

    def _project(self, g: np.ndarray) -> np.ndarray:
        if self._count == 0:
            return g.copy()
        v = self.vectors
        coeffs = (v @ g) / self.sq_norms
        return g - coeffs @ v

    def project_out(self, g) -> np.ndarray:
        """``g - sum_v (<g, v> / <v, v>) v`` over the stored directions."""
        g = self._check(g)
        self.projections += 1
        return self._project(g)

    def add_direction(self, u) -> bool:
        """Store ``u`` (already projected) unless it is numerically zero.

        A second projection pass is applied before storing so that pairwise
        orthogonality survives long sequences of nearly dependent inputs.
        Returns whether the vector was kept.
        """
        u = self._check(u)
        if self.reorthogonalize:
            u = self._project(u)
        norm = float(np.linalg.norm(u))
        if self._count:
            threshold = self.drop_tolerance * float(np.mean(np.sqrt(self.sq_norms)))
        else:
            threshold = 1e-10
        if not np.isfinite(norm) or norm <= threshold:
            self.dropped += 1
            return False
        if self.capacity is not None and self._count >= self.capacity:
            self._buf[: self._count - 1] = self._buf[1: self._count]
            self._sqnorms[: self._count - 1] = self._sqnorms[1: self._count]
            self._count -= 1
            self.evicted += 1
        if self._count == self._buf.shape[0]:
            grow = max(16, self._count)
            if self.capacity is not None:
                grow = min(grow, self.capacity - self._count)
            self._buf = np.concatenate([self._buf, np.empty((grow, self.dim))])
            self._sqnorms = np.concatenate([self._sqnorms, np.empty(grow)])
        self._buf[self._count] = u
        self._sqnorms[self._count] = norm * norm
        self._count += 1
        self.added += 1
        return True

    def gram(self) -> np.ndarray:
        v = self.vectors
        return v @ v.T

    def max_relative_overlap(self) -> float:
        """Largest ``|<v_i, v_j>| / (|v_i| |v_j|)`` over distinct pairs."""
        if self._count < 2:
            return 0.0
        norms = np.sqrt(self.sq_norms)
        cos = self.gram() / np.outer(norms, norms)
        np.fill_diagonal(cos, 0.0)
        return float(np.abs(cos).max())


def descent_check(g_pre, g_tilde, rtol: float = DESCENT_RTOL):
    """Check ``<g_tilde, g_pre> == ||g_tilde||^2`` for a projected direction.

    Returns ``(inner, ok)`` with ``inner = <g_tilde, g_pre>``. When the
    identity holds ``inner`` is non-negative.
    """
    g_pre = np.asarray(g_pre, dtype=np.float64)
    g_tilde = np.asarray(g_tilde, dtype=np.float64)
    inner = float(g_tilde @ g_pre)
    sq = float(g_tilde @ g_tilde)
    return inner, abs(inner - sq) <= rtol * max(1.0, sq)
