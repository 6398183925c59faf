"""Eigenvalue-corrected Kronecker-factored (EKFAC) Fisher approximation.

Each layer's Fisher block is modelled as ``A (x) B`` with ``A = E[a a^T]``
over homogeneous layer inputs and ``B = E[delta delta^T]`` over
pre-activation gradients. The inverse is applied in the Kronecker eigenbasis
``Q_B, Q_A`` using a re-estimated diagonal (``scalings``) in place of the
product of factor eigenvalues.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, StateError, StructuralError
from .linalg import eigenbasis_transform, gram_matrix, sym_eig
from .model import grad_to_layer_matrices, layer_matrices_to_grad

TRUE_FISHER = "true"
EMPIRICAL_FISHER = "empirical"


@dataclass
class LayerFisherState:
    fan_in: int
    fan_out: int
    damping: float = 1e-3
    decay: float = 0.95
    factor_a: np.ndarray | None = None
    factor_b: np.ndarray | None = None
    q_a: np.ndarray | None = None
    q_b: np.ndarray | None = None
    scalings: np.ndarray | None = None
    factor_updates: int = 0
    scaling_updates: int = 0
    refreshes: int = 0

    def __post_init__(self):
        if not self.damping >= 0.0:
            raise ValueError("damping must be non-negative")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")

    @property
    def has_eigenbasis(self) -> bool:
        return self.q_a is not None and self.q_b is not None and self.scalings is not None

    def update_factors(self, a: np.ndarray, delta: np.ndarray) -> None:
        if a.shape[1] != self.fan_in + 1 or delta.shape[1] != self.fan_out:
            raise StructuralError(
                f"stats shapes a {a.shape}, delta {delta.shape} do not fit a "
                f"{self.fan_in}->{self.fan_out} layer"
            )
        ga = gram_matrix(a)
        gb = gram_matrix(delta)
        if self.factor_updates == 0:
            # first observation seeds the running average (no zero-start bias)
            self.factor_a, self.factor_b = ga, gb
        else:
            self.factor_a = self.decay * self.factor_a + (1.0 - self.decay) * ga
            self.factor_b = self.decay * self.factor_b + (1.0 - self.decay) * gb
        self.factor_updates += 1

    def refresh_eigenbasis(self, method: str = "lapack") -> None:
        if self.factor_updates == 0:
            raise StateError("refresh_eigenbasis called before any factor update")
        self.q_a, lam_a = sym_eig(self.factor_a, method=method)
        self.q_b, lam_b = sym_eig(self.factor_b, method=method)
        lam_a = np.clip(lam_a, 0.0, None)
        lam_b = np.clip(lam_b, 0.0, None)
        self.scalings = np.outer(lam_b, lam_a)
        self.refreshes += 1

    def update_scalings(self, a: np.ndarray, delta: np.ndarray) -> None:
        """Running average of squared per-example gradients in the eigenbasis.

        The per-example gradient ``delta_i a_i^T`` maps to
        ``(Q_B^T delta_i)(Q_A^T a_i)^T``, so the mean of its elementwise
        squares is ``(D**2).T @ (H**2) / n`` with ``D = delta Q_B`` and
        ``H = a Q_A``.
        """
        if not self.has_eigenbasis:
            raise StateError("update_scalings needs an eigenbasis; call refresh_eigenbasis first")
        if a.shape[1] != self.fan_in + 1 or delta.shape[1] != self.fan_out:
            raise StructuralError("stats shapes do not match layer")
        d = delta @ self.q_b
        h = a @ self.q_a
        second_moment = (d * d).T @ (h * h) / a.shape[0]
        self.scalings = self.decay * self.scalings + (1.0 - self.decay) * second_moment
        self.scaling_updates += 1

    def precondition_block(self, g: np.ndarray) -> np.ndarray:
        if not self.has_eigenbasis:
            raise StateError("precondition called before the eigenbasis was populated")
        rotated = eigenbasis_transform(self.q_b, g, self.q_a)
        rotated /= self.scalings + self.damping
        return eigenbasis_transform(self.q_b, rotated, self.q_a, inverse=True)


@dataclass
class FisherApprox:
    """Per-layer EKFAC state for an MLP with layer sizes ``dims``.

    ``refresh_period`` counts calls to :meth:`observe`; :meth:`request_refresh`
    forces a new eigenbasis on the next observation (used at task boundaries).
    """

    dims: tuple[int, ...]
    mode: str = TRUE_FISHER
    damping: float = 1e-3
    decay: float = 0.95
    refresh_period: int = 100
    eig_method: str = "lapack"
    layers: list[LayerFisherState] = field(default_factory=list)
    steps_since_refresh: int = 0
    refresh_requested: bool = False
    preconditions: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.mode not in (TRUE_FISHER, EMPIRICAL_FISHER):
            raise ValueError(f"unknown Fisher mode {self.mode!r}")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be positive")
        if not self.layers:
            self.layers = [
                LayerFisherState(i, o, damping=self.damping, decay=self.decay)
                for i, o in zip(self.dims[:-1], self.dims[1:])
            ]

    @property
    def ready(self) -> bool:
        return all(layer.has_eigenbasis for layer in self.layers)

    @property
    def observations(self) -> int:
        return self.layers[0].factor_updates

    def _check_stats(self, stats):
        if len(stats) != len(self.layers):
            raise StructuralError(f"got stats for {len(stats)} layers, expected {len(self.layers)}")

    def update_factors(self, stats) -> None:
        self._check_stats(stats)
        for layer, s in zip(self.layers, stats):
            layer.update_factors(s.a, s.delta)

    def refresh_eigenbasis(self) -> None:
        for layer in self.layers:
            layer.refresh_eigenbasis(self.eig_method)
        self.steps_since_refresh = 0
        self.refresh_requested = False

    def update_scalings(self, stats) -> None:
        self._check_stats(stats)
        for layer, s in zip(self.layers, stats):
            layer.update_scalings(s.a, s.delta)

    def request_refresh(self) -> None:
        self.refresh_requested = True

    def observe(self, stats) -> None:
        """One optimizer step's worth of curvature bookkeeping."""
        self.update_factors(stats)
        if (not self.ready) or self.refresh_requested or self.steps_since_refresh >= self.refresh_period:
            self.refresh_eigenbasis()
        self.update_scalings(stats)
        self.steps_since_refresh += 1

    def precondition(self, grad) -> np.ndarray:
        """Approximate ``(F + damping)^{-1} grad`` for a flat parameter-space vector."""
        if not self.ready:
            raise StateError("Fisher approximation has no eigenbasis yet")
        blocks = grad_to_layer_matrices(self.dims, grad)
        out = layer_matrices_to_grad(
            [layer.precondition_block(b) for layer, b in zip(self.layers, blocks)]
        )
        if not np.all(np.isfinite(out)):
            raise NumericalError("preconditioned gradient is not finite")
        self.preconditions += 1
        return out
