"""Loading containers shared by the estimation stages."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

STAGES = ("initial", "rotated", "smoothed", "shrunk", "true")


@dataclass(frozen=True)
class LoadingSet:
    """K spatial loadings stored as the columns of an ``(M_active, K)`` matrix.

    ``transform`` is the rotation that produced the matrix from the initial
    loadings (``L* = L R`` for orthogonal, ``L* = L T^{-1}`` for oblique) and
    ``phi`` the implied factor covariance. Both stay ``None`` before rotation.
    """

    matrix: np.ndarray
    stage: str = "initial"
    kind: str = "orthogonal"
    transform: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=np.float64)
        if mat.ndim == 1:
            mat = mat[:, None]
        if mat.ndim != 2:
            raise ValueError("loading matrix must be 2-D")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.kind not in ("orthogonal", "oblique"):
            raise ValueError(f"unknown kind {self.kind!r}")
        object.__setattr__(self, "matrix", mat)

    @property
    def K(self) -> int:
        return self.matrix.shape[1]

    @property
    def M(self) -> int:
        return self.matrix.shape[0]

    def factor_cov(self) -> np.ndarray:
        return np.eye(self.K) if self.phi is None else np.asarray(self.phi)

    def global_cov(self) -> np.ndarray:
        """``L Phi L^T``: the global covariance this expression implies."""
        L = self.matrix
        return L @ self.factor_cov() @ L.T

    def evolve(self, **changes) -> "LoadingSet":
        return replace(self, **changes)


def normalize_columns(L, order=True):
    """Order columns by descending squared norm and make each column's
    largest-magnitude entry positive.

    Returns ``(L_new, perm, signs)`` with ``L_new = L[:, perm] * signs``.
    """
    L = np.asarray(L, dtype=float)
    K = L.shape[1]
    perm = np.argsort(-np.sum(L**2, axis=0), kind="stable") if order else np.arange(K)
    Lp = L[:, perm]
    signs = np.ones(K)
    for k in range(K):
        col = Lp[:, k]
        if col.size and col[np.argmax(np.abs(col))] < 0:
            signs[k] = -1.0
    return Lp * signs, perm, signs
