"""Empirical average spatial covariance and the band-deleting mask."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._parallel import pmap
from .tensorio import ScanTensor, SpatialGrid

log = logging.getLogger(__name__)

DEFAULT_BATCH = 64


@dataclass(frozen=True)
class BandMask:
    """Indicator ``Z(m, m')`` that keeps voxel pairs far apart along every axis.

    ``rule`` is ``"fixed_fraction"`` (``|m_d - m'_d| > radius_d``) or
    ``"distance"`` (``|m_d - m'_d| / M_d > delta_d``); both must hold for all d.
    """

    grid: SpatialGrid
    rule: str
    radius: tuple = ()
    delta: tuple = ()

    def Z(self, a, b) -> int:
        a = np.asarray(a)
        b = np.asarray(b)
        diff = np.abs(a - b)
        if self.rule == "fixed_fraction":
            return int(np.all(diff > np.asarray(self.radius)))
        return int(np.all(diff / np.asarray(self.grid.dims, float) > np.asarray(self.delta)))

    def dense(self) -> np.ndarray:
        """Boolean ``(M_active, M_active)`` matrix over active voxels."""
        idx = self.grid.active_indices()
        keep = np.ones((idx.shape[0], idx.shape[0]), dtype=bool)
        for d in range(self.grid.ndim):
            diff = np.abs(idx[:, d][:, None] - idx[:, d][None, :])
            if self.rule == "fixed_fraction":
                keep &= diff > self.radius[d]
            else:
                keep &= diff / self.grid.dims[d] > self.delta[d]
        return keep

    def describe(self) -> dict:
        out = {"rule": self.rule}
        if self.rule == "fixed_fraction":
            out["radius"] = list(self.radius)
        else:
            out["delta"] = list(self.delta)
        return out


def build_band_mask(grid: SpatialGrid, rule="fixed_fraction", radius=None, delta=None) -> BandMask:
    """Band-deleting mask over ``grid``.

    ``fixed_fraction`` defaults to ``radius_d = ceil(M_d / 4)``; ``distance``
    needs ``delta`` (scalar or per-axis).
    """
    D = grid.ndim
    if rule == "fixed_fraction":
        if radius is None:
            radius = [math.ceil(M / 4) for M in grid.dims]
        radius = tuple(int(r) for r in np.broadcast_to(radius, (D,)))
        if any(r <= 0 for r in radius):
            raise ValueError("mask radii must be positive")
        if any(r >= M for r, M in zip(radius, grid.dims)):
            raise ValueError("mask radius >= grid size leaves no off-band entries")
        return BandMask(grid, rule, radius=radius)
    if rule == "distance":
        if delta is None:
            raise ValueError("distance rule needs delta")
        delta = tuple(float(x) for x in np.broadcast_to(delta, (D,)))
        if any(x <= 0 for x in delta):
            raise ValueError("mask bandwidth must be positive")
        if any(x * M >= M - 1 for x, M in zip(delta, grid.dims)):
            raise ValueError("bandwidth leaves no off-band entries")
        return BandMask(grid, rule, delta=delta)
    raise ValueError(f"unknown mask rule {rule!r}")


@dataclass(frozen=True)
class MaskedCovariance:
    matrix: np.ndarray
    mask: BandMask
    n: int
    J: int
    centered: bool = True

    @property
    def M(self) -> int:
        return self.matrix.shape[0]


def _batch_outer(args):
    Xs, start, stop = args
    acc = None
    for X in Xs:
        B = X[:, start:stop]
        part = B @ B.T
        acc = part if acc is None else acc + part
    return acc


def empirical_spatial_cov(
    scans: Sequence[ScanTensor],
    mask: BandMask,
    batch: int = DEFAULT_BATCH,
    center: bool = True,
    threads: Optional[int] = None,
    offband_only: bool = False,
) -> MaskedCovariance:
    """``(1/nJ) sum_i sum_j (X_i - Xbar)_j (X_i - Xbar)_j^T`` accumulated over time batches.

    ``center=False`` skips the cross-subject mean, for data known to be
    mean-zero. ``offband_only`` zeroes entries the mask discards.
    """
    if len(scans) < 1:
        raise ValueError("need at least one scan")
    grid = scans[0].grid
    J = scans[0].n_time
    for s in scans[1:]:
        if not s.grid.same_as(grid) or s.n_time != J:
            raise ValueError("scans must share grid and J")
    if not mask.grid.same_as(grid):
        raise ValueError("mask grid does not match the scans")
    n = len(scans)
    Xs = [s.values for s in scans]
    if center:
        if n == 1:
            log.warning("single subject: centering makes the covariance identically zero")
        mean = np.mean(np.stack(Xs), axis=0)
        Xs = [X - mean for X in Xs]
    batch = max(1, int(batch))
    bounds = [(Xs, a, min(a + batch, J)) for a in range(0, J, batch)]
    parts = pmap(_batch_outer, bounds, threads)
    C = np.zeros((grid.n_active, grid.n_active))
    for p in parts:  # fixed reduction order
        C += p
    C /= n * J
    C = 0.5 * (C + C.T)
    if offband_only:
        C = np.where(mask.dense(), C, 0.0)
    return MaskedCovariance(C, mask, n, J, centered=center)


def masked_residual_norm(A, B, mask) -> float:
    """``sum over Z=1 of (A - B)^2``; ``mask`` is a BandMask or boolean matrix."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    Z = mask.dense() if isinstance(mask, BandMask) else np.asarray(mask, dtype=bool)
    if Z.shape != A.shape:
        raise ValueError("mask shape does not match")
    R = A - B
    return float(np.sum(R[Z] ** 2))
