"""Synthetic data from the finite-resolution temporal functional factor model.

Each subject is ``X_i = L F_i + eps_i`` on an M x M grid with J time points:

* ``L[:, k] = c_k z_k`` with unit-norm bump-built maps ``z_k``,
* rows of ``F_i`` are squared-exponential GP draws (length ``omega_f``),
  optionally mixed by an invertible ``T`` to give factor covariance ``T T^T``,
* ``eps_i = sum_p a_ip v_ip u_ip(t)`` with unit-norm bumps ``v_ip`` confined
  to single cells of the delta-grid and GP time courses (length ``omega_u``).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ._parallel import pmap
from .loadings import LoadingSet
from .tensorio import ScanTensor, SpatialGrid

REGIMES = {1: (2.0, 3.0), 2: (0.8, 1.8)}
LOCAL_AMPLITUDE = (0.1, 1.0)

# (centre, half-width, amplitude) boxes on the unit square; axis 0 first.
_BI2 = [
    [((0.3, 0.3), (0.15, 0.15), 1.0), ((0.7, 0.7), (0.15, 0.15), 1.0)],
    [((0.3, 0.7), (0.15, 0.15), 1.0), ((0.7, 0.3), (0.15, 0.15), 1.0)],
]
_BI4 = [
    [((0.28, 0.28), (0.12, 0.12), 1.0), ((0.72, 0.72), (0.12, 0.12), 1.0)],
    [((0.28, 0.72), (0.12, 0.12), 1.0), ((0.72, 0.28), (0.12, 0.12), 1.0)],
    [((0.5, 0.12), (0.1, 0.1), 1.0), ((0.5, 0.88), (0.1, 0.1), 1.0)],
    [((0.12, 0.5), (0.1, 0.1), 1.0), ((0.88, 0.5), (0.1, 0.1), 1.0)],
]
# default-mode-like, executive-like, left and right dorsal-stream-like
_NET = [
    [
        ((0.5, 0.2), (0.08, 0.1), 1.0),
        ((0.5, 0.75), (0.1, 0.12), 1.2),
        ((0.22, 0.55), (0.07, 0.07), 0.8),
        ((0.78, 0.55), (0.07, 0.07), 0.8),
    ],
    [
        ((0.3, 0.3), (0.08, 0.1), 1.0),
        ((0.7, 0.3), (0.08, 0.1), 1.0),
        ((0.35, 0.52), (0.06, 0.06), 0.7),
        ((0.65, 0.52), (0.06, 0.06), 0.7),
    ],
    [((0.25, 0.82), (0.08, 0.08), 1.0), ((0.18, 0.63), (0.06, 0.07), 0.8)],
    [((0.75, 0.82), (0.08, 0.08), 1.0), ((0.82, 0.63), (0.06, 0.07), 0.8)],
]


def _tri_layout():
    cells = [(r, c) for r in range(5) for c in range(5) if (r, c) != (2, 2)]
    centre = lambda rc: (0.1 + 0.2 * rc[0], 0.1 + 0.2 * rc[1])  # noqa: E731
    out = []
    for k in range(8):
        picks = [cells[k], cells[k + 8], cells[k + 16]]
        out.append(
            [(centre(picks[0]), (0.08, 0.08), 2.0)]
            + [(centre(p), (0.08, 0.08), 1.0) for p in picks[1:]]
        )
    return out


_LAYOUTS = {
    ("BI", 2): _BI2,
    ("BI", 3): _BI4[:3],
    ("BI", 4): _BI4,
    ("NET", 2): _NET[:2],
    ("NET", 4): _NET,
    ("TRI", 8): _tri_layout(),
}


def bump_1d(r):
    """Smooth compactly supported bump ``exp(-1/(1-r^2))`` on ``|r| < 1``."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def box_bump(grid: SpatialGrid, lo, hi) -> np.ndarray:
    """Product bump supported on the open box ``(lo, hi)``, on the full grid."""
    prof = []
    for d, M in enumerate(grid.dims):
        x = (np.arange(M) + 0.5) / M
        c = 0.5 * (lo[d] + hi[d])
        h = 0.5 * (hi[d] - lo[d])
        prof.append(bump_1d((x - c) / h) if h > 0 else np.zeros(M))
    out = prof[0]
    for p in prof[1:]:
        out = np.multiply.outer(out, p)
    return out


def make_loading_scheme(scheme: str, grid: SpatialGrid, K: int) -> List[np.ndarray]:
    """Unit-norm spatial maps ``z_k`` for the BI, NET or TRI scheme."""
    if grid.ndim != 2:
        raise ValueError("loading schemes are defined on 2-D grids only")
    key = (scheme.upper(), int(K))
    if key not in _LAYOUTS:
        supported = sorted(k for s, k in _LAYOUTS if s == key[0])
        raise ValueError(f"scheme {scheme!r} does not support K={K} (supported: {supported})")
    maps = []
    for boxes in _LAYOUTS[key]:
        z = np.zeros(grid.dims)
        for (cx, cy), (hx, hy), amp in boxes:
            z += amp * box_bump(grid, (cx - hx, cy - hy), (cx + hx, cy + hy))
        norm = np.linalg.norm(z)
        if norm == 0:
            raise ValueError(f"grid {grid.dims} too coarse for scheme {scheme}")
        maps.append(z / norm)
    return maps


def time_grid(J: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, J) if J > 1 else np.zeros(1)


@functools.lru_cache(maxsize=16)
def _gp_factor(omega: float, J: int):
    t = time_grid(J)
    K = np.exp(-((t[:, None] - t[None, :]) ** 2) / (2.0 * omega**2))
    jitter = 1e-8
    while jitter <= 1e-4 * (1 + 1e-9):
        try:
            chol = np.linalg.cholesky(K + jitter * np.eye(J))
            chol.setflags(write=False)
            return chol, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError(
        f"squared-exponential kernel (omega={omega}, J={J}) not factorizable with jitter <= 1e-4"
    )


def sample_gp(omega: float, J: int, rng, size: Optional[int] = None) -> np.ndarray:
    """Zero-mean GP draw(s) with kernel ``exp(-(t-t')^2 / (2 omega^2))`` on ``time_grid(J)``.

    Returns shape ``(J,)``, or ``(size, J)`` when ``size`` is given.
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    chol, _ = _gp_factor(float(omega), int(J))
    if size is None:
        return chol @ rng.standard_normal(J)
    return (chol @ rng.standard_normal((J, size))).T


@dataclass
class SimConfig:
    M: int = 40
    J: int = 500
    K: int = 2
    n: int = 20
    scheme: str = "BI"
    delta: float = 0.1
    regime: int = 1
    omega_f: float = 0.02
    omega_u: float = 0.002
    P: int = 50
    oblique_T: Optional[np.ndarray] = None
    seed: int = 0
    # test hook: local bump boxes are this many cells wide
    local_support_scale: float = 1.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be 1 or 2, got {self.regime}")
        if not 0 < self.delta < 0.5:
            raise ValueError("delta must lie in (0, 1/2)")
        if self.M < 2 or self.J < 1 or self.n < 1 or self.K < 1 or self.P < 0:
            raise ValueError("invalid simulation sizes")
        if self.oblique_T is not None:
            T = np.asarray(self.oblique_T, dtype=float)
            if T.shape != (self.K, self.K):
                raise ValueError("oblique_T must be K x K")
            if abs(np.linalg.det(T)) < 1e-10:
                raise ValueError("oblique_T must be invertible")
            if not np.allclose(np.diag(T @ T.T), 1.0, atol=1e-8):
                raise ValueError("oblique_T must satisfy diag(T T^T) = 1")
            self.oblique_T = T

    @property
    def grid(self) -> SpatialGrid:
        return SpatialGrid((self.M, self.M))

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        if self.oblique_T is not None:
            out["oblique_T"] = np.asarray(self.oblique_T).tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SimConfig":
        return cls(**obj)


@dataclass
class LocalTerm:
    bumps: np.ndarray       # (M, P) unit-norm spatial bumps
    amplitudes: np.ndarray  # (P,)
    processes: np.ndarray   # (P, J)
    boxes: np.ndarray       # (P, 2, 2): [axis, (lo, hi)]

    def values(self) -> np.ndarray:
        return self.bumps @ (self.amplitudes[:, None] * self.processes)


@dataclass
class GroundTruth:
    loadings: LoadingSet
    z: np.ndarray
    c: np.ndarray
    H: np.ndarray
    factors: list
    local: list = field(default_factory=list)
    grid: Optional[SpatialGrid] = None

    @property
    def global_cov(self) -> np.ndarray:
        L = self.loadings.matrix
        return L @ self.H @ L.T


def _local_boxes(rng, P, delta, scale):
    ncell = math.ceil(1.0 / delta - 1e-12)
    cells = rng.integers(0, ncell, size=(P, 2))
    lo = cells * delta
    hi = lo + scale * delta
    boxes = np.stack([np.clip(lo, 0, 1), np.clip(hi, 0, 1)], axis=2)
    return boxes


def _simulate_subject(args):
    cfg, L, T, ss, grid = args
    rng = np.random.default_rng(ss)
    F = sample_gp(cfg.omega_f, cfg.J, rng, size=cfg.K)
    if T is not None:
        F = T @ F
    X = L @ F
    local = None
    if cfg.P > 0:
        boxes = _local_boxes(rng, cfg.P, cfg.delta, cfg.local_support_scale)
        bumps = np.empty((grid.n_active, cfg.P))
        for p in range(cfg.P):
            v = grid.from_volume(box_bump(grid, boxes[p, :, 0], boxes[p, :, 1]))
            nv = np.linalg.norm(v)
            if nv == 0:
                raise ValueError(
                    f"delta={cfg.delta} is too small for M={cfg.M}: a local bump covers no voxel"
                )
            bumps[:, p] = v / nv
        amps = rng.uniform(*LOCAL_AMPLITUDE, size=cfg.P)
        procs = sample_gp(cfg.omega_u, cfg.J, rng, size=cfg.P)
        local = LocalTerm(bumps, amps, procs, boxes)
        X = X + local.values()
    return X, F, local


def simulate_dataset(cfg: SimConfig, threads=None):
    """Draw ``cfg.n`` scans and the ground truth that generated them."""
    grid = cfg.grid
    root = np.random.SeedSequence(cfg.seed)
    glob_ss, *subj_ss = root.spawn(cfg.n + 1)
    grng = np.random.default_rng(glob_ss)
    lo, hi = REGIMES[cfg.regime]
    c = grng.uniform(lo, hi, size=cfg.K)
    z = np.stack([grid.from_volume(m) for m in make_loading_scheme(cfg.scheme, grid, cfg.K)], axis=1)
    L = z * c
    T = cfg.oblique_T
    H = np.eye(cfg.K) if T is None else T @ T.T
    results = pmap(_simulate_subject, [(cfg, L, T, ss, grid) for ss in subj_ss], threads)
    scans = [ScanTensor(grid, X) for X, _, _ in results]
    truth = GroundTruth(
        loadings=LoadingSet(L, stage="true", kind="orthogonal" if T is None else "oblique",
                            phi=None if T is None else H),
        z=z,
        c=c,
        H=H,
        factors=[F for _, F, _ in results],
        local=[loc for _, _, loc in results if loc is not None],
        grid=grid,
    )
    return scans, truth


def true_local_cov_band_check(truth: GroundTruth, delta: float) -> bool:
    """True iff no local bump couples voxels at least ``delta`` apart along some axis.

    Distinct bumps carry independent time courses, so the local covariance is
    supported on pairs inside a single bump's support; that support's index
    extent along every axis must stay below ``delta``.
    """
    grid = truth.grid
    dims = np.asarray(grid.dims, dtype=float)
    idx = grid.active_indices()
    for term in truth.local:
        for p in range(term.bumps.shape[1]):
            sup = idx[term.bumps[:, p] != 0]
            if sup.shape[0] == 0:
                continue
            extent = (sup.max(axis=0) - sup.min(axis=0)) / dims
            if np.any(extent >= delta):
                return False
    return True
