"""Smoothing, adaptive shrinkage and their cross-validated tuning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from ._parallel import pmap
from .completion import CompletionOptions, complete_rank, extract_loadings
from .covassembly import BandMask, empirical_spatial_cov, masked_residual_norm
from .loadings import LoadingSet
from .rotation import align_to_target
from .tensorio import ScanTensor, SpatialGrid

TRUNCATE = 4.0


def gaussian_smooth(volume, sigma: float, mask=None) -> np.ndarray:
    """Separable Gaussian filter (truncated at 4 sigma, reflect padding).

    With ``mask``, out-of-mask voxels are excluded and kernel weights are
    renormalised over the in-mask neighbourhood; out-of-mask output is 0.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    vol = np.asarray(volume, dtype=float)
    if sigma == 0:
        return vol.copy()

    def filt(x):
        for ax in range(x.ndim):
            x = ndimage.gaussian_filter1d(x, sigma, axis=ax, mode="reflect", truncate=TRUNCATE)
        return x

    if mask is None:
        return filt(vol)
    m = np.asarray(mask, dtype=float)
    num = filt(vol * m)
    den = filt(m)
    out = np.zeros_like(vol)
    inside = m > 0
    out[inside] = num[inside] / den[inside]
    return out


def smooth_matrix(L, grid: SpatialGrid, sigmas) -> np.ndarray:
    """Smooth each column of an ``(M_active, K)`` loading matrix on its grid."""
    L = np.asarray(L, dtype=float)
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=float), (L.shape[1],))
    out = np.empty_like(L)
    for k in range(L.shape[1]):
        if sigmas[k] == 0:
            out[:, k] = L[:, k]
            continue
        vol = grid.to_volume(L[:, k])
        out[:, k] = grid.from_volume(gaussian_smooth(vol, sigmas[k], grid.mask))
    return out


def adaptive_shrink(x, kappa: float, weight_fn: str = "inv_square") -> np.ndarray:
    """``sgn(x) max(|x| - kappa w(x), 0)`` with ``w(x) = |x|^-2`` and ``w(0) = inf``."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    if weight_fn != "inv_square":
        raise ValueError(f"unknown weight function {weight_fn!r}")
    x = np.asarray(x, dtype=float)
    if kappa == 0:
        return x.copy()
    ax = np.abs(x)
    out = np.zeros_like(x)
    nz = ax > 0
    out[nz] = np.sign(x[nz]) * np.maximum(ax[nz] - kappa / ax[nz] ** 2, 0.0)
    return out


def shrink_matrix(L, kappas) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    kappas = np.broadcast_to(np.asarray(kappas, dtype=float), (L.shape[1],))
    return np.column_stack([adaptive_shrink(L[:, k], kappas[k]) for k in range(L.shape[1])])


def smooth_loadings(ls: LoadingSet, grid: SpatialGrid, sigmas) -> LoadingSet:
    return ls.evolve(matrix=smooth_matrix(ls.matrix, grid, sigmas), stage="smoothed",
                     meta={**ls.meta, "sigma": np.broadcast_to(sigmas, (ls.K,)).tolist()})


def shrink_loadings(ls: LoadingSet, kappas, allow_unsmoothed: bool = False) -> LoadingSet:
    if ls.stage != "smoothed" and not allow_unsmoothed:
        raise ValueError(f"shrinkage expects smoothed loadings (got stage {ls.stage!r}); "
                         "pass allow_unsmoothed=True to override")
    return ls.evolve(matrix=shrink_matrix(ls.matrix, kappas), stage="shrunk",
                     meta={**ls.meta, "kappa": np.broadcast_to(kappas, (ls.K,)).tolist()})


@dataclass
class PostprocessConfig:
    sigma_grid: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0)
    kappa_grid: Sequence[float] = (0.0, 1e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1)
    # "relative": kappa_k is multiplied by max|L_k|^3 of the full-data rotated loadings
    kappa_scale: str = "relative"
    V: int = 3
    uniform: bool = True
    weight_fn: str = "inv_square"

    def __post_init__(self):
        if not len(self.sigma_grid) or not len(self.kappa_grid):
            raise ValueError("tuning grids must be non-empty")
        if self.V < 2:
            raise ValueError("need at least two folds")
        if min(self.sigma_grid) < 0 or min(self.kappa_grid) < 0:
            raise ValueError("grid values must be non-negative")
        if self.kappa_scale not in ("relative", "absolute"):
            raise ValueError("kappa_scale must be 'relative' or 'absolute'")


@dataclass
class FoldSet:
    assignment: list            # fold -> subject indices
    covs: list                  # MaskedCovariance of each held-out fold
    loadings: list              # (M, K) fold-complement loadings aligned to the full initial ones
    residuals: list             # Procrustes residual per fold
    grid: SpatialGrid = None
    Z: np.ndarray = None


def fold_assignment(n: int, V: int) -> list:
    if n < V:
        raise ValueError(f"need n >= V (n={n}, V={V})")
    return [list(range(v, n, V)) for v in range(V)]


def make_folds(scans: Sequence[ScanTensor], V: int, mask: BandMask, target: LoadingSet,
               opts: Optional[CompletionOptions] = None, center: bool = True,
               threads: Optional[int] = None) -> FoldSet:
    """Per-fold held-out covariances and complement fits aligned to ``target``.

    ``target`` is the full-data initial expression; each complement fit is
    Procrustes-aligned to it so that component k means the same thing across folds.
    """
    assignment = fold_assignment(len(scans), V)
    K = target.K
    Z = mask.dense()

    def one(v):
        held = [scans[i] for i in assignment[v]]
        rest = [scans[i] for i in range(len(scans)) if i not in set(assignment[v])]
        cov_v = empirical_spatial_cov(held, mask, center=center, threads=1)
        cov_rest = empirical_spatial_cov(rest, mask, center=center, threads=1)
        # the full-data fit is a close starting point for the complement
        fit = complete_rank(cov_rest, K, opts, init=target.matrix, Z=Z)
        L = extract_loadings(fit.V)
        al = align_to_target(L, target, "orthogonal")
        return cov_v, al.loadings.matrix, al.residual

    out = pmap(one, range(V), threads)
    return FoldSet(assignment, [o[0] for o in out], [o[1] for o in out], [o[2] for o in out],
                   mask.grid, Z)


def _rotation_parts(transform, kind, K):
    """Matrices taking initial loadings to rotated ones and rotated ones back to an
    orthogonal-factor expression."""
    if transform is None:
        return np.eye(K), np.eye(K)
    Tm = np.asarray(transform, dtype=float)
    if kind == "orthogonal":
        return Tm, np.eye(K)
    return np.linalg.inv(Tm), Tm


def cv_error(folds: FoldSet, rotated_fold_loadings, revert) -> float:
    errs = []
    for v, Lv in enumerate(rotated_fold_loadings):
        Lo = Lv @ revert
        errs.append(masked_residual_norm(folds.covs[v].matrix, Lo @ Lo.T, folds.Z))
    return float(np.mean(errs))


def _argmin(values, params, prefer_larger):
    values = np.asarray(values, dtype=float)
    best = values.min()
    tol = 1e-12 * max(abs(best), 1e-300)
    ties = [i for i, v in enumerate(values) if v - best <= tol]
    key = (lambda i: params[i]) if prefer_larger else (lambda i: -params[i])
    return max(ties, key=key)


def _coordinate_search(folds, K, grid, evaluate, uniform, prefer_larger, threads):
    """Returns (best parameter vector, [(params, cv)]) over the candidate grid."""
    grid = [float(g) for g in grid]
    curve = []
    if uniform or K == 1:
        vals = pmap(lambda g: evaluate(np.full(K, g)), grid, threads)
        curve = [(np.full(K, g), cv) for g, cv in zip(grid, vals)]
        i = _argmin(vals, grid, prefer_larger)
        return np.full(K, grid[i]), curve
    current = np.full(K, min(grid) if not prefer_larger else min(grid))
    for k in range(K):
        cands = []
        for g in grid:
            p = current.copy()
            p[k] = g
            cands.append(p)
        vals = pmap(evaluate, cands, threads)
        curve.extend(zip(cands, vals))
        current = cands[_argmin(vals, grid, prefer_larger)]
    return current, curve


def cv_tune_sigma(folds: FoldSet, transform, kind: str, sigma_grid, uniform=True, threads=None):
    """Pick smoothing widths minimising the mean held-out masked error."""
    if not len(sigma_grid):
        raise ValueError("empty sigma grid")
    K = folds.loadings[0].shape[1]
    fwd, revert = _rotation_parts(transform, kind, K)
    rotated = [Lv @ fwd for Lv in folds.loadings]

    def evaluate(sig):
        return cv_error(folds, [smooth_matrix(Lr, folds.grid, sig) for Lr in rotated], revert)

    return _coordinate_search(folds, K, sigma_grid, evaluate, uniform, False, threads)


def cv_tune_kappa(folds: FoldSet, transform, kind: str, sigma, kappa_grid, uniform=True,
                  kappa_unit=None, threads=None):
    """Pick shrinkage levels after smoothing with ``sigma``.

    ``kappa_unit`` (per component) multiplies the grid values; ties prefer larger kappa.
    """
    if not len(kappa_grid):
        raise ValueError("empty kappa grid")
    K = folds.loadings[0].shape[1]
    unit = np.ones(K) if kappa_unit is None else np.broadcast_to(np.asarray(kappa_unit, float), (K,))
    fwd, revert = _rotation_parts(transform, kind, K)
    smoothed = [smooth_matrix(Lv @ fwd, folds.grid, sigma) for Lv in folds.loadings]

    def evaluate(kap):
        return cv_error(folds, [shrink_matrix(Ls, kap * unit) for Ls in smoothed], revert)

    return _coordinate_search(folds, K, kappa_grid, evaluate, uniform, True, threads)


@dataclass
class PostprocessResult:
    sigma: np.ndarray
    kappa: np.ndarray
    smoothed: LoadingSet
    shrunk: LoadingSet
    cv_sigma: list = field(default_factory=list)
    cv_kappa: list = field(default_factory=list)
    fold_residuals: list = field(default_factory=list)


def postprocess(rotated: LoadingSet, folds: FoldSet, cfg: PostprocessConfig,
                grid: SpatialGrid, threads=None, shrink: bool = True) -> PostprocessResult:
    """Tune sigma then kappa on ``folds`` and apply both to the full-data rotated loadings."""
    sigma, cv_s = cv_tune_sigma(folds, rotated.transform, rotated.kind, cfg.sigma_grid,
                                cfg.uniform, threads)
    smoothed = smooth_loadings(rotated, grid, sigma)
    unit = None
    if cfg.kappa_scale == "relative":
        unit = np.max(np.abs(smoothed.matrix), axis=0) ** 3
    if shrink:
        kappa, cv_k = cv_tune_kappa(folds, rotated.transform, rotated.kind, sigma, cfg.kappa_grid,
                                    cfg.uniform, unit, threads)
    else:
        kappa, cv_k = np.zeros(rotated.K), []
    kabs = kappa * (1.0 if unit is None else unit)
    shrunk = shrink_loadings(smoothed, kabs)
    return PostprocessResult(sigma, kabs, smoothed, shrunk, cv_s, cv_k, folds.residuals)
