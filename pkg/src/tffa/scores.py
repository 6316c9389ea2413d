"""Factor scores by penalised function-on-scalar regression.

With loadings ``L`` (M x K) held fixed, a subject's curves are ``F = A E``
where ``E`` holds P cubic B-splines on the time grid. ``A`` minimises

    1/2 ||X - L A E||_F^2 + 1/2 sum_k gamma_k (A D A^T)_kk,

``D`` being the Gram matrix of basis second derivatives. The normal
equations in vectorised (column-major) form are

    (E E^T kron L^T L + D kron diag(gamma)) vec(A) = vec(L^T X E^T).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, stats
from scipy.interpolate import BSpline

from ._parallel import pmap
from .simgen import time_grid
from .tensorio import ScanTensor, SpatialGrid


class ScoreError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalBasis:
    E: np.ndarray      # (P, J)
    D: np.ndarray      # (P, P)
    knots: np.ndarray
    degree: int = 3

    @property
    def P(self) -> int:
        return self.E.shape[0]

    @property
    def J(self) -> int:
        return self.E.shape[1]


def default_basis_size(J: int) -> int:
    return max(4, min(J // 4, 40))


def build_basis(P: int, J: int, kind: str = "bspline", degree: int = 3) -> TemporalBasis:
    """Cubic B-splines with equally spaced interior knots on [0, 1].

    ``D`` is integrated exactly: second derivatives are piecewise linear, so a
    3-point Gauss-Legendre rule per knot span is exact for their products.
    """
    if kind != "bspline":
        raise ValueError(f"unsupported basis kind {kind!r}")
    if P < degree + 1:
        raise ScoreError(f"need P >= {degree + 1} for degree-{degree} splines")
    if P > J:
        raise ScoreError(f"basis size P={P} exceeds number of time points J={J}")
    inner = np.linspace(0.0, 1.0, P - degree + 1)
    knots = np.concatenate([np.zeros(degree), inner, np.ones(degree)])
    t = time_grid(J)
    E = BSpline.design_matrix(t, knots, degree).toarray().T
    d2 = BSpline(knots, np.eye(P), degree).derivative(2)
    xg, wg = np.polynomial.legendre.leggauss(3)
    D = np.zeros((P, P))
    for a, b in zip(inner[:-1], inner[1:]):
        x = 0.5 * (b - a) * xg + 0.5 * (a + b)
        B2 = d2(x)
        D += (B2.T * (0.5 * (b - a) * wg)) @ B2
    D = 0.5 * (D + D.T)
    return TemporalBasis(E, D, knots, degree)


@dataclass
class FactorScores:
    F_hat: np.ndarray
    A: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    method: str = "fosr"


def _gamma_vec(gamma, K):
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (K,)).copy()
    if np.any(g < 0):
        raise ValueError("gamma must be non-negative")
    return g


def fosr_system(L, basis: TemporalBasis, gamma) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    K = L.shape[1]
    g = _gamma_vec(gamma, K)
    return np.kron(basis.E @ basis.E.T, L.T @ L) + np.kron(basis.D, np.diag(g))


def _factor(Msys, gamma):
    try:
        return linalg.cho_factor(Msys, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        hint = " (use gamma > 0)" if np.all(np.asarray(gamma) == 0) else ""
        raise ScoreError(f"FOSR system is singular: loadings rank-deficient{hint}") from exc


def _solve_many(cf, L, Xs, basis):
    K, P = L.shape[1], basis.P
    rhs = np.column_stack([(L.T @ X @ basis.E.T).ravel(order="F") for X in Xs])
    sol = linalg.cho_solve(cf, rhs)
    return [sol[:, i].reshape((K, P), order="F") for i in range(len(Xs))]


def fosr_scores(scan, L, basis: TemporalBasis, gamma=0.0) -> FactorScores:
    """Penalised least-squares factor curves for one subject."""
    X = scan.values if isinstance(scan, ScanTensor) else np.asarray(scan, dtype=float)
    L = np.asarray(L, dtype=float)
    if X.shape[1] != basis.J:
        raise ValueError("scan length does not match the basis")
    g = _gamma_vec(gamma, L.shape[1])
    if np.all(g == 0) and np.linalg.matrix_rank(L) < L.shape[1]:
        raise ScoreError("loadings are rank-deficient; use gamma > 0")
    cf = _factor(fosr_system(L, basis, g), g)
    A = _solve_many(cf, L, [X], basis)[0]
    return FactorScores(A @ basis.E, A, g, "fosr")


def fosr_objective(A, X, L, basis: TemporalBasis, gamma) -> float:
    g = _gamma_vec(gamma, L.shape[1])
    R = X - L @ A @ basis.E
    return 0.5 * float(np.sum(R * R)) + 0.5 * float(np.sum(g * np.diag(A @ basis.D @ A.T)))


def fosr_gradient(A, X, L, basis: TemporalBasis, gamma) -> np.ndarray:
    g = _gamma_vec(gamma, L.shape[1])
    E = basis.E
    return -L.T @ X @ E.T + L.T @ L @ A @ (E @ E.T) + g[:, None] * (A @ basis.D)


def pwls_scores(scan, L) -> FactorScores:
    """Independent least-squares fit at every time point."""
    X = scan.values if isinstance(scan, ScanTensor) else np.asarray(scan, dtype=float)
    L = np.asarray(L, dtype=float)
    if np.linalg.matrix_rank(L) < L.shape[1]:
        raise ScoreError("PWLS needs full-column-rank loadings")
    F = np.linalg.solve(L.T @ L, L.T @ X)
    return FactorScores(F, None, None, "pwls")


def spatial_folds(grid: SpatialGrid, V: int = 4) -> np.ndarray:
    """Fold label per active voxel from spatially contiguous blocks.

    V = 4 on grids with D >= 2 splits at the half-way lines of the first two
    axes; otherwise axis 0 is cut into V slabs.
    """
    c = grid.centers()
    if V == 4 and grid.ndim >= 2:
        labels = 2 * (c[:, 0] >= 0.5).astype(int) + (c[:, 1] >= 0.5).astype(int)
    else:
        labels = np.minimum((c[:, 0] * V).astype(int), V - 1)
    for v in range(V):
        if not np.any(labels == v):
            raise ScoreError(f"spatial fold {v} is empty")
    return labels


@dataclass
class GammaCV:
    gamma: np.ndarray
    candidates: list
    errors: np.ndarray                 # e_j averaged over folds and subjects
    fold_errors: np.ndarray            # (n_candidates, V, n_subjects)
    fold_fits: dict = field(default_factory=dict)   # (cand, v, i) -> F_hat


def _cv_errors(Xs, L, labels, basis, gamma, V, keep):
    errs = np.zeros((V, len(Xs)))
    fits = {}
    for v in range(V):
        out = labels != v
        Lm = L[out]
        cf = _factor(fosr_system(Lm, basis, gamma), gamma)
        As = _solve_many(cf, Lm, [X[out] for X in Xs], basis)
        inn = ~out
        for i, (X, A) in enumerate(zip(Xs, As)):
            F = A @ basis.E
            R = X[inn] - L[inn] @ F
            errs[v, i] = float(np.sum(R * R)) / inn.sum()
            if keep:
                fits[(v, i)] = F
    return errs, fits


def spatial_cv_gamma(scans: Sequence, L, grid: SpatialGrid, basis: TemporalBasis, gamma_grid,
                     V: int = 4, uniform: bool = True, keep_fits: bool = False,
                     threads=None) -> GammaCV:
    """Choose gamma by V-fold spatially blocked cross-validation (ties -> larger gamma)."""
    gamma_grid = [float(g) for g in gamma_grid]
    if not gamma_grid:
        raise ValueError("empty gamma grid")
    Xs = [s.values if isinstance(s, ScanTensor) else np.asarray(s, float) for s in scans]
    L = np.asarray(L, dtype=float)
    K = L.shape[1]
    labels = spatial_folds(grid, V)

    def run(gvec):
        return _cv_errors(Xs, L, labels, basis, gvec, V, keep_fits)

    if uniform or K == 1:
        cands = [np.full(K, g) for g in gamma_grid]
    else:
        cands = []
    results = pmap(run, cands, threads) if cands else []
    if not (uniform or K == 1):
        # coordinate-wise search, other components held at their current best
        current = np.full(K, min(gamma_grid))
        for k in range(K):
            step = []
            for g in gamma_grid:
                p = current.copy()
                p[k] = g
                step.append(p)
            step_res = pmap(run, step, threads)
            means = [r[0].mean() for r in step_res]
            current = step[_pick(means, gamma_grid)]
            cands.extend(step)
            results.extend(step_res)
        best = current
    errors = np.array([r[0].mean() for r in results])
    fold_errors = np.stack([r[0] for r in results])
    fits = {}
    if keep_fits:
        for c, r in enumerate(results):
            for (v, i), F in r[1].items():
                fits[(c, v, i)] = F
    if uniform or K == 1:
        best = cands[_pick(errors, gamma_grid)]
    return GammaCV(np.asarray(best), cands, errors, fold_errors, fits)


def _pick(errors, grid):
    errors = np.asarray(errors, dtype=float)
    best = errors.min()
    ties = [i for i, e in enumerate(errors) if e - best <= 1e-12 * max(abs(best), 1e-300)]
    return max(ties, key=lambda i: grid[i])


@dataclass
class DiagnosticReport:
    H_hat: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    flags_raw: np.ndarray
    flags_bonferroni: np.ndarray
    n: int
    J: int
    alpha: float = 0.05

    def to_json(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def factor_cov_diagnostic(F_hats: Sequence[np.ndarray], alpha: float = 0.05) -> DiagnosticReport:
    """``(1/nJ) sum_i F_i F_i^T`` with per-entry one-sample t-tests across subjects.

    Diagonal entries are tested against 1 and off-diagonal ones against 0;
    Bonferroni uses ``K(K+1)/2`` comparisons.
    """
    F_hats = [np.asarray(F, dtype=float) for F in F_hats]
    n = len(F_hats)
    if n < 2:
        raise ValueError("diagnostic needs at least two subjects")
    K, J = F_hats[0].shape
    h = np.stack([F @ F.T / F.shape[1] for F in F_hats])
    H_hat = h.mean(axis=0)
    H_hat = 0.5 * (H_hat + H_hat.T)
    target = np.eye(K)
    t = np.zeros((K, K))
    p = np.ones((K, K))
    for a in range(K):
        for b in range(a, K):
            x = h[:, a, b] - target[a, b]
            sd = x.std(ddof=1)
            if sd == 0:
                t[a, b] = 0.0 if np.all(x == 0) else np.inf * np.sign(x.mean())
                p[a, b] = 1.0 if np.all(x == 0) else 0.0
            else:
                res = stats.ttest_1samp(x, 0.0)
                t[a, b], p[a, b] = float(res.statistic), float(res.pvalue)
            t[b, a], p[b, a] = t[a, b], p[a, b]
    m = K * (K + 1) // 2
    return DiagnosticReport(H_hat, t, p, p < alpha, p < alpha / m, n, J, alpha)
