"""Masked low-rank covariance completion.

For each candidate rank j we minimise

    f(V) = sum_{Z=1} (C - V V^T)^2,     grad f = -4 (Z o (C - V V^T)) V,

over ``V`` in R^{M x j}, then read the number of factors off the scree curve
``j -> f_j`` and take scaled eigenvectors of ``V V^T`` as initial loadings.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import linalg, optimize

from ._parallel import pmap
from .covassembly import BandMask, MaskedCovariance
from .loadings import LoadingSet, normalize_columns
from .tensorio import SpatialGrid

log = logging.getLogger(__name__)


class IdentifiabilityError(ValueError):
    """Requested rank or bandwidth violates the identifiability bound."""


class CompletionError(RuntimeError):
    def __init__(self, msg, last_iterate=None):
        super().__init__(msg)
        self.last_iterate = last_iterate


def rank_cap(grid: SpatialGrid, delta) -> int:
    """Largest identifiable number of factors, ``prod_d floor((1/2 - delta_d) M_d - 1)``."""
    deltas = np.broadcast_to(np.asarray(delta, dtype=float), (grid.ndim,))
    if np.any(deltas >= 0.5) or np.any(deltas < 0):
        raise IdentifiabilityError(f"every bandwidth must be in [0, 1/2), got {list(deltas)}")
    cap = 1
    for dl, M in zip(deltas, grid.dims):
        # small epsilon guards products like 0.4 * 40 landing just under an integer
        cap *= max(0, math.floor((0.5 - dl) * M - 1 + 1e-9))
    return int(cap)


def mask_bandwidth(mask: BandMask) -> tuple:
    if mask.rule == "distance":
        return mask.delta
    return tuple(r / M for r, M in zip(mask.radius, mask.grid.dims))


@dataclass
class CompletionOptions:
    max_rank: int = 5
    optimizer: str = "quasi_newton"   # quasi_newton | block_sgd | hybrid
    max_iters: int = 2000
    grad_tol: float = 1e-8
    memory: int = 10
    n_strata: int = 4
    sgd_epochs: int = 200
    warmup_epochs: int = 15
    lr0: Optional[float] = None
    randomized_init: bool = False
    seed: int = 0
    threads: Optional[int] = None

    def __post_init__(self):
        if self.max_rank < 1:
            raise ValueError("max_rank must be >= 1")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.optimizer not in ("quasi_newton", "block_sgd", "hybrid"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class MaskedObjective:
    """Objective and gradient of the masked completion problem."""

    def __init__(self, C, Z):
        self.C = np.asarray(C, dtype=float)
        self.W = np.asarray(Z, dtype=float)
        self.WC = self.W * self.C
        self.n_evals = 0

    def residual(self, V):
        R = V @ V.T
        R *= self.W
        np.subtract(self.WC, R, out=R)
        return R

    def value(self, V) -> float:
        R = self.residual(V).ravel()
        return float(np.dot(R, R))

    def value_grad(self, V):
        self.n_evals += 1
        R = self.residual(V)
        r = R.ravel()
        return float(np.dot(r, r)), -4.0 * (R @ V)


def _sym_top(A, j, rng=None, randomized=False, oversample=10, n_iter=4):
    """Top-j eigenpairs (descending) of a symmetric matrix."""
    M = A.shape[0]
    j = min(j, M)
    if not randomized or j + oversample >= M:
        w, U = linalg.eigh(A, subset_by_index=[M - j, M - 1])
        return w[::-1], U[:, ::-1]
    rng = np.random.default_rng(0) if rng is None else rng
    Q = np.linalg.qr(A @ rng.standard_normal((M, j + oversample)))[0]
    for _ in range(n_iter):
        Q = np.linalg.qr(A @ Q)[0]
    w, S = np.linalg.eigh(Q.T @ A @ Q)
    order = np.argsort(w)[::-1][:j]
    return w[order], Q @ S[:, order]


def spectral_init(cov, j: int, randomized: bool = False, seed: int = 0) -> np.ndarray:
    """``U_j Sigma_j^{1/2}`` from the rank-j truncated eigendecomposition of the covariance."""
    C = cov.matrix if isinstance(cov, MaskedCovariance) else np.asarray(cov, dtype=float)
    if j > C.shape[0]:
        raise ValueError(f"rank {j} exceeds dimension {C.shape[0]}")
    w, U = _sym_top(C, j, np.random.default_rng(seed), randomized)
    return U * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class CompletionResult:
    V: np.ndarray
    f: float
    iters: int = 0
    grad_norm: float = float("nan")
    source: str = "optimized"
    rescaled: bool = False
    trace: list = field(default_factory=list)


def _lbfgs(obj: MaskedObjective, V0, opts: CompletionOptions):
    M, j = V0.shape
    last = {"x": V0.ravel().copy(), "g": None}
    state = {"iters": 0, "g": float("nan")}

    def fun(x):
        V = x.reshape(M, j)
        f, g = obj.value_grad(V)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise CompletionError("non-finite objective during quasi-Newton", last["x"].reshape(M, j))
        last["x"] = x.copy()
        last["g"] = g
        return f, g.ravel()

    def callback(intermediate_result):
        state["iters"] += 1
        f = intermediate_result.fun
        x = intermediate_result.x
        if last["g"] is not None and np.array_equal(x, last["x"]):
            g = np.linalg.norm(last["g"])
        else:
            g = np.linalg.norm(obj.value_grad(x.reshape(M, j))[1])
        state["g"] = g
        if g <= opts.grad_tol * (1.0 + f):
            raise StopIteration

    res = optimize.minimize(
        fun, V0.ravel(), jac=True, method="L-BFGS-B", callback=callback,
        options={"maxiter": opts.max_iters, "maxcor": opts.memory, "gtol": 0.0,
                 "ftol": 1e-15, "maxls": 40},
    )
    V = res.x.reshape(M, j)
    f, g = obj.value_grad(V)
    return V, f, state["iters"], float(np.linalg.norm(g))


def stratum_schedule(M: int, n_strata: int, rng) -> List[list]:
    """Strata of disjoint block pairs covering every (row block, column block) once.

    Indices are shuffled into ``n_strata`` blocks; off-diagonal pairs follow a
    round-robin tournament (each round is a perfect matching) and a final
    stratum holds all diagonal blocks.
    """
    perm = rng.permutation(M)
    blocks = [b for b in np.array_split(perm, max(1, min(n_strata, M))) if b.size]
    B = len(blocks)
    ids = list(range(B)) + ([None] if B % 2 else [])
    n = len(ids)
    strata = []
    for _ in range(n - 1):
        pairs = []
        for i in range(n // 2):
            a, b = ids[i], ids[n - 1 - i]
            if a is not None and b is not None:
                pairs.append((blocks[min(a, b)], blocks[max(a, b)]))
        if pairs:
            strata.append(pairs)
        ids = [ids[0]] + [ids[-1]] + ids[1:-1]
    strata.append([(b, b) for b in blocks])
    return strata


def _pair_update(args):
    V, WC, W, a, b, lr, diag = args
    Va, Vb = V[a], V[b]
    R = WC[np.ix_(a, b)] - W[np.ix_(a, b)] * (Va @ Vb.T)
    if diag:
        return ((a, Va + lr * 4.0 * (R @ Va)),)
    # the symmetric block (b, a) contributes the same residual a second time
    return ((a, Va + lr * 8.0 * (R @ Vb)), (b, Vb + lr * 8.0 * (R.T @ Va)))


def _block_sgd(obj: MaskedObjective, V0, opts: CompletionOptions, epochs: int):
    rng = np.random.default_rng(opts.seed)
    V = V0.copy()
    f = obj.value(V)
    lr = opts.lr0
    if lr is None:
        lr = 1.0 / (12.0 * max(np.linalg.norm(V0, 2) ** 2, 1e-12) + 1e-12)
    trace = [f]
    for epoch in range(epochs):
        strata = stratum_schedule(V.shape[0], opts.n_strata, rng)
        order = rng.permutation(len(strata))
        Vn = V.copy()
        for s in order:
            jobs = [(Vn, obj.WC, obj.W, a, b, lr, a is b) for a, b in strata[s]]
            for updates in pmap(_pair_update, jobs, opts.threads):
                for rows, new in updates:
                    Vn[rows] = new
        fn = obj.value(Vn)
        if not np.isfinite(fn):
            raise CompletionError("non-finite objective during block SGD", V)
        if fn < f:
            improvement = (f - fn) / max(f, 1e-300)
            V, f = Vn, fn
            lr *= 1.05
            trace.append(f)
            if improvement < 1e-12:
                break
        else:
            lr *= 0.5
            if lr < 1e-30:
                break
    g = np.linalg.norm(obj.value_grad(V)[1])
    return V, f, len(trace) - 1, float(g), trace


def complete_rank(cov: MaskedCovariance, j: int, opts: Optional[CompletionOptions] = None,
                  init: Optional[np.ndarray] = None, Z: Optional[np.ndarray] = None) -> CompletionResult:
    """Minimise the masked objective at rank ``j`` starting from ``init``
    (spectral initialisation when omitted)."""
    opts = opts or CompletionOptions()
    Z = cov.mask.dense() if Z is None else Z
    if not Z.any():
        raise ValueError("mask has no off-band entries")
    cap = rank_cap(cov.mask.grid, mask_bandwidth(cov.mask))
    if j > cap:
        raise IdentifiabilityError(f"rank {j} exceeds identifiability cap K* = {cap}")
    obj = MaskedObjective(cov.matrix, Z)
    V0 = spectral_init(cov, j, opts.randomized_init, opts.seed) if init is None else np.asarray(init, float)
    f0 = obj.value(V0)
    trace = []
    if opts.optimizer == "quasi_newton":
        V, f, it, g = _lbfgs(obj, V0, opts)
    elif opts.optimizer == "block_sgd":
        V, f, it, g, trace = _block_sgd(obj, V0, opts, opts.sgd_epochs)
    else:
        Vw, _, it0, _, trace = _block_sgd(obj, V0, opts, opts.warmup_epochs)
        V, f, it, g = _lbfgs(obj, Vw, opts)
        it += it0
    source = "optimized"
    if f0 < f:
        V, f, source = V0, f0, "init"
    res = CompletionResult(V, f, it, g, source, trace=trace)
    tr_C = float(np.trace(cov.matrix))
    tr_V = float(np.sum(V * V))
    if tr_V > tr_C > 0:
        log.info("trace constraint active at rank %d: rescaling by %.4g", j, tr_C / tr_V)
        res.V = V * math.sqrt(tr_C / tr_V)
        res.f = obj.value(res.V)
        res.rescaled = True
    return res


@dataclass
class RankPath:
    entries: list        # [(j, V_j, f_j)]
    f0: Optional[float] = None
    reports: list = field(default_factory=list)

    @property
    def f(self) -> np.ndarray:
        return np.array([e[2] for e in self.entries])

    def V(self, j: int) -> np.ndarray:
        for jj, V, _ in self.entries:
            if jj == j:
                return V
        raise KeyError(j)

    def scree_rows(self):
        """(j, f_j, f_{j+1}/f_j) rows; the ratio is blank on the last rank."""
        f = self.f
        rows = []
        for i, (j, _, fj) in enumerate(self.entries):
            ratio = f[i + 1] / fj if i + 1 < len(f) and fj > 0 else float("nan")
            rows.append((j, fj, ratio))
        return rows


def _residual_column(obj: MaskedObjective, V, rng):
    R = obj.residual(V)
    w, U = _sym_top(0.5 * (R + R.T), 1)
    if w[0] > 0:
        return U[:, :1] * math.sqrt(w[0])
    return 1e-3 * rng.standard_normal((V.shape[0], 1)) * math.sqrt(max(np.mean(V * V), 1e-12))


def rank_path(cov: MaskedCovariance, max_rank: int, opts: Optional[CompletionOptions] = None) -> RankPath:
    """Solve the completion problem for ranks 1..max_rank with non-increasing objective."""
    opts = opts or CompletionOptions(max_rank=max_rank)
    cap = rank_cap(cov.mask.grid, mask_bandwidth(cov.mask))
    if max_rank > cap:
        raise IdentifiabilityError(f"max_rank {max_rank} exceeds identifiability cap K* = {cap}")
    if max_rank > cov.M:
        raise ValueError("max_rank exceeds the number of voxels")
    Z = cov.mask.dense()
    obj = MaskedObjective(cov.matrix, Z)
    rng = np.random.default_rng(opts.seed)
    path = RankPath([], f0=obj.value(np.zeros((cov.M, 1))))
    prev = None
    for j in range(1, max_rank + 1):
        best = complete_rank(cov, j, opts, Z=Z)
        if prev is not None:
            warm = np.hstack([prev.V, _residual_column(obj, prev.V, rng)])
            cand = complete_rank(cov, j, opts, init=warm, Z=Z)
            if cand.f < best.f:
                best = cand
                best.source = "warm:" + best.source
            if best.f > prev.f:
                emb = np.hstack([prev.V, np.zeros((cov.M, 1))])
                best = CompletionResult(emb, prev.f, 0, prev.grad_norm, "embedded")
        path.entries.append((j, best.V, best.f))
        path.reports.append({"j": j, "f": best.f, "iters": best.iters, "grad_norm": best.grad_norm,
                             "source": best.source, "rescaled": best.rescaled})
        prev = best
    return path


def select_rank(path: RankPath, mode: str = "elbow", c: Optional[float] = None,
                j: Optional[int] = None) -> int:
    """Pick the number of factors from a rank path.

    ``elbow`` takes the largest second difference of ``log f`` (the rank-0
    objective is prepended when known), ``threshold`` the smallest j with
    ``f_j < c`` and ``fixed`` returns ``j``.
    """
    if not path.entries:
        raise ValueError("empty rank path")
    js = [e[0] for e in path.entries]
    f = path.f
    if mode == "fixed":
        if j is None:
            raise ValueError("fixed mode needs j")
        return int(j)
    if mode == "threshold":
        if c is None:
            raise ValueError("threshold mode needs c")
        hits = [jj for jj, fj in zip(js, f) if fj < c]
        if not hits:
            raise ValueError(f"threshold {c} never met (min f = {f.min():.6g})")
        return int(hits[0])
    if mode != "elbow":
        raise ValueError(f"unknown selection mode {mode!r}")
    ranks = list(js)
    vals = list(f)
    if path.f0 is not None:
        ranks = [0] + ranks
        vals = [path.f0] + vals
    vals = np.asarray(vals, dtype=float)
    floor = max(vals.max(), 1e-300) * 1e-15
    logf = np.log(np.maximum(vals, floor))
    if len(vals) < 3:
        # too short for a second difference: take the larger single drop
        return int(js[int(np.argmin(f))] if len(f) > 1 and f[-1] < 0.5 * f[0] else js[0])
    d2 = logf[:-2] - 2 * logf[1:-1] + logf[2:]
    best = int(np.argmax(d2)) + 1
    return int(ranks[best]) if ranks[best] > 0 else int(js[0])


def extract_loadings(V, **meta) -> LoadingSet:
    """Scaled eigenvectors ``lambda_k^{1/2} eta_k`` of ``V V^T`` via the Gram matrix ``V^T V``."""
    V = np.asarray(V, dtype=float)
    if not np.all(np.isfinite(V)):
        raise ValueError("non-finite factor")
    if np.any(np.linalg.norm(V, axis=0) == 0):
        raise ValueError("factor has a zero column")
    w, Q = np.linalg.eigh(V.T @ V)
    order = np.argsort(w)[::-1]
    L = V @ Q[:, order]
    L, _, _ = normalize_columns(L, order=True)
    return LoadingSet(L, stage="initial", meta=dict(meta))


def global_cov_from(V) -> np.ndarray:
    return V @ V.T
