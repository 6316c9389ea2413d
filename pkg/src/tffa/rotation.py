"""Orthogonal and oblique rotation of loading matrices by gradient projection.

Conventions: an orthogonal rotation returns ``R`` with ``L* = L R``; an
oblique rotation returns ``T`` with ``diag(T T^T) = 1``, ``L* = L T^{-1}``
and factor covariance ``Phi = T T^T``, so that ``L* Phi L*^T = L L^T``.

The optimiser is the Bernaards-Jennrich gradient projection algorithm; on
the oblique side it works internally with ``T_g = T^T`` (unit-norm columns).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._parallel import pmap
from .loadings import LoadingSet, normalize_columns

log = logging.getLogger(__name__)


class RotationError(RuntimeError):
    pass


@dataclass
class RotationOptions:
    max_iter: int = 1000
    tol: float = 1e-8
    restarts: int = 10
    seed: int = 0
    normalize: bool = False   # Kaiser row normalisation (varimax only)
    threads: Optional[int] = None


# --- criteria: each returns (value to minimise, gradient wrt L) -------------

def _quartimax(L, alpha=None):
    L2 = L * L
    return -0.25 * np.sum(L2 * L2), -L * L2


def _varimax(L, alpha=None):
    L2 = L * L
    col = L2.mean(axis=0)
    q = np.sum(L2 * L2) - L.shape[0] * np.sum(col * col)
    return -0.25 * q, -(L * (L2 - col))


def _oblimin(L, alpha=0.0):
    M, K = L.shape
    L2 = L * L
    X = L2 - (alpha / M) * L2.sum(axis=0, keepdims=True) if alpha else L2
    N = np.ones((K, K)) - np.eye(K)
    XN = X @ N
    # sum_{k != k'} ... is twice the k < k' sum
    return 0.25 * np.sum(L2 * XN), L * XN


_CRITERIA = {"quartimax": _quartimax, "varimax": _varimax, "oblimin": _oblimin,
             "quartimin": _oblimin}


def criterion_value(L, method: str, alpha: float = 0.0) -> float:
    """The criterion as usually reported.

    varimax/quartimax: the maximised simplicity score; oblimin:
    ``sum_{k<k'} [<L_k^2, L_k'^2> - (alpha/M) sum L_k^2 sum L_k'^2]``.
    """
    L = np.asarray(L, dtype=float)
    q, _ = _CRITERIA[method](L, alpha)
    return -4.0 * q if method in ("varimax", "quartimax") else 2.0 * q


@dataclass
class RotationResult:
    loadings: LoadingSet
    transform: np.ndarray
    kind: str
    method: str
    phi: np.ndarray
    criterion: float
    trace: list = field(default_factory=list)
    converged: bool = True
    restart: int = 0


def _gpa_orthogonal(A, crit, alpha, T, opts):
    L = A @ T
    f, Gq = crit(L, alpha)
    trace = [f]
    al = 1.0
    converged = False
    for _ in range(opts.max_iter):
        G = A.T @ Gq
        Mx = T.T @ G
        Gp = G - T @ (0.5 * (Mx + Mx.T))
        s = np.linalg.norm(Gp)
        if s < opts.tol:
            converged = True
            break
        al *= 2.0
        accepted = False
        for _ in range(40):
            U, _, Vt = np.linalg.svd(T - al * Gp)
            Tt = U @ Vt
            ft, Gqt = crit(A @ Tt, alpha)
            if ft < f - 0.5 * s * s * al:
                accepted = True
                break
            al *= 0.5
        if not accepted:
            if ft < f:
                accepted = True
            else:
                converged = s < 1e3 * opts.tol
                break
        T, f, Gq = Tt, ft, Gqt
        trace.append(f)
    return T, f, trace, converged


def _gpa_oblique(A, crit, alpha, T, opts):
    def at(Tg):
        Ti = np.linalg.inv(Tg)
        L = A @ Ti.T
        f, Gq = crit(L, alpha)
        return f, -(L.T @ Gq @ Ti).T

    f, G = at(T)
    trace = [f]
    al = 1.0
    converged = False
    for _ in range(opts.max_iter):
        Gp = G - T * np.sum(T * G, axis=0)
        s = np.linalg.norm(Gp)
        if s < opts.tol:
            converged = True
            break
        al *= 2.0
        accepted = False
        for _ in range(40):
            X = T - al * Gp
            Tt = X / np.linalg.norm(X, axis=0)
            if abs(np.linalg.det(Tt)) < 1e-10:
                al *= 0.5
                continue
            ft, Gt = at(Tt)
            if ft < f - 0.5 * s * s * al:
                accepted = True
                break
            al *= 0.5
        if not accepted:
            if abs(np.linalg.det(Tt)) >= 1e-10 and ft < f:
                accepted = True
            else:
                converged = s < 1e3 * opts.tol
                break
        T, f, G = Tt, ft, Gt
        trace.append(f)
    return T, f, trace, converged


def _start(K, idx, seed):
    if idx == 0:
        return np.eye(K)
    rng = np.random.default_rng([seed, idx])
    Q, R = np.linalg.qr(rng.standard_normal((K, K)))
    return Q * np.sign(np.diag(R))


def _best(results):
    # lowest criterion, then smallest distance from the identity, then restart index
    K = results[0][0].shape[0]
    key = lambda r: (round(r[1], 12), np.linalg.norm(r[0] - np.eye(K)), r[4])  # noqa: E731
    return min(results, key=key)


def rotate_orthogonal(L, criterion: str = "varimax", opts: Optional[RotationOptions] = None) -> RotationResult:
    """Varimax or quartimax rotation of the columns of ``L``."""
    opts = opts or RotationOptions()
    if criterion not in ("varimax", "quartimax"):
        raise ValueError(f"unknown orthogonal criterion {criterion!r}")
    A = np.asarray(L.matrix if isinstance(L, LoadingSet) else L, dtype=float)
    M, K = A.shape
    crit = _CRITERIA[criterion]
    if K == 1:
        R = np.eye(1)
        Ls, perm, signs = normalize_columns(A)
        R = R[:, perm] * signs
        return RotationResult(LoadingSet(Ls, "rotated", "orthogonal", R, np.eye(1)), R,
                              "orthogonal", criterion, np.eye(1), criterion_value(Ls, criterion))
    scale = np.ones((M, 1))
    if opts.normalize and criterion == "varimax":
        scale = np.linalg.norm(A, axis=1, keepdims=True)
        scale[scale == 0] = 1.0
    An = A / scale

    def run(i):
        T, f, trace, conv = _gpa_orthogonal(An, crit, None, _start(K, i, opts.seed), opts)
        return T, f, trace, conv, i

    T, f, trace, conv, idx = _best(pmap(run, range(max(1, opts.restarts)), opts.threads))
    if not conv:
        warnings.warn(f"{criterion} did not converge in {opts.max_iter} iterations", RuntimeWarning)
    Ls, perm, signs = normalize_columns(A @ T)
    R = T[:, perm] * signs
    ls = LoadingSet(Ls, "rotated", "orthogonal", R, np.eye(K), meta={"method": criterion})
    return RotationResult(ls, R, "orthogonal", criterion, np.eye(K),
                          criterion_value(Ls, criterion), [-4.0 * v for v in trace], conv, idx)


def rotate_oblique(L, alpha: float = 0.0, opts: Optional[RotationOptions] = None) -> RotationResult:
    """Direct oblimin rotation (quartimin when ``alpha == 0``)."""
    opts = opts or RotationOptions()
    if alpha > 0:
        raise ValueError("positive alpha can produce degenerate solutions; use alpha <= 0")
    A = np.asarray(L.matrix if isinstance(L, LoadingSet) else L, dtype=float)
    M, K = A.shape
    method = "quartimin" if alpha == 0 else "oblimin"
    if K == 1:
        Ls, perm, signs = normalize_columns(A)
        T = np.eye(1) * signs
        return RotationResult(LoadingSet(Ls, "rotated", "oblique", T, np.eye(1)), T,
                              "oblique", method, np.eye(1), 0.0)

    def run(i):
        Tg, f, trace, conv = _gpa_oblique(A, _oblimin, alpha, _start(K, i, opts.seed), opts)
        if abs(np.linalg.det(Tg)) < 1e-10:
            return None
        return Tg, f, trace, conv, i

    results = [r for r in pmap(run, range(max(1, opts.restarts)), opts.threads) if r is not None]
    if not results:
        raise RotationError("oblique rotation degenerated on every restart")
    Tg, f, trace, conv, idx = _best(results)
    if not conv:
        warnings.warn(f"{method} did not converge in {opts.max_iter} iterations", RuntimeWarning)
    T = Tg.T
    Ls, perm, signs = normalize_columns(A @ np.linalg.inv(T))
    T = T[perm, :] * signs[:, None]
    phi = T @ T.T
    ls = LoadingSet(Ls, "rotated", "oblique", T, phi, meta={"method": method, "alpha": alpha})
    return RotationResult(ls, T, "oblique", method, phi,
                          criterion_value(Ls, "oblimin", alpha), [2.0 * v for v in trace], conv, idx)


def rotate(L, method: str, alpha: float = 0.0, opts: Optional[RotationOptions] = None) -> RotationResult:
    if method in ("varimax", "quartimax"):
        return rotate_orthogonal(L, method, opts)
    if method in ("oblimin", "quartimin"):
        return rotate_oblique(L, alpha if method == "oblimin" else 0.0, opts)
    raise ValueError(f"unknown rotation method {method!r}")


# --- alignment ---------------------------------------------------------------

@dataclass
class AlignResult:
    loadings: LoadingSet
    transform: np.ndarray
    residual: float
    perm: np.ndarray
    signs: np.ndarray
    fallback: bool = False


def signed_permutation_match(A, B):
    """Greedy signed permutation ``(perm, signs)`` so that ``A[:, perm] * signs ~ B``."""
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    na[na == 0] = 1
    nb[nb == 0] = 1
    S = (A.T @ B) / np.outer(na, nb)
    K = A.shape[1]
    perm = np.full(K, -1)
    signs = np.ones(K)
    used_a, used_b = set(), set()
    for flat in np.argsort(-np.abs(S), axis=None):
        a, b = divmod(int(flat), K)
        if a in used_a or b in used_b:
            continue
        perm[b] = a
        signs[b] = 1.0 if S[a, b] >= 0 else -1.0
        used_a.add(a)
        used_b.add(b)
        if len(used_b) == K:
            break
    return perm, signs


def align_to_target(source, target, kind: str = "orthogonal", snap: bool = False) -> AlignResult:
    """Align ``source`` loadings to ``target``.

    orthogonal: Procrustes rotation ``R = argmin ||S R - T||_F`` (``snap``
    replaces it by the nearest signed permutation). oblique: least-squares
    ``B`` with ``S B ~ T`` (any invertible map, not only rotations).
    """
    S = np.asarray(source.matrix if isinstance(source, LoadingSet) else source, float)
    Tg = np.asarray(target.matrix if isinstance(target, LoadingSet) else target, float)
    if S.shape != Tg.shape:
        raise ValueError(f"shape mismatch {S.shape} vs {Tg.shape}")
    K = S.shape[1]
    cross = S.T @ Tg
    sv = np.linalg.svd(cross, compute_uv=False)
    fallback = sv[-1] <= 1e-12 * max(sv[0], 1e-300)
    if fallback:
        warnings.warn("rank-deficient cross-product; aligning by signed permutation only",
                      RuntimeWarning)
    if fallback or snap:
        if not fallback and kind == "orthogonal":
            U, _, Vt = np.linalg.svd(cross)
            perm, signs = signed_permutation_match(np.eye(K), U @ Vt)
        else:
            perm, signs = signed_permutation_match(S, Tg)
        B = np.zeros((K, K))
        B[perm, np.arange(K)] = signs
    elif kind == "orthogonal":
        U, _, Vt = np.linalg.svd(cross)
        B = U @ Vt
        perm, signs = signed_permutation_match(np.eye(K), B)
    elif kind == "oblique":
        B = np.linalg.lstsq(S, Tg, rcond=None)[0]
        perm, signs = signed_permutation_match(np.eye(K), B)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    aligned = S @ B
    res = float(np.linalg.norm(aligned - Tg))
    stage = source.stage if isinstance(source, LoadingSet) else "initial"
    return AlignResult(LoadingSet(aligned, stage, kind if kind == "oblique" else "orthogonal"),
                       B, res, perm, signs, bool(fallback))
