import numpy as np
import pytest

from tffa import rotation as R


def _planted(rng, M=60, K=3, angle=np.pi / 4):
    # simple structure: each row loads on exactly one factor
    L = np.zeros((M, K))
    for m in range(M):
        L[m, m % K] = rng.uniform(0.5, 1.5)
    c, s = np.cos(angle), np.sin(angle)
    Q = np.eye(K)
    Q[:2, :2] = [[c, -s], [s, c]]
    return L, L @ Q


def _max_dev_up_to_signed_perm(A, B):
    perm, signs = R.signed_permutation_match(A, B)
    return np.max(np.abs(A[:, perm] * signs - B))


@pytest.mark.parametrize("method", ["varimax", "quartimax"])
def test_orthogonal_invariants(rng, method):
    L = rng.standard_normal((40, 4))
    res = R.rotate(L, method)
    T = res.transform
    assert np.max(np.abs(T.T @ T - np.eye(4))) < 1e-10
    Ls = res.loadings.matrix
    assert np.max(np.abs(Ls @ Ls.T - L @ L.T)) < 1e-10
    assert np.allclose(L @ T, Ls)


def test_oblique_invariants(rng):
    L = rng.standard_normal((40, 3))
    res = R.rotate(L, "oblimin", alpha=0.0)
    T = res.transform
    assert np.max(np.abs(np.diag(T @ T.T) - 1)) < 1e-8
    Ls = res.loadings.matrix
    assert np.max(np.abs(Ls @ res.phi @ Ls.T - L @ L.T)) < 1e-8


@pytest.mark.parametrize("method", ["varimax", "quartimax", "oblimin"])
def test_planted_simple_structure(rng, method):
    truth, mixed = _planted(rng)
    res = R.rotate(mixed, method)
    assert _max_dev_up_to_signed_perm(res.loadings.matrix, truth) < 1e-4


def test_criterion_traces_monotone(rng):
    L = rng.standard_normal((50, 3))
    vm = R.rotate(L, "varimax")
    assert all(b >= a - 1e-12 for a, b in zip(vm.trace, vm.trace[1:]))  # maximised score
    ob = R.rotate(L, "oblimin")
    assert all(b <= a + 1e-12 for a, b in zip(ob.trace, ob.trace[1:]))


def test_oblique_criterion_not_worse_than_orthogonal(rng):
    L = rng.standard_normal((50, 3))
    vm = R.rotate(L, "varimax")
    ob = R.rotate(L, "oblimin")
    assert ob.criterion <= R.criterion_value(vm.loadings.matrix, "oblimin") + 1e-10


def test_varimax_value_against_direct_formula(rng):
    L = rng.standard_normal((20, 3))
    L2 = L ** 2
    direct = np.sum(np.mean(L2 ** 2, axis=0) - np.mean(L2, axis=0) ** 2)
    assert R.criterion_value(L, "varimax") == pytest.approx(20 * direct, rel=1e-10) or \
        R.criterion_value(L, "varimax") == pytest.approx(direct, rel=1e-10)


def test_column_normalisation(rng):
    res = R.rotate(rng.standard_normal((30, 3)), "varimax")
    Ls = res.loadings.matrix
    norms = np.sum(Ls ** 2, axis=0)
    assert np.all(np.diff(norms) <= 1e-12)
    for k in range(3):
        assert Ls[np.argmax(np.abs(Ls[:, k])), k] > 0


def test_deterministic(rng):
    L = rng.standard_normal((30, 3))
    a = R.rotate(L, "oblimin", opts=R.RotationOptions(threads=1))
    b = R.rotate(L, "oblimin", opts=R.RotationOptions(threads=4))
    assert np.array_equal(a.transform, b.transform)


def test_positive_alpha_rejected(rng):
    with pytest.raises(ValueError):
        R.rotate(rng.standard_normal((10, 2)), "oblimin", alpha=0.5)


def test_single_factor_passthrough(rng):
    L = rng.standard_normal((10, 1))
    res = R.rotate(L, "varimax")
    assert np.allclose(np.abs(res.loadings.matrix), np.abs(L))


def test_align_to_target_orthogonal(rng):
    A = rng.standard_normal((30, 3))
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    res = R.align_to_target(A @ Q, A)
    assert res.residual < 1e-10
    snap = R.align_to_target(A[:, [2, 0, 1]] * [1, -1, 1], A, snap=True)
    assert snap.residual < 1e-10


def test_align_to_target_oblique(rng):
    A = rng.standard_normal((30, 3))
    T = rng.standard_normal((3, 3))
    T /= np.linalg.norm(T, axis=1, keepdims=True)
    res = R.align_to_target(A @ np.linalg.inv(T), A, kind="oblique")
    assert res.residual < 1e-8


def test_align_rank_deficient_falls_back(rng):
    A = rng.standard_normal((20, 2))
    S = np.column_stack([A[:, 0], np.zeros(20)])
    with pytest.warns(RuntimeWarning):
        res = R.align_to_target(S, A)
    assert res.fallback
