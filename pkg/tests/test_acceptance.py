"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Studies 1 and 3 run at desk scale (10 replications), so this module takes
several minutes.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from tffa import cli
from tffa import pipeline as pl
from tffa import rotation as R
from tffa import scores as SC
from tffa.completion import (CompletionOptions, IdentifiabilityError, MaskedObjective, complete_rank,
                             extract_loadings, rank_cap)
from tffa.covassembly import MaskedCovariance, build_band_mask, empirical_spatial_cov
from tffa.simgen import SimConfig, simulate_dataset
from tffa.tensorio import SpatialGrid, read_tensor

THREADS = os.cpu_count() or 1


@pytest.fixture
def verdict(capsys):
    def emit(num, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {num:>2} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
        assert ok, detail
    return emit


def test_01_noiseless_recovery(verdict):
    t0 = time.perf_counter()
    cfg = SimConfig(M=40, J=500, K=2, n=20, scheme="BI", P=0, delta=0.1, seed=0)
    scans, truth = simulate_dataset(cfg)
    mask = build_band_mask(cfg.grid, "distance", delta=0.1)
    cov = empirical_spatial_cov(scans, mask, center=False)
    V = complete_rank(cov, 2).V
    G = truth.global_cov
    err = np.linalg.norm(V @ V.T - G) / np.linalg.norm(G)
    elapsed = time.perf_counter() - t0
    verdict(1, "noiseless rank-2 recovery", err < 0.05 and elapsed < 300,
            f"E(G_hat) = {err:.4f} (< 0.05), {elapsed:.1f}s (< 300s)")


STUDY1 = {"mode": "study1", "seed": 0, "replications": 10,
          "simulation": {"M": 40, "J": 500, "K": 2, "n": 5, "delta": 0.1, "regime": 1, "scheme": "BI"},
          "fit": {"max_rank": 4}}


@pytest.fixture(scope="module")
def study1(tmp_path_factory):
    t0 = time.perf_counter()
    report = pl.run_study(STUDY1, threads=THREADS)
    elapsed = time.perf_counter() - t0
    out = tmp_path_factory.mktemp("study1")
    files = pl.emit_report(report, out)
    return report, elapsed, out, files


def test_02_study1_direction(verdict, study1):
    report, elapsed, out, _ = study1
    mc = report.mean("relative_error", estimator="MC")
    mcs = report.mean("relative_error", estimator="MCS")
    header = (out / "fig4.csv").read_text().splitlines()[0]
    ok = mc >= 1.0 and mcs >= 1.0 and elapsed < 1800 and header.startswith("rep,TFFA,MCS,MC")
    verdict(2, "study 1: TFFA no worse than MC / MCS", ok,
            f"mean MC/TFFA = {mc:.3f}, mean MCS/TFFA = {mcs:.3f} (>= 1), "
            f"mean E: TFFA {report.mean(estimator='TFFA'):.4f} MCS {report.mean(estimator='MCS'):.4f} "
            f"MC {report.mean(estimator='MC'):.4f}, {elapsed:.0f}s (< 1800s)")


def test_03_elbow_rank(verdict, study1):
    report = study1[0]
    k_hat = [r["K_hat"] for r in report.rows if r["estimator"] == "TFFA"]
    hits = sum(k == 2 for k in k_hat)
    verdict(3, "elbow selects K=2", hits >= 8, f"K_hat = {k_hat}, {hits}/10 equal 2 (>= 8)")


def test_04_study3_direction(verdict, tmp_path):
    cfg = {"mode": "study3", "seed": 0, "replications": 10,
           "simulation": {"M": 40, "J": 500, "K": 2, "n": 20, "regime": 1, "scheme": "BI"},
           "study": {"h": [20, 40], "deltas": [0.05]}}
    report = pl.run_study(cfg, threads=THREADS)
    pl.emit_report(report, tmp_path)
    m = {(e, h): report.mean(estimator=e, h=h, delta=0.05) for e in ("FOSR", "PWLS") for h in (20, 40)}
    ok = all(m[("FOSR", h)] < m[("PWLS", h)] for h in (20, 40))
    ok &= all(m[(e, 40)] < m[(e, 20)] for e in ("FOSR", "PWLS"))
    detail = ", ".join(f"{e} h={h}: {v:.4f}" for (e, h), v in m.items())
    verdict(4, "study 3: FOSR beats PWLS, larger h helps", ok, detail)


def test_05_fosr_closed_form_oracle(verdict):
    rng = np.random.default_rng(5)
    M, K, J, P = 30, 3, 60, 10
    basis = SC.build_basis(P, J)
    worst = 0.0
    for i in range(20):
        gamma = (0.0, 1.0, 10.0)[i % 3]
        L = rng.standard_normal((M, K))
        X = rng.standard_normal((M, J))
        A = SC.fosr_scores(X, L, basis, gamma).A
        # generic dense quadratic: Hessian and linear term assembled entry by entry
        n = K * P
        H = np.zeros((n, n))
        b = np.zeros(n)
        E, D = basis.E, basis.D
        for p in range(P):
            for k in range(K):
                r = p * K + k
                Ukp = np.outer(L[:, k], E[p])
                b[r] = -np.sum(X * Ukp)
                for q in range(P):
                    for l in range(K):
                        c = q * K + l
                        H[r, c] = np.sum(Ukp * np.outer(L[:, l], E[q])) + (gamma * D[p, q] if k == l else 0.0)
        ref = np.linalg.solve(H, -b).reshape((K, P), order="F")
        worst = max(worst, np.linalg.norm(A - ref) / np.linalg.norm(ref))
    verdict(5, "FOSR Kronecker solve vs dense quadratic", worst < 1e-8, f"max relative error {worst:.2e} (< 1e-8)")


def test_06_rotation_invariants(verdict):
    rng = np.random.default_rng(6)
    orth_T = orth_G = obl_d = obl_G = 0.0
    for _ in range(50):
        L = rng.standard_normal((int(rng.integers(20, 60)), int(rng.integers(2, 5))))
        for method in ("varimax", "quartimax"):
            res = R.rotate(L, method, opts=R.RotationOptions(restarts=3))
            T = res.transform
            orth_T = max(orth_T, np.max(np.abs(T.T @ T - np.eye(T.shape[0]))))
            Ls = res.loadings.matrix
            orth_G = max(orth_G, np.max(np.abs(Ls @ Ls.T - L @ L.T)))
        res = R.rotate(L, "oblimin", opts=R.RotationOptions(restarts=3))
        obl_d = max(obl_d, np.max(np.abs(np.diag(res.transform @ res.transform.T) - 1)))
        Ls = res.loadings.matrix
        obl_G = max(obl_G, np.max(np.abs(Ls @ res.phi @ Ls.T - L @ L.T)))
    # planted simple structure mixed by a 45 degree rotation
    truth = np.zeros((60, 3))
    for m in range(60):
        truth[m, m % 3] = rng.uniform(0.5, 1.5)
    Q = np.eye(3)
    Q[:2, :2] = [[np.cos(np.pi / 4), -np.sin(np.pi / 4)], [np.sin(np.pi / 4), np.cos(np.pi / 4)]]
    planted = 0.0
    for method in ("varimax", "quartimax", "oblimin"):
        Ls = R.rotate(truth @ Q, method).loadings.matrix
        perm, signs = R.signed_permutation_match(Ls, truth)
        planted = max(planted, np.max(np.abs(Ls[:, perm] * signs - truth)))
    ok = orth_T < 1e-10 and orth_G < 1e-10 and obl_d < 1e-8 and obl_G < 1e-8 and planted < 1e-4
    verdict(6, "rotation invariants", ok,
            f"|RtR-I| {orth_T:.1e}, |L*L*t-LLt| {orth_G:.1e}, |diag(TTt)-1| {obl_d:.1e}, "
            f"oblique reconstruction {obl_G:.1e}, planted recovery {planted:.1e}")


def test_07_gradient_checks(verdict):
    rng = np.random.default_rng(7)
    h = 1e-6
    g = SpatialGrid((6, 6))
    Z = build_band_mask(g, "distance", delta=0.1).dense()
    A = rng.standard_normal((36, 36))
    obj = MaskedObjective(A + A.T, Z)
    V = rng.standard_normal((36, 3))
    _, grad = obj.value_grad(V)
    fd = np.zeros_like(V)
    for idx in np.ndindex(*V.shape):
        E = np.zeros_like(V)
        E[idx] = h
        fd[idx] = (obj.value(V + E) - obj.value(V - E)) / (2 * h)
    e_comp = np.linalg.norm(fd - grad) / np.linalg.norm(grad)

    basis = SC.build_basis(8, 40)
    L = rng.standard_normal((15, 2))
    X = rng.standard_normal((15, 40))
    Acoef = rng.standard_normal((2, 8))
    gam = np.array([0.5, 2.0])
    grad = SC.fosr_gradient(Acoef, X, L, basis, gam)
    fd = np.zeros_like(Acoef)
    for idx in np.ndindex(*Acoef.shape):
        E = np.zeros_like(Acoef)
        E[idx] = h
        fd[idx] = (SC.fosr_objective(Acoef + E, X, L, basis, gam)
                   - SC.fosr_objective(Acoef - E, X, L, basis, gam)) / (2 * h)
    e_fosr = np.linalg.norm(fd - grad) / np.linalg.norm(grad)
    verdict(7, "gradients vs central differences", e_comp < 1e-5 and e_fosr < 1e-5,
            f"completion {e_comp:.1e}, FOSR normal equations {e_fosr:.1e} (< 1e-5)")


def _diagnose(T, seed):
    cfg = SimConfig(M=20, J=500, K=3, n=50, seed=seed, oblique_T=T)
    scans, truth = simulate_dataset(cfg)
    mask = build_band_mask(cfg.grid, "distance", delta=0.1)
    cov = empirical_spatial_cov(scans, mask, center=False)
    L0 = extract_loadings(complete_rank(cov, 3).V).matrix
    L = R.rotate(L0, "varimax" if T is None else "oblimin").loadings.matrix
    perm, signs = R.signed_permutation_match(L, truth.loadings.matrix)
    L = L[:, perm] * signs
    basis = SC.build_basis(SC.default_basis_size(500), 500)
    cv = SC.spatial_cv_gamma(scans, L, cfg.grid, basis, [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4])
    F = [SC.fosr_scores(s, L, basis, cv.gamma).F_hat for s in scans]
    return SC.factor_cov_diagnostic(F), truth.H


def test_08_diagnostic_calibration(verdict):
    rep, _ = _diagnose(None, 11)
    dev_orth = np.max(np.abs(rep.H_hat - np.eye(3)))
    flags = int(rep.flags_bonferroni.sum())
    rep_obl, H = _diagnose(pl.default_oblique_T(3), 11)
    dev_obl = np.max(np.abs(rep_obl.H_hat - H))
    ok = dev_orth <= 0.15 and flags == 0 and dev_obl < 0.2
    verdict(8, "factor covariance diagnostic", ok,
            f"orthogonal max|H_hat-I| = {dev_orth:.3f} (<= 0.15), Bonferroni flags {flags} (0); "
            f"oblique max|H_hat-H| = {dev_obl:.3f} (< 0.2)")


SMALL_RUN = {"seed": 9, "simulation": {"M": 20, "J": 100, "K": 2, "n": 6, "P": 20},
             "fit": {"max_rank": 3}, "rotation": {"restarts": 4},
             "postprocess": {"sigma_grid": [0.0, 0.5, 1.0], "kappa_grid": [0.0, 1e-3, 1e-2]},
             "scores": {"P": 20, "gamma_grid": [0.0, 1e-6, 1e-4]}}


def _artifacts(root: Path):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.suffix in (".csv", ".tft"))


def _csv_numbers(path):
    rows = [line.split(",") for line in path.read_text().splitlines()[1:]]
    return np.array([[float(x) if x else np.nan for x in r] for r in rows], dtype=float)


def test_09_determinism(verdict, tmp_path):
    a = pl.run_pipeline(SMALL_RUN, tmp_path / "a", threads=1).path
    b = pl.run_pipeline(SMALL_RUN, tmp_path / "b", threads=1).path
    c = pl.run_pipeline(SMALL_RUN, tmp_path / "c", threads=8).path
    files = _artifacts(a)
    same_csv = all((a / f).read_bytes() == (b / f).read_bytes() for f in files if f.suffix == ".csv")
    worst = 0.0
    for f in files:
        if f.suffix == ".tft":
            x, y = read_tensor(a / f), read_tensor(c / f)
        else:
            x, y = _csv_numbers(a / f), _csv_numbers(c / f)
        assert x.shape == y.shape, f
        if x.size:
            worst = max(worst, float(np.nanmax(np.abs(x - y))))
    ok = same_csv and worst <= 1e-12 and files == _artifacts(c)
    verdict(9, "determinism and thread equivalence", ok,
            f"{len(files)} artifacts; same-seed CSVs identical: {same_csv}; "
            f"1 vs 8 threads max difference {worst:.1e} (<= 1e-12)")


def test_10_identifiability_cap(verdict, tmp_path):
    cap = rank_cap(SpatialGrid((40, 40)), 0.1)
    rejected = []
    try:
        pl.validate_config({"fit": {"max_rank": cap + 1}})
    except pl.ConfigError:
        rejected.append("config j > K*")
    try:
        pl.validate_config({"simulation": {"delta": 0.5}})
    except pl.ConfigError:
        rejected.append("config delta >= 1/2")
    g = SpatialGrid((10, 10))
    mask = build_band_mask(g, "distance", delta=0.1)
    cov = MaskedCovariance(np.eye(100), mask, 1, 1, False)
    try:
        complete_rank(cov, rank_cap(g, 0.1) + 1, CompletionOptions())
    except IdentifiabilityError:
        rejected.append("fit j > K*")
    try:
        rank_cap(g, 0.5)
    except IdentifiabilityError:
        rejected.append("cap delta = 1/2")
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"fit": {"max_rank": %d}}' % (cap + 1))
    code = cli.main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "run")])
    if code == 2:
        rejected.append("CLI exit 2")
    ok = cap == 225 and len(rejected) == 5
    verdict(10, "K* enforcement", ok, f"K*(40x40, 0.1) = {cap} (225); rejected: {rejected}")
