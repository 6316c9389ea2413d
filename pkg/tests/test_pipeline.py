import csv
import json
import math

import numpy as np
import pytest

from tffa import pipeline as pl
from tffa.tensorio import read_tensor

SMALL = {"seed": 3, "simulation": {"M": 20, "J": 100, "K": 2, "n": 5, "P": 20},
         "fit": {"max_rank": 3}, "rotation": {"restarts": 3},
         "postprocess": {"sigma_grid": [0.0, 0.5, 1.0], "kappa_grid": [0.0, 1e-3, 1e-2]},
         "scores": {"P": 20, "gamma_grid": [0.0, 1e-6, 1e-4]}}


def test_defaults_and_schema():
    cfg = pl.validate_config({})
    assert cfg.mode == "single" and cfg.mask_delta() == 0.1
    assert cfg["covariance"]["center"] is False


@pytest.mark.parametrize("bad", [
    {"simulation": {"delta": 0.6}},
    {"covariance": {"delta": 0.5}},
    {"fit": {"max_rank": 226}},
    {"fit": {"select": "fixed"}},
    {"mode": "study3", "study": {"h": [50]}},
    {"unknown": 1},
    {"rotation": {"alpha": 0.3}},
])
def test_config_rejections(bad):
    with pytest.raises(pl.ConfigError):
        pl.validate_config(bad)


def test_full_run_and_resume(tmp_path):
    out = tmp_path / "run"
    res = pl.run_pipeline(SMALL, out)
    assert res.executed == list(pl.STAGES)
    for stage in pl.STAGES:
        man = json.loads((out / stage / "stage.json").read_text())
        assert man["complete"] and man["seed"] == 3
    assert (out / "postprocess" / "Lbar.tft").exists()
    assert len(list((out / "scores").glob("scores_*.tft"))) == 5
    diag = json.loads((out / "diagnose" / "diag.json").read_text())
    assert np.allclose(diag["H_hat"], np.array(diag["H_hat"]).T)
    with open(out / "fit" / "scree.csv") as fh:
        assert next(csv.reader(fh)) == ["j", "f_j", "ratio"]

    again = pl.run_pipeline(SMALL, out)
    assert again.executed == []
    import shutil
    shutil.rmtree(out / "scores")
    third = pl.run_pipeline(SMALL, out)
    assert third.executed == ["scores", "diagnose"]
    assert third.skipped == ["data", "cov", "fit", "rotate", "postprocess"]


def test_config_change_reruns_downstream(tmp_path):
    out = tmp_path / "run"
    pl.run_pipeline(SMALL, out)
    changed = json.loads(json.dumps(SMALL))
    changed["rotation"]["method"] = "quartimax"
    res = pl.run_pipeline(changed, out)
    assert res.executed == ["rotate", "postprocess", "scores", "diagnose"]


def test_existing_dataset_input(tmp_path):
    sim_dir = tmp_path / "sim"
    cfg = pl.validate_config(SMALL)
    manifest = pl.stage_simulate(cfg.sim_config(), sim_dir)
    run = dict(SMALL, data={"manifest": str(manifest)})
    res = pl.run_pipeline(run, tmp_path / "run")
    assert res.executed[0] == "data"
    L = read_tensor(tmp_path / "run" / "fit" / "L.tft")
    assert L.shape == (400, 2)


def test_failed_stage_keeps_earlier_artifacts(tmp_path):
    bad = json.loads(json.dumps(SMALL))
    bad["scores"]["P"] = 500   # more basis functions than time points
    out = tmp_path / "run"
    with pytest.raises(ValueError):
        pl.run_pipeline(bad, out)
    assert (out / "postprocess" / "stage.json").exists()
    assert not (out / "scores" / "stage.json").exists()


def test_zero_replications_is_an_error():
    cfg = pl.validate_config({"mode": "study1", "replications": 0})
    with pytest.raises(ValueError, match="empty report"):
        pl.run_study(cfg)


def _toy_report(n_rep=3):
    rows = []
    for r in range(n_rep):
        for est, e in (("TFFA", 0.1 + 0.01 * r), ("MC", 0.2 + 0.03 * r)):
            rows.append({"rep": r, "estimator": est, "error": e, "relative_error": e / (0.1 + 0.01 * r),
                         "K_hat": 2, "sigma": 0.5, "kappa": 0.0})
    return pl.StudyReport("study1", rows, n_rep, scree=[(0, 1, 2.0, 0.5), (0, 2, 1.0, float("nan"))],
                          absent_estimators=["ICA", "ICAS"])


def test_emit_report_tables(tmp_path):
    rep = _toy_report()
    pl.emit_report(rep, tmp_path)
    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    summary = json.loads((tmp_path / "summary.json").read_text())["summary"]
    for entry in summary:
        vals = [float(r["error"]) for r in rows if r["estimator"] == entry["group"][0]]
        assert abs(entry["mean_error"] - np.mean(vals)) < 1e-12
    with open(tmp_path / "scree.csv") as fh:
        assert next(csv.reader(fh)) == ["rep", "j", "f_j", "ratio"]
    with open(tmp_path / "fig4.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["rep", "TFFA", "MCS", "MC", "ICA", "ICAS"]
    back = pl.load_report(tmp_path / "report.json")
    assert back.rows == rep.rows


def test_emit_empty_report(tmp_path):
    with pytest.raises(ValueError):
        pl.emit_report(pl.StudyReport("study1", [], 0), tmp_path)


def test_report_rejects_non_finite():
    with pytest.raises(ValueError):
        pl.StudyReport("study3", [{"rep": 0, "estimator": "FOSR", "error": math.nan}], 1)


def test_study_modes_small(tmp_path):
    base = {"seed": 1, "replications": 1,
            "simulation": {"M": 20, "J": 100, "K": 2, "n": 4, "P": 20},
            "fit": {"max_rank": 3}, "rotation": {"restarts": 2},
            "postprocess": {"sigma_grid": [0.0, 0.5], "kappa_grid": [0.0, 1e-3]},
            "study": {"h": [10, 20], "deltas": [0.1]}}
    for mode in ("study1", "study2", "study3"):
        rep = pl.run_study(dict(base, mode=mode))
        assert rep.rows and rep.replications == 1
        files = pl.emit_report(rep, tmp_path / mode)
        assert files
    assert {r["estimator"] for r in rep.rows} == {"FOSR", "PWLS"}
