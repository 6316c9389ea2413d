import json

import numpy as np
import pytest

from tffa.cli import main
from tffa.tensorio import read_tensor


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"seed": 5, "simulation": {"M": 20, "J": 100, "K": 2, "n": 5, "P": 20},
                             "rotation": {"restarts": 2}}))
    return p


def test_stagewise_commands(tmp_path, cfg_file, capsys):
    d = tmp_path
    assert main(["simulate", "--config", str(cfg_file), "--out", str(d / "data")]) == 0
    assert main(["cov", "--manifest", str(d / "data" / "manifest.json"), "--mask-rule", "distance",
                 "--delta", "0.1", "--out", str(d / "cov.tft")]) == 0
    assert json.loads((d / "cov.json").read_text())["mask"]["rule"] == "distance"
    assert main(["fit", "--cov", str(d / "cov.tft"), "--max-rank", "3", "--select", "elbow",
                 "--optimizer", "hybrid", "--out", str(d / "fit")]) == 0
    assert (d / "fit" / "scree.csv").exists()
    assert main(["rotate", "--loadings", str(d / "fit" / "L.tft"), "--method", "oblimin", "--alpha", "0",
                 "--out", str(d / "rot")]) == 0
    phi = read_tensor(d / "rot" / "phi.tft")
    assert np.allclose(np.diag(phi), 1)
    assert main(["postprocess", "--fit", str(d / "fit"), "--rot", str(d / "rot"), "--folds", "3",
                 "--sigma-grid", "0 0.5", "--kappa-grid", "0,0.001", "--out", str(d / "post")]) == 0
    assert main(["scores", "--scans", str(d / "data" / "manifest.json"), "--loadings",
                 str(d / "post" / "Lbar.tft"), "--P", "20", "--gamma-grid", "0 1e-6",
                 "--emit-fold-fits", "--out", str(d / "scores")]) == 0
    assert list((d / "scores" / "fold_fits").glob("*.tft"))
    assert main(["diagnose", "--scores", str(d / "scores"), "--out", str(d / "diag.json")]) == 0
    assert (d / "diag.csv").exists()


def test_validation_exit_codes(tmp_path, cfg_file):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"simulation": {"delta": 0.6}}))
    assert main(["pipeline", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    bad.write_text("{not json")
    assert main(["pipeline", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["simulate", "--config", str(cfg_file), "--out", str(tmp_path / "d")]) == 0
    assert main(["cov", "--manifest", str(tmp_path / "d" / "manifest.json"), "--out", str(tmp_path / "c.tft")]) == 0
    assert main(["fit", "--cov", str(tmp_path / "c.tft"), "--max-rank", "60", "--out", str(tmp_path / "f")]) == 2
    assert main(["bogus"]) == 2


def test_runtime_error_exit_code(tmp_path):
    (tmp_path / "scores").mkdir()
    (tmp_path / "scores" / "scores.json").write_text("{}")
    assert main(["diagnose", "--scores", str(tmp_path / "scores"), "--out", str(tmp_path / "d.json")]) == 1


def test_pipeline_study_report(tmp_path, capsys):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"seed": 2, "simulation": {"M": 20, "J": 100, "K": 2, "n": 4, "P": 20},
                               "study": {"h": [10, 20], "deltas": [0.1]}, "scores": {"P": 20}}))
    assert main(["study", "--config", str(cfg), "--mode", "study3", "--replications", "2",
                 "--out", str(tmp_path / "st")]) == 0
    assert main(["report", "--input", str(tmp_path / "st" / "report.json"), "--out", str(tmp_path / "rp")]) == 0
    assert (tmp_path / "rp" / "results.csv").read_text() == (tmp_path / "st" / "results.csv").read_text()
    assert main(["schema", "--out", str(tmp_path / "schema.json")]) == 0
    assert json.loads((tmp_path / "schema.json").read_text())["type"] == "object"
