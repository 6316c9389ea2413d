"""End-to-end runs, simulation studies and report emission.

A run directory holds one sub-directory per stage

    data/  cov/  fit/  rotate/  postprocess/  scores/  diagnose/

each closed by a ``stage.json`` manifest. A stage is skipped on re-run when
its manifest matches the current configuration and nothing upstream was
recomputed.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from ._parallel import pmap
from .completion import (CompletionOptions, complete_rank, extract_loadings,
                         rank_cap, rank_path, select_rank)
from .covassembly import BandMask, MaskedCovariance, build_band_mask, empirical_spatial_cov
from .loadings import LoadingSet
from .postprocess import PostprocessConfig, make_folds, postprocess
from .rotation import RotationOptions, rotate
from .scores import (build_basis, default_basis_size, factor_cov_diagnostic, fosr_scores,
                     pwls_scores, spatial_cv_gamma)
from .simgen import SimConfig, simulate_dataset
from .tensorio import (SpatialGrid, load_dataset, load_manifest, read_tensor,
                       write_dataset, write_tensor)

log = logging.getLogger(__name__)

STAGES = ("data", "cov", "fit", "rotate", "postprocess", "scores", "diagnose")


class ConfigError(ValueError):
    """Configuration rejected before any work is done."""


# --- configuration -----------------------------------------------------------

DEFAULTS = {
    "mode": "single",
    "seed": 0,
    "threads": None,
    "replications": 1,
    "data": None,
    "simulation": {"M": 40, "J": 500, "K": 2, "n": 20, "scheme": "BI", "delta": 0.1, "regime": 1,
                   "omega_f": 0.02, "omega_u": 0.002, "P": 50, "oblique_T": None},
    "covariance": {"mask_rule": "distance", "delta": None, "radius": None, "center": False,
                   "batch": 64},
    "fit": {"max_rank": 5, "select": "elbow", "threshold": None, "k": None,
            "optimizer": "quasi_newton", "max_iters": 2000, "grad_tol": 1e-8,
            "randomized_init": False, "n_strata": 4, "sgd_epochs": 200},
    "rotation": {"method": "varimax", "alpha": 0.0, "restarts": 10, "tol": 1e-8, "max_iter": 1000},
    "postprocess": {"enabled": True, "folds": 3,
                    "sigma_grid": [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0],
                    "kappa_grid": [0.0, 1e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1],
                    "kappa_scale": "relative", "uniform": True, "shrink": True},
    "scores": {"P": None, "gamma_grid": [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2],
               "V": 4, "uniform": True, "emit_fold_fits": False},
    "study": {"h": [20, 40], "deltas": [0.05], "extra_rank": 1, "score_P": None},
}

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_grid = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1}
_null_or = lambda s: {"anyOf": [{"type": "null"}, s]}  # noqa: E731

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "tffa run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["single", "study1", "study2", "study3"]},
        "seed": {"type": "integer", "minimum": 0},
        "threads": _null_or(_pos_int),
        "replications": {"type": "integer", "minimum": 0},
        "data": _null_or({"type": "object", "required": ["manifest"],
                          "properties": {"manifest": {"type": "string"}},
                          "additionalProperties": False}),
        "simulation": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "M": {"type": "integer", "minimum": 2}, "J": _pos_int, "K": _pos_int, "n": _pos_int,
                "scheme": {"enum": ["BI", "NET", "TRI"]},
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                "regime": {"enum": [1, 2]},
                "omega_f": {"type": "number", "exclusiveMinimum": 0},
                "omega_u": {"type": "number", "exclusiveMinimum": 0},
                "P": {"type": "integer", "minimum": 0},
                "oblique_T": _null_or({"type": "array", "items": {"type": "array", "items": _num}}),
            },
        },
        "covariance": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "mask_rule": {"enum": ["distance", "fixed_fraction"]},
                "delta": _null_or({"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5}),
                "radius": _null_or({"anyOf": [_pos_int, {"type": "array", "items": _pos_int}]}),
                "center": {"type": "boolean"},
                "batch": _pos_int,
            },
        },
        "fit": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "max_rank": _pos_int,
                "select": {"enum": ["elbow", "threshold", "fixed"]},
                "threshold": _null_or({"type": "number", "exclusiveMinimum": 0}),
                "k": _null_or(_pos_int),
                "optimizer": {"enum": ["quasi_newton", "block_sgd", "hybrid"]},
                "max_iters": _pos_int,
                "grad_tol": {"type": "number", "exclusiveMinimum": 0},
                "randomized_init": {"type": "boolean"},
                "n_strata": _pos_int,
                "sgd_epochs": _pos_int,
            },
        },
        "rotation": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "method": {"enum": ["varimax", "quartimax", "oblimin", "quartimin"]},
                "alpha": {"type": "number", "maximum": 0},
                "restarts": _pos_int,
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": _pos_int,
            },
        },
        "postprocess": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "folds": {"type": "integer", "minimum": 2},
                "sigma_grid": _grid, "kappa_grid": _grid,
                "kappa_scale": {"enum": ["relative", "absolute"]},
                "uniform": {"type": "boolean"},
                "shrink": {"type": "boolean"},
            },
        },
        "scores": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "P": _null_or({"type": "integer", "minimum": 4}),
                "gamma_grid": _grid,
                "V": {"type": "integer", "minimum": 2},
                "uniform": {"type": "boolean"},
                "emit_fold_fits": {"type": "boolean"},
            },
        },
        "study": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "h": {"type": "array", "items": _pos_int, "minItems": 1},
                "deltas": {"type": "array", "minItems": 1,
                           "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5}},
                "extra_rank": {"type": "integer", "minimum": 0},
                "score_P": _null_or({"type": "integer", "minimum": 4}),
            },
        },
    },
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    """Validated run configuration; ``raw`` is the fully defaulted JSON object."""

    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def sim_config(self, **overrides) -> SimConfig:
        s = dict(self.raw["simulation"])
        s.update(overrides)
        s.setdefault("seed", self.seed)
        return SimConfig(**s)

    def mask_delta(self) -> float:
        d = self.raw["covariance"]["delta"]
        return float(self.raw["simulation"]["delta"] if d is None else d)

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)


def validate_config(obj: Optional[dict], check_grid: bool = True) -> PipelineConfig:
    """Fill defaults, check against :data:`CONFIG_SCHEMA` and cross-stage rules.

    ``check_grid=False`` skips rules tied to the simulated grid, for stages
    that read their grid from files (the identifiability cap is then
    enforced against the actual grid when fitting).
    """
    if obj is not None and not isinstance(obj, dict):
        raise ConfigError("configuration must be a JSON object")
    # the schema speaks about user input; defaults are merged afterwards
    try:
        jsonschema.validate(obj or {}, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid configuration at {where}: {exc.message}") from exc
    raw = _merge(DEFAULTS, obj)
    cfg = PipelineConfig(raw)
    cov, fit = raw["covariance"], raw["fit"]
    if fit["select"] == "fixed" and fit["k"] is None:
        raise ConfigError("fit.select = 'fixed' needs fit.k")
    if fit["select"] == "threshold" and fit["threshold"] is None:
        raise ConfigError("fit.select = 'threshold' needs fit.threshold")
    if raw["data"] is None and check_grid:
        sim = raw["simulation"]
        try:
            cfg.sim_config()
        except ValueError as exc:
            raise ConfigError(f"simulation: {exc}") from exc
        grid = SpatialGrid((sim["M"], sim["M"]))
        if cov["mask_rule"] == "distance":
            bw = cfg.mask_delta()
        else:
            radius = cov["radius"] if cov["radius"] is not None else math.ceil(sim["M"] / 4)
            bw = np.broadcast_to(radius, (2,)) / sim["M"]
        if np.any(np.asarray(bw) >= 0.5):
            raise ConfigError("mask bandwidth must be below 1/2")
        cap = rank_cap(grid, bw)
        need = max(fit["max_rank"], fit["k"] or 0)
        if raw["mode"] == "study2":
            need = max(need, sim["K"] + raw["study"]["extra_rank"])
        if need > cap:
            raise ConfigError(f"requested rank {need} exceeds identifiability cap K* = {cap}")
        if raw["mode"] == "study3" and max(raw["study"]["h"]) > sim["M"]:
            raise ConfigError("study.h cannot exceed the grid size")
        if raw["mode"] == "study1" and sim["K"] > fit["max_rank"]:
            raise ConfigError("study1 needs fit.max_rank >= simulation.K")
    elif raw["mode"] != "single":
        raise ConfigError("studies simulate their own data; drop the 'data' section")
    return cfg


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return validate_config(obj)


def completion_options(cfg: PipelineConfig, threads=None) -> CompletionOptions:
    f = cfg["fit"]
    return CompletionOptions(max_rank=f["max_rank"], optimizer=f["optimizer"], max_iters=f["max_iters"],
                             grad_tol=f["grad_tol"], n_strata=f["n_strata"], sgd_epochs=f["sgd_epochs"],
                             randomized_init=f["randomized_init"], seed=cfg.seed, threads=threads)


def rotation_options(cfg: PipelineConfig, threads=None) -> RotationOptions:
    r = cfg["rotation"]
    return RotationOptions(max_iter=r["max_iter"], tol=r["tol"], restarts=r["restarts"],
                           seed=cfg.seed, threads=threads)


def postprocess_config(cfg: PipelineConfig) -> PostprocessConfig:
    p = cfg["postprocess"]
    return PostprocessConfig(sigma_grid=tuple(p["sigma_grid"]), kappa_grid=tuple(p["kappa_grid"]),
                             kappa_scale=p["kappa_scale"], V=p["folds"], uniform=p["uniform"])


def mask_for(grid: SpatialGrid, cfg: PipelineConfig) -> BandMask:
    c = cfg["covariance"]
    if c["mask_rule"] == "distance":
        return build_band_mask(grid, "distance", delta=cfg.mask_delta())
    return build_band_mask(grid, "fixed_fraction", radius=c["radius"])


# --- small I/O helpers ---------------------------------------------------------

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_json_default).encode()).hexdigest()[:16]


# --- stages -------------------------------------------------------------------
# Each stage reads from upstream directories and writes into its own one.

def stage_simulate(sim: SimConfig, out_dir, threads=None) -> Path:
    """Scans as TFT1 plus manifest, and the generating truth under ``truth/``."""
    out = Path(out_dir)
    scans, truth = simulate_dataset(sim, threads)
    write_dataset(scans, out)
    tdir = out / "truth"
    tdir.mkdir(parents=True, exist_ok=True)
    write_tensor(tdir / "L_true.tft", truth.loadings.matrix)
    write_tensor(tdir / "H.tft", truth.H)
    write_tensor(tdir / "G_true.tft", truth.global_cov)
    for i, F in enumerate(truth.factors):
        write_tensor(tdir / f"factors_{i:04d}.tft", F)
    _write_json(tdir / "truth.json", {"c": truth.c, "H": truth.H, "simulation": sim.to_json()})
    return out / "manifest.json"


def load_scans(manifest_path):
    manifest_path = Path(manifest_path)
    return load_dataset(load_manifest(manifest_path), manifest_path.parent)


def stage_cov(manifest_path, cfg: PipelineConfig, out_dir, threads=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scans = load_scans(manifest_path)
    mask = mask_for(scans[0].grid, cfg)
    c = cfg["covariance"]
    cov = empirical_spatial_cov(scans, mask, batch=c["batch"], center=c["center"], threads=threads)
    write_tensor(out / "cov.tft", cov.matrix)
    _write_json(out / "cov.json", {"manifest": str(Path(manifest_path).resolve()), "n": cov.n,
                                   "J": cov.J, "centered": cov.centered, "mask": mask.describe(),
                                   "dims": list(mask.grid.dims)})
    return out / "cov.tft"


def load_cov(cov_path) -> tuple:
    """``(MaskedCovariance, manifest path)`` from a covariance written by :func:`stage_cov`."""
    cov_path = Path(cov_path)
    side = _read_json(cov_path.with_suffix(".json"))
    manifest = Path(side["manifest"])
    grid = load_manifest(manifest).grid(manifest.parent)
    m = side["mask"]
    if m["rule"] == "distance":
        mask = build_band_mask(grid, "distance", delta=m["delta"])
    else:
        mask = build_band_mask(grid, "fixed_fraction", radius=m["radius"])
    C = read_tensor(cov_path)
    return MaskedCovariance(C, mask, side["n"], side["J"], side["centered"]), manifest


def stage_fit(cov_path, cfg: PipelineConfig, out_dir, threads=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cov, manifest = load_cov(cov_path)
    f = cfg["fit"]
    opts = completion_options(cfg, threads)
    path = rank_path(cov, f["max_rank"], opts)
    K = select_rank(path, f["select"], c=f["threshold"], j=f["k"])
    if K <= f["max_rank"]:
        V = path.V(K)
    else:
        V = complete_rank(cov, K, opts).V
    L = extract_loadings(V)
    write_tensor(out / "V.tft", V)
    write_tensor(out / "L.tft", L.matrix)
    write_csv(out / "scree.csv", ["j", "f_j", "ratio"], path.scree_rows())
    _write_json(out / "fit.json", {"K_hat": K, "select": f["select"], "f0": path.f0,
                                   "reports": path.reports, "seed": cfg.seed,
                                   "cov": str(Path(cov_path).resolve()),
                                   "manifest": str(manifest)})
    return out / "L.tft"


def stage_rotate(L_path, cfg: PipelineConfig, out_dir, threads=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    L = read_tensor(L_path)
    r = cfg["rotation"]
    res = rotate(L, r["method"], r["alpha"], rotation_options(cfg, threads))
    write_tensor(out / "L_rot.tft", res.loadings.matrix)
    write_tensor(out / "transform.tft", res.transform)
    write_tensor(out / "phi.tft", res.phi)
    write_csv(out / "trace.csv", ["iter", "criterion"], list(enumerate(res.trace)))
    _write_json(out / "rotate.json", {"method": res.method, "kind": res.kind, "alpha": r["alpha"],
                                      "criterion": res.criterion, "converged": res.converged,
                                      "restart": res.restart, "loadings": str(Path(L_path).resolve())})
    return out / "L_rot.tft"


def _rotated_set(rot_dir) -> LoadingSet:
    rot_dir = Path(rot_dir)
    meta = _read_json(rot_dir / "rotate.json")
    return LoadingSet(read_tensor(rot_dir / "L_rot.tft"), "rotated", meta["kind"],
                      read_tensor(rot_dir / "transform.tft"), read_tensor(rot_dir / "phi.tft"),
                      meta={"method": meta["method"]})


def stage_postprocess(fit_dir, rot_dir, cfg: PipelineConfig, out_dir, threads=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fit_meta = _read_json(Path(fit_dir) / "fit.json")
    rotated = _rotated_set(rot_dir)
    p = cfg["postprocess"]
    if not p["enabled"]:
        write_tensor(out / "Lsmooth.tft", rotated.matrix)
        write_tensor(out / "Lbar.tft", rotated.matrix)
        _write_json(out / "postprocess.json", {"enabled": False, "kind": rotated.kind})
        return out / "Lbar.tft"
    cov, manifest = load_cov(fit_meta["cov"])
    scans = load_scans(manifest)
    initial = LoadingSet(read_tensor(Path(fit_dir) / "L.tft"))
    folds = make_folds(scans, p["folds"], cov.mask, initial, completion_options(cfg, 1),
                       center=cov.centered, threads=threads)
    res = postprocess(rotated, folds, postprocess_config(cfg), cov.mask.grid, threads, shrink=p["shrink"])
    write_tensor(out / "Lsmooth.tft", res.smoothed.matrix)
    write_tensor(out / "Lbar.tft", res.shrunk.matrix)
    K = rotated.K
    write_csv(out / "cv_sigma.csv", [f"sigma_{k}" for k in range(K)] + ["cv"],
              [list(s) + [v] for s, v in res.cv_sigma])
    write_csv(out / "cv_kappa.csv", [f"kappa_{k}" for k in range(K)] + ["cv"],
              [list(s) + [v] for s, v in res.cv_kappa])
    _write_json(out / "postprocess.json", {"enabled": True, "kind": rotated.kind, "sigma": res.sigma,
                                           "kappa": res.kappa, "fold_residuals": res.fold_residuals,
                                           "folds": folds.assignment})
    return out / "Lbar.tft"


def stage_scores(manifest_path, L_path, cfg: PipelineConfig, out_dir, threads=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scans = load_scans(manifest_path)
    L = read_tensor(L_path)
    s = cfg["scores"]
    J = scans[0].n_time
    P = s["P"] if s["P"] is not None else default_basis_size(J)
    basis = build_basis(P, J)
    cv = spatial_cv_gamma(scans, L, scans[0].grid, basis, s["gamma_grid"], V=s["V"],
                          uniform=s["uniform"], keep_fits=s["emit_fold_fits"], threads=threads)
    K = L.shape[1]
    write_csv(out / "gamma_cv.csv", [f"gamma_{k}" for k in range(K)] + ["cv"],
              [list(c) + [e] for c, e in zip(cv.candidates, cv.errors)])
    fold_rows = []
    for c in range(len(cv.candidates)):
        for v in range(s["V"]):
            for i in range(len(scans)):
                fold_rows.append((c, v, i, cv.fold_errors[c, v, i]))
    write_csv(out / "gamma_cv_folds.csv", ["candidate", "fold", "subject", "error"], fold_rows)
    if s["emit_fold_fits"]:
        fdir = out / "fold_fits"
        fdir.mkdir(exist_ok=True)
        for (c, v, i), F in cv.fold_fits.items():
            write_tensor(fdir / f"F_c{c:02d}_v{v}_s{i:04d}.tft", F)
    fits = pmap(lambda sc: fosr_scores(sc, L, basis, cv.gamma), scans, threads)
    for i, fs in enumerate(fits):
        write_tensor(out / f"scores_{i:04d}.tft", fs.F_hat)
    _write_json(out / "scores.json", {"gamma": cv.gamma, "P": P, "n": len(scans), "V": s["V"],
                                      "loadings": str(Path(L_path).resolve())})
    return out


def stage_diagnose(scores_dir, out_path) -> Path:
    scores_dir = Path(scores_dir)
    meta = _read_json(scores_dir / "scores.json")
    F = [read_tensor(scores_dir / f"scores_{i:04d}.tft") for i in range(meta["n"])]
    rep = factor_cov_diagnostic(F)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out_path, rep.to_json())
    K = rep.H_hat.shape[0]
    rows = [(a, b, rep.H_hat[a, b], rep.t_stats[a, b], rep.p_values[a, b],
             int(rep.flags_raw[a, b]), int(rep.flags_bonferroni[a, b]))
            for a in range(K) for b in range(K)]
    write_csv(out_path.with_suffix(".csv"), ["k", "k2", "H_hat", "t", "p", "flag_raw", "flag_bonferroni"],
              rows)
    return out_path


# --- orchestration -----------------------------------------------------------------

@dataclass
class RunSummary:
    path: Path
    executed: list
    skipped: list


def _stage_done(stage_dir: Path, digest: str) -> bool:
    man = stage_dir / "stage.json"
    if not man.exists():
        return False
    try:
        m = _read_json(man)
    except (OSError, json.JSONDecodeError):
        return False
    return m.get("complete") is True and m.get("digest") == digest


def run_pipeline(config, out_dir, threads: Optional[int] = None, resume: bool = True) -> RunSummary:
    """Execute data -> cov -> fit -> rotate -> postprocess -> scores -> diagnose.

    Every stage persists its artifacts and a ``stage.json`` manifest. With
    ``resume`` a stage whose manifest matches is reused unless an upstream stage
    ran again. A failing stage leaves earlier artifacts in place.
    """
    cfg = config if isinstance(config, PipelineConfig) else validate_config(config)
    threads = threads if threads is not None else cfg["threads"]
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "config.json", cfg.to_json())
    _write_json(root / "schema.json", CONFIG_SCHEMA)
    d = {s: root / s for s in STAGES}
    raw = cfg.raw
    sections = {
        "data": [raw["data"], raw["simulation"], raw["seed"]],
        "cov": [raw["covariance"]],
        "fit": [raw["fit"], raw["seed"]],
        "rotate": [raw["rotation"], raw["seed"]],
        "postprocess": [raw["postprocess"], raw["fit"], raw["seed"]],
        "scores": [raw["scores"]],
        "diagnose": [],
    }

    def run_data(out):
        if raw["data"] is not None:
            out.mkdir(parents=True, exist_ok=True)
            src = Path(raw["data"]["manifest"]).resolve()
            load_scans(src)  # validate before recording
            _write_json(out / "source.json", {"manifest": str(src)})
            return
        stage_simulate(cfg.sim_config(), out, threads)

    def manifest_path():
        src = d["data"] / "source.json"
        return Path(_read_json(src)["manifest"]) if src.exists() else d["data"] / "manifest.json"

    actions = {
        "data": run_data,
        "cov": lambda out: stage_cov(manifest_path(), cfg, out, threads),
        "fit": lambda out: stage_fit(d["cov"] / "cov.tft", cfg, out, threads),
        "rotate": lambda out: stage_rotate(d["fit"] / "L.tft", cfg, out, threads),
        "postprocess": lambda out: stage_postprocess(d["fit"], d["rotate"], cfg, out, threads),
        "scores": lambda out: stage_scores(manifest_path(), d["postprocess"] / "Lbar.tft", cfg, out, threads),
        "diagnose": lambda out: stage_diagnose(d["scores"], out / "diag.json"),
    }
    executed, skipped = [], []
    upstream = ""
    dirty = False
    for stage in STAGES:
        digest = _digest([upstream, stage, sections[stage]])
        upstream = digest
        if resume and not dirty and _stage_done(d[stage], digest):
            skipped.append(stage)
            continue
        dirty = True
        d[stage].mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        log.info("stage %s", stage)
        actions[stage](d[stage])
        _write_json(d[stage] / "stage.json", {
            "stage": stage, "complete": True, "digest": digest, "version": __version__,
            "seed": cfg.seed, "threads": threads, "elapsed_s": round(time.perf_counter() - t0, 3),
        })
        executed.append(stage)
    return RunSummary(root, executed, skipped)


# --- studies -----------------------------------------------------------------------

def replication_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, rep]).generate_state(1, dtype=np.uint64)[0] >> 1)


def normalized_error(G, x) -> float:
    """``||G - x||_F / ||G||_F``."""
    return float(np.linalg.norm(G - x) / np.linalg.norm(G))


def default_oblique_T(K: int, rho: float = 0.5) -> np.ndarray:
    """Rows ``e_1`` then ``rho e_1 + sqrt(1 - rho^2) e_k``: unit-norm rows, factor
    correlation ``rho`` between factor 1 and the rest."""
    T = np.eye(K)
    for k in range(1, K):
        T[k, 0] = rho
        T[k, k] = math.sqrt(1 - rho * rho)
    return T


@dataclass
class StudyReport:
    mode: str
    rows: list                      # dicts, one per replication x estimator (x cell)
    replications: int
    config: dict = field(default_factory=dict)
    scree: list = field(default_factory=list)       # (rep, j, f_j, ratio)
    detail: list = field(default_factory=list)      # study3: per (rep, cell, subject, factor) E_ik
    grids: dict = field(default_factory=dict)       # study2: name -> (M, M, K) arrays
    notes: list = field(default_factory=list)
    absent_estimators: list = field(default_factory=list)

    def __post_init__(self):
        for r in self.rows:
            for k, v in r.items():
                if isinstance(v, float) and not math.isfinite(v):
                    raise ValueError(f"non-finite metric {k} in replication {r.get('rep')}")
        reps = {r["rep"] for r in self.rows}
        if self.rows and len(reps) != self.replications:
            raise ValueError(f"report has {len(reps)} replications, expected {self.replications}")

    def group_key(self, row) -> tuple:
        return tuple(row[k] for k in ("estimator", "h", "delta") if k in row)

    def summary(self) -> list:
        groups = {}
        for r in self.rows:
            groups.setdefault(self.group_key(r), []).append(r)
        out = []
        for key, rs in groups.items():
            entry = {"group": list(key), "count": len(rs)}
            for metric in ("error", "relative_error"):
                vals = np.array([r[metric] for r in rs if r.get(metric) is not None], dtype=float)
                if vals.size:
                    entry[f"mean_{metric}"] = float(np.mean(vals))
                    entry[f"std_{metric}"] = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
            out.append(entry)
        return out

    def mean(self, metric="error", **where) -> float:
        vals = [r[metric] for r in self.rows if all(r.get(k) == v for k, v in where.items())]
        if not vals:
            raise KeyError(f"no rows match {where}")
        return float(np.mean(vals))

    def to_json(self) -> dict:
        return {"mode": self.mode, "rows": self.rows, "replications": self.replications,
                "config": self.config, "scree": self.scree, "detail": self.detail,
                "notes": self.notes, "absent_estimators": self.absent_estimators,
                "summary": self.summary()}

    @classmethod
    def from_json(cls, obj: dict) -> "StudyReport":
        return cls(obj["mode"], obj["rows"], obj["replications"], obj.get("config", {}),
                   [tuple(s) for s in obj.get("scree", [])], obj.get("detail", []), {},
                   obj.get("notes", []), obj.get("absent_estimators", []))


def _fit_initial(scans, cfg: PipelineConfig, mask, max_rank, threads=1):
    c = cfg["covariance"]
    cov = empirical_spatial_cov(scans, mask, batch=c["batch"], center=c["center"], threads=threads)
    path = rank_path(cov, max_rank, completion_options(cfg, threads))
    return cov, path


def _estimate(scans, cfg, mask, cov, V, method, alpha, grid, shrink=True):
    initial = extract_loadings(V)
    rot = rotate(initial.matrix, method, alpha, rotation_options(cfg, 1))
    folds = make_folds(scans, cfg["postprocess"]["folds"], mask, initial, completion_options(cfg, 1),
                       center=cov.centered, threads=1)
    post = postprocess(rot.loadings, folds, postprocess_config(cfg), grid, 1, shrink=shrink)
    return initial, rot.loadings, post


def _study1_rep(cfg: PipelineConfig, rep: int) -> dict:
    sim = cfg.sim_config(seed=replication_seed(cfg.seed, rep))
    scans, truth = simulate_dataset(sim, threads=1)
    G = truth.global_cov
    grid = sim.grid
    mask = mask_for(grid, cfg)
    cov, path = _fit_initial(scans, cfg, mask, cfg["fit"]["max_rank"])
    f = cfg["fit"]
    K_hat = select_rank(path, f["select"], c=f["threshold"], j=f["k"] or sim.K)
    initial, rotated, post = _estimate(scans, cfg, mask, cov, path.V(sim.K), cfg["rotation"]["method"],
                                       cfg["rotation"]["alpha"], grid)
    errs = {
        "TFFA": normalized_error(G, post.shrunk.global_cov()),
        "MCS": normalized_error(G, post.smoothed.global_cov()),
        "MC": normalized_error(G, initial.global_cov()),
    }
    rows = [{"rep": rep, "estimator": k, "error": v, "relative_error": v / errs["TFFA"], "K_hat": K_hat,
             "sigma": float(post.sigma[0]), "kappa": float(post.kappa[0])} for k, v in errs.items()]
    scree = [(rep, j, fj, ratio) for j, fj, ratio in path.scree_rows()]
    return {"rows": rows, "scree": scree}


def _study2_rep(cfg: PipelineConfig, rep: int) -> dict:
    T = cfg["simulation"]["oblique_T"]
    K = cfg["simulation"]["K"]
    T = default_oblique_T(K) if T is None else np.asarray(T, float)
    sim = cfg.sim_config(seed=replication_seed(cfg.seed, rep), oblique_T=T)
    scans, truth = simulate_dataset(sim, threads=1)
    G = truth.global_cov
    grid = sim.grid
    mask = mask_for(grid, cfg)
    kmax = K + cfg["study"]["extra_rank"]
    cov, path = _fit_initial(scans, cfg, mask, kmax)
    rows, grids = [], {}
    for k in sorted({K, kmax}):
        for kind, method in (("orthogonal", "varimax"), ("oblique", "oblimin")):
            _, rotated, post = _estimate(scans, cfg, mask, cov, path.V(k), method,
                                         cfg["rotation"]["alpha"], grid)
            name = f"{kind}_K{k}"
            rows.append({"rep": rep, "estimator": name, "error": normalized_error(G, post.shrunk.global_cov()),
                         "relative_error": None, "K_fit": k})
            grids[f"rep{rep:03d}_{name}"] = np.stack([grid.to_volume(post.shrunk.matrix[:, j])
                                                      for j in range(k)], axis=-1)
    grids[f"rep{rep:03d}_true"] = np.stack([grid.to_volume(truth.loadings.matrix[:, j]) for j in range(K)],
                                           axis=-1)
    return {"rows": rows, "grids": grids}


def centered_square_mask(M: int, h: int) -> np.ndarray:
    lo = (M - h) // 2
    m = np.zeros((M, M), dtype=bool)
    m[lo:lo + h, lo:lo + h] = True
    return m


def _study3_rep(cfg: PipelineConfig, rep: int) -> dict:
    s = cfg["study"]
    rows, detail = [], []
    J = cfg["simulation"]["J"]
    P = cfg["scores"]["P"] or s["score_P"] or max(4, J // 4)
    basis = build_basis(P, J)
    for delta in s["deltas"]:
        sim = cfg.sim_config(seed=replication_seed(cfg.seed, rep), delta=delta)
        scans, truth = simulate_dataset(sim, threads=1)
        for h in s["h"]:
            mgrid = SpatialGrid((sim.M, sim.M), centered_square_mask(sim.M, h))
            keep = mgrid.active_flat()
            L = truth.loadings.matrix[keep]
            Xs = [sc.values[keep] for sc in scans]
            cv = spatial_cv_gamma(Xs, L, mgrid, basis, cfg["scores"]["gamma_grid"], V=cfg["scores"]["V"],
                                  uniform=cfg["scores"]["uniform"])
            errs = {"FOSR": [], "PWLS": []}
            for i, (X, F) in enumerate(zip(Xs, truth.factors)):
                est = {"FOSR": fosr_scores(X, L, basis, cv.gamma).F_hat, "PWLS": pwls_scores(X, L).F_hat}
                for name, Fh in est.items():
                    for k in range(F.shape[0]):
                        e = float(np.linalg.norm(F[k] - Fh[k]) / np.linalg.norm(F[k]))
                        errs[name].append(e)
                        detail.append((rep, h, delta, name, i, k, e))
            for name, e in errs.items():
                rows.append({"rep": rep, "h": h, "delta": delta, "estimator": name, "error": float(np.mean(e)),
                             "relative_error": None, "gamma": float(cv.gamma[0]), "P": P})
    return {"rows": rows, "detail": detail}


_STUDIES = {"study1": _study1_rep, "study2": _study2_rep, "study3": _study3_rep}


def run_study(config, mode: Optional[str] = None, threads: Optional[int] = None) -> StudyReport:
    """Replicated simulation study; replications run in parallel, one thread each."""
    cfg = config if isinstance(config, PipelineConfig) else validate_config(config)
    mode = mode or cfg.mode
    if mode not in _STUDIES:
        raise ConfigError(f"unknown study mode {mode!r}")
    n_rep = int(cfg["replications"])
    if n_rep < 1:
        raise ValueError("empty report: the study needs at least one replication")
    threads = threads if threads is not None else cfg["threads"]
    fn = _STUDIES[mode]
    parts = pmap(lambda r: fn(cfg, r), range(n_rep), threads)
    rows = [r for p in parts for r in p["rows"]]
    rep = StudyReport(mode, rows, n_rep, cfg.to_json(),
                      scree=[s for p in parts for s in p.get("scree", [])],
                      detail=[d for p in parts for d in p.get("detail", [])])
    for p in parts:
        rep.grids.update(p.get("grids", {}))
    if mode == "study1":
        rep.absent_estimators = ["ICA", "ICAS"]
        rep.notes.append("ICA and ICAS arms are not run; their columns are left empty")
    if mode == "study3":
        rep.notes.append("true loadings are used in place of estimated ones")
    return rep


_RESULT_COLUMNS = {
    "study1": ["rep", "estimator", "error", "relative_error", "K_hat", "sigma", "kappa"],
    "study2": ["rep", "estimator", "K_fit", "error"],
    "study3": ["rep", "h", "delta", "estimator", "error", "gamma", "P"],
}


def emit_report(report: StudyReport, out_dir) -> list:
    """CSV table (one row per replication and estimator), JSON summary and plot series."""
    if not report.rows:
        raise ValueError("empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = _RESULT_COLUMNS.get(report.mode, sorted(report.rows[0]))
    files = []
    write_csv(out / "results.csv", cols, [[r.get(c, "") for c in cols] for r in report.rows])
    files.append(out / "results.csv")
    _write_json(out / "summary.json", {"mode": report.mode, "replications": report.replications,
                                       "summary": report.summary(), "notes": report.notes,
                                       "absent_estimators": report.absent_estimators})
    _write_json(out / "report.json", report.to_json())
    files += [out / "summary.json", out / "report.json"]
    if report.scree:
        write_csv(out / "scree.csv", ["rep", "j", "f_j", "ratio"], report.scree)
        files.append(out / "scree.csv")
    if report.mode == "study1":
        # wide layout: one line per replication, estimators as columns
        est = ["TFFA", "MCS", "MC"] + report.absent_estimators
        by_rep = {}
        for r in report.rows:
            by_rep.setdefault(r["rep"], {})[r["estimator"]] = r["error"]
        write_csv(out / "fig4.csv", ["rep"] + est,
                  [[rep] + [by_rep[rep].get(e, "") for e in est] for rep in sorted(by_rep)])
        files.append(out / "fig4.csv")
    if report.detail:
        write_csv(out / "eik.csv", ["rep", "h", "delta", "estimator", "subject", "factor", "error"],
                  report.detail)
        files.append(out / "eik.csv")
    if report.grids:
        gdir = out / "grids"
        gdir.mkdir(exist_ok=True)
        for name, arr in sorted(report.grids.items()):
            write_tensor(gdir / f"{name}.tft", arr)
            files.append(gdir / f"{name}.tft")
    return files


def load_report(path) -> StudyReport:
    return StudyReport.from_json(_read_json(path))
