"""Command-line driver: schema-validated JSON configs in, CSV/JSON
tables and a run manifest out.

Exit codes: 0 success, 2 bad config (schema message on stderr),
3 numerical failure (diagnostics JSON path on stderr).  Kernel tables
are the only cached artifact; the cache directory comes from the
config, the SUBKAM_CACHE_DIR environment variable, or --out.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .geometry import (
    InvalidInputError,
    Lagrangian,
    ModelSpace,
    Potential,
    lagrangian_from_config,
)
from .grids import SpatialGrid
from .semigroup import (
    GridFunction,
    discounted_bounds_report,
    kernel_cap_report,
    lo_long_time,
    solve_critical,
    solve_discounted,
    vanishing_discount,
)
from .tonelli import KernelBuildError, MinimizeOptions, build_kernel, minimal_action
from . import aubry as aubry_mod
from . import mather as mather_mod
from .simplex import LPError

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["space", "potential", "grid", "kernel"],
    "properties": {
        "space": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "dim"],
            "properties": {
                "kind": {"enum": ["flat_torus", "heisenberg"]},
                "dim": {"type": "integer", "minimum": 1, "maximum": 3},
            },
        },
        "potential": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "terms": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["wave_vector", "amplitude"],
                        "properties": {
                            "wave_vector": {"type": "array", "items": {"type": "integer"}},
                            "amplitude": {"type": "number"},
                            "phase": {"type": "number"},
                        },
                    },
                },
            },
        },
        "one_form": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"coefficients": {"type": "array", "items": {"type": "number"}}},
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["resolution"],
            "properties": {"resolution": {"type": "integer", "minimum": 2}},
        },
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "required": ["delta"],
            "properties": {
                "delta": {"type": "number", "exclusiveMinimum": 0},
                "lambda": {"type": "number", "minimum": 0},
                "v_max": {"type": ["number", "null"]},
                "format": {"enum": ["binary", "csv"]},
            },
        },
        "minimize": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps_per_unit": {"type": "integer", "minimum": 1},
                "multistarts": {"type": "integer", "minimum": 1},
                "stage_iterations": {"type": "integer", "minimum": 1},
                "polish_iterations": {"type": "integer", "minimum": 1},
                "tol_stationarity": {"type": "number", "exclusiveMinimum": 0},
                "tol_endpoint": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "solve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
                "anchor": {"type": "integer", "minimum": 0},
            },
        },
        "discounted": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambdas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": {"type": "integer", "minimum": 1},
            },
        },
        "barrier": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sources": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "t_lo": {"type": "number", "exclusiveMinimum": 0},
                "t_hi": {"type": "number", "exclusiveMinimum": 0},
                "tol_aubry": {"type": ["number", "null"]},
                "method": {"enum": ["auto", "slices", "critical-graph"]},
            },
        },
        "evolve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_max": {"type": "number", "exclusiveMinimum": 0},
                "initial": {"enum": ["zero", "random", "file"]},
                "initial_file": {"type": "string"},
                "initial_seed": {"type": "integer"},
            },
        },
        "check": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid_function": {"type": "string"},
                "c": {"type": ["number", "null"]},
                "tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "lp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spatial_resolution": {"type": ["integer", "null"], "minimum": 2},
                "control_v_max": {"type": "number", "exclusiveMinimum": 0},
                "control_resolution": {"type": "integer", "minimum": 3},
                "k_max": {"type": "integer", "minimum": 1},
                "rotation": {"type": ["array", "null"], "items": {"type": "number"}},
                "rotation_grid": {"type": ["array", "null"], "items": {"type": "number"}},
                "classes": {"type": "array",
                            "items": {"type": "array", "items": {"type": "number"}}},
                "with_semigroup": {"type": "boolean"},
            },
        },
        "homogenize": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eps": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "probes": {"type": "array",
                           "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                     "items": {"type": "number"}}},
                "datum": {"enum": ["abs", "zero"]},
                "growth": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "points": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x": {"type": "array", "items": {"type": "number"}},
                "y": {"type": "array", "items": {"type": "number"}},
                "T": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "output_dir": {"type": "string"},
        "cache_dir": {"type": ["string", "null"]},
        "seed": {"type": "integer"},
        "workers": {"type": ["integer", "null"], "minimum": 1},
    },
}

DEFAULTS = {
    "one_form": {"coefficients": None},
    "kernel": {"lambda": 0.0, "v_max": None, "format": "binary"},
    "minimize": {"steps_per_unit": 64, "multistarts": 1, "stage_iterations": 40,
                 "polish_iterations": 60, "tol_stationarity": 1e-4, "tol_endpoint": 1e-7},
    "solve": {"tol": 1e-8, "max_iters": 20000, "anchor": 0},
    "discounted": {"lambdas": [0.4, 0.2, 0.1, 0.05], "tol": 1e-8, "max_iters": 400000},
    "barrier": {"sources": [0], "t_lo": 6.0, "t_hi": 10.0, "tol_aubry": None,
                "method": "auto"},
    "evolve": {"t_max": 8.0, "initial": "zero", "initial_file": "", "initial_seed": 0},
    "check": {"grid_function": "", "c": None, "tol": 1e-5},
    "lp": {"spatial_resolution": None, "control_v_max": 2.0, "control_resolution": 17,
           "k_max": 3, "rotation": None, "rotation_grid": None, "classes": [[0.0]],
           "with_semigroup": True},
    "homogenize": {"eps": [0.2, 0.1, 0.05], "probes": [[0.33, 1.0]],
                   "datum": "abs", "growth": 1.0},
    "points": {"x": None, "y": None, "T": 1.0},
    "cache_dir": None,
    "seed": 0,
    "workers": 1,
}


class ConfigError(ValueError):
    pass


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    import jsonschema

    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config schema violation: {exc.message}") from None
    cfg = copy.deepcopy(raw)
    for key, sub in DEFAULTS.items():
        if isinstance(sub, dict):
            merged = dict(sub)
            merged.update(cfg.get(key, {}))
            cfg[key] = merged
        else:
            cfg.setdefault(key, sub)
    cfg.setdefault("output_dir", "out")
    return cfg, raw


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class Run:
    """Collects outputs and writes the manifest atomically at the end."""

    def __init__(self, cfg, raw_cfg, command, config_path, out_dir):
        self.cfg = cfg
        self.command = command
        self.out_dir = out_dir
        self.t0 = time.time()
        self.outputs = []
        self.headline = {}
        self.inputs = {"config": file_digest(config_path)}
        os.makedirs(out_dir, exist_ok=True)

    def write_text(self, name, text):
        path = os.path.join(self.out_dir, name)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text)
        self.outputs.append(name)
        return path

    def write_json(self, name, obj):
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True,
                                                default=_jsonable) + "\n")

    def finish(self):
        manifest = {
            "tool_version": __version__,
            "command": self.command,
            "config_hash": config_hash(self.cfg),
            "effective_config": self.cfg,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "headline": self.headline,
            "wall_time_s": time.time() - self.t0,
        }
        path = os.path.join(self.out_dir, "manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        os.replace(tmp, path)
        for name in self.outputs:
            assert os.path.exists(os.path.join(self.out_dir, name))
        return path


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def build_objects(cfg):
    lagr = lagrangian_from_config(cfg["space"], cfg["potential"], cfg["one_form"])
    mopts = MinimizeOptions(seed=cfg["seed"], **cfg["minimize"])
    return lagr, mopts


def cache_dir_for(cfg, out_dir):
    return cfg.get("cache_dir") or os.environ.get("SUBKAM_CACHE_DIR") \
        or os.path.join(out_dir, "cache")


def kernel_for(cfg, lagr, mopts, out_dir, lam=None, workers=1):
    kc = cfg["kernel"]
    return build_kernel(
        lagr, cfg["grid"]["resolution"], kc["delta"],
        lam=kc["lambda"] if lam is None else lam,
        opts=mopts, v_max=kc["v_max"], cache_dir=cache_dir_for(cfg, out_dir),
        fmt=kc["format"], workers=workers,
    )


def _history_csv(rec):
    lines = ["step,time,sup_change,dist_to_limit"]
    for k in range(rec.times.size):
        lines.append(f"{k + 1},{format(rec.times[k], '.17g')},"
                     f"{format(rec.sup_changes[k], '.17g')},"
                     f"{format(rec.dist_to_limit[k], '.17g')}")
    return "\n".join(lines) + "\n"


# -- command handlers -------------------------------------------------------

def cmd_cc_dist(run, cfg, workers):
    space = ModelSpace(cfg["space"]["kind"], cfg["space"]["dim"])
    kinetic = Lagrangian(space, Potential(space, []))
    pts = cfg["points"]
    if pts["x"] is None or pts["y"] is None:
        raise ConfigError("cc-dist needs points.x and points.y")
    _, mopts = build_objects(cfg)
    T = pts["T"]
    h = minimal_action(kinetic, pts["x"], pts["y"], T, opts=mopts)
    d = float(np.sqrt(max(2.0 * T * h, 0.0)))
    run.headline.update({"cc_distance": d, "minimal_kinetic_action": h})
    run.write_json("cc_dist.json", {"x": pts["x"], "y": pts["y"], "T": T,
                                    "distance": d, "action": h})


def cmd_minimal_action(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    pts = cfg["points"]
    if pts["x"] is None or pts["y"] is None:
        raise ConfigError("minimal-action needs points.x and points.y")
    lam = cfg["kernel"]["lambda"]
    val = minimal_action(lagr, pts["x"], pts["y"], pts["T"], lam=lam, opts=mopts)
    run.headline.update({"minimal_action": val, "lambda": lam})
    run.write_json("minimal_action.json",
                   {"x": pts["x"], "y": pts["y"], "T": pts["T"], "lambda": lam,
                    "value": val})


def cmd_kernel_build(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    kt = kernel_for(cfg, lagr, mopts, run.out_dir, workers=workers)
    run.headline.update({
        "entries": kt.num_entries,
        "failed_fraction": kt.meta.get("failed_fraction"),
        "cache_hit": kt.meta.get("cache_hit", False),
        "kernel_config_hash": kt.config_hash,
    })
    run.write_json("kernel_build.json", run.headline)


def cmd_critical(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    kt = kernel_for(cfg, lagr, mopts, run.out_dir, lam=0.0, workers=workers)
    sc = cfg["solve"]
    res = solve_critical(kt, tol=sc["tol"], max_iters=sc["max_iters"],
                         anchor=sc["anchor"])
    run.write_text("critical_u.csv", res.u.to_csv())
    hist = ["iteration,drift"]
    for i, d in enumerate(res.drift_history):
        hist.append(f"{i},{format(d, '.17g')}")
    run.write_text("critical_history.csv", "\n".join(hist) + "\n")
    cap = kernel_cap_report(kt, res.u.values)
    run.headline.update({
        "c_estimate": res.c_estimate,
        "fixed_point_residual": res.fixed_point_residual,
        "iterations": res.iterations,
        "converged": res.converged,
        "max_speed_used": cap["max_speed_used"],
    })
    run.write_json("critical_summary.json",
                   dict(run.headline, diagnostics=res.diagnostics))
    return res, kt


def cmd_discounted(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    dc = cfg["discounted"]
    rows = []
    for lam in dc["lambdas"]:
        kt = kernel_for(cfg, lagr, mopts, run.out_dir, lam=lam, workers=workers)
        res = solve_discounted(kt, lam, tol=dc["tol"], max_iters=dc["max_iters"])
        run.write_text(f"discounted_u_lam{lam:g}.csv", res.u.to_csv())
        rep = discounted_bounds_report(res, lagr)
        rows.append({"lambda": lam, "iterations": res.iterations, **rep})
    run.headline["bounds_ok"] = all(r["lower_slack"] >= -1e-6 and r["upper_slack"] >= -1e-6
                                    for r in rows)
    run.write_json("discounted_summary.json", rows)


def cmd_vanishing_discount(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    crit, kt0 = cmd_critical(run, cfg, workers)
    dc = cfg["discounted"]
    kernels = {lam: kernel_for(cfg, lagr, mopts, run.out_dir, lam=lam, workers=workers)
               for lam in dc["lambdas"]}
    rec = vanishing_discount(kernels, crit.c_estimate, tol=dc["tol"],
                             max_iters=dc["max_iters"])
    lines = ["lambda,iterations,sup_diff_to_next"]
    for i, lam in enumerate(rec.lams):
        diff = rec.sup_diffs[i] if i < rec.sup_diffs.size else np.nan
        lines.append(f"{lam:g},{rec.iterations[i]},{format(diff, '.17g')}")
    run.write_text("vanishing_discount.csv", "\n".join(lines) + "\n")
    run.headline["sup_diffs"] = rec.sup_diffs.tolist()
    run.write_json("vanishing_summary.json", run.headline)


def cmd_lo_evolve(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    crit, kt = cmd_critical(run, cfg, workers)
    ev = cfg["evolve"]
    grid = kt.grid
    if ev["initial"] == "zero":
        u0 = GridFunction(grid, np.zeros(grid.count))
    elif ev["initial"] == "random":
        gen = np.random.default_rng(ev["initial_seed"])
        coef = gen.normal(size=3)
        xs = grid.nodes[:, 0]
        vals = sum(c * np.sin(2 * np.pi * (m + 1) * xs) / (m + 1)
                   for m, c in enumerate(coef))
        u0 = GridFunction(grid, vals)
    else:
        u0 = _read_grid_function(ev["initial_file"], grid)
    rec = lo_long_time(u0, kt, crit.c_estimate, ev["t_max"])
    run.write_text("evolve_history.csv", _history_csv(rec))
    run.write_text("evolve_final.csv", rec.final.to_csv())
    run.headline.update({"final_sup_change": float(rec.sup_changes[-1]),
                         "nondecreasing": rec.nondecreasing})


def cmd_barrier(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    crit, kt = cmd_critical(run, cfg, workers)
    bc = cfg["barrier"]
    lines = ["source,target,value,phi,t_star"]
    for src in bc["sources"]:
        sl = aubry_mod.barrier_slice(kt, crit.c_estimate, src, bc["t_lo"], bc["t_hi"])
        for j in range(kt.grid.count):
            lines.append(f"{src},{j},{format(sl.values[j], '.17g')},"
                         f"{format(sl.phi[j], '.17g')},{format(sl.t_star[j], '.17g')}")
        run.headline[f"oscillation_{src}"] = sl.oscillation
    run.write_text("barrier.csv", "\n".join(lines) + "\n")


def cmd_aubry(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    crit, kt = cmd_critical(run, cfg, workers)
    bc = cfg["barrier"]
    tol = bc["tol_aubry"]
    if tol is None:
        tol = 3.0 * max(crit.fixed_point_residual, 1e-9)
    mask = aubry_mod.aubry_set(kt, crit.c_estimate, tol, method=bc["method"],
                               T0=bc["t_lo"], T1=bc["t_hi"])
    run.write_text("aubry_mask.csv", mask.to_csv(kt.grid))
    run.headline.update({"aubry_nodes": int(mask.mask.sum()), "tol_aubry": tol,
                         "method": mask.method})
    run.write_json("aubry_summary.json", run.headline)


def cmd_check(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    crit, kt = cmd_critical(run, cfg, workers)
    cc = cfg["check"]
    c = cc["c"] if cc["c"] is not None else crit.c_estimate
    if cc["grid_function"]:
        u = _read_grid_function(cc["grid_function"], kt.grid)
    else:
        u = crit.u
    cal = aubry_mod.calibration_check(u, c, kt, lagr, tol=cc["tol"])
    visc = aubry_mod.viscosity_residual(u, c, kt, lagr, tol=cc["tol"])
    chain, paths = aubry_mod.extract_calibrated_chain(
        u, c, kt, lagr, int(np.argmax(u.values)), length=max(4, int(1.0 / kt.delta)),
        opts=mopts)
    energy_dev = aubry_mod.energy_check(paths, lagr, c)
    report = {"calibration": cal, "viscosity": visc, "energy_deviation": energy_dev,
              "c": c}
    run.headline.update({"calibration_passed": cal["passed"],
                         "energy_deviation": energy_dev})
    run.write_json("check_report.json", report)


def _lp_setup(cfg, lagr):
    lc = cfg["lp"]
    res = lc["spatial_resolution"] or cfg["grid"]["resolution"]
    grid = SpatialGrid(lagr.space, res)
    phase = mather_mod.PhaseGrid(grid, lc["control_v_max"], lc["control_resolution"])
    basis = mather_mod.ClosednessBasis(lagr.space, lc["k_max"])
    return phase, basis


def cmd_mather_lp(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    phase, basis = _lp_setup(cfg, lagr)
    lc = cfg["lp"]
    if lc["rotation"] is not None:
        sol = mather_mod.solve_lp(
            mather_mod.build_lp(lagr, phase, basis, rotation_target=lc["rotation"]))
    else:
        sol = mather_mod.mather_lp(lagr, phase, basis)
    nz = np.flatnonzero(sol.weights > 1e-12)
    nc = phase.controls.shape[0]
    lines = ["node,control,weight"]
    for j in nz:
        lines.append(f"{j // nc},{j % nc},{format(sol.weights[j], '.17g')}")
    run.write_text("mather_measure.csv", "\n".join(lines) + "\n")
    run.headline.update({
        "lp_objective": sol.objective,
        "rotation": sol.rotation.tolist(),
        "support_size": int(nz.size),
        "simplex_iterations": sol.iterations,
    })
    run.write_json("mather_summary.json", run.headline)


def cmd_beta(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    phase, basis = _lp_setup(cfg, lagr)
    lc = cfg["lp"]
    hgrid = lc["rotation_grid"]
    if hgrid is None:
        v = lc["control_v_max"]
        hgrid = np.linspace(-v, v, 2 * lc["control_resolution"] + 1).tolist()
    lines = ["h,value,feasible,dual_residual"]
    for h in hgrid:
        pt = mather_mod.beta(lagr, phase, basis, [h] if np.isscalar(h) else h)
        dres = 0.0 if pt.solution is None else float(-min(pt.solution.reduced_costs.min(), 0.0))
        lines.append(f"{h},{format(pt.value, '.17g')},{int(pt.feasible)},"
                     f"{format(dres, '.17g')}")
    run.write_text("beta_table.csv", "\n".join(lines) + "\n")
    run.headline["rows"] = len(hgrid)


def cmd_effective_h(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    phase, basis = _lp_setup(cfg, lagr)
    lc = cfg["lp"]
    lines = ["class,lp_value,semigroup_value,discrepancy"]
    for cvec in lc["classes"]:
        semi_c = None
        if lc["with_semigroup"]:
            shifted = lagr.with_one_form(np.asarray(lagr.one_form)
                                         + np.asarray(cvec, dtype=float))
            kt = build_kernel(shifted, cfg["grid"]["resolution"], cfg["kernel"]["delta"],
                              opts=mopts, v_max=cfg["kernel"]["v_max"],
                              cache_dir=cache_dir_for(cfg, run.out_dir),
                              fmt=cfg["kernel"]["format"], workers=workers)
            semi_c = solve_critical(kt, tol=cfg["solve"]["tol"],
                                    max_iters=cfg["solve"]["max_iters"]).c_estimate
        rec = mather_mod.effective_hamiltonian(lagr, phase, basis, cvec, semi_c)
        lines.append(f"\"{cvec}\",{format(rec.lp_value, '.17g')},"
                     f"{'' if semi_c is None else format(semi_c, '.17g')},"
                     f"{'' if rec.discrepancy is None else format(rec.discrepancy, '.17g')}")
        run.headline[f"H({cvec})"] = rec.lp_value
    run.write_text("effective_h.csv", "\n".join(lines) + "\n")


def cmd_homogenize(run, cfg, workers):
    lagr, mopts = build_objects(cfg)
    kt = kernel_for(cfg, lagr, mopts, run.out_dir, lam=0.0, workers=workers)
    phase, basis = _lp_setup(cfg, lagr)
    hc = cfg["homogenize"]
    v = cfg["lp"]["control_v_max"]
    hgrid = [np.array([h]) for h in np.linspace(-v, v, 2 * cfg["lp"]["control_resolution"] + 1)]
    rows_beta = mather_mod.beta_table(lagr, phase, basis, hgrid)
    f = np.abs if hc["datum"] == "abs" else (lambda q: np.zeros_like(np.asarray(q, dtype=float)))
    rows = mather_mod.homogenize(lagr, kt, rows_beta, f, hc["eps"],
                                 [tuple(p) for p in hc["probes"]], growth=hc["growth"])
    run.write_text("homogenize.csv", mather_mod.homogenization_csv(rows))
    run.headline["max_gap"] = float(np.nanmax([r.gap for r in rows]))


def cmd_report(run, cfg, workers):
    out = run.out_dir
    known = {
        "critical_u.csv": "lineplot x1 value   # weak KAM profile",
        "critical_history.csv": "lineplot iteration drift",
        "barrier.csv": "heatmap source target value   # Peierls barrier",
        "aubry_mask.csv": "scatter x1 in_set   # Aubry mask",
        "vanishing_discount.csv": "lineplot lambda sup_diff_to_next",
        "homogenize.csv": "lineplot eps gap",
        "beta_table.csv": "lineplot h value   # effective Lagrangian",
        "effective_h.csv": "table class lp_value semigroup_value",
        "mather_measure.csv": "scatter node control weight   # Mather measure support",
        "evolve_history.csv": "lineplot time sup_change",
    }
    present, missing = [], []
    for name in known:
        (present if os.path.exists(os.path.join(out, name)) else missing).append(name)
    if not present:
        raise ConfigError("report: no completed run outputs in the output directory")
    lines = ["# plot recipes for the bundled CSV tables",
             "# each line: <kind> <columns...> referencing the named file"]
    for name in present:
        lines.append(f"{name}: {known[name]}")
    run.write_text("plots.txt", "\n".join(lines) + "\n")
    summary = {"present": present, "missing": missing}
    run.headline.update(summary)
    run.write_json("report_index.json", summary)


def _read_grid_function(path, grid):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    vals = np.array([float(ln.split(",")[-1]) for ln in lines[1:]])
    return GridFunction(grid, vals, {"source": path})


COMMANDS = {
    "cc-dist": cmd_cc_dist,
    "minimal-action": cmd_minimal_action,
    "kernel-build": cmd_kernel_build,
    "critical": lambda run, cfg, workers: (cmd_critical(run, cfg, workers), None)[1],
    "discounted": cmd_discounted,
    "vanishing-discount": cmd_vanishing_discount,
    "lo-evolve": cmd_lo_evolve,
    "barrier": cmd_barrier,
    "aubry": cmd_aubry,
    "check": cmd_check,
    "mather-lp": cmd_mather_lp,
    "beta": cmd_beta,
    "effective-h": cmd_effective_h,
    "homogenize": cmd_homogenize,
    "report": cmd_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="subkam",
        description="weak KAM / Aubry-Mather computations on sub-Riemannian model spaces")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)

    try:
        cfg, raw = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.workers is not None:
        cfg["workers"] = args.workers
    workers = cfg["workers"] or (os.cpu_count() or 1)
    out_dir = args.out or cfg["output_dir"]
    run = Run(cfg, raw, args.command, args.config, out_dir)
    try:
        COMMANDS[args.command](run, cfg, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (KernelBuildError, LPError, InvalidInputError, RuntimeError) as exc:
        diag = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, KernelBuildError):
            diag["report"] = exc.report
        path = run.write_json("diagnostics.json", diag)
        run.finish()
        print(f"numerical failure: {exc}\ndiagnostics: {path}", file=sys.stderr)
        return 3
    run.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
