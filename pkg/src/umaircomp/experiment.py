"""Experiment orchestration: config ingestion, sweeps, persistence, plot data.

Config files are JSON with units spelled out in field names; dB and dBm
values are converted to linear watts once, when a sweep cell is built.
"""

from __future__ import annotations

import copy
import csv
import itertools
import json
import os
import statistics
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .agp import AGP_CSV_COLUMNS, AgpOptions
from .baselines import SCHEMES, solve_scheme
from .bounds import theorem1_bound, theorem1_coefficients, theorem2_bound, theorem2_schedule
from .fl import QuadraticTask, run_replicas, write_summary_csv
from .pam import PAM_CSV_COLUMNS, PamOptions, write_diagnostics_csv
from .system import SystemConfig, check_feasibility, generate_channels, normalized_mse


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


DEFAULTS = {
    "system": {
        "n_antennas": 8, "n_users": 4, "p0_dbm": 10.0, "noise_power_dbm": -80.0,
        "server_noise_power_dbm": None, "pathloss_db": -60.0, "gamma": 1.0,
        "symbols_per_block": 1, "alpha": None,
    },
    "schemes": ["pam"],
    "sweep": {},
    "seeds": [0],
    "pam": {},
    "agp": {},
    "fl": {"enabled": False, "rounds": 30, "local_steps": 1, "step_rule": "inverse-L",
           "replicas": 10, "eta_lag": False, "bounds": True,
           "task": {"dim": 8, "samples_per_user": 64, "ridge": 0.1, "shift": 0.3,
                    "label_noise": 0.1, "seed": 0}},
    "timing": {"enabled": False, "repeats": 5},
    "workers": 1,
    "output_dir": "results",
}

SWEEP_AXES = ("n_antennas", "n_users", "noise_power_dbm", "p0_dbm")
PLOT_KINDS = ("convergence", "mse-vs-N", "runtime-vs-N", "loss-vs-round")
RESULT_COLUMNS = ("scheme", "n_antennas", "n_users", "noise_power_dbm", "p0_dbm", "seed",
                  "status", "objective", "argmax_user", "unit_modulus_violation",
                  "rank1_residual", "power_violation", "feasible", "error")


def version_string() -> str:
    """Package version plus ``git describe`` output when run from a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=os.path.dirname(__file__), capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown field {path + k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def _pam_options(d: dict) -> PamOptions:
    try:
        return PamOptions(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pam: {exc}") from None


def _agp_options(d: dict) -> AgpOptions:
    try:
        return AgpOptions(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"agp: {exc}") from None


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate; raises ConfigError naming the bad field."""
    if "config" in raw and "version" in raw:
        raw = raw["config"]  # a manifest
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    if not cfg["schemes"]:
        raise ConfigError("schemes: at least one scheme required")
    for s in cfg["schemes"]:
        if s not in SCHEMES:
            raise ConfigError(f"schemes: unknown scheme {s!r}; available {sorted(SCHEMES)}")
    if not cfg["seeds"] or not all(isinstance(s, int) and s >= 0 for s in cfg["seeds"]):
        raise ConfigError("seeds: need a non-empty list of nonnegative integers")
    for axis, values in cfg["sweep"].items():
        if axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.{axis}: unknown axis; allowed {list(SWEEP_AXES)}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{axis}: need a non-empty list")
    _pam_options(cfg["pam"])
    _agp_options(cfg["agp"])
    for cell in _cells(cfg):
        try:
            _system_config(cfg, cell)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"system ({_cell_id(cell)}): {exc}") from None
    fl = cfg["fl"]
    if fl["enabled"]:
        if fl["rounds"] < 1 or fl["local_steps"] < 1 or fl["replicas"] < 1:
            raise ConfigError("fl: rounds, local_steps and replicas must be >= 1")
        if 2 * cfg["system"]["symbols_per_block"] != fl["task"]["dim"]:
            raise ConfigError("fl.task.dim must equal 2 * system.symbols_per_block")
        if not (fl["step_rule"] in ("inverse-L", "theorem2") or isinstance(fl["step_rule"], (int, float))):
            raise ConfigError("fl.step_rule: 'inverse-L', 'theorem2' or a number")
    if cfg["timing"]["repeats"] < 1:
        raise ConfigError("timing.repeats must be >= 1")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return resolve_config(raw)


@dataclass(frozen=True, order=True)
class Cell:
    scheme: str
    n_antennas: int
    n_users: int
    noise_power_dbm: float
    p0_dbm: float
    seed: int


def _cells(cfg) -> list:
    sysd, sweep = cfg["system"], cfg["sweep"]
    axes = [sweep.get(a, [sysd[a]]) for a in SWEEP_AXES]
    cells = [Cell(s, int(n), int(k), float(nz), float(p), int(seed))
             for s, n, k, nz, p, seed in itertools.product(cfg["schemes"], *axes, cfg["seeds"])]
    return sorted(set(cells))


def _cell_id(c: Cell) -> str:
    return f"{c.scheme}_N{c.n_antennas}_K{c.n_users}_n{c.noise_power_dbm:g}_p{c.p0_dbm:g}_s{c.seed}"


def _system_config(cfg, cell: Cell, alpha=None) -> SystemConfig:
    sysd = cfg["system"]
    alpha = sysd["alpha"] if alpha is None else alpha
    return SystemConfig.from_physical(
        N=cell.n_antennas, K=cell.n_users, p0_dbm=cell.p0_dbm, noise_dbm=cell.noise_power_dbm,
        server_noise_dbm=sysd["server_noise_power_dbm"], pathloss_db=sysd["pathloss_db"],
        gamma=sysd["gamma"], S=sysd["symbols_per_block"],
        alpha=None if alpha is None else np.asarray(alpha, dtype=float))


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _run_cell(cfg, cell: Cell, timing: bool) -> dict:
    """Solve one design; never raises, failures land in the row."""
    row = {"scheme": cell.scheme, "n_antennas": cell.n_antennas, "n_users": cell.n_users,
           "noise_power_dbm": cell.noise_power_dbm, "p0_dbm": cell.p0_dbm, "seed": cell.seed,
           "status": "ok", "error": ""}
    out = {"row": row, "trace": [], "design": None, "runtime_s": None}
    try:
        sc = _system_config(cfg, cell)
        ch = generate_channels(sc, cell.seed)
        po, ao = _pam_options(cfg["pam"]), _agp_options(cfg["agp"])
        res = solve_scheme(cell.scheme, ch, sc, po, ao)
        if timing:
            samples = []
            for _ in range(cfg["timing"]["repeats"]):
                t0 = time.perf_counter_ns()
                solve_scheme(cell.scheme, ch, sc, po, ao)
                samples.append((time.perf_counter_ns() - t0) * 1e-9)
            out["runtime_s"] = statistics.median(samples)
        mse = normalized_mse(res.design, ch, sc)
        rep = check_feasibility(res.design, sc)
        row.update({"objective": float(mse.max()), "argmax_user": int(np.argmax(mse)),
                    "unit_modulus_violation": rep.unit_modulus,
                    "rank1_residual": "" if rep.rank1_residual is None else rep.rank1_residual,
                    "power_violation": rep.power, "feasible": rep.ok()})
        out["trace"] = [{k: v for k, v in r.items() if k != "elapsed_ns"} for r in res.trace]
        out["trace_full"] = res.trace
        out["design"] = res.design.to_dict()
        out["channels"] = json.loads(ch.to_json())
    except Exception as exc:  # recorded per run; the sweep continues
        row.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    return out


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def _task_for(cfg, K: int) -> QuadraticTask:
    t = cfg["fl"]["task"]
    return QuadraticTask.synthetic(K=K, M=t["dim"], n_per_user=t["samples_per_user"],
                                   mu0=t["ridge"], shift=t["shift"], noise=t["label_noise"],
                                   seed=t["seed"])


def _fl_for_cell(cfg, cell: Cell) -> dict:
    fl = cfg["fl"]
    task = _task_for(cfg, cell.n_users)
    sc = _system_config(cfg, cell, alpha=task.alpha)
    E = fl["local_steps"]
    if fl["step_rule"] == "theorem2":
        step = theorem2_schedule(task, E)
    elif fl["step_rule"] == "inverse-L":
        step = 1.0 / task.smoothness
    else:
        step = float(fl["step_rule"])
    hs = run_replicas(task, sc, cell.scheme, fl["rounds"], E, step, cell.seed, fl["replicas"],
                      eta_lag=fl["eta_lag"], pam_opts=_pam_options(cfg["pam"]),
                      agp_opts=_agp_options(cfg["agp"]), record_params=False)
    out = {"histories": hs, "reports": []}
    R = fl["rounds"]
    mean_loss = np.mean([[np.mean(r["loss"]) for r in h.records] for h in hs], axis=0)
    max_mse = np.mean([h.max_mse() for h in hs], axis=0)
    curve = []
    gap0 = task.loss(np.zeros(task.M)) - task.loss_star
    for i in range(R):
        if E == 1 and fl["step_rule"] == "inverse-L":
            A = theorem1_coefficients(task.smoothness, task.mu, task.alpha, i + 1)
            b = float(A @ max_mse[: i + 1]) + (1 - task.mu / task.smoothness) ** (i + 1) * gap0
        else:
            b = float("nan")
        curve.append({"scheme": cell.scheme, "seed": cell.seed, "round": i,
                      "loss": float(mean_loss[i]) - task.loss_star, "bound": b})
    out["curve"] = curve
    if fl["bounds"]:
        if E == 1 and fl["step_rule"] == "inverse-L":
            out["reports"].append(theorem1_bound(hs, task))
        if fl["step_rule"] == "theorem2":
            out["reports"].append(theorem2_bound(hs, task, E))
    return out


def run_experiment(config, out_dir=None, seed=None, scheme=None, timing=None,
                   fl=None) -> int:
    """Run every (scheme, sweep point, seed) cell; returns the exit status.

    ``config`` is a path or an already parsed dict. Exit status: 0 ok,
    1 configuration error, 2 some runs failed.
    """
    try:
        raw = config if isinstance(config, dict) else json.loads(Path(config).read_text())
    except json.JSONDecodeError as exc:
        print(f"config error: {config}: line {exc.lineno} column {exc.colno}: {exc.msg}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"config error: {config}: {exc.strerror}", file=sys.stderr)
        return 1
    try:
        if "config" in raw and "version" in raw:
            raw = raw["config"]
        raw = copy.deepcopy(raw)
        if seed is not None:
            raw["seeds"] = [int(seed)]
        if scheme is not None:
            raw["schemes"] = [scheme]
        if out_dir is not None:
            raw["output_dir"] = str(out_dir)
        if timing is not None:
            raw.setdefault("timing", {})["enabled"] = bool(timing)
        if fl is not None:
            raw.setdefault("fl", {})["enabled"] = bool(fl)
        cfg = resolve_config(raw)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    out = Path(cfg["output_dir"])
    (out / "runs").mkdir(parents=True, exist_ok=True)
    cells = _cells(cfg)
    timing_on = cfg["timing"]["enabled"]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            results = list(pool.map(_run_cell, [cfg] * len(cells), cells, [timing_on] * len(cells)))
    else:
        results = [_run_cell(cfg, c, timing_on) for c in cells]

    rows, conv, times = [], [], []
    for cell, res in zip(cells, results):
        rows.append(res["row"])
        cid = _cell_id(cell)
        record = {"cell": res["row"], "design": res["design"], "trace": res["trace"],
                  "channels": res.get("channels")}
        (out / "runs" / f"{cid}.json").write_text(json.dumps(record, sort_keys=True))
        if res.get("trace_full"):
            cols = AGP_CSV_COLUMNS if cell.scheme == "agp" else PAM_CSV_COLUMNS
            write_diagnostics_csv(res["trace_full"], out / "runs" / f"{cid}_diagnostics.csv", cols)
        for r in res["trace"]:
            if cell.scheme == "agp":
                conv.append({"scheme": cell.scheme, "n_antennas": cell.n_antennas, "seed": cell.seed,
                             "outer_iter": r["fp_iter"], "objective": r["max_min_objective"]})
            elif r.get("block") in ("init", "t"):
                conv.append({"scheme": cell.scheme, "n_antennas": cell.n_antennas, "seed": cell.seed,
                             "outer_iter": r["outer_iter"], "objective": r["objective"]})
        if res["runtime_s"] is not None:
            times.append({"scheme": cell.scheme, "n_antennas": cell.n_antennas,
                          "n_users": cell.n_users, "seed": cell.seed, "runtime_s": res["runtime_s"]})
    _write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    _write_csv(out / "convergence.csv", ("scheme", "n_antennas", "seed", "outer_iter", "objective"), conv)
    if timing_on:
        _write_csv(out / "timings.csv", ("scheme", "n_antennas", "n_users", "seed", "runtime_s"), times)

    failures = sum(r["status"] != "ok" for r in rows)
    if cfg["fl"]["enabled"]:
        hist_all, curves, bound_rows = [], [], []
        for cell in cells:
            try:
                res = _fl_for_cell(cfg, cell)
            except Exception as exc:
                failures += 1
                bound_rows.append({"scheme": cell.scheme, "seed": cell.seed, "n_antennas": cell.n_antennas,
                                   "verdict": "error", "error": f"{type(exc).__name__}: {exc}"})
                continue
            hist_all.extend(res["histories"])
            curves.extend(res["curve"])
            cid = _cell_id(cell)
            res["histories"][0].to_jsonl(out / "runs" / f"{cid}_fl.jsonl")
            for rep in res["reports"]:
                (out / "runs" / f"{cid}_theorem{rep.theorem}.json").write_text(rep.to_json())
                bound_rows.append({"scheme": cell.scheme, "seed": cell.seed, "n_antennas": cell.n_antennas,
                                   "theorem": rep.theorem, "bound": rep.bound, "transient": rep.transient,
                                   "gap_mean": rep.gap_mean, "gap_ci_upper": rep.gap_ci_upper,
                                   "verdict": rep.verdict, "margin": rep.margin, "error": ""})
        write_summary_csv(hist_all, out / "fl_summary.csv")
        _write_csv(out / "fl_curves.csv", ("scheme", "seed", "round", "loss", "bound"), curves)
        _write_csv(out / "bounds.csv", ("scheme", "seed", "n_antennas", "theorem", "bound", "transient",
                                        "gap_mean", "gap_ci_upper", "verdict", "margin", "error"),
                   bound_rows)

    manifest = {"version": version_string(), "config": cfg, "cells": len(cells), "failures": failures}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return 2 if failures else 0


# ---------------------------------------------------------------- plot data

def _read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plot_data(results_dir, kind: str, scheme: str | None = None) -> Path:
    """Write a tidy CSV for one figure kind under ``results_dir/plots``."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; available: {', '.join(PLOT_KINDS)}")
    d = Path(results_dir)
    src = {"convergence": "convergence.csv", "mse-vs-N": "results.csv",
           "runtime-vs-N": "timings.csv", "loss-vs-round": "fl_curves.csv"}[kind]
    if not (d / src).exists():
        have = [k for k, f in (("convergence", "convergence.csv"), ("mse-vs-N", "results.csv"),
                               ("runtime-vs-N", "timings.csv"), ("loss-vs-round", "fl_curves.csv"))
                if (d / f).exists()]
        raise ValueError(f"no data for {kind!r} in {d}; available kinds: {', '.join(have) or 'none'}")
    rows = [r for r in _read_csv(d / src) if scheme is None or r["scheme"] == scheme]
    if kind == "mse-vs-N":
        rows = [r for r in rows if r["status"] == "ok"]
    if not rows:
        raise ValueError(f"empty selection for {kind!r} (scheme={scheme!r}); available kinds: "
                         f"{', '.join(PLOT_KINDS)}")

    def grouped(key_cols, val_col, agg):
        groups = {}
        for r in rows:
            groups.setdefault(tuple(r[c] for c in key_cols), []).append(float(r[val_col]))
        return sorted(groups.items(), key=lambda kv: tuple(_sort_key(x) for x in kv[0]))

    if kind == "convergence":
        cols = ("scheme", "outer_iter", "objective")
        out = [dict(zip(cols, (*k, float(np.mean(v)))))
               for k, v in grouped(("scheme", "outer_iter"), "objective", np.mean)]
    elif kind == "mse-vs-N":
        cols = ("scheme", "n_antennas", "normalized_mse")
        out = [dict(zip(cols, (*k, float(np.mean(v)))))
               for k, v in grouped(("scheme", "n_antennas"), "objective", np.mean)]
    elif kind == "runtime-vs-N":
        cols = ("scheme", "n_antennas", "runtime_s")
        out = [dict(zip(cols, (*k, float(np.median(v)))))
               for k, v in grouped(("scheme", "n_antennas"), "runtime_s", np.median)]
    else:
        cols = ("scheme", "round", "loss", "bound")
        loss = dict(grouped(("scheme", "round"), "loss", np.mean))
        bound = dict(grouped(("scheme", "round"), "bound", np.mean))
        out = [dict(zip(cols, (*k, float(np.mean(loss[k])), float(np.mean(bound[k])))))
               for k in sorted(loss, key=lambda k: tuple(_sort_key(x) for x in k))]
    (d / "plots").mkdir(exist_ok=True)
    path = d / "plots" / f"{kind}.csv"
    _write_csv(path, cols, out)
    return path


def _sort_key(x: str):
    try:
        return (0, float(x), "")
    except ValueError:
        return (1, 0.0, x)
