"""Named, desk-scale scenarios.

A scenario is a JSON-shaped dict with ``sim_specs``, ``gen_specs``,
``alloc_specs``, ``exit_criteria``, ``libE_specs`` and ``scenario`` (scenario
parameters such as preload sizes). A user config file is deep-merged over it
before ``build`` turns it into runtime objects.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import AllocSpecs, ExitCriteria, GenSpecs, SimSpecs
from ..executor import synthetic_app_registration
from ..manager import EnsembleConfig
from ..worker import WorkdirPolicy

PERSISTENT_ALLOCS = {"only_persistent_gen"}


def _sampling():
    return {
        "gen_specs": {
            "function": "gen_uniform_sample",
            "out": [["x", "float64", [1]]],
            "user": {"lb": [-3.0], "ub": [3.0], "gen_batch_size": 500},
        },
        "sim_specs": {"function": "sim_norm", "in": ["x"], "out": [["f", "float64"]]},
        "alloc_specs": {"function": "give_sim_work_first"},
        "exit_criteria": {"sim_max": 500},
    }


def _persistent_sampling():
    return {
        "gen_specs": {
            "function": "gen_persistent_uniform",
            "in": ["f"],
            "out": [["x", "float64", [2]]],
            "user": {"lb": [-3.0, -3.0], "ub": [3.0, 3.0], "initial_batch_size": 16},
        },
        "sim_specs": {"function": "sim_norm", "in": ["x"], "out": [["f", "float64"]]},
        "alloc_specs": {"function": "only_persistent_gen", "user": {"batch_mode": False}},
        "exit_criteria": {"sim_max": 200},
    }


def _multistart():
    return {
        "gen_specs": {
            "function": "gen_multistart_opt",
            "in": ["f"],
            "out": [["x", "float64", [2]], ["priority", "float64"]],
            "user": {
                "lb": [-3.0, -2.0],
                "ub": [3.0, 2.0],
                "sample_size": 100,
                "max_active_runs": 3,
                "xtol": 1e-6,
                "init_step": 0.05,
            },
        },
        "sim_specs": {"function": "sim_six_hump_camel", "in": ["x"], "out": [["f", "float64"]]},
        "alloc_specs": {"function": "only_persistent_gen"},
        "exit_criteria": {"sim_max": 1000},
    }


def _watchdog_kill():
    return {
        "gen_specs": None,
        "sim_specs": {
            "function": "sim_app_with_watchdog",
            "in": ["duration", "lost_at"],
            "out": [["f", "float64"], ["runtime", "float64"], ["killed", "boolean"]],
            "user": {"marker": "PARTICLE LOST", "poll_interval": 0.05},
        },
        "alloc_specs": {"function": "pre_generated"},
        "exit_criteria": {"sim_max": 40},
        "libE_specs": {"workdir": {"use_workdirs": True, "per_sim_dirs": True}, "apps": {"synthetic": "builtin"}},
        "scenario": {
            "n_sims": 40,
            "lost_fraction": 0.175,
            "duration": [0.9, 1.1],
            "lost_window": [0.1, 0.8],
        },
    }


def _variable_resources():
    return {
        "gen_specs": {
            "function": "gen_variable_resources",
            "out": [["x", "float64", [2]], ["resource_sets", "int64"]],
            "user": {"lb": [-1.0, -1.0], "ub": [1.0, 1.0], "gen_batch_size": 8, "resource_sets": [1, 2, 4]},
        },
        "sim_specs": {
            "function": "sim_resource_probe",
            "in": ["x", "resource_sets"],
            "out": [["f", "float64"], ["nslots", "int64"], ["nprocs", "int64"]],
            "user": {"duration": 0.05},
        },
        "alloc_specs": {"function": "give_sim_work_first"},
        "exit_criteria": {"sim_max": 24},
        "libE_specs": {
            "resources": {"nodes": [["node0", 4], ["node1", 4]], "nsets": 8},
            "workdir": {"use_workdirs": True, "per_sim_dirs": True},
            "apps": {"synthetic": "builtin"},
        },
    }


def _calibration_cancel():
    return {
        "gen_specs": {
            "function": "gen_calibration_cancel",
            "in": ["x", "f", "failed", "kill_sent"],
            "out": [["x", "float64", [8]]],
            "user": {"batch_size": 8, "max_batches": 6, "bins": 4, "tau": "auto"},
        },
        "sim_specs": {"function": "sim_borehole", "in": ["x"], "out": [["f", "float64"]], "user": {"delay": 0.2}},
        "alloc_specs": {"function": "only_persistent_gen", "user": {"restart_gen": False}},
        "exit_criteria": {"wallclock_max": 300},
        "libE_specs": {"workdir": {"use_workdirs": True, "per_sim_dirs": True}, "apps": {"synthetic": "builtin"}},
    }


def _pre_generated():
    return {
        "gen_specs": None,
        "sim_specs": {"function": "sim_norm", "in": ["x"], "out": [["f", "float64"]]},
        "alloc_specs": {"function": "pre_generated"},
        "exit_criteria": {"sim_max": 200},
        "scenario": {"n_rows": 200, "lb": [-3.0, -3.0], "ub": [3.0, 3.0]},
    }


CATALOG = {
    "sampling": _sampling,
    "persistent_sampling": _persistent_sampling,
    "multistart": _multistart,
    "watchdog_kill": _watchdog_kill,
    "variable_resources": _variable_resources,
    "calibration_cancel": _calibration_cancel,
    "pre_generated": _pre_generated,
}


def scenario_catalog() -> list[str]:
    return list(CATALOG)


def deep_merge(base, over):
    if not isinstance(base, dict) or not isinstance(over, dict):
        return copy.deepcopy(over)
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = deep_merge(out[k], v) if k in out and v is not None else copy.deepcopy(v)
    return out


def scenario_doc(name: str, overrides: dict | None = None) -> dict:
    if name not in CATALOG:
        raise KeyError(f"unknown scenario {name!r}; choose from {scenario_catalog()}")
    return deep_merge(CATALOG[name](), overrides or {})


# -------------------------------------------------------------------- preload


def watchdog_rows(params: dict, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = int(params["n_sims"])
    n_lost = int(round(float(params["lost_fraction"]) * n))
    lo, hi = params["duration"]
    wlo, whi = params["lost_window"]
    rows = np.zeros(n, dtype=[("duration", float), ("lost_at", float)])
    rows["duration"] = np.round(rng.uniform(lo, hi, n), 3)
    rows["lost_at"] = -1.0
    lost = rng.choice(n, n_lost, replace=False)
    rows["lost_at"][lost] = np.round(rng.uniform(wlo, whi, n_lost) * rows["duration"][lost], 3)
    return rows


def uniform_rows(params: dict, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lb, ub = np.asarray(params["lb"], float), np.asarray(params["ub"], float)
    n = int(params["n_rows"])
    rows = np.zeros(n, dtype=[("x", float, (len(lb),))])
    rows["x"] = rng.uniform(lb, ub, (n, len(lb)))
    return rows


PRELOADERS = {"watchdog_kill": watchdog_rows, "pre_generated": uniform_rows}


# -------------------------------------------------------------------- build


@dataclass
class Plan:
    name: str
    sim_specs: SimSpecs
    gen_specs: GenSpecs | None
    alloc_specs: AllocSpecs
    exit_criteria: ExitCriteria
    config: EnsembleConfig
    preload: np.ndarray | None
    doc: dict


def _specs(cls, d):
    if d is None:
        return None
    return cls(d["function"], d.get("in", []), [tuple(f) for f in d.get("out", [])], dict(d.get("user", {})))


def _apps(apps: dict) -> dict:
    out = {}
    for name, entry in (apps or {}).items():
        out[name] = synthetic_app_registration() if entry == "builtin" else entry
    return out


def build(name: str, *, nworkers: int = 1, comms: str = "inproc", seed: int = 1, outdir=".", overrides=None) -> Plan:
    doc = scenario_doc(name, overrides)
    sim = _specs(SimSpecs, doc["sim_specs"])
    gen = _specs(GenSpecs, doc.get("gen_specs"))
    alloc = AllocSpecs(doc["alloc_specs"]["function"], dict(doc["alloc_specs"].get("user", {})))
    ec = ExitCriteria(**doc["exit_criteria"])
    lib = dict(doc.get("libE_specs") or {})
    persistent = alloc.function in PERSISTENT_ALLOCS
    total = nworkers + (1 if persistent else 0)
    outdir = Path(outdir).resolve()
    cfg = EnsembleConfig(
        nworkers=total,
        comms=comms,
        comms_config=lib.pop("comms_config", {}),
        ensemble_dir=str(outdir / lib.pop("ensemble_dir", "ensemble")),
        origin_dir=str(outdir),
        zero_resource_workers=tuple(lib.pop("zero_resource_workers", (1,) if persistent else ())),
        workdir=WorkdirPolicy.from_dict(lib.pop("workdir", {})),
        apps=_apps(lib.pop("apps", {})),
        deterministic=lib.pop("deterministic", nworkers == 1),
        seed=seed,
        stats_path=str(outdir / "libE_stats.txt"),
        **lib,
    )
    preload = None
    if name in PRELOADERS and doc.get("scenario"):
        preload = PRELOADERS[name](doc["scenario"], seed)
    return Plan(name, sim, gen, alloc, ec, cfg, preload, doc)


def expected_truncation_gap(rows: np.ndarray) -> float:
    """Mean natural duration of unmarked rows minus mean marker time of marked rows."""
    lost = rows["lost_at"] >= 0
    if not lost.any() or lost.all():
        return math.nan
    return float(rows["duration"][~lost].mean() - rows["lost_at"][lost].mean())
