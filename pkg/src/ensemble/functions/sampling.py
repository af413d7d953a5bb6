"""Uniform sampling generators and small simulators."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..core import STOP_TAGS, CalcStatus
from ..history import out_dtype
from ..registry import register
from ..worker import persis_send_recv, rng_from, store_rng


def _box(user: dict) -> tuple[np.ndarray, np.ndarray]:
    lb = np.atleast_1d(np.asarray(user["lb"], dtype=float))
    ub = np.atleast_1d(np.asarray(user["ub"], dtype=float))
    if lb.shape != ub.shape or np.any(lb > ub):
        raise ValueError(f"invalid box lb={lb} ub={ub}")
    return lb, ub


def uniform_batch(rng: np.random.Generator, specs, b: int) -> np.ndarray:
    lb, ub = _box(specs.user)
    out = np.zeros(b, dtype=out_dtype(specs.out_fields))
    out["x"] = rng.uniform(lb, ub, (b, len(lb))).reshape(out["x"].shape)
    return out


@register("gen_uniform_sample")
def gen_uniform_sample(H, persis_info, gen_specs, libE_info):
    """``gen_batch_size`` points uniform in ``[lb, ub]`` from the worker's stream."""
    rng = rng_from(persis_info)
    out = uniform_batch(rng, gen_specs, int(gen_specs.user["gen_batch_size"]))
    return out, store_rng(persis_info, rng)


@register("gen_persistent_uniform")
def gen_persistent_uniform(H, persis_info, gen_specs, libE_info):
    """Stream uniform batches; each new batch is as large as the last reply."""
    comm = libE_info["comm"]
    rng = rng_from(persis_info)
    b = int(gen_specs.user["initial_batch_size"])
    sent, replies = [], []
    while True:
        batch = uniform_batch(rng, gen_specs, b)
        sent.append(b)
        tag, calc_in = persis_send_recv(comm, batch)
        if tag in STOP_TAGS:
            break
        replies.append(0 if calc_in is None else len(calc_in))
        if calc_in is not None and len(calc_in):
            b = len(calc_in)
    persis_info["batch_trace"] = sent
    persis_info["reply_trace"] = replies
    return None, store_rng(persis_info, rng), CalcStatus.PERSIS_FINISHED


@register("gen_variable_resources")
def gen_variable_resources(H, persis_info, gen_specs, libE_info):
    """Uniform sample whose rows also request a number of resource sets."""
    rng = rng_from(persis_info)
    out = uniform_batch(rng, gen_specs, int(gen_specs.user["gen_batch_size"]))
    choices = np.atleast_1d(gen_specs.user.get("resource_sets", 1))
    out["resource_sets"] = rng.choice(choices, len(out)) if len(choices) > 1 else int(choices[0])
    return out, store_rng(persis_info, rng)


def _norm(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x.reshape(len(x), -1), axis=1)


@register("sim_norm")
def sim_norm(H, persis_info, sim_specs, libE_info):
    out = np.zeros(len(H), dtype=out_dtype(sim_specs.out_fields))
    out["f"] = _norm(H["x"])
    return out, persis_info


@register("sim_faulty")
def sim_faulty(H, persis_info, sim_specs, libE_info):
    """``sim_norm`` that raises on the sim_ids listed in ``fail_on``."""
    bad = set(sim_specs.user.get("fail_on", ())) & set(libE_info["sim_ids"])
    if bad:
        raise RuntimeError(f"injected failure on sim_ids {sorted(bad)}")
    return sim_norm(H, persis_info, sim_specs, libE_info)


@register("sim_resource_probe")
def sim_resource_probe(H, persis_info, sim_specs, libE_info):
    """Launch the synthetic app on this worker's slots and record what it saw."""
    ex = libE_info["executor"]
    res = libE_info["resources"]
    sim_id = libE_info["sim_ids"][0]
    outfile = Path(libE_info["workdir"]) / f"probe_{sim_id}.txt"
    duration = float(sim_specs.user.get("duration", 0.05))
    task = ex.submit(
        "synthetic",
        ["--duration", duration, "--outfile", outfile, "--report-env"],
        num_procs=res.slot_count if res else 1,
        stdout=f"probe_{sim_id}.out",
        stderr=f"probe_{sim_id}.err",
        env_from_resources=True,
    )
    state = ex.wait(task)
    env = {}
    for line in outfile.read_text().splitlines():
        if line.startswith("ENV "):
            key, _, value = line[4:].partition("=")
            env[key] = value
    slots = [int(s) for s in env.get("ENS_VISIBLE_SLOTS", "").split(",") if s]
    out = np.zeros(len(H), dtype=out_dtype(sim_specs.out_fields))
    out["f"] = _norm(H["x"])
    out["nslots"] = len(slots)
    out["nprocs"] = int(env.get("ENS_NUM_PROCS") or 0)
    status = CalcStatus.COMPLETED if state.value == "finished" else CalcStatus.FAILED
    return out, persis_info, status
