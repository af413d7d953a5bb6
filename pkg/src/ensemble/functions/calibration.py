"""Borehole simulator and a calibration-style generator that cancels pending work.

The generator keeps a running mean of the observed outputs per bin of the
first input (``rw``). Just before emitting each new batch it asks the manager
to cancel every pending point whose bin mean exceeds a threshold.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from ..core import STOP_TAGS, CalcStatus
from ..executor import LaunchExhausted
from ..history import out_dtype
from ..registry import register
from ..worker import persis_send_recv, rng_from, store_rng

# rw, r, Tu, Hu, Tl, Hl, L, Kw
BOREHOLE_LB = np.array([0.05, 100.0, 63070.0, 990.0, 63.1, 700.0, 1120.0, 9855.0])
BOREHOLE_UB = np.array([0.15, 50000.0, 115600.0, 1110.0, 116.0, 820.0, 1680.0, 12045.0])


def borehole(x) -> float:
    """Water flow rate through a borehole (m^3/yr)."""
    rw, r, Tu, Hu, Tl, Hl, L, Kw = (float(v) for v in x)
    lnr = math.log(r / rw)
    return 2 * math.pi * Tu * (Hu - Hl) / (lnr * (1 + 2 * L * Tu / (lnr * rw**2 * Kw) + Tu / Tl))


@register("sim_borehole")
def sim_borehole(H, persis_info, sim_specs, libE_info):
    """Borehole value, optionally after running the synthetic app for ``delay`` seconds.

    The delay makes the evaluation killable: a manager kill ends it with
    status KILLED and no outputs.
    """
    delay = float(sim_specs.user.get("delay", 0.0))
    out = np.zeros(len(H), dtype=out_dtype(sim_specs.out_fields))
    if delay > 0:
        ex = libE_info["executor"]
        sim_id = libE_info["sim_ids"][0]
        workdir = Path(libE_info["workdir"])
        try:
            task = ex.submit(
                "synthetic",
                ["--duration", delay, "--outfile", workdir / f"bh_{sim_id}.txt"],
                stdout=f"bh_{sim_id}.out",
                stderr=f"bh_{sim_id}.err",
            )
        except LaunchExhausted:
            return None, persis_info, CalcStatus.FAILED
        ex.wait(task)
        if task.killed_by_manager:
            return None, persis_info, CalcStatus.KILLED
    out["f"] = [borehole(x) for x in H["x"]]
    return out, persis_info


def _bins(x_rw: float, K: int) -> int:
    frac = (x_rw - BOREHOLE_LB[0]) / (BOREHOLE_UB[0] - BOREHOLE_LB[0])
    return min(max(int(frac * K), 0), K - 1)


@register("gen_calibration_cancel")
def gen_calibration_cancel(H, persis_info, gen_specs, libE_info):
    """Persistent generator over the borehole box with threshold cancellation.

    Config: ``batch_size`` b, ``max_batches``, ``bins`` K (4), ``tau``
    (number, ``"auto"`` for the midpoint between the two largest bin means,
    or None to disable), ``update_every`` (new batch after this many returns;
    default b // 2).
    """
    u = gen_specs.user
    comm = libE_info["comm"]
    rng = rng_from(persis_info)
    b = int(u.get("batch_size", 8))
    max_batches = int(u.get("max_batches", 6))
    K = int(u.get("bins", 4))
    tau_cfg = u.get("tau", "auto")
    cadence = max(int(u.get("update_every", b // 2)), 1)
    dtype = out_dtype(gen_specs.out_fields)

    sums = np.zeros(K)
    counts = np.zeros(K, dtype=int)
    bin_of: dict[int, int] = {}
    pending: set[int] = set()
    canceled: set[int] = set()
    cancel_log: list[dict] = []
    counters = {"generated": 0, "completed": 0, "canceled": 0, "failed": 0}
    batches = 1
    since = 0

    def new_batch():
        out = np.zeros(b, dtype=dtype)
        out["x"] = rng.uniform(BOREHOLE_LB, BOREHOLE_UB, (b, len(BOREHOLE_LB)))
        counters["generated"] += b
        return out

    def threshold():
        if tau_cfg is None:
            return math.inf
        if tau_cfg != "auto":
            return float(tau_cfg)
        if np.any(counts == 0):
            return math.inf
        means = np.sort(sums / counts)
        return 0.5 * (means[-2] + means[-1])

    batch = new_batch()
    sent = batch
    cancel: list[int] = []
    while True:
        tag, calc_in = persis_send_recv(comm, batch, cancel)
        if tag in STOP_TAGS:
            break
        for sid, row in zip(comm.new_sim_ids, sent if sent is not None else ()):
            pending.add(sid)
            bin_of[sid] = _bins(row["x"][0], K)
        for row in calc_in if calc_in is not None else ():
            sid = int(row["sim_id"])
            pending.discard(sid)
            since += 1
            if row["failed"]:
                counters["failed"] += 1
            elif row["kill_sent"] and row["f"] == 0.0:
                pass  # killed before producing a value
            else:
                counters["completed"] += 1
                k = bin_of.get(sid, _bins(row["x"][0], K))
                sums[k] += row["f"]
                counts[k] += 1
        live = pending - canceled
        batch, sent, cancel = None, None, []
        if batches < max_batches and (since >= cadence or not live):
            tau = threshold()
            cancel = sorted(s for s in live if counts[bin_of[s]] and sums[bin_of[s]] / counts[bin_of[s]] > tau)
            canceled.update(cancel)
            counters["canceled"] += len(cancel)
            if cancel:
                cancel_log.append({"batch": batches, "tau": tau, "sim_ids": cancel})
            batch = sent = new_batch()
            batches += 1
            since = 0
        elif not live:
            break
    persis_info["calib_counters"] = counters
    persis_info["cancel_log"] = cancel_log
    return None, store_rng(persis_info, rng), CalcStatus.PERSIS_FINISHED
