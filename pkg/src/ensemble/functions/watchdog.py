"""Simulator that watches its application's output and kills it on a marker line."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from ..core import CalcStatus
from ..executor import LaunchExhausted, WatchOutcome
from ..history import out_dtype
from ..registry import register

_STAMP = re.compile(r"t=([0-9.]+)")


def nominal_runtime(outfile: Path, marker: str | None = None) -> float:
    """Application time at the marker line if present, else at its last line (0 if none)."""
    try:
        lines = outfile.read_text().splitlines()
    except FileNotFoundError:
        return 0.0
    if marker:
        hits = [ln for ln in lines if marker in ln]
        lines = hits[:1] or lines
    for line in reversed(lines):
        m = _STAMP.search(line)
        if m:
            return float(m.group(1))
    return 0.0


@register("sim_app_with_watchdog")
def sim_app_with_watchdog(H, persis_info, sim_specs, libE_info):
    """Run the app for this row; kill it once its output contains the marker.

    Rows carry ``duration`` and ``lost_at`` (negative: never). Outputs ``f`` and
    ``runtime`` are the application's own time stamps, ``killed`` the outcome.
    """
    user = sim_specs.user
    ex = libE_info["executor"]
    sim_id = libE_info["sim_ids"][0]
    workdir = Path(libE_info["workdir"])
    outfile = workdir / f"app_{sim_id}.txt"
    args = ["--duration", float(H["duration"][0]), "--outfile", outfile]
    if H["lost_at"][0] >= 0:
        args += ["--lost-at", float(H["lost_at"][0])]
    out = np.zeros(1, dtype=out_dtype(sim_specs.out_fields))
    try:
        task = ex.submit(user.get("app", "synthetic"), args, stdout=f"app_{sim_id}.out", stderr=f"app_{sim_id}.err")
    except LaunchExhausted:
        return out, persis_info, CalcStatus.FAILED
    marker = user.get("marker", "PARTICLE LOST")
    outcome = ex.watch_output_and_kill(task, outfile, marker, float(user.get("poll_interval", 0.05)))
    out["runtime"] = nominal_runtime(outfile, marker if outcome == WatchOutcome.KILLED_ON_MARKER else None)
    out["f"] = out["runtime"]
    out["killed"] = outcome != WatchOutcome.COMPLETED_CLEAN
    if outcome == WatchOutcome.COMPLETED_CLEAN:
        status = CalcStatus.COMPLETED if task.state.value == "finished" else CalcStatus.FAILED
    else:
        status = CalcStatus.KILLED
    persis_info.setdefault("wall_runtimes", {})[str(sim_id)] = task.runtime
    return out, persis_info, status
