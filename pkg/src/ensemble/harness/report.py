"""Run summaries: JSON report plus a per-batch CSV trace."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..core import CalcStatus, IoFailure

TRACE_COLUMNS = ("t", "generated", "completed", "canceled", "failed")
TRACE_EVENTS = ("start", "batch", "end")


def fold_counts(H: np.ndarray, calc_status: np.ndarray | None = None) -> dict:
    """Counts derived directly from history flags.

    ``killed`` needs the per-row return status, which is not a history flag;
    without it every killed row is counted as completed.
    """
    returned = H["returned"]
    killed = 0
    if calc_status is not None:
        killed = int(np.count_nonzero(np.asarray(calc_status)[: len(H)] == CalcStatus.KILLED))
    return {
        "generated": int(len(H)),
        "given": int(H["given"].sum()),
        "returned": int(returned.sum()),
        "completed": int(np.count_nonzero(returned & ~H["failed"])) - killed,
        "killed": killed,
        "canceled": int(H["cancel_requested"].sum()),
        "failed": int(H["failed"].sum()),
    }


def _stats(values) -> dict:
    values = [float(v) for v in values]
    if not values:
        return {"n": 0, "mean": None, "min": None, "max": None, "stdev": None}
    return {
        "n": len(values),
        "mean": statistics.fmean(values),
        "min": min(values),
        "max": max(values),
        "stdev": statistics.stdev(values) if len(values) > 1 else 0.0,
    }


@dataclass
class ScenarioReport:
    scenario: str
    flag: str
    counts: dict
    wall_time: float
    runtime_stats: dict
    history_path: str
    exit_code: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def runtime_stats(H: np.ndarray, calc_status: np.ndarray, records) -> dict:
    """Per-sim runtime statistics split by outcome.

    Uses the ``runtime`` output field when the simulation reports one (the
    app's own clock); otherwise the calc wall time from the worker records.
    """
    per_sim: dict[int, float] = {}
    if "runtime" in (H.dtype.names or ()):
        for sid in np.flatnonzero(H["returned"]):
            per_sim[int(sid)] = float(H["runtime"][sid])
    else:
        for rec in records:
            if rec.calc_type == "sim" and len(rec.sim_ids) == 1:
                per_sim[rec.sim_ids[0]] = rec.calc_time
    groups: dict[str, list[float]] = {"completed": [], "killed": [], "failed": []}
    for sid, t in per_sim.items():
        st = int(calc_status[sid]) if sid < len(calc_status) else -1
        if st == CalcStatus.KILLED:
            groups["killed"].append(t)
        elif st == CalcStatus.FAILED or H["failed"][sid]:
            groups["failed"].append(t)
        else:
            groups["completed"].append(t)
    out = {k: _stats(v) for k, v in groups.items()}
    out["all"] = _stats(per_sim.values())
    return out


def trace_rows(trace: list[dict]) -> list[dict]:
    return [{k: ev[k] for k in TRACE_COLUMNS} for ev in trace if ev.get("event") in TRACE_EVENTS]


def write_trace_csv(path, trace: list[dict]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            w.writeheader()
            w.writerows(trace_rows(trace))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) if k == "t" else int(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def report_emit(manager, flag: str, *, scenario: str, outdir, wall_time: float, exit_code: int, history_path, extra=None) -> ScenarioReport:
    """Write ``report.json`` and ``trace.csv`` into ``outdir``."""
    outdir = Path(outdir)
    H = manager.hist.H
    rep = ScenarioReport(
        scenario=scenario,
        flag=flag,
        counts=fold_counts(H, manager.calc_status),
        wall_time=round(float(wall_time), 6),
        runtime_stats=runtime_stats(H, manager.calc_status, manager.records),
        history_path=str(history_path),
        exit_code=exit_code,
        extra=dict(extra or {}),
    )
    write_trace_csv(outdir / "trace.csv", manager.trace)
    try:
        (outdir / "report.json").write_text(json.dumps(rep.to_json(), indent=2, default=_jsonable) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write report: {exc}") from exc
    return rep


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")
