"""Allocation functions: map history rows and idle workers onto work units.

An allocation function receives an ``AllocView`` and returns
``{worker_id: WorkUnit}``. It must not mutate the view; the manager validates
and applies the result. Resource sets named in a unit are chosen against a
private copy of the resource table.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .core import EnsembleError, ExitCriteria, SimSpecs, Tag
from .registry import register
from .resources import InsufficientResources, ResourceTable, assign


class NoGeneratorNeeded(EnsembleError):
    pass


class WorkerStatus(str, enum.Enum):
    IDLE = "idle"
    BUSY_SIM = "busy_sim"
    BUSY_GEN = "busy_gen"
    PERSISTENT_GEN = "persistent_gen"
    PERSISTENT_SIM = "persistent_sim"
    DEAD = "dead"


@dataclass
class WorkerState:
    id: int
    status: WorkerStatus = WorkerStatus.IDLE
    sim_ids: list[int] = field(default_factory=list)
    resource_sets: list[int] = field(default_factory=list)
    zero_resource: bool = False
    persis_waiting: bool = False
    new_ids: list[int] = field(default_factory=list)  # rows appended from the update awaiting a reply

    @property
    def persistent(self) -> bool:
        return self.status in (WorkerStatus.PERSISTENT_GEN, WorkerStatus.PERSISTENT_SIM)

    def copy(self) -> "WorkerState":
        return replace(self, sim_ids=list(self.sim_ids), resource_sets=list(self.resource_sets), new_ids=list(self.new_ids))


@dataclass
class WorkUnit:
    dest: int
    kind: Tag
    sim_ids: list[int] = field(default_factory=list)
    fields_to_send: list[str] = field(default_factory=list)
    persistent: bool = False
    resource_sets: list[int] = field(default_factory=list)
    reply: bool = False  # answer to a waiting persistent worker, not a new call

    def __post_init__(self):
        self.kind = Tag(self.kind)
        self.sim_ids = [int(i) for i in self.sim_ids]


@dataclass
class AllocView:
    H: np.ndarray
    workers: dict[int, WorkerState]
    sim_specs: SimSpecs | None
    gen_specs: SimSpecs | None
    resources: ResourceTable | None = None
    persis_info: dict = field(default_factory=dict)
    user: dict = field(default_factory=dict)
    exit_criteria: ExitCriteria | None = None
    informed: np.ndarray | None = None
    gen_calls: int = 0
    preloaded_fields: frozenset = frozenset()

    def count(self, flag: str) -> int:
        return int(np.count_nonzero(self.H[flag]))


def avail_worker_ids(view: AllocView, persistent_ok: bool = False, zero_resource_ok: bool = True) -> list[int]:
    """Idle workers, optionally with persistent workers that await a reply."""
    out = []
    for w, st in sorted(view.workers.items()):
        if st.zero_resource and not zero_resource_ok:
            continue
        if st.status == WorkerStatus.IDLE or (persistent_ok and st.persistent and st.persis_waiting):
            out.append(w)
    return out


def eligible_sim_rows(view: AllocView) -> np.ndarray:
    """Undispatched, uncanceled sim_ids in dispatch order (priority desc, then sim_id)."""
    H = view.H
    ids = np.flatnonzero(~H["given"] & ~H["cancel_requested"])
    if "priority" in (H.dtype.names or ()) and len(ids):
        ids = ids[np.lexsort((ids, -H["priority"][ids]))]
    return ids


def _sim_budget(view: AllocView) -> int | None:
    ec = view.exit_criteria
    if ec is None or ec.sim_max is None:
        return None
    return max(ec.sim_max - view.count("given"), 0)


def _need(view: AllocView, sim_id: int) -> int:
    if view.resources is None:
        return 0
    if "resource_sets" in (view.H.dtype.names or ()):
        n = int(view.H["resource_sets"][sim_id])
        return n if n > 0 else 1
    return 1


def _sim_units(view: AllocView, workers: list[int], table: ResourceTable | None) -> dict[int, WorkUnit]:
    units: dict[int, WorkUnit] = {}
    budget = _sim_budget(view)
    fields = list(view.sim_specs.in_fields) if view.sim_specs else []
    free = list(workers)
    for sim_id in eligible_sim_rows(view):
        if not free or budget == 0:
            break
        w = free[0]
        need = _need(view, sim_id)
        sets: list[int] = []
        if table is not None and need:
            try:
                sets = assign(w, need, table).set_ids
            except InsufficientResources:
                continue  # held back; smaller rows may still fit
        free.pop(0)
        units[w] = WorkUnit(w, Tag.EVAL_SIM, [int(sim_id)], fields, resource_sets=sets)
        if budget is not None:
            budget -= 1
    return units


def _gen_wanted(view: AllocView) -> bool:
    ec = view.exit_criteria
    if ec is not None and ec.gen_max is not None and len(view.H) >= ec.gen_max:
        return False
    if ec is not None and ec.sim_max is not None:
        pending = view.count("given") + len(eligible_sim_rows(view))
        if pending >= ec.sim_max:
            return False
    return True


def _active_gens(view: AllocView) -> int:
    return sum(st.status in (WorkerStatus.BUSY_GEN, WorkerStatus.PERSISTENT_GEN) for st in view.workers.values())


def _pick_gen_worker(view: AllocView, candidates: list[int]) -> int | None:
    zero = [w for w in candidates if view.workers[w].zero_resource]
    if zero:
        return zero[0]
    return candidates[0] if candidates else None


def _gen_unit(view: AllocView, w: int, persistent: bool) -> WorkUnit:
    fields = list(view.gen_specs.in_fields) if view.gen_specs else []
    ids: list[int] = []
    if fields and not persistent:
        ids = np.flatnonzero(view.H["returned"]).tolist()
    return WorkUnit(w, Tag.EVAL_GEN, ids, fields, persistent=persistent)


@register("give_sim_work_first")
def give_sim_work_first(view: AllocView) -> dict[int, WorkUnit]:
    """Hand out pending sim rows first; call the generator only when none are left."""
    table = view.resources.copy() if view.resources is not None else None
    idle = avail_worker_ids(view)
    sim_workers = [w for w in idle if not view.workers[w].zero_resource]
    units = _sim_units(view, sim_workers, table)
    if view.gen_specs is None or len(eligible_sim_rows(view)) or not _gen_wanted(view):
        return units
    limit = int(view.user.get("num_active_gens", 1))
    if _active_gens(view) >= limit:
        return units
    w = _pick_gen_worker(view, [w for w in idle if w not in units])
    if w is not None:
        units[w] = _gen_unit(view, w, persistent=False)
    return units


def _reply_unit(view: AllocView, w: int) -> WorkUnit | None:
    H = view.H
    informed = view.informed if view.informed is not None else np.zeros(len(H), bool)
    mine = H["gen_worker"] == w
    fresh = np.flatnonzero(mine & H["returned"] & ~informed)
    in_flight = np.any(mine & H["given"] & ~H["returned"])
    waiting = np.any(mine & ~H["given"] & ~H["cancel_requested"])
    fields = list(view.gen_specs.in_fields) if view.gen_specs else []
    batch_mode = bool(view.user.get("batch_mode", False))
    if len(fresh) and (not batch_mode or not (in_flight or waiting)):
        return WorkUnit(w, Tag.EVAL_GEN, fresh.tolist(), fields, persistent=True, reply=True)
    if not len(fresh) and not in_flight and not waiting:
        return WorkUnit(w, Tag.EVAL_GEN, [], fields, persistent=True, reply=True)
    return None


@register("only_persistent_gen")
def only_persistent_gen(view: AllocView) -> dict[int, WorkUnit]:
    """One persistent generator; every other worker evaluates its points."""
    units: dict[int, WorkUnit] = {}
    for w, st in sorted(view.workers.items()):
        if st.status == WorkerStatus.PERSISTENT_GEN and st.persis_waiting:
            unit = _reply_unit(view, w)
            if unit is not None:
                units[w] = unit
    idle = avail_worker_ids(view)
    limit = int(view.user.get("num_active_gens", 1))
    restart = bool(view.user.get("restart_gen", True))
    if (
        view.gen_specs is not None
        and _active_gens(view) < limit
        and (restart or view.gen_calls == 0)
        and _gen_wanted_persistent(view)
    ):
        w = _pick_gen_worker(view, idle)
        if w is not None:
            units[w] = _gen_unit(view, w, persistent=True)
            idle.remove(w)
    table = view.resources.copy() if view.resources is not None else None
    sim_workers = [w for w in idle if not view.workers[w].zero_resource]
    units.update(_sim_units(view, sim_workers, table))
    return units


def _gen_wanted_persistent(view: AllocView) -> bool:
    ec = view.exit_criteria
    if ec is not None and ec.gen_max is not None and len(view.H) >= ec.gen_max:
        return False
    if ec is not None and ec.sim_max is not None and view.count("given") >= ec.sim_max:
        return False
    return True


@register("pre_generated")
def pre_generated(view: AllocView) -> dict[int, WorkUnit]:
    """Farm preloaded rows to idle workers. Never calls a generator."""
    if view.gen_specs is not None:
        missing = [f.name for f in view.gen_specs.out_fields if f.name not in view.preloaded_fields]
        if missing:
            raise NoGeneratorNeeded(f"generator outputs {missing} are not present in the preloaded history")
    table = view.resources.copy() if view.resources is not None else None
    idle = avail_worker_ids(view)
    sim_workers = [w for w in idle if not view.workers[w].zero_resource]
    return _sim_units(view, sim_workers, table)
