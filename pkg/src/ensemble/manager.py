"""The manager: owns the history, drives allocation, and talks to workers.

Each loop iteration drains incoming messages into the history, issues kills
for cancelled in-flight rows, asks the allocation function for work and
dispatches it, then checks the exit criteria. The manager is single-threaded;
all shared state (history, worker table, resource table) lives here.
"""

from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alloc import AllocView, WorkerState, WorkerStatus, WorkUnit
from .comms import Transport, start_transport
from .comms.message import Message, PeerClosed
from .core import (
    AllocSpecs,
    CalcStatus,
    EnsembleError,
    ExitCriteria,
    FieldSpec,
    IoFailure,
    SimSpecs,
    Tag,
    Timeout,
    check_in_fields,
    exit_reason,
    schema_union,
)
from .history import HistoryStore, decode_batch, encode_batch, field_specs_of
from .log import MANAGER_WARNING
from .registry import resolve
from .resources import ResourceTable, default_nsets, detect_inventory, release
from .worker import WorkdirPolicy, WorkerSetup, worker_loop

logger = logging.getLogger(__name__)

FLAGS = ("criteria_met", "timeout", "aborted")


class UnknownWorker(EnsembleError):
    pass


class ProtocolViolation(EnsembleError):
    pass


class ManagerFault(EnsembleError):
    """Internal manager failure. The history is dumped before this propagates."""


@dataclass
class EnsembleConfig:
    nworkers: int = 1
    comms: str = "inproc"
    comms_config: dict = field(default_factory=dict)
    ensemble_dir: str = "ensemble"
    origin_dir: str = "."
    save_every_k_sims: int | None = None
    save_every_k_gens: int | None = None
    central_mode: bool = False
    zero_resource_workers: tuple = ()
    resources: dict | None = None  # {"nodes": [[name, slots], ...], "nsets": n}; None disables sets
    workdir: WorkdirPolicy = field(default_factory=WorkdirPolicy)
    apps: dict = field(default_factory=dict)
    executor: dict = field(default_factory=dict)
    continue_on_worker_error: bool = False
    deterministic: bool = False
    seed: int = 0
    stats_path: str | None = None
    poll_interval: float = 0.05
    shutdown_timeout: float = 30.0

    def __post_init__(self):
        self.zero_resource_workers = tuple(int(w) for w in self.zero_resource_workers)
        if self.nworkers < 1:
            raise ValueError("nworkers must be >= 1")
        bad = [w for w in self.zero_resource_workers if not 1 <= w <= self.nworkers]
        if bad:
            raise ValueError(f"zero_resource_workers {bad} outside 1..{self.nworkers}")
        if isinstance(self.workdir, dict):
            self.workdir = WorkdirPolicy.from_dict(self.workdir)


def initial_persis_info(nworkers: int, seed: int, given=None) -> dict[int, dict]:
    info = {}
    for w in range(1, nworkers + 1):
        base = {"rng_seed": seed * 100003 + w, "worker_id": w}
        base.update((given or {}).get(w, {}))
        info[w] = base
    return info


def stats_line(worker: int, calc_type: str, sim_ids, seconds: float, status) -> str:
    return f"Worker {worker}: {calc_type} sim_ids {list(sim_ids)} Time: {seconds:.3f} Status: {CalcStatus(status).name}"


@dataclass
class CalcRecord:
    worker: int
    calc_type: str
    sim_ids: list[int]
    status: CalcStatus
    calc_time: float


class Manager:
    def __init__(
        self,
        sim_specs: SimSpecs,
        gen_specs: SimSpecs | None,
        exit_criteria: ExitCriteria,
        alloc_specs: AllocSpecs | None = None,
        config: EnsembleConfig | None = None,
        comm=None,
        persis_info=None,
        H0: HistoryStore | None = None,
        preload=None,
    ):
        self.sim_specs = sim_specs
        self.gen_specs = gen_specs
        self.ec = exit_criteria
        self.alloc_specs = alloc_specs or AllocSpecs()
        self.cfg = config or EnsembleConfig()
        self.comm = comm
        self.alloc_fn = resolve(self.alloc_specs.function)
        n = self.cfg.nworkers

        gen_out = gen_specs.out_fields if gen_specs else ()
        sim_out = sim_specs.out_fields if sim_specs else ()
        taken = {f.name for f in (*gen_out, *sim_out)}
        extra = [f for f in _preload_fields(preload) if f.name not in taken]
        union = schema_union(gen_out, sim_out, extra)
        if H0 is not None:
            missing = [f for f in union.user_fields if f not in H0.schema.user_fields]
            if missing:
                raise EnsembleError(f"restart history lacks fields {[f.name for f in missing]}")
            self.hist = H0.copy()
            released = self.hist.release_unreturned()
            if released:
                logger.info("restart: %d in-flight rows made eligible again", len(released))
            self.preloaded_fields = frozenset(self.hist.schema.user_names)
        else:
            self.hist = HistoryStore(union)
            self.preloaded_fields = frozenset()
        check_in_fields(self.hist.schema, *(s for s in (sim_specs, gen_specs) if s is not None))
        if preload is not None and len(preload):
            self.hist.append(preload, gen_worker=0)
            names = preload.dtype.names if isinstance(preload, np.ndarray) else tuple(preload)
            self.preloaded_fields = frozenset(names)

        self.workers = {w: WorkerState(w, zero_resource=w in self.cfg.zero_resource_workers) for w in range(1, n + 1)}
        self.persis_info = initial_persis_info(n, self.cfg.seed, persis_info)
        self.resources = self._resource_table()
        self.informed = np.zeros(len(self.hist), dtype=bool)
        self.calc_status = np.full(len(self.hist), -1, dtype=np.int64)
        self.ensemble_dir = Path(self.cfg.ensemble_dir)
        self.records: list[CalcRecord] = []
        self.trace: list[dict] = []
        self.kills_sent = 0
        self.gen_calls = 0
        self.dispatches = 0
        self.violations: list[str] = []
        self.errors: list[dict] = []
        self._abort = False
        self._stopping = False
        self._dumped: Path | None = None
        k_sims = self.cfg.save_every_k_sims
        self._ckpt_sims = self.hist.count("returned") // k_sims if k_sims else 0
        self._ckpt_gens = len(self.hist) // self.cfg.save_every_k_gens if self.cfg.save_every_k_gens else 0
        self._start = time.monotonic()
        self._stats = None

    # ------------------------------------------------------------ setup

    def _resource_table(self) -> ResourceTable | None:
        rcfg = self.cfg.resources
        if rcfg is None:
            return None
        inv = detect_inventory(rcfg, rundir=self.cfg.origin_dir)
        if self.cfg.central_mode:
            inv = inv.without_first_node()
        nsets = int(rcfg.get("nsets") or default_nsets(self.cfg.nworkers, self.cfg.zero_resource_workers))
        return ResourceTable.from_inventory(inv, nsets)

    @property
    def elapsed(self) -> float:
        return time.monotonic() - self._start

    def _now(self) -> float:
        return float(self.dispatches) if self.cfg.deterministic else time.time()

    def _grow(self):
        extra = len(self.hist) - len(self.informed)
        if extra > 0:
            self.informed = np.concatenate([self.informed, np.zeros(extra, bool)])
            self.calc_status = np.concatenate([self.calc_status, np.full(extra, -1, np.int64)])

    def counts(self) -> dict:
        H = self.hist.H
        killed = int(np.count_nonzero(self.calc_status == CalcStatus.KILLED))
        return {
            "generated": len(H),
            "given": int(H["given"].sum()),
            "returned": int(H["returned"].sum()),
            "completed": int(np.count_nonzero(H["returned"] & ~H["failed"])) - killed,
            "killed": killed,
            "canceled": int(H["cancel_requested"].sum()),
            "failed": int(H["failed"].sum()),
        }

    def _trace(self, event: str):
        c = self.counts()
        self.trace.append({"t": round(self.elapsed, 6), "event": event, **c})

    # ------------------------------------------------------------ main loop

    def run(self):
        """Run to completion. Returns ``(history, persis_info, flag)``."""
        if self.comm is None:
            raise EnsembleError("manager has no transport endpoint")
        self.ensemble_dir.mkdir(parents=True, exist_ok=True)
        self._start = time.monotonic()
        if self.cfg.stats_path:
            self._stats = open(self.cfg.stats_path, "a", encoding="utf-8")
        self._trace("start")
        flag = None
        try:
            flag = self._loop()
            self._shutdown()
            if flag == "aborted":
                self.dump_abort()
        except Exception as exc:
            logger.error("manager fault: %s", exc, exc_info=True)
            self.dump_abort()
            try:
                self._shutdown()
            except Exception:
                logger.exception("shutdown after fault failed")
            raise ManagerFault(str(exc)) from exc
        finally:
            if self._stats:
                self._stats.close()
        self._trace("end")
        logger.info("run finished: %s (%s)", flag, self.counts())
        return self.hist, self.persis_info, flag

    def _loop(self) -> str:
        fresh = True
        while True:
            reason = exit_reason(self.hist, self.ec, self.elapsed)
            if reason:
                return reason
            got = self._lockstep() if self.cfg.deterministic else self._drain(0.0 if fresh else self._wait_time())
            fresh = False
            if self._abort:
                return "aborted"
            self.handle_cancellation()
            reason = exit_reason(self.hist, self.ec, self.elapsed)
            if reason:
                return reason
            idle = any(st.status == WorkerStatus.IDLE or st.persis_waiting for st in self.workers.values())
            if not (idle or got):
                continue
            units = self.allocate()
            for unit in sorted(units.values(), key=lambda u: u.dest):
                self.dispatch(unit)
            if self._abort:
                return "aborted"
            if not units and self._quiescent():
                if not self._eligible_rows():
                    logger.info("no further work can be produced; ending run")
                    return "criteria_met"
                if self.ec.wallclock_max is None:
                    logger.log(MANAGER_WARNING, "pending rows can never be scheduled; aborting")
                    return "aborted"
                time.sleep(min(self.cfg.poll_interval, max(self.ec.wallclock_max - self.elapsed, 0)))

    def _wait_time(self) -> float:
        t = self.cfg.poll_interval
        if self.ec.wallclock_max is not None:
            t = min(t, max(self.ec.wallclock_max - self.elapsed, 0.0))
        return t

    def _quiescent(self) -> bool:
        return all(st.status in (WorkerStatus.IDLE, WorkerStatus.DEAD) for st in self.workers.values())

    def _eligible_rows(self) -> bool:
        H = self.hist.H
        return bool(np.any(~H["given"] & ~H["cancel_requested"]))

    def _owed(self) -> list[int]:
        out = []
        for w, st in sorted(self.workers.items()):
            if st.status in (WorkerStatus.BUSY_SIM, WorkerStatus.BUSY_GEN) or (st.persistent and not st.persis_waiting):
                out.append(w)
        return out

    def _lockstep(self) -> bool:
        """Deterministic receive: one message from every worker that owes one, in id order."""
        got = False
        for w in self._owed():
            timeout = None
            if self.ec.wallclock_max is not None:
                timeout = max(self.ec.wallclock_max - self.elapsed, 0.0)
            try:
                msg = self.comm.recv_from(w, timeout)
            except Timeout:
                return got
            except PeerClosed:
                self._worker_lost(w)
                got = True
                continue
            self._ingest_safe(msg)
            got = True
        return got

    def _drain(self, timeout: float) -> bool:
        got = False
        while True:
            try:
                msg = self.comm.recv(timeout)
            except Timeout:
                return got
            except PeerClosed as exc:
                if exc.peer is None:
                    for w, st in self.workers.items():
                        if st.status != WorkerStatus.DEAD:
                            self._worker_lost(w)
                    return True
                self._worker_lost(exc.peer)
                got = True
                timeout = 0.0
                continue
            self._ingest_safe(msg)
            got = True
            timeout = 0.0

    def _ingest_safe(self, msg: Message) -> None:
        try:
            self.ingest(msg)
        except (ProtocolViolation, UnknownWorker) as exc:
            self.violations.append(str(exc))
            logger.log(MANAGER_WARNING, "protocol violation: %s", exc)
            self._abort = True

    def _worker_lost(self, w: int) -> None:
        st = self.workers.get(w)
        if st is None or st.status == WorkerStatus.DEAD:
            return
        if self._stopping and st.status == WorkerStatus.IDLE:
            st.status = WorkerStatus.DEAD
            return
        logger.log(MANAGER_WARNING, "worker %d disconnected while %s", w, st.status.value)
        for sim_id in st.sim_ids:
            if self.hist.H["given"][sim_id] and not self.hist.H["returned"][sim_id]:
                self.hist.update(sim_id, None, CalcStatus.FAILED)
                self.calc_status[sim_id] = CalcStatus.FAILED
        self._release(st)
        st.status = WorkerStatus.DEAD
        self.handle_worker_error(w, {"error": "worker disconnected", "sim_ids": list(st.sim_ids)})

    # ------------------------------------------------------------ ingest

    def ingest(self, msg: Message) -> None:
        w = msg.source
        st = self.workers.get(w)
        if st is None:
            raise UnknownWorker(f"message from unknown worker {w}")
        if msg.tag == Tag.RESULT:
            self._on_result(st, msg.payload)
        elif msg.tag == Tag.PERSIS_UPDATE:
            self._on_persis_update(st, msg.payload)
        else:
            raise ProtocolViolation(f"unexpected tag {msg.tag!r} from worker {w}")

    def _on_result(self, st: WorkerState, p: dict) -> None:
        w = st.id
        if st.status in (WorkerStatus.IDLE, WorkerStatus.DEAD):
            raise ProtocolViolation(f"RESULT from worker {w} which has no work")
        status = CalcStatus(int(p.get("calc_status", CalcStatus.COMPLETED)))
        error = p.get("error")
        ids = [int(i) for i in p.get("sim_ids", ())]
        calc_type = p.get("calc_type", "sim")
        out = decode_batch(p.get("H"))
        if st.status == WorkerStatus.BUSY_SIM:
            if ids != st.sim_ids:
                raise ProtocolViolation(f"worker {w} returned sim_ids {ids}, expected {st.sim_ids}")
            if out is not None and len(out) != len(ids):
                raise ProtocolViolation(f"worker {w} returned {len(out)} rows for {len(ids)} sims")
            if error is not None:
                status = CalcStatus.FAILED
            known = [f.name for f in self.sim_specs.out_fields]
            for k, sim_id in enumerate(ids):
                H = self.hist.H
                if not H["given"][sim_id] or H["returned"][sim_id]:
                    raise ProtocolViolation(f"RESULT for sim_id {sim_id} which is not in flight")
                row = None
                if out is not None and error is None:
                    row = {n: out[n][k] for n in out.dtype.names if n in known}
                self.hist.update(sim_id, row, status)
                self.calc_status[sim_id] = status
            calc_type = "sim"
        elif st.status == WorkerStatus.BUSY_GEN:
            if out is not None and len(out) and error is None:
                self._append(out, w)
            calc_type = "gen"
        else:  # persistent worker finished
            calc_type = "gen" if st.status == WorkerStatus.PERSISTENT_GEN else "sim"
        if p.get("persis_info") is not None:
            self.persis_info[w] = p["persis_info"]
        self._release(st)
        st.status, st.sim_ids, st.persis_waiting = WorkerStatus.IDLE, [], False
        calc_time = float(p.get("calc_time", 0.0))
        self.records.append(CalcRecord(w, calc_type, ids, status, calc_time))
        if self._stats:
            self._stats.write(stats_line(w, calc_type, ids, calc_time, status) + "\n")
            self._stats.flush()
        logger.info("worker %d: %s %s -> %s (%.3fs)", w, calc_type, ids, status.name, calc_time)
        if calc_type == "sim":
            self._trace("result")
            self.checkpoint()
        if error is not None:
            self.handle_worker_error(w, p)

    def _on_persis_update(self, st: WorkerState, p: dict) -> None:
        w = st.id
        if not st.persistent or st.persis_waiting:
            raise ProtocolViolation(f"PERSIS_UPDATE from worker {w} in state {st.status.value}")
        if self._stopping:
            return  # stop already queued for this worker
        batch = decode_batch(p.get("H"))
        cancel = [int(i) for i in p.get("cancel", ())]
        bad = [i for i in cancel if not 0 <= i < len(self.hist)]
        if bad:
            raise ProtocolViolation(f"worker {w} asked to cancel unknown sim_ids {bad}")
        if cancel:
            newly = self.hist.request_cancel(cancel)
            logger.info("worker %d requested cancellation of %d rows", w, len(newly))
        st.new_ids = []
        if batch is not None and len(batch):
            st.new_ids = list(self._append(batch, w))
        elif cancel:
            self._trace("batch")
        st.persis_waiting = True

    def _append(self, batch, w: int) -> range:
        new = self.hist.append(batch, gen_worker=w)
        self._grow()
        self._trace("batch")
        logger.debug("worker %d generated sim_ids %d..%d", w, new.start, new.stop - 1)
        k = self.cfg.save_every_k_gens
        if k and len(self.hist) // k > self._ckpt_gens:
            self._ckpt_gens = len(self.hist) // k
            self._save(self.ensemble_dir / f"H_genckpt_{self._ckpt_gens * k}.ensh")
        return new

    def _release(self, st: WorkerState) -> None:
        if self.resources is not None:
            release(st.id, self.resources)
        st.resource_sets = []

    # ------------------------------------------------------------ allocation

    def alloc_view(self) -> AllocView:
        return AllocView(
            H=self.hist.H,
            workers={w: st.copy() for w, st in self.workers.items()},
            sim_specs=self.sim_specs,
            gen_specs=self.gen_specs,
            resources=self.resources.copy() if self.resources is not None else None,
            persis_info={w: dict(v) for w, v in self.persis_info.items()},
            user=dict(self.alloc_specs.user),
            exit_criteria=self.ec,
            informed=_readonly(self.informed),
            gen_calls=self.gen_calls,
            preloaded_fields=self.preloaded_fields,
        )

    def allocate(self) -> dict[int, WorkUnit]:
        units = self.alloc_fn(self.alloc_view())
        self._validate(units)
        return units

    def _validate(self, units: dict[int, WorkUnit]) -> None:
        seen: set[int] = set()
        H = self.hist.H
        sets_seen: set[int] = set()
        for w, u in units.items():
            if u.dest != w or w not in self.workers:
                raise ManagerFault(f"work unit keyed {w} addressed to {u.dest}")
            st = self.workers[w]
            if u.reply:
                if not (st.persistent and st.persis_waiting):
                    raise ManagerFault(f"reply for worker {w} which is not waiting")
            elif st.status != WorkerStatus.IDLE:
                raise ManagerFault(f"work for non-idle worker {w} ({st.status.value})")
            for name in u.fields_to_send:
                if name not in self.hist.schema:
                    raise ManagerFault(f"work unit names unknown field {name!r}")
            if u.kind == Tag.EVAL_SIM:
                for i in u.sim_ids:
                    if i in seen or H["given"][i] or H["cancel_requested"][i]:
                        raise ManagerFault(f"sim_id {i} is not dispatchable")
                    seen.add(i)
            if u.resource_sets:
                if self.resources is None:
                    raise ManagerFault("work unit names resource sets but none are configured")
                if sets_seen & set(u.resource_sets) or any(self.resources.owner.get(s, -1) is not None for s in u.resource_sets):
                    raise ManagerFault(f"resource sets {u.resource_sets} are not free")
                sets_seen |= set(u.resource_sets)

    def _rows_payload(self, ids, fields):
        names = list(dict.fromkeys(["sim_id", *fields]))
        return encode_batch(self.hist.rows(ids, names))

    def dispatch(self, u: WorkUnit) -> None:
        st = self.workers[u.dest]
        try:
            if u.reply:
                payload = {
                    "H": self._rows_payload(u.sim_ids, u.fields_to_send),
                    "sim_ids": u.sim_ids,
                    "new_sim_ids": st.new_ids,
                }
                self.comm.send(Message(Tag.PERSIS_UPDATE, 0, u.dest, payload))
                self.informed[u.sim_ids] = True
                st.persis_waiting, st.new_ids = False, []
                return
            res = None
            if self.resources is not None and not st.zero_resource:
                res = self.resources.take(u.dest, u.resource_sets)
            elif u.resource_sets:
                raise ManagerFault(f"zero-resource worker {u.dest} given resource sets")
            calc_type = "sim" if u.kind == Tag.EVAL_SIM else "gen"
            payload = {
                "calc_type": calc_type,
                "sim_ids": u.sim_ids,
                "H": self._rows_payload(u.sim_ids, u.fields_to_send) if (u.sim_ids or u.fields_to_send) else None,
                "persis_info": self.persis_info[u.dest],
                "resources": res.to_json() if res is not None else None,
                "persistent": u.persistent,
                "libE_info": {
                    "nworkers": self.cfg.nworkers,
                    "sim_workers": sum(not s.zero_resource for s in self.workers.values()),
                    "ensemble_dir": str(self.ensemble_dir.resolve()),
                },
            }
            self.dispatches += 1
            if u.kind == Tag.EVAL_SIM:
                self.hist.mark_given(u.sim_ids, u.dest, self._now())
                st.status = WorkerStatus.BUSY_SIM
            else:
                self.gen_calls += 1
                st.status = WorkerStatus.PERSISTENT_GEN if u.persistent else WorkerStatus.BUSY_GEN
                st.persis_waiting = False
            st.sim_ids = list(u.sim_ids) if u.kind == Tag.EVAL_SIM else []
            st.resource_sets = list(u.resource_sets)
            self.comm.send(Message(u.kind, 0, u.dest, payload))
        except PeerClosed:
            self._worker_lost(u.dest)

    # ------------------------------------------------------------ cancellation

    def handle_cancellation(self) -> int:
        """Send MAN_KILL for cancelled rows that are running. Returns rows killed."""
        H = self.hist.H
        idx = np.flatnonzero(H["cancel_requested"] & H["given"] & ~H["returned"] & ~H["kill_sent"])
        by_worker: dict[int, list[int]] = defaultdict(list)
        for i in idx.tolist():
            by_worker[int(H["sim_worker"][i])].append(i)
        for w, ids in sorted(by_worker.items()):
            for i in ids:
                self.hist.mark_kill_sent(i)
            self.kills_sent += len(ids)
            try:
                self.comm.send(Message(Tag.MAN_KILL, 0, w, {"sim_ids": ids}))
                logger.info("kill sent to worker %d for sim_ids %s", w, ids)
            except PeerClosed:
                self._worker_lost(w)
        return len(idx)

    # ------------------------------------------------------------ errors

    def handle_worker_error(self, w: int, report: dict) -> None:
        self.errors.append({"worker": w, **{k: report.get(k) for k in ("sim_ids", "error")}})
        logger.log(MANAGER_WARNING, "worker %d error on sim_ids %s:\n%s", w, report.get("sim_ids"), report.get("error"))
        if not self.cfg.continue_on_worker_error:
            self._abort = True

    def _save(self, path: Path) -> bool:
        try:
            self.hist.save(path)
            return True
        except IoFailure as exc:
            logger.error("%s", exc)
            return False

    def dump_abort(self) -> Path | None:
        """Write ``H_at_abort.ensh`` once."""
        if self._dumped is None:
            path = self.ensemble_dir / "H_at_abort.ensh"
            self.ensemble_dir.mkdir(parents=True, exist_ok=True)
            if self._save(path):
                self._dumped = path
                logger.log(MANAGER_WARNING, "history dumped to %s", path)
        return self._dumped

    def checkpoint(self) -> Path | None:
        k = self.cfg.save_every_k_sims
        if not k:
            return None
        n = self.hist.count("returned") // k
        if n <= self._ckpt_sims:
            return None
        self._ckpt_sims = n
        path = self.ensemble_dir / f"H_ckpt_{n * k}.ensh"
        return path if self._save(path) else None

    # ------------------------------------------------------------ shutdown

    def _shutdown(self) -> None:
        self._stopping = True
        for w, st in sorted(self.workers.items()):
            try:
                if st.status == WorkerStatus.BUSY_SIM:
                    self.comm.send(Message(Tag.MAN_KILL, 0, w, {"sim_ids": st.sim_ids}))
                elif st.persistent:
                    self.comm.send(Message(Tag.PERSIS_STOP, 0, w, {}))
            except PeerClosed:
                self._worker_lost(w)
        deadline = time.monotonic() + self.cfg.shutdown_timeout
        while any(st.status not in (WorkerStatus.IDLE, WorkerStatus.DEAD) for st in self.workers.values()):
            left = deadline - time.monotonic()
            if left <= 0:
                logger.log(MANAGER_WARNING, "workers still busy at shutdown: %s", self._owed())
                break
            try:
                msg = self.comm.recv(min(left, 1.0))
            except Timeout:
                continue
            except PeerClosed as exc:
                if exc.peer is None:
                    break
                self._worker_lost(exc.peer)
                continue
            self._ingest_safe(msg)
        for w, st in sorted(self.workers.items()):
            if st.status != WorkerStatus.DEAD:
                try:
                    self.comm.send(Message(Tag.STOP_TAG, 0, w, {}))
                except PeerClosed:
                    pass


def _preload_fields(preload) -> list[FieldSpec]:
    if preload is None:
        return []
    if isinstance(preload, np.ndarray):
        return field_specs_of(preload)
    out = []
    for name, col in preload.items():
        col = np.asarray(col)
        out.extend(field_specs_of(np.zeros(1, dtype=[(name, col.dtype, col.shape[1:])])))
    return out


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


def worker_setup(sim_specs, gen_specs, cfg: EnsembleConfig) -> WorkerSetup:
    return WorkerSetup(
        sim_specs=sim_specs,
        gen_specs=gen_specs,
        policy=cfg.workdir,
        ensemble_dir=str(Path(cfg.ensemble_dir).resolve()),
        origin_dir=str(Path(cfg.origin_dir).resolve()),
        apps=cfg.apps,
        executor_opts=cfg.executor,
        chdir=cfg.comms != "inproc",
    )


def run_ensemble(
    sim_specs: SimSpecs,
    gen_specs: SimSpecs | None,
    exit_criteria: ExitCriteria,
    alloc_specs: AllocSpecs | None = None,
    config: EnsembleConfig | None = None,
    persis_info=None,
    H0: HistoryStore | None = None,
    preload=None,
    transport: Transport | None = None,
    manager_hook=None,
):
    """Start workers (unless ``transport`` is given), run the manager, tear down.

    Returns ``(history, persis_info, flag)`` with flag one of ``criteria_met``,
    ``timeout`` or ``aborted``. ``manager_hook(manager)`` is called before the
    run starts, which lets callers keep a handle on run statistics.
    """
    cfg = config or EnsembleConfig()
    mgr = Manager(sim_specs, gen_specs, exit_criteria, alloc_specs, cfg, None, persis_info, H0, preload)
    own = transport is None
    if own:
        transport = start_transport(cfg.comms, cfg.nworkers, cfg.comms_config, target=worker_loop, args=(worker_setup(sim_specs, gen_specs, cfg),))
    mgr.comm = transport.manager
    if manager_hook is not None:
        manager_hook(mgr)
    try:
        return mgr.run()
    finally:
        if own:
            transport.shutdown(timeout=cfg.shutdown_timeout)


__all__ = [
    "FLAGS",
    "CalcRecord",
    "EnsembleConfig",
    "Manager",
    "ManagerFault",
    "ProtocolViolation",
    "UnknownWorker",
    "WorkerState",
    "WorkerStatus",
    "initial_persis_info",
    "run_ensemble",
    "stats_line",
    "worker_setup",
]

