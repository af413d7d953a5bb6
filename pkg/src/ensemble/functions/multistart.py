"""Asynchronous multistart optimization.

The generator samples the box, then starts Nelder–Mead runs from sample points
that have no better evaluated point nearby. Each run is a Python generator that
yields the points it needs evaluated and is resumed with their values, so runs
advance independently as their own evaluations come back.
"""

from __future__ import annotations

import math

import numpy as np

from ..core import STOP_TAGS, CalcStatus
from ..history import out_dtype
from ..registry import register
from ..worker import persis_send_recv, rng_from, store_rng

REFLECT, EXPAND, CONTRACT, SHRINK = 1.0, 2.0, 0.5, 0.5


def six_hump_camel(x) -> float:
    x1, x2 = float(x[0]), float(x[1])
    return (4 - 2.1 * x1**2 + x1**4 / 3) * x1**2 + x1 * x2 + (-4 + 4 * x2**2) * x2**2


@register("sim_six_hump_camel")
def sim_six_hump_camel(H, persis_info, sim_specs, libE_info):
    out = np.zeros(len(H), dtype=out_dtype(sim_specs.out_fields))
    out["f"] = [six_hump_camel(x) for x in H["x"]]
    return out, persis_info


def nelder_mead(x0, f0, lb, ub, step, xtol=1e-6, max_iter=500):
    """Bound-clipped Nelder–Mead as a coroutine.

    Yields lists of points; must be sent the list of their values. Returns
    ``(x_best, f_best)`` via ``StopIteration.value``.
    """
    lb, ub = np.asarray(lb, float), np.asarray(ub, float)
    x0 = np.clip(np.asarray(x0, float), lb, ub)
    n = len(x0)
    clip = lambda p: np.clip(p, lb, ub)  # noqa: E731
    verts = [x0]
    for i in range(n):
        e = np.zeros(n)
        e[i] = step[i] if np.ndim(step) else step
        v = clip(x0 + e)
        if np.allclose(v, x0):
            v = clip(x0 - e)
        verts.append(v)
    vals = [float(f0)] + list((yield verts[1:]))
    for _ in range(max_iter):
        order = np.argsort(vals, kind="stable")
        verts = [verts[i] for i in order]
        vals = [vals[i] for i in order]
        if max(np.linalg.norm(v - verts[0]) for v in verts[1:]) < xtol:
            break
        c = np.mean(verts[:-1], axis=0)
        xr = clip(c + REFLECT * (c - verts[-1]))
        (fr,) = yield [xr]
        if fr < vals[0]:
            xe = clip(c + EXPAND * (xr - c))
            (fe,) = yield [xe]
            verts[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if fr < vals[-2]:
            verts[-1], vals[-1] = xr, fr
            continue
        if fr < vals[-1]:
            xc = clip(c + CONTRACT * (xr - c))
            (fc,) = yield [xc]
            accept = fc <= fr
        else:
            xc = clip(c + CONTRACT * (verts[-1] - c))
            (fc,) = yield [xc]
            accept = fc < vals[-1]
        if accept:
            verts[-1], vals[-1] = xc, fc
            continue
        verts = [verts[0]] + [verts[0] + SHRINK * (v - verts[0]) for v in verts[1:]]
        vals = [vals[0]] + list((yield verts[1:]))
    best = int(np.argmin(vals))
    return verts[best], vals[best]


def neighborhood_radius(n_evaluated: int, dim: int, r0: float) -> float:
    """Shrinking ball radius ``r0 * (log N / N) ** (1/dim)``, N floored at 2."""
    N = max(int(n_evaluated), 2)
    return r0 * (math.log(N) / N) ** (1.0 / dim)


class _Run:
    def __init__(self, rid, seed_id, coro):
        self.id = rid
        self.seed_id = seed_id
        self.coro = coro
        self.request: list[np.ndarray] = []
        self.ids: list[int | None] = []
        self.values: dict[int, float] = {}
        self.result = None
        self.evaluations = 0

    def start(self):
        self._set(next(self.coro))

    def _set(self, points):
        self.request = [np.asarray(p, float) for p in points]
        self.ids = [None] * len(self.request)
        self.values = {}

    @property
    def ready(self) -> bool:
        return bool(self.request) and all(i is not None and i in self.values for i in self.ids)

    def advance(self) -> bool:
        """Feed the completed request back; True when the run has finished."""
        vals = [self.values[i] for i in self.ids]
        self.evaluations += len(vals)
        try:
            self._set(self.coro.send(vals))
            return False
        except StopIteration as stop:
            self.result = stop.value
            self.request = []
            return True


@register("gen_multistart_opt")
def gen_multistart_opt(H, persis_info, gen_specs, libE_info):
    """Persistent multistart generator.

    Config (``gen_specs.user``): ``lb``, ``ub``, ``sample_size``,
    ``max_active_runs`` (default 2), ``r0`` (default: box diameter),
    ``xtol`` (1e-6), ``max_iter`` (500), ``init_step`` (fraction of the box, 0.05).
    Emitted rows carry ``priority`` 1 for run points, 0 for samples.
    """
    u = gen_specs.user
    comm = libE_info["comm"]
    rng = rng_from(persis_info)
    lb = np.atleast_1d(np.asarray(u["lb"], float))
    ub = np.atleast_1d(np.asarray(u["ub"], float))
    dim = len(lb)
    r0 = float(u.get("r0") or np.linalg.norm(ub - lb))
    max_active = int(u.get("max_active_runs", 2))
    xtol = float(u.get("xtol", 1e-6))
    max_iter = int(u.get("max_iter", 500))
    step = float(u.get("init_step", 0.05)) * (ub - lb)
    target = max(int(libE_info.get("sim_workers") or 1), 1)
    dtype = out_dtype(gen_specs.out_fields)

    X: dict[int, np.ndarray] = {}
    F: dict[int, float] = {}
    owner: dict[int, int | None] = {}
    sample_ids: set[int] = set()
    initial_ids: list[int] = []
    runs: dict[int, _Run] = {}
    started: set[int] = set()
    seed_log: list[dict] = []
    minima: list[dict] = []
    outstanding = 0
    n_sample_initial = int(u["sample_size"])

    def batch_of(entries):
        out = np.zeros(len(entries), dtype=dtype)
        for k, (x, prio, _) in enumerate(entries):
            out["x"][k] = x
            out["priority"][k] = prio
        return out

    def samples(k):
        pts = rng.uniform(lb, ub, (k, dim))
        return [(p, 0.0, None) for p in pts]

    entries = samples(n_sample_initial)
    while True:
        tag, calc_in = persis_send_recv(comm, batch_of(entries))
        if tag in STOP_TAGS:
            break
        if not initial_ids:
            initial_ids = list(comm.new_sim_ids)
        for sid, (x, _, rid) in zip(comm.new_sim_ids, entries):
            X[sid], owner[sid] = x, rid
            if rid is None:
                sample_ids.add(sid)
            else:
                run = runs[rid]
                run.ids[run.ids.index(None)] = sid
        outstanding += len(entries)
        for row in calc_in if calc_in is not None else ():
            sid, f = int(row["sim_id"]), float(row["f"])
            F[sid] = f
            outstanding -= 1
            rid = owner.get(sid)
            if rid is not None and rid in runs:
                runs[rid].values[sid] = f

        entries = []
        for rid in sorted(runs):
            run = runs[rid]
            if run.ready and run.advance():
                x_best, f_best = run.result
                minima.append({"x": [float(v) for v in x_best], "f": float(f_best), "seed": run.seed_id, "evaluations": run.evaluations})
                del runs[rid]

        sample_done = bool(initial_ids) and all(s in F for s in initial_ids)
        if sample_done:
            ids = np.fromiter(F.keys(), dtype=np.int64)
            pts = np.array([X[i] for i in ids])
            vals = np.array([F[i] for i in ids])
            r = neighborhood_radius(len(ids), dim, r0)
            for sid in sorted((s for s in sample_ids if s in F and s not in started), key=lambda s: (F[s], s)):
                if len(runs) >= max_active:
                    break
                near = np.linalg.norm(pts - X[sid], axis=1) <= r
                if np.any(near & (vals < F[sid])):
                    continue
                started.add(sid)
                rid = len(started) - 1
                run = _Run(rid, sid, nelder_mead(X[sid], F[sid], lb, ub, step, xtol, max_iter))
                run.start()
                runs[rid] = run
                seed_log.append({"sim_id": sid, "r": r, "known_ids": sorted(int(i) for i in ids), "active": len(runs)})

        for rid in sorted(runs):
            run = runs[rid]
            if run.request and all(i is None for i in run.ids) and not run.values:
                entries += [(p, 1.0, rid) for p in run.request]
        spare = target - outstanding - len(entries)
        if sample_done and spare > 0:
            entries += samples(spare)

    persis_info["seed_log"] = seed_log
    persis_info["local_minima"] = minima
    persis_info["active_runs_at_stop"] = len(runs)
    return None, store_rng(persis_info, rng), CalcStatus.PERSIS_FINISHED
