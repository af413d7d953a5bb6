"""Node inventory, resource sets, and their assignment to workers.

A resource set is a contiguous block of slots on one node. Sets are handed to
workers per unit of work and released when the work returns.
"""

from __future__ import annotations

import itertools
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .core import EnsembleError

logger = logging.getLogger(__name__)

NODELIST_ENV = "ENS_NODELIST"
NODE_FILE = "node_list"


class ResourceError(EnsembleError):
    pass


class MalformedNodeList(ResourceError):
    pass


class IndivisibleResources(ResourceError):
    pass


class InsufficientResources(ResourceError):
    pass


@dataclass(frozen=True)
class NodeInventory:
    nodes: tuple[tuple[str, int], ...]
    source: str = "config"

    def __post_init__(self):
        names = [n for n, _ in self.nodes]
        if len(set(names)) != len(names):
            raise MalformedNodeList(f"duplicate node names in {names}")
        for name, slots in self.nodes:
            if not name or int(slots) < 1:
                raise MalformedNodeList(f"node {name!r} must have >= 1 slot, got {slots}")

    @property
    def total_slots(self) -> int:
        return sum(s for _, s in self.nodes)

    def without_first_node(self) -> "NodeInventory":
        """Inventory minus the node hosting the manager and workers (central mode)."""
        if len(self.nodes) < 2:
            raise ResourceError("central mode needs at least two nodes")
        return NodeInventory(self.nodes[1:], self.source)


def _parse_pairs(entries, where: str) -> tuple[tuple[str, int], ...]:
    nodes = []
    for entry in entries:
        parts = entry.replace(":", " ").split()
        if len(parts) != 2:
            raise MalformedNodeList(f"{where}: cannot parse {entry!r}")
        name, slots = parts
        try:
            n = int(slots)
        except ValueError:
            raise MalformedNodeList(f"{where}: slot count {slots!r} is not an integer") from None
        if n < 1:
            raise MalformedNodeList(f"{where}: node {name!r} has {n} slots")
        nodes.append((name, n))
    if not nodes:
        raise MalformedNodeList(f"{where}: no nodes listed")
    return tuple(nodes)


def detect_inventory(config: dict | None = None, env=None, rundir=".") -> NodeInventory:
    """Find the available nodes.

    Precedence: ``config["nodes"]`` > ``$ENS_NODELIST`` (``name:slots,...``) >
    ``<rundir>/node_list`` (``name slots`` per line) > this host with one slot
    per logical CPU.
    """
    config = config or {}
    env = os.environ if env is None else env
    if config.get("nodes"):
        return NodeInventory(tuple((str(n), int(s)) for n, s in config["nodes"]), "config")
    if env.get(NODELIST_ENV):
        return NodeInventory(_parse_pairs(env[NODELIST_ENV].split(","), NODELIST_ENV), "env_var")
    path = Path(rundir) / NODE_FILE
    if path.exists():
        lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        return NodeInventory(_parse_pairs(lines, str(path)), "node_file")
    return NodeInventory((("localhost", os.cpu_count() or 1),), "probe_default")


@dataclass(frozen=True)
class ResourceSet:
    id: int
    node: str
    slots: tuple[int, ...]


def build_resource_sets(inv: NodeInventory, nsets: int) -> list[ResourceSet]:
    """Split the inventory into ``nsets`` equal, node-contained, contiguous sets."""
    if nsets < 1:
        raise IndivisibleResources("need at least one resource set")
    size, rem = divmod(inv.total_slots, nsets)
    if rem or size == 0 or any(slots % size for _, slots in inv.nodes):
        raise IndivisibleResources(
            f"{inv.total_slots} slots on {len(inv.nodes)} node(s) cannot form {nsets} equal node-contained sets"
        )
    sets = []
    for name, slots in inv.nodes:
        for start in range(0, slots, size):
            sets.append(ResourceSet(len(sets), name, tuple(range(start, start + size))))
    return sets


@dataclass(frozen=True)
class WorkerResources:
    worker_id: int
    sets: tuple[ResourceSet, ...] = ()

    @property
    def set_ids(self) -> list[int]:
        return [s.id for s in self.sets]

    @property
    def slots(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for s in self.sets:
            out.setdefault(s.node, []).extend(s.slots)
        return out

    @property
    def local_node_count(self) -> int:
        return len(self.slots)

    @property
    def slots_on_node(self) -> list[int]:
        """Slot indices on the first (usually only) node of the assignment."""
        slots = self.slots
        return sorted(next(iter(slots.values()))) if slots else []

    @property
    def slot_count(self) -> int:
        return len(self.slots_on_node)

    def to_json(self) -> dict:
        return {"worker_id": self.worker_id, "sets": [[s.id, s.node, list(s.slots)] for s in self.sets]}

    @classmethod
    def from_json(cls, obj: dict | None) -> "WorkerResources | None":
        if obj is None:
            return None
        return cls(obj["worker_id"], tuple(ResourceSet(i, n, tuple(sl)) for i, n, sl in obj["sets"]))


@dataclass
class ResourceTable:
    sets: list[ResourceSet]
    owner: dict[int, int | None] = field(default_factory=dict)

    def __post_init__(self):
        for s in self.sets:
            self.owner.setdefault(s.id, None)

    @classmethod
    def from_inventory(cls, inv: NodeInventory, nsets: int) -> "ResourceTable":
        return cls(build_resource_sets(inv, nsets))

    def copy(self) -> "ResourceTable":
        return ResourceTable(list(self.sets), dict(self.owner))

    def by_id(self, set_id: int) -> ResourceSet:
        return self.sets[set_id]

    def free_sets(self) -> list[ResourceSet]:
        return [s for s in self.sets if self.owner[s.id] is None]

    def held_by(self, worker_id: int) -> list[int]:
        return [i for i, w in self.owner.items() if w == worker_id]

    def node_order(self) -> list[str]:
        return list(dict.fromkeys(s.node for s in self.sets))

    def take(self, worker_id: int, set_ids) -> WorkerResources:
        """Give specific sets to a worker (validating that they are free)."""
        set_ids = list(set_ids)
        for i in set_ids:
            if self.owner.get(i, "missing") is not None:
                raise InsufficientResources(f"resource set {i} is not free")
        for i in set_ids:
            self.owner[i] = worker_id
        return WorkerResources(worker_id, tuple(self.sets[i] for i in sorted(set_ids)))


def assign(worker_id: int, nsets: int, table: ResourceTable) -> WorkerResources:
    """Pick ``nsets`` free sets for a worker and mark them taken.

    Preference: fewest nodes spanned; then least free capacity left over on
    the chosen nodes (the smallest partition that fits); ties go to the lowest
    node names, then the lowest set ids.
    """
    if nsets == 0:
        return WorkerResources(worker_id)
    free: dict[str, list[ResourceSet]] = {}
    for s in table.free_sets():
        free.setdefault(s.node, []).append(s)
    if sum(len(v) for v in free.values()) < nsets:
        raise InsufficientResources(f"worker {worker_id} needs {nsets} sets; only {sum(len(v) for v in free.values())} free")
    size = {n: sum(len(s.slots) for s in v) for n, v in free.items()}
    nodes = sorted(free)
    chosen = None
    for span in range(1, len(nodes) + 1):
        best = None
        for combo in itertools.combinations(nodes, span):
            if sum(len(free[n]) for n in combo) < nsets:
                continue
            picked = _pick(combo, free, nsets)
            used = sum(len(s.slots) for s in picked)
            key = (sum(size[n] for n in combo) - used, combo, tuple(s.id for s in picked))
            if best is None or key < best[0]:
                best = (key, picked)
        if best is not None:
            chosen = best[1]
            break
    return table.take(worker_id, [s.id for s in chosen])


def _pick(combo, free, nsets) -> list[ResourceSet]:
    # one set per node is mandatory (else the span would be smaller), rest by lowest id
    first = [free[n][0] for n in combo]
    rest = sorted((s for n in combo for s in free[n][1:]), key=lambda s: s.id)
    return sorted(first + rest[: nsets - len(first)], key=lambda s: s.id)


def release(worker_id: int, table: ResourceTable) -> list[int]:
    freed = table.held_by(worker_id)
    for i in freed:
        table.owner[i] = None
    return freed


def default_nsets(nworkers: int, zero_resource_workers=()) -> int:
    return max(nworkers - len(set(zero_resource_workers)), 1)
