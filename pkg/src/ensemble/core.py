"""Shared types for the ensemble runtime: field schema, tags, status codes,
specification records and exit criteria."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence, Union

import numpy as np


class EnsembleError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(EnsembleError):
    pass


class DuplicateField(SchemaError):
    def __init__(self, name):
        super().__init__(f"duplicate field {name!r}")
        self.name = name


class ReservedCollision(SchemaError):
    def __init__(self, name):
        super().__init__(f"field {name!r} collides with a reserved field")
        self.name = name


class UnknownField(SchemaError):
    def __init__(self, name):
        super().__init__(f"unknown field {name!r}")
        self.name = name


class KindMismatch(SchemaError):
    def __init__(self, name, detail=""):
        super().__init__(f"kind mismatch for field {name!r} {detail}".rstrip())
        self.name = name


class SchemaMismatch(SchemaError):
    pass


class IoFailure(EnsembleError):
    pass


class NotGiven(EnsembleError):
    def __init__(self, sim_id):
        super().__init__(f"sim_id {sim_id} was never given out")
        self.sim_id = sim_id


class AlreadyReturned(EnsembleError):
    def __init__(self, sim_id):
        super().__init__(f"sim_id {sim_id} has already returned")
        self.sim_id = sim_id


class Timeout(EnsembleError):
    """A blocking call ran out of time. Nothing was consumed."""


class Tag(enum.IntEnum):
    EVAL_SIM = 11
    EVAL_GEN = 12
    RESULT = 13
    PERSIS_UPDATE = 14
    STOP_TAG = 20
    PERSIS_STOP = 21
    MAN_KILL = 22


STOP_TAGS = (Tag.STOP_TAG, Tag.PERSIS_STOP)


class CalcStatus(enum.IntEnum):
    COMPLETED = 0
    FAILED = 1
    KILLED = 2
    PERSIS_FINISHED = 3


KINDS = ("float64", "int64", "boolean")

_KIND_ALIASES = {
    "float": "float64",
    "float64": "float64",
    "f8": "float64",
    "int": "int64",
    "int64": "int64",
    "i8": "int64",
    "bool": "boolean",
    "boolean": "boolean",
}

_NUMPY_TYPES = {"float64": np.float64, "int64": np.int64, "boolean": np.bool_}


def normalize_kind(kind) -> str:
    if isinstance(kind, type):
        kind = {float: "float64", int: "int64", bool: "boolean"}.get(kind, kind.__name__)
    try:
        return _KIND_ALIASES[str(kind)]
    except KeyError:
        raise SchemaError(f"unsupported field kind {kind!r}") from None


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str = "float64"
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise SchemaError("field name must be a nonempty string")
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        shape = tuple(int(s) for s in self.shape)
        if any(s < 1 for s in shape):
            raise SchemaError(f"field {self.name!r}: shape extents must be >= 1, got {shape}")
        object.__setattr__(self, "shape", shape)

    @property
    def np_type(self):
        return _NUMPY_TYPES[self.kind]

    def dtype_entry(self):
        if self.shape:
            return (self.name, self.np_type, self.shape)
        return (self.name, self.np_type)

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "shape": list(self.shape)}

    @classmethod
    def from_json(cls, obj: dict) -> "FieldSpec":
        return cls(obj["name"], obj["kind"], tuple(obj.get("shape", ())))

    @classmethod
    def coerce(cls, obj) -> "FieldSpec":
        """Accept a FieldSpec, a ``(name, kind[, shape])`` tuple or a JSON dict."""
        if isinstance(obj, FieldSpec):
            return obj
        if isinstance(obj, dict):
            return cls.from_json(obj)
        name, kind, *rest = obj
        shape = rest[0] if rest else ()
        if isinstance(shape, int):
            shape = (shape,)
        return cls(name, kind, tuple(shape))


RESERVED_FIELDS: tuple[FieldSpec, ...] = (
    FieldSpec("sim_id", "int64"),
    FieldSpec("gen_worker", "int64"),
    FieldSpec("sim_worker", "int64"),
    FieldSpec("given", "boolean"),
    FieldSpec("returned", "boolean"),
    FieldSpec("given_time", "float64"),
    FieldSpec("cancel_requested", "boolean"),
    FieldSpec("kill_sent", "boolean"),
    FieldSpec("failed", "boolean"),
)
RESERVED_NAMES = frozenset(f.name for f in RESERVED_FIELDS)


@dataclass(frozen=True)
class RecordSchema:
    user_fields: tuple[FieldSpec, ...] = ()

    def __post_init__(self):
        seen = set()
        for f in self.user_fields:
            if f.name in RESERVED_NAMES:
                raise ReservedCollision(f.name)
            if f.name in seen:
                raise DuplicateField(f.name)
            seen.add(f.name)

    @property
    def reserved_fields(self) -> tuple[FieldSpec, ...]:
        return RESERVED_FIELDS

    @property
    def fields(self) -> tuple[FieldSpec, ...]:
        return RESERVED_FIELDS + tuple(self.user_fields)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def user_names(self) -> list[str]:
        return [f.name for f in self.user_fields]

    def __contains__(self, name) -> bool:
        return name in self.names

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise UnknownField(name)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype([f.dtype_entry() for f in self.fields])

    def to_json(self) -> dict:
        return {"fields": [f.to_json() for f in self.fields]}

    @classmethod
    def from_fields(cls, fields: Sequence[FieldSpec]) -> "RecordSchema":
        fields = list(fields)
        head = tuple(fields[: len(RESERVED_FIELDS)])
        if head != RESERVED_FIELDS:
            raise SchemaMismatch("reserved fields missing or out of order")
        return cls(tuple(fields[len(RESERVED_FIELDS):]))


def schema_union(gen_out: Iterable = (), sim_out: Iterable = (), extra: Iterable = ()) -> RecordSchema:
    """Combine generator, simulator and extra output fields behind the reserved ones."""
    user = []
    seen = set()
    for spec in (*gen_out, *sim_out, *extra):
        f = FieldSpec.coerce(spec)
        if f.name in RESERVED_NAMES:
            raise ReservedCollision(f.name)
        if f.name in seen:
            raise DuplicateField(f.name)
        seen.add(f.name)
        user.append(f)
    return RecordSchema(tuple(user))


FunctionRef = Union[str, Callable[..., Any]]


def _fields(specs) -> tuple[FieldSpec, ...]:
    return tuple(FieldSpec.coerce(s) for s in specs)


@dataclass
class SimSpecs:
    function: FunctionRef
    in_fields: list[str] = field(default_factory=list)
    out_fields: tuple[FieldSpec, ...] = ()
    user: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out_fields = _fields(self.out_fields)
        self.in_fields = list(self.in_fields)
        for f in self.out_fields:
            if f.name in RESERVED_NAMES:
                raise ReservedCollision(f.name)


@dataclass
class GenSpecs(SimSpecs):
    pass


@dataclass
class AllocSpecs:
    function: FunctionRef = "give_sim_work_first"
    user: dict = field(default_factory=dict)


def check_in_fields(schema: RecordSchema, *specs: SimSpecs) -> None:
    for spec in specs:
        for name in spec.in_fields:
            if name not in schema:
                raise UnknownField(name)


@dataclass
class ExitCriteria:
    sim_max: int | None = None
    gen_max: int | None = None
    wallclock_max: float | None = None
    stop_field: tuple[str, float] | None = None

    def __post_init__(self):
        if self.stop_field is not None:
            self.stop_field = (str(self.stop_field[0]), float(self.stop_field[1]))
        if all(v is None for v in (self.sim_max, self.gen_max, self.wallclock_max, self.stop_field)):
            raise EnsembleError("at least one exit criterion must be set")


def exit_reason(h, ec: ExitCriteria, elapsed: float) -> str | None:
    """Return ``"timeout"`` or ``"criteria_met"`` when an exit criterion holds, else None."""
    if ec.wallclock_max is not None and elapsed >= ec.wallclock_max:
        return "timeout"
    if ec.sim_max is not None and h.count("returned") >= ec.sim_max:
        return "criteria_met"
    if ec.gen_max is not None and len(h) >= ec.gen_max:
        return "criteria_met"
    if ec.stop_field is not None:
        name, threshold = ec.stop_field
        rows = h.H[h.H["returned"]]
        if len(rows) and np.any(rows[name] >= threshold):
            return "criteria_met"
    return None


def exit_met(h, ec: ExitCriteria, elapsed: float) -> bool:
    return exit_reason(h, ec, elapsed) is not None
