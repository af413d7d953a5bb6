"""Append-only history of every unit of work, plus the JSON encoding shared by
the ``.ensh`` history file and the transport payloads."""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .core import (
    RESERVED_NAMES,
    AlreadyReturned,
    CalcStatus,
    FieldSpec,
    IoFailure,
    KindMismatch,
    NotGiven,
    RecordSchema,
    ReservedCollision,
    SchemaMismatch,
    UnknownField,
)

logger = logging.getLogger(__name__)

MAGIC = "ENSH1 "
_SEP = (",", ":")

_ACCEPTED_KINDS = {"float64": "fiu", "int64": "iu", "boolean": "b"}


def out_dtype(fields) -> np.dtype:
    """numpy dtype for a list of output field specs (``[("f", float)]`` style accepted)."""
    return np.dtype([FieldSpec.coerce(f).dtype_entry() for f in fields])


def field_specs_of(arr: np.ndarray) -> list[FieldSpec]:
    specs = []
    for name in arr.dtype.names or ():
        base = arr.dtype[name].base
        shape = arr.dtype[name].shape
        kind = {"f": "float64", "i": "int64", "u": "int64", "b": "boolean"}.get(base.kind)
        if kind is None:
            raise KindMismatch(name, f"(unsupported dtype {base})")
        specs.append(FieldSpec(name, kind, shape))
    return specs


def _columns(arr: np.ndarray, names) -> list[list]:
    return [arr[n].tolist() for n in names]


def encode_rows(arr: np.ndarray, names) -> list[list]:
    cols = _columns(arr, names)
    return [list(row) for row in zip(*cols)] if cols else [[] for _ in range(len(arr))]


def encode_batch(arr: np.ndarray | None) -> dict | None:
    """Self-describing JSON-ready form of a structured array."""
    if arr is None:
        return None
    specs = field_specs_of(arr)
    return {"fields": [f.to_json() for f in specs], "rows": encode_rows(arr, [f.name for f in specs])}


def _fill_rows(arr: np.ndarray, specs, rows) -> None:
    for i, row in enumerate(rows):
        if len(row) != len(specs):
            raise SchemaMismatch(f"row {i} has {len(row)} values, expected {len(specs)}")
        for f, value in zip(specs, row):
            arr[f.name][i] = value


def decode_batch(obj: dict | None) -> np.ndarray | None:
    if obj is None:
        return None
    specs = [FieldSpec.from_json(f) for f in obj["fields"]]
    arr = np.zeros(len(obj["rows"]), dtype=out_dtype(specs))
    _fill_rows(arr, specs, obj["rows"])
    return arr


def _as_columns(batch) -> tuple[dict, int]:
    if isinstance(batch, np.ndarray):
        if batch.dtype.names is None:
            raise KindMismatch("<batch>", "(expected a structured array)")
        return {n: batch[n] for n in batch.dtype.names}, len(batch)
    if isinstance(batch, Mapping):
        cols = {k: np.asarray(v) for k, v in batch.items()}
        lengths = {len(c) if c.ndim else 1 for c in cols.values()}
        if len(lengths) > 1:
            raise KindMismatch("<batch>", "(columns of unequal length)")
        return cols, (lengths.pop() if lengths else 0)
    raise TypeError(f"cannot interpret {type(batch).__name__} as a record batch")


class HistoryStore:
    """Typed, append-only table of all generated and evaluated work.

    Rows are identified by a dense ``sim_id`` (0..n-1). Rows are never deleted:
    cancellation is a flag. Only the manager mutates a store.
    """

    def __init__(self, schema: RecordSchema, capacity: int = 64):
        self.schema = schema
        self._data = np.zeros(max(int(capacity), 1), dtype=schema.dtype)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def __repr__(self) -> str:
        return f"<HistoryStore rows={self._n} fields={self.schema.user_names}>"

    @property
    def H(self) -> np.ndarray:
        """Read-only view of the populated rows."""
        view = self._data[: self._n].view()
        view.flags.writeable = False
        return view

    def copy(self) -> "HistoryStore":
        other = HistoryStore(self.schema, capacity=max(self._n, 1))
        other._data[: self._n] = self._data[: self._n]
        other._n = self._n
        return other

    def __eq__(self, other) -> bool:
        if not isinstance(other, HistoryStore):
            return NotImplemented
        return (
            self.schema == other.schema
            and self._n == other._n
            and self._data[: self._n].tobytes() == other._data[: other._n].tobytes()
        )

    def count(self, flag: str) -> int:
        return int(np.count_nonzero(self._data[flag][: self._n]))

    def _grow(self, needed: int) -> None:
        cap = len(self._data)
        if needed <= cap:
            return
        while cap < needed:
            cap *= 2
        data = np.zeros(cap, dtype=self._data.dtype)
        data[: self._n] = self._data[: self._n]
        self._data = data

    def _check(self, sim_id: int) -> int:
        sim_id = int(sim_id)
        if not 0 <= sim_id < self._n:
            raise IndexError(f"sim_id {sim_id} out of range (n={self._n})")
        return sim_id

    def append(self, batch, gen_worker: int = 0) -> range:
        """Append generator output. Returns the new sim_ids."""
        cols, b = _as_columns(batch)
        for name, col in cols.items():
            if name in RESERVED_NAMES:
                raise ReservedCollision(name)
            if name not in self.schema:
                raise UnknownField(name)
            spec = self.schema.field(name)
            if col.dtype.kind not in _ACCEPTED_KINDS[spec.kind]:
                raise KindMismatch(name, f"({col.dtype} into {spec.kind})")
            if col.shape[1:] != spec.shape:
                raise KindMismatch(name, f"(shape {col.shape[1:]} into {spec.shape})")
        start = self._n
        self._grow(start + b)
        new = self._data[start : start + b]
        new[:] = np.zeros(1, dtype=self._data.dtype)
        for name, col in cols.items():
            new[name] = col
        new["sim_id"] = np.arange(start, start + b)
        new["gen_worker"] = gen_worker
        self._n = start + b
        return range(start, start + b)

    def mark_given(self, sim_ids, worker: int, when: float) -> None:
        for sim_id in sim_ids:
            i = self._check(sim_id)
            if self._data["given"][i]:
                raise ValueError(f"sim_id {i} already given")
            self._data["given"][i] = True
            self._data["given_time"][i] = when
            self._data["sim_worker"][i] = worker

    def update(self, sim_id: int, outputs=None, status: CalcStatus = CalcStatus.COMPLETED) -> None:
        """Record the result of one evaluation."""
        i = self._check(sim_id)
        row = self._data[i : i + 1]
        if not row["given"][0]:
            raise NotGiven(i)
        if row["returned"][0]:
            raise AlreadyReturned(i)
        if outputs is not None:
            names = outputs.dtype.names if isinstance(outputs, (np.void, np.ndarray)) else outputs.keys()
            for name in names:
                if name in RESERVED_NAMES:
                    raise ReservedCollision(name)
                if name not in self.schema:
                    raise UnknownField(name)
                value = outputs[name]
                if isinstance(outputs, np.ndarray):
                    value = value[0] if len(outputs) == 1 else value
                row[name] = value
        row["returned"] = True
        row["failed"] = CalcStatus(status) == CalcStatus.FAILED

    def request_cancel(self, sim_ids) -> list[int]:
        """Flag rows for cancellation; returns the ids that were newly flagged."""
        newly = []
        for sim_id in sim_ids:
            i = self._check(sim_id)
            if not self._data["cancel_requested"][i]:
                self._data["cancel_requested"][i] = True
                newly.append(i)
        return newly

    def mark_kill_sent(self, sim_id: int) -> None:
        i = self._check(sim_id)
        if not self._data["cancel_requested"][i]:
            raise ValueError(f"sim_id {i}: kill without a cancel request")
        self._data["kill_sent"][i] = True

    def release_unreturned(self) -> list[int]:
        """Make in-flight rows eligible again. Used only when restarting from a saved history."""
        H = self._data[: self._n]
        idx = np.flatnonzero(H["given"] & ~H["returned"])
        H["given"][idx] = False
        H["given_time"][idx] = 0.0
        H["sim_worker"][idx] = 0
        H["kill_sent"][idx] = False
        return idx.tolist()

    def rows(self, sim_ids, fields) -> np.ndarray:
        """Copy of selected rows restricted to ``fields`` (in the given order)."""
        idx = np.asarray(list(sim_ids), dtype=np.int64)
        fields = list(fields)
        for name in fields:
            if name not in self.schema:
                raise UnknownField(name)
        dtype = np.dtype([self.schema.field(n).dtype_entry() for n in fields])
        out = np.zeros(len(idx), dtype=dtype)
        for n in fields:
            out[n] = self._data[n][idx]
        return out

    # ------------------------------------------------------------------ files

    def dumps(self) -> str:
        names = self.schema.names
        lines = [MAGIC + json.dumps(self.schema.to_json(), separators=_SEP)]
        for row in encode_rows(self._data[: self._n], names):
            lines.append(json.dumps(row, separators=_SEP))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            tmp.write_text(self.dumps(), encoding="utf-8")
            os.replace(tmp, path)
        except OSError as exc:
            raise IoFailure(f"cannot write history to {path}: {exc}") from exc

    @classmethod
    def loads(cls, text: str, expected: RecordSchema | None = None) -> "HistoryStore":
        if not text.startswith(MAGIC):
            raise SchemaMismatch("missing ENSH1 header")
        lines = text.split("\n")
        if lines[-1] != "":
            raise SchemaMismatch("file is truncated (last line incomplete)")
        lines.pop()
        try:
            header = json.loads(lines[0][len(MAGIC):])
            schema = RecordSchema.from_fields([FieldSpec.from_json(f) for f in header["fields"]])
        except (ValueError, KeyError, TypeError) as exc:
            raise SchemaMismatch(f"bad header: {exc}") from exc
        if expected is not None and expected != schema:
            raise SchemaMismatch("history schema differs from the expected schema")
        h = cls(schema, capacity=len(lines))
        try:
            rows = [json.loads(line) for line in lines[1:]]
            _fill_rows(h._data, schema.fields, rows)
        except (ValueError, TypeError) as exc:
            raise SchemaMismatch(f"corrupt data row: {exc}") from exc
        h._n = len(rows)
        H = h._data[: h._n]
        if not np.array_equal(H["sim_id"], np.arange(h._n)):
            raise SchemaMismatch("sim_ids are not dense")
        if np.any(H["returned"] & ~H["given"]) or np.any(H["kill_sent"] & ~H["cancel_requested"]):
            raise SchemaMismatch("flag implications violated")
        return h

    @classmethod
    def load(cls, path, expected: RecordSchema | None = None) -> "HistoryStore":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise IoFailure(f"cannot read history from {path}: {exc}") from exc
        return cls.loads(text, expected)
