"""Manager/worker runtime for dynamic ensembles of calculations."""

from .core import (
    AllocSpecs,
    CalcStatus,
    EnsembleError,
    ExitCriteria,
    FieldSpec,
    GenSpecs,
    RecordSchema,
    SimSpecs,
    Tag,
)
from .history import HistoryStore
from .manager import EnsembleConfig, Manager, run_ensemble
from .registry import register, resolve

__version__ = "0.1.0"

__all__ = [
    "AllocSpecs",
    "CalcStatus",
    "EnsembleConfig",
    "EnsembleError",
    "ExitCriteria",
    "FieldSpec",
    "GenSpecs",
    "HistoryStore",
    "Manager",
    "RecordSchema",
    "SimSpecs",
    "Tag",
    "register",
    "resolve",
    "run_ensemble",
]
