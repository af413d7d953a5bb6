"""Name -> function registry so specs can reference user functions across
process boundaries. ``"package.module:attr"`` strings resolve by import."""

from __future__ import annotations

import importlib
from typing import Callable

_REGISTRY: dict[str, Callable] = {}


def register(name: str | None = None, *, replace: bool = False):
    def deco(func):
        key = name or func.__name__
        if key in _REGISTRY and _REGISTRY[key] is not func and not replace:
            raise KeyError(f"function name {key!r} already registered")
        _REGISTRY[key] = func
        return func

    return deco


def resolve(ref) -> Callable:
    if callable(ref):
        return ref
    if ref in _REGISTRY:
        return _REGISTRY[ref]
    if isinstance(ref, str) and ":" in ref:
        module, _, attr = ref.partition(":")
        obj = importlib.import_module(module)
        for part in attr.split("."):
            obj = getattr(obj, part)
        return obj
    # builtin functions register themselves on import
    importlib.import_module("ensemble.functions")
    importlib.import_module("ensemble.alloc")
    try:
        return _REGISTRY[ref]
    except KeyError:
        raise KeyError(f"no function registered as {ref!r}") from None


def name_of(ref) -> str:
    if isinstance(ref, str):
        return ref
    for key, func in _REGISTRY.items():
        if func is ref:
            return key
    return f"{ref.__module__}:{ref.__qualname__}"


def registered() -> list[str]:
    return sorted(_REGISTRY)
