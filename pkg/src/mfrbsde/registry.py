"""Named factories for user-defined model components referenced from configs.

A config entry ``{"kind": "custom", "name": "my_h", "params": {...}}`` is
resolved by calling the factory registered under ``"my_h"`` with ``params``.
"""

from __future__ import annotations

from collections.abc import Callable

from .exceptions import ValidationError

_KINDS = ("obstacle", "driver", "terminal", "coefficients")
_REGISTRY: dict[str, dict[str, Callable]] = {k: {} for k in _KINDS}


def register(kind: str, name: str, factory: Callable | None = None):
    """Register ``factory(params: dict)``; usable as a decorator when ``factory`` is omitted."""
    if kind not in _REGISTRY:
        raise ValidationError(f"unknown component kind {kind!r}; expected one of {_KINDS}")

    def add(func: Callable) -> Callable:
        _REGISTRY[kind][name] = func
        return func

    return add if factory is None else add(factory)


def unregister(kind: str, name: str) -> None:
    _REGISTRY[kind].pop(name, None)


def build(kind: str, name: str, params: dict):
    try:
        factory = _REGISTRY[kind][name]
    except KeyError:
        known = sorted(_REGISTRY.get(kind, {}))
        raise ValidationError(f"no custom {kind} registered as {name!r} (registered: {known})") from None
    return factory(dict(params))


def registered(kind: str) -> list[str]:
    return sorted(_REGISTRY[kind])
