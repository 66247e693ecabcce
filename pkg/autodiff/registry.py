# autodiff/registry.py

from typing import Type

_OP_MAP: dict[str, Type] = {}


def register_op(name: str, cls: Type):
    existing = _OP_MAP.get(name)
    if existing is not None and existing.__qualname__ != cls.__qualname__:
        raise TypeError(f"Op {name!r} already registered by {existing.__name__}")

    _OP_MAP[name] = cls


def registered_ops() -> list[str]:
    return sorted(_OP_MAP)
