"""Walking nested parameter dataclasses by dotted name."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from .numerics import Tensor, get_dtype, parameter


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            yield from named_tensors(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, _join(prefix, str(i)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def state_dict(obj, prefix: str = "") -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in named_tensors(obj, prefix)}


def load_state(obj, state: dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> list[str]:
    """Copy arrays into matching tensors; returns names missing from ``state``."""
    missing = []
    for name, t in named_tensors(obj, prefix):
        if name not in state:
            missing.append(name)
            continue
        arr = np.asarray(state[name])
        if arr.shape != t.shape:
            raise ValueError(f"tensor {name}: shape {arr.shape} does not match {t.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
    if strict and missing:
        raise KeyError(f"missing tensors: {', '.join(missing)}")
    return missing


def count(obj) -> int:
    return sum(t.data.size for _, t in named_tensors(obj))


def trunc_normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    vals = truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)
    return parameter(np.asarray(vals, dtype=get_dtype()))


def zeros(shape) -> Tensor:
    return parameter(np.zeros(shape, dtype=get_dtype()))


def ones(shape) -> Tensor:
    return parameter(np.ones(shape, dtype=get_dtype()))
