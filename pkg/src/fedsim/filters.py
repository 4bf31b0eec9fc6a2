"""Filters applied to task data and task results in transit.

A filter chain is a list of :class:`FilterSpec`; :func:`apply_chain` runs the
ones whose direction matches, in order. Every filter is a pure function of
the model and its parameters.

Gaussian noise uses numpy's Philox4x64 counter-based generator. The stream
for parameter number ``i`` (in the model's insertion order) is keyed by
``SeedSequence([seed, salt, i])``, so noise for one parameter never depends
on the shapes of the others.
"""

from __future__ import annotations

import enum
import fnmatch
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from .model import DType, FLModel, global_l2_norm


class FilterError(Exception):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"filter #{index} failed: {cause}")
        self.index = index
        self.cause = cause


class FilterConfigError(ValueError):
    pass


class FilterKind(str, enum.Enum):
    CLIP = "clip"
    GAUSSIAN = "gaussian"
    EXCLUDE = "exclude"


class Direction(str, enum.Enum):
    TASK_DATA = "task_data"
    TASK_RESULT = "task_result"


@dataclass(frozen=True)
class FilterSpec:
    kind: FilterKind
    direction: Direction
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", FilterKind(self.kind))
            object.__setattr__(self, "direction", Direction(self.direction))
        except ValueError as exc:
            raise FilterConfigError(str(exc)) from None
        p = dict(self.params)
        if self.kind is FilterKind.CLIP:
            max_norm = p.get("max_norm")
            if not isinstance(max_norm, (int, float)) or not max_norm > 0:
                raise FilterConfigError("clip filter needs max_norm > 0")
        elif self.kind is FilterKind.GAUSSIAN:
            sigma = p.get("sigma")
            if not isinstance(sigma, (int, float)) or sigma < 0:
                raise FilterConfigError("gaussian filter needs sigma >= 0")
            if not isinstance(p.get("seed", 0), int):
                raise FilterConfigError("gaussian filter seed must be an integer")
        else:
            patterns = p.get("patterns")
            if isinstance(patterns, str) or not isinstance(patterns, (list, tuple)):
                raise FilterConfigError("exclude filter needs a list of glob patterns")
            if not all(isinstance(x, str) for x in patterns):
                raise FilterConfigError("exclude patterns must be strings")
        object.__setattr__(self, "params", p)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> FilterSpec:
        raw = dict(raw)
        try:
            kind = raw.pop("kind")
            direction = raw.pop("direction")
        except KeyError as exc:
            raise FilterConfigError(f"filter entry missing {exc.args[0]!r}") from None
        params = raw.pop("params", raw)
        return cls(kind, direction, params)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "direction": self.direction.value, "params": dict(self.params)}


def load_chain(entries: Iterable[Mapping[str, Any]] | None) -> list[FilterSpec]:
    return [FilterSpec.from_dict(e) for e in entries or ()]


def clip_filter(model: FLModel, max_norm: float) -> FLModel:
    """Scale all float parameters so their joint L2 norm is at most ``max_norm``."""
    norm = global_l2_norm(model.params)
    if not np.isfinite(norm):
        raise ValueError(f"cannot clip parameters with non-finite norm {norm}")
    if norm <= max_norm:
        return model
    scale = max_norm / norm
    while True:
        params = {}
        for name, array in model.params.items():
            if DType.of(array).is_float:
                params[name] = (np.asarray(array, dtype=np.float64) * scale).astype(array.dtype)
            else:
                params[name] = array
        # float32 rounding can land just above the bound; shrink slightly and retry
        if global_l2_norm(params) <= max_norm * (1 + 1e-9):
            return model.replace(params=params)
        scale *= 1 - 2.0**-20


def gaussian_noise_filter(model: FLModel, sigma: float, seed: int, salt: int = 0) -> FLModel:
    """Add i.i.d. N(0, sigma^2) noise to every float element."""
    if sigma == 0:
        return model
    params = {}
    for index, (name, array) in enumerate(model.params.items()):
        if DType.of(array).is_float:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, salt, index])))
            noise = rng.normal(0.0, sigma, size=array.shape)
            params[name] = (np.asarray(array, dtype=np.float64) + noise).astype(array.dtype)
        else:
            params[name] = array
    return model.replace(params=params)


def exclude_filter(model: FLModel, patterns: Iterable[str]) -> FLModel:
    patterns = list(patterns)
    kept = {
        name: array
        for name, array in model.params.items()
        if not any(fnmatch.fnmatchcase(name, pat) for pat in patterns)
    }
    return model.replace(params=kept)


def apply_filter(model: FLModel, spec: FilterSpec, salt: int = 0) -> FLModel:
    p = spec.params
    if spec.kind is FilterKind.CLIP:
        return clip_filter(model, float(p["max_norm"]))
    if spec.kind is FilterKind.GAUSSIAN:
        return gaussian_noise_filter(model, float(p["sigma"]), int(p.get("seed", 0)), salt)
    return exclude_filter(model, p["patterns"])


def apply_chain(
    model: FLModel, chain: Iterable[FilterSpec], direction: Direction | str, salt: int = 0
) -> FLModel:
    """Run the filters of ``chain`` matching ``direction`` in listed order.

    ``salt`` is mixed into noise seeds; callers pass the round number so each
    round draws fresh noise while staying reproducible.
    """
    direction = Direction(direction)
    for index, spec in enumerate(chain):
        if spec.direction is not direction:
            continue
        try:
            model = apply_filter(model, spec, salt)
        except Exception as exc:
            raise FilterError(index, exc) from exc
    return model
