"""Flat parameter vectors, their layer layout, and layer projections."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, LayoutError


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class LayerLayout:
    """Ordered partition of ``[0, total_params)`` into named layer segments."""

    segments: tuple[Segment, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        pos = 0
        seen = set()
        for seg in self.segments:
            if seg.name in seen:
                raise LayoutError(f"duplicate layer name {seg.name!r}")
            seen.add(seg.name)
            if seg.start != pos or seg.length < 0:
                raise LayoutError(f"segment {seg.name!r} is not contiguous at {pos}")
            pos = seg.stop

    @classmethod
    def from_sizes(cls, sizes: Iterable[tuple[str, int]]) -> "LayerLayout":
        segs, pos = [], 0
        for name, n in sizes:
            segs.append(Segment(name, pos, int(n)))
            pos += int(n)
        return cls(tuple(segs))

    @property
    def total_params(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def __getitem__(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise ConfigError(f"unknown layer {name!r}; layout has {self.names}")

    def __contains__(self, name) -> bool:
        return any(s.name == name for s in self.segments)

    def to_json(self) -> list:
        return [[s.name, s.start, s.length] for s in self.segments]

    @classmethod
    def from_json(cls, rows) -> "LayerLayout":
        return cls(tuple(Segment(str(n), int(a), int(b)) for n, a, b in rows))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Float64 parameter vector bound to a layout.

    Arithmetic between two vectors requires identical layouts.
    """

    values: np.ndarray
    layout: LayerLayout = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if v.shape[0] != self.layout.total_params:
            raise LayoutError(
                f"vector has {v.shape[0]} entries, layout expects {self.layout.total_params}"
            )
        if not np.all(np.isfinite(v)):
            bad = int(np.flatnonzero(~np.isfinite(v))[0])
            raise LayoutError(f"non-finite parameter at index {bad}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, layout: LayerLayout) -> "ParamVector":
        return cls(np.zeros(layout.total_params), layout)

    def _check(self, other: "ParamVector"):
        if not isinstance(other, ParamVector):
            raise TypeError(f"expected ParamVector, got {type(other).__name__}")
        if other.layout != self.layout:
            raise LayoutError("parameter vectors have different layouts")

    def like(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def __add__(self, other):
        self._check(other)
        return self.like(self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return self.like(self.values - other.values)

    def __mul__(self, a):
        return self.like(float(a) * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return self.like(-self.values)

    def __len__(self):
        return self.values.shape[0]

    def dot(self, other: "ParamVector") -> float:
        self._check(other)
        return float(np.dot(self.values, other.values))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def segment(self, name: str) -> np.ndarray:
        s = self.layout[name]
        return self.values[s.start : s.stop]

    def bit_equal(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and self.values.tobytes() == other.values.tobytes()


def interpolate(theta1: ParamVector, theta2: ParamVector, alpha: float) -> ParamVector:
    """(1-alpha)*theta1 + alpha*theta2, exact at alpha in {0, 1}."""
    theta1._check(theta2)
    if alpha == 0.0 or theta1.bit_equal(theta2):
        return theta1
    if alpha == 1.0:
        return theta2
    return theta1.like((1.0 - alpha) * theta1.values + alpha * theta2.values)


@dataclass(frozen=True)
class LayerMask:
    layer_set: frozenset
    layout: LayerLayout

    def __post_init__(self):
        names = frozenset(self.layer_set)
        unknown = sorted(names - set(self.layout.names))
        if unknown:
            raise ConfigError(f"unknown layer(s) {unknown}; layout has {self.layout.names}")
        object.__setattr__(self, "layer_set", names)

    @classmethod
    def all_layers(cls, layout: LayerLayout) -> "LayerMask":
        return cls(frozenset(layout.names), layout)

    def indicator(self) -> np.ndarray:
        m = np.zeros(self.layout.total_params, dtype=bool)
        for name in self.layer_set:
            s = self.layout[name]
            m[s.start : s.stop] = True
        return m


def mask_apply(mask: LayerMask, v: ParamVector) -> ParamVector:
    if mask.layout != v.layout:
        raise LayoutError("mask and vector layouts differ")
    return v.like(np.where(mask.indicator(), v.values, 0.0))
