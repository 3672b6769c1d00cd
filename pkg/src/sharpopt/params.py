"""Flat parameter vectors with a named segment layout.

Model weights, perturbations and gradients all live in the same
D-dimensional space. A :class:`Layout` names the pieces (``W0``, ``b0``...)
and a :class:`ParamVector` carries one contiguous float64 array over it.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Iterable, Sequence

import numpy as np


class LayoutMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return prod(self.shape)


@dataclass(frozen=True)
class Layout:
    segments: tuple[Segment, ...]

    @classmethod
    def from_shapes(cls, shapes: Iterable[tuple[str, Sequence[int]]]) -> "Layout":
        segments = []
        offset = 0
        for name, shape in shapes:
            shape = tuple(int(s) for s in shape)
            if any(s < 0 for s in shape):
                raise ValueError(f"negative extent in segment {name!r}: {shape}")
            segments.append(Segment(name, shape, offset))
            offset += prod(shape)
        names = [s.name for s in segments]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate segment names in {names}")
        return cls(tuple(segments))

    @property
    def dim(self) -> int:
        if not self.segments:
            return 0
        last = self.segments[-1]
        return last.offset + last.size

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def __getitem__(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def zeros(self) -> "ParamVector":
        return ParamVector(self, np.zeros(self.dim))


class ParamVector:
    """An immutable float64 vector over a :class:`Layout`.

    Arithmetic (``+``, ``-``, scalar ``*`` and ``/``) is element-wise and
    only defined between vectors sharing a layout.
    """

    __slots__ = ("layout", "data", "_origin")

    def __init__(self, layout: Layout, data, _origin=None):
        arr = np.array(data, dtype=np.float64, copy=True).reshape(-1)
        if arr.size != layout.dim:
            raise LayoutMismatch(
                f"data has {arr.size} entries but layout dimension is {layout.dim}"
            )
        arr.flags.writeable = False
        self.layout = layout
        self.data = arr
        # (unperturbed vector, perturbation) when produced by perturbation.apply
        self._origin = _origin

    @classmethod
    def from_arrays(cls, layout: Layout, arrays: dict[str, np.ndarray]) -> "ParamVector":
        flat = np.empty(layout.dim)
        for seg in layout.segments:
            a = np.asarray(arrays[seg.name], dtype=np.float64)
            if a.shape != seg.shape:
                raise LayoutMismatch(
                    f"segment {seg.name!r} expects shape {seg.shape}, got {a.shape}"
                )
            flat[seg.offset:seg.offset + seg.size] = a.reshape(-1)
        return cls(layout, flat)

    def __getitem__(self, name: str) -> np.ndarray:
        seg = self.layout[name]
        return self.data[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return {seg.name: self[seg.name] for seg in self.layout.segments}

    @property
    def dim(self) -> int:
        return self.layout.dim

    def _check(self, other: "ParamVector") -> None:
        if not isinstance(other, ParamVector):
            raise TypeError(f"expected ParamVector, got {type(other).__name__}")
        if other.layout != self.layout:
            raise LayoutMismatch("parameter vectors have different layouts")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.layout, self.data + other.data)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.layout, self.data - other.data)

    def __mul__(self, c: float) -> "ParamVector":
        return ParamVector(self.layout, self.data * float(c))

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> "ParamVector":
        return ParamVector(self.layout, self.data / float(c))

    def __neg__(self) -> "ParamVector":
        return ParamVector(self.layout, -self.data)

    def dot(self, other: "ParamVector") -> float:
        self._check(other)
        return float(np.dot(self.data, other.data))

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def cosine(self, other: "ParamVector") -> float:
        self._check(other)
        return cosine(self.data, other.data)

    def equals(self, other: "ParamVector") -> bool:
        """Bit-exact equality of layout and stored values."""
        return other.layout == self.layout and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"ParamVector(dim={self.dim}, segments={self.layout.names})"


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    # scale first so near-cancelled vectors keep full precision
    return float(np.dot(u / nu, v / nv))


def flat_layout(dim: int, name: str = "w") -> Layout:
    return Layout.from_shapes([(name, (dim,))])
