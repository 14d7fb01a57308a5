"""Flat parameter vectors tiled by named segments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError


@dataclass(frozen=True)
class Segment:
    layer: str
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def key(self) -> str:
        return f"{self.layer}.{self.name}"


class ParamVector:
    """Every model parameter concatenated into one flat array.

    Synchronization code treats the model as this single vector; layers hold
    reshaped views into ``data``, so in-place edits of the flat array are
    immediately visible to the layers (and vice versa).
    """

    def __init__(self, segments: list[Segment], data: np.ndarray):
        if data.ndim != 1:
            raise ShapeError("parameter data must be one-dimensional")
        expected = 0
        for seg in segments:
            if seg.offset != expected:
                raise ShapeError(f"segment {seg.key} does not tile the vector")
            expected += seg.size
        if expected != data.size:
            raise ShapeError(
                f"segments cover {expected} values but data holds {data.size}"
            )
        self.segments = list(segments)
        self.data = data

    @classmethod
    def allocate(cls, layout: list[tuple[str, str, tuple[int, ...]]], dtype) -> "ParamVector":
        segments = []
        offset = 0
        for layer, name, shape in layout:
            seg = Segment(layer, name, tuple(shape), offset)
            segments.append(seg)
            offset += seg.size
        return cls(segments, np.zeros(offset, dtype=dtype))

    def __len__(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def view(self, key: str) -> np.ndarray:
        seg = self.segment(key)
        return self.data[seg.offset : seg.offset + seg.size].reshape(seg.shape)

    def segment(self, key: str) -> Segment:
        for seg in self.segments:
            if seg.key == key:
                return seg
        raise KeyError(key)

    def copy(self) -> "ParamVector":
        return ParamVector(self.segments, self.data.copy())

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.segments, np.zeros_like(self.data))

    def assert_finite(self) -> None:
        from ..errors import NonFiniteError

        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("parameter vector contains non-finite values")
