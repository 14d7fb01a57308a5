"""Binary serialization for models: magic 'SKSM', version, segment table.

The same primitive readers/writers back the full cluster checkpoints, which
extend this container with per-node sections.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError
from .model import Model, ModelSpec

MAGIC = b"SKSM"
VERSION = 1


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("unexpected EOF")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def array(self) -> np.ndarray:
        code = self.string()
        ndim = self.u32()
        shape = tuple(self.u32() for _ in range(ndim))
        dtype = np.dtype(code)  # little-endian codes like '<f4'
        raw = self.take(int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def done(self) -> bool:
        return self.pos == len(self.data)


class Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int):
        self.parts.append(struct.pack("<Q", v))

    def f64(self, v: float):
        self.parts.append(struct.pack("<d", v))

    def string(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def array(self, arr: np.ndarray):
        le = arr.dtype.newbyteorder("<")
        self.string(le.str)
        self.u32(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self.parts.append(np.ascontiguousarray(arr, dtype=le).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


def _segment_table(model: Model) -> list[tuple[str, tuple[int, ...]]]:
    table = [(seg.key, seg.shape) for seg in model.params.segments]
    table += [(key, arr.shape) for key, arr in model.state_arrays()]
    return table


def save_model(model: Model, path: str) -> None:
    """Writes parameters and norm-layer running statistics as 32-bit floats."""
    w = Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    w.string(model.spec.to_json())
    table = _segment_table(model)
    w.u32(len(table))
    for key, shape in table:
        w.string(key)
        w.u32(len(shape))
        for d in shape:
            w.u32(d)
    for seg in model.params.segments:
        w.raw(model.params.view(seg.key).astype("<f4").tobytes())
    for _, arr in model.state_arrays():
        w.raw(arr.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def load_model(path: str) -> Model:
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not a model checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    spec = ModelSpec.from_json(r.string())
    table = []
    for _ in range(r.u32()):
        key = r.string()
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        table.append((key, shape))
    model = Model(spec, np.float32, init_seed=None)
    expected = _segment_table(model)
    if table != expected:
        raise FormatError("segment table does not match the declared architecture")
    for seg in model.params.segments:
        raw = r.take(seg.size * 4)
        model.params.view(seg.key)[...] = np.frombuffer(raw, dtype="<f4").reshape(seg.shape)
    for key, arr in model.state_arrays():
        raw = r.take(arr.size * 4)
        arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
    if not r.done():
        raise FormatError("trailing bytes after checkpoint payload")
    return model
