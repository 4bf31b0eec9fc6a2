"""Model parameters, metrics and the ``FLM1`` binary container.

An :class:`FLModel` holds an ordered mapping of named numpy arrays plus
metrics, free-form string metadata and round bookkeeping. It is the unit
exchanged between the server and its clients.

Container layout (structural integers big-endian, tensor data little-endian)::

    magic "FLM1" | version u8 | current_round u32 | total_rounds u32
    | num_samples u64 | n_params u32 | n_metrics u32 | n_meta u32
    params:  name(u16 len + utf8) | dtype u8 | ndim u8 | dims u64*ndim
             | data_len u64 | data
    metrics: name(u16 len + utf8) | value f64 (big-endian IEEE-754)
    meta:    key(u16 len + utf8) | value(u16 len + utf8)
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"FLM1"
VERSION = 1
MAX_NAME_BYTES = 255
_U64_MAX = (1 << 64) - 1

_HEADER = struct.Struct(">4sBIIQIII")
HEADER_SIZE = _HEADER.size  # 33
_U16 = struct.Struct(">H")
_U64 = struct.Struct(">Q")
_F64 = struct.Struct(">d")
_PARAM_FIXED = struct.Struct(">BB")


class ModelError(Exception):
    """Base class for model container errors."""


class InvalidName(ModelError):
    pass


class ShapeOverflow(ModelError):
    pass


class BadMagic(ModelError):
    pass


class UnsupportedVersion(ModelError):
    pass


class TruncatedInput(ModelError):
    pass


class UnknownDtype(ModelError):
    pass


class LengthMismatch(ModelError):
    pass


class KeyMismatch(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class InvalidModel(ModelError):
    pass


class DType(enum.IntEnum):
    F32 = 0
    F64 = 1
    I64 = 2
    U8 = 3

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY_LE[self]

    @property
    def is_float(self) -> bool:
        return self in (DType.F32, DType.F64)

    @classmethod
    def of(cls, array: np.ndarray) -> DType:
        try:
            return _FROM_KIND[(array.dtype.kind, array.dtype.itemsize)]
        except KeyError:
            raise UnknownDtype(f"unsupported array dtype {array.dtype}") from None


_ITEMSIZE = {DType.F32: 4, DType.F64: 8, DType.I64: 8, DType.U8: 1}
_NUMPY_LE = {
    DType.F32: np.dtype("<f4"),
    DType.F64: np.dtype("<f8"),
    DType.I64: np.dtype("<i8"),
    DType.U8: np.dtype("u1"),
}
_FROM_KIND = {("f", 4): DType.F32, ("f", 8): DType.F64, ("i", 8): DType.I64, ("u", 1): DType.U8}


def _check_name(name: str) -> bytes:
    if not isinstance(name, str) or not name:
        raise InvalidName("names must be non-empty strings")
    raw = name.encode("utf-8")
    if len(raw) > MAX_NAME_BYTES:
        raise InvalidName(f"name {name[:32]!r}... exceeds {MAX_NAME_BYTES} UTF-8 bytes")
    return raw


def _readonly(array) -> np.ndarray:
    arr = np.asarray(array)
    DType.of(arr)
    if arr.flags.writeable:
        arr = arr.view()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FLModel:
    """Named parameter arrays plus metrics, metadata and round counters.

    Arrays are stored as read-only views; build a new model rather than
    mutating one. Equality is bit-exact on tensor data and metric values.
    """

    params: Mapping[str, np.ndarray] = field(default_factory=dict)
    metrics: Mapping[str, float] = field(default_factory=dict)
    meta: Mapping[str, str] = field(default_factory=dict)
    current_round: int = 0
    total_rounds: int = 0
    num_samples: int = 0

    def __post_init__(self):
        object.__setattr__(self, "params", {k: _readonly(v) for k, v in self.params.items()})
        object.__setattr__(self, "metrics", {k: float(v) for k, v in self.metrics.items()})
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in self.meta.items()})

    def validate(self) -> None:
        for name in self.params:
            _check_name(name)
        for name in self.metrics:
            _check_name(name)
        for key in self.meta:
            _check_name(key)
        if not 0 <= self.current_round <= 0xFFFFFFFF or not 0 <= self.total_rounds <= 0xFFFFFFFF:
            raise InvalidModel("round counters must fit in u32")
        # current_round == total_rounds marks a finished job's final model
        if self.total_rounds > 0 and self.current_round > self.total_rounds:
            raise InvalidModel(
                f"current_round {self.current_round} beyond total_rounds {self.total_rounds}"
            )
        if not 0 <= self.num_samples <= _U64_MAX:
            raise InvalidModel("num_samples must fit in u64")

    def replace(self, **changes) -> FLModel:
        values = dict(
            params=self.params,
            metrics=self.metrics,
            meta=self.meta,
            current_round=self.current_round,
            total_rounds=self.total_rounds,
            num_samples=self.num_samples,
        )
        values.update(changes)
        return FLModel(**values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FLModel):
            return NotImplemented
        if (self.current_round, self.total_rounds, self.num_samples) != (
            other.current_round,
            other.total_rounds,
            other.num_samples,
        ):
            return False
        if dict(self.meta) != dict(other.meta):
            return False
        if list(self.metrics) != list(other.metrics):
            return False
        for k, v in self.metrics.items():
            if _F64.pack(v) != _F64.pack(other.metrics[k]):
                return False
        if list(self.params) != list(other.params):
            return False
        return all(tensors_identical(v, other.params[k]) for k, v in self.params.items())

    __hash__ = None


def tensors_identical(a: np.ndarray, b: np.ndarray) -> bool:
    """Bit-exact comparison: same dtype code, shape and raw bytes (NaN-safe)."""
    if DType.of(a) != DType.of(b) or a.shape != b.shape:
        return False
    dt = DType.of(a).numpy
    return np.ascontiguousarray(a, dtype=dt).tobytes() == np.ascontiguousarray(b, dtype=dt).tobytes()


def element_count(shape: Iterable[int]) -> int:
    count = 1
    for extent in shape:
        if extent < 0:
            raise ShapeOverflow(f"negative extent {extent}")
        count *= extent
        if count > _U64_MAX:
            raise ShapeOverflow("element count exceeds u64")
    return count


def param_entry_size(name: str, dtype: DType, shape: Iterable[int]) -> int:
    shape = tuple(shape)
    nbytes = element_count(shape) * DType(dtype).itemsize
    if nbytes > _U64_MAX:
        raise ShapeOverflow("tensor byte length exceeds u64")
    return _U16.size + len(_check_name(name)) + _PARAM_FIXED.size + 8 * len(shape) + _U64.size + nbytes


def encoded_size(
    param_specs: Iterable[tuple[str, DType, Iterable[int]]],
    metric_names: Iterable[str] = (),
    meta: Mapping[str, str] | None = None,
) -> int:
    """Exact container length computed from metadata alone (nothing allocated)."""
    total = HEADER_SIZE
    for name, dtype, shape in param_specs:
        total += param_entry_size(name, dtype, shape)
    for name in metric_names:
        total += _U16.size + len(_check_name(name)) + _F64.size
    for key, value in (meta or {}).items():
        total += _U16.size + len(_check_name(key)) + _U16.size + len(value.encode("utf-8"))
    return total


def model_encoded_size(model: FLModel) -> int:
    return encoded_size(
        ((k, DType.of(v), v.shape) for k, v in model.params.items()), model.metrics, model.meta
    )


def _pack_str(raw: bytes) -> bytes:
    return _U16.pack(len(raw)) + raw


def encode_model(model: FLModel) -> bytes:
    """Serialize ``model`` into a deterministic ``FLM1`` container."""
    return b"".join(encode_model_parts(model))


def encode_model_parts(model: FLModel) -> list[bytes | memoryview]:
    """The ``FLM1`` encoding as a list of pieces; tensor data stays a view of the arrays.

    Joining the pieces gives :func:`encode_model`'s output. Streaming them
    avoids holding a second copy of a large model.
    """
    model.validate()
    parts = [
        _HEADER.pack(
            MAGIC,
            VERSION,
            model.current_round,
            model.total_rounds,
            model.num_samples,
            len(model.params),
            len(model.metrics),
            len(model.meta),
        )
    ]
    for name, array in model.params.items():
        dtype = DType.of(array)
        if array.ndim > 255:
            raise ShapeOverflow("more than 255 dimensions")
        data = np.ascontiguousarray(array, dtype=dtype.numpy)
        parts.append(_pack_str(_check_name(name)))
        parts.append(_PARAM_FIXED.pack(dtype, array.ndim))
        parts.append(struct.pack(f">{array.ndim}Q", *array.shape))
        parts.append(_U64.pack(data.nbytes))
        parts.append(data.data.cast("B") if data.nbytes else b"")
    for name, value in model.metrics.items():
        parts.append(_pack_str(_check_name(name)) + _F64.pack(value))
    for key, value in model.meta.items():
        raw = value.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise InvalidName(f"meta value for {key!r} exceeds 65535 bytes")
        parts.append(_pack_str(_check_name(key)) + _pack_str(raw))
    return parts


class _Cursor:
    def __init__(self, buf):
        self.buf = memoryview(buf).cast("B") if not isinstance(buf, memoryview) else buf.cast("B")
        self.pos = 0

    def take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self.buf):
            raise TruncatedInput(f"need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        view = self.buf[self.pos : end]
        self.pos = end
        return view

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def string(self) -> str:
        (n,) = self.unpack(_U16)
        raw = self.take(n)
        try:
            return str(raw, "utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidName(f"string at offset {self.pos - n} is not UTF-8") from exc


def decode_model(data) -> FLModel:
    """Parse an ``FLM1`` container. Tensor arrays are zero-copy views of ``data``."""
    cur = _Cursor(data)
    if len(cur.buf) < 4 or bytes(cur.buf[:4]) != MAGIC:
        raise BadMagic("not an FLM1 container")
    _, version, current_round, total_rounds, num_samples, n_params, n_metrics, n_meta = cur.unpack(
        _HEADER
    )
    if version != VERSION:
        raise UnsupportedVersion(f"FLM1 version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        name = cur.string()
        code, ndim = cur.unpack(_PARAM_FIXED)
        try:
            dtype = DType(code)
        except ValueError:
            raise UnknownDtype(f"dtype code {code} for {name!r}") from None
        shape = struct.unpack(f">{ndim}Q", cur.take(8 * ndim))
        count = element_count(shape)
        (data_len,) = cur.unpack(_U64)
        if data_len != count * dtype.itemsize:
            raise LengthMismatch(
                f"{name!r}: data_len {data_len} != {count} x {dtype.itemsize} bytes"
            )
        raw = cur.take(data_len)
        params[name] = np.frombuffer(raw, dtype=dtype.numpy).reshape(shape)
    metrics: dict[str, float] = {}
    for _ in range(n_metrics):
        name = cur.string()
        (metrics[name],) = cur.unpack(_F64)
    meta: dict[str, str] = {}
    for _ in range(n_meta):
        key = cur.string()
        meta[key] = cur.string()
    if cur.pos != len(cur.buf):
        raise LengthMismatch(f"{len(cur.buf) - cur.pos} trailing bytes after container")
    return FLModel(params, metrics, meta, current_round, total_rounds, num_samples)


def model_linear_update(global_model: FLModel, aggregate: Mapping[str, np.ndarray]) -> FLModel:
    """Replace global parameters with aggregated values and advance the round.

    Keys absent from ``aggregate`` keep their global value.
    """
    unknown = [k for k in aggregate if k not in global_model.params]
    if unknown:
        raise KeyMismatch(f"aggregate has keys not in the global model: {unknown}")
    params = dict(global_model.params)
    for name, value in aggregate.items():
        current = params[name]
        value = np.asarray(value)
        if value.shape != current.shape:
            raise ShapeMismatch(f"{name!r}: {value.shape} != {current.shape}")
        if DType.of(value) != DType.of(current):
            raise ShapeMismatch(f"{name!r}: dtype {value.dtype} != {current.dtype}")
        params[name] = value
    return global_model.replace(params=params, current_round=global_model.current_round + 1)


def global_l2_norm(params: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for array in params.values():
        if DType.of(array).is_float:
            a = np.asarray(array, dtype=np.float64)
            total += float(np.dot(a.ravel(), a.ravel()))
    return math.sqrt(total)
