"""Weight tensors, safetensors checkpoint I/O, block partitioning and the
quantizable-weight policy."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

_DTYPES = {"F32": 4, "F16": 2, "BF16": 2}


class CheckpointError(ValueError):
    """Raised for a checkpoint file that cannot be decoded."""


class TensorMap(Mapping[str, np.ndarray]):
    """Named single-precision weight arrays with free-form string metadata.

    Iteration order is lexicographic by name regardless of insertion order.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None,
                 metadata: Mapping[str, str] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, arr in (tensors or {}).items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            self._tensors[str(name)] = arr
        self.metadata: dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {list(v.shape)}" for k, v in self.items())
        return f"TensorMap({shapes})"

    def replace(self, updates: Mapping[str, np.ndarray]) -> "TensorMap":
        merged = dict(self._tensors)
        merged.update(updates)
        return TensorMap(merged, self.metadata)

    def copy(self) -> "TensorMap":
        return TensorMap({k: v.copy() for k, v in self._tensors.items()}, self.metadata)

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self._tensors.values())

    def equals(self, other: "TensorMap") -> bool:
        """Bit-exact comparison of names, shapes and payloads."""
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self
        )


# ---------------------------------------------------------------------------
# safetensors container
# ---------------------------------------------------------------------------

def _widen(raw: bytes, dtype: str, shape: list[int]) -> np.ndarray:
    if dtype == "F32":
        arr = np.frombuffer(raw, dtype="<f4")
    elif dtype == "F16":
        arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    else:
        # bfloat16 is the upper half of a float32; widening is a shift.
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
        arr = bits.view(np.float32)
    return arr.astype(np.float32).reshape(shape)


def _read_header(fh, size: int) -> tuple[int, dict, list[tuple[str, str, list[int], int, int]]]:
    """Parse and validate the header; returns (data start, metadata, entries)."""
    if size < 8:
        raise CheckpointError("truncated buffer: file shorter than the 8-byte header length")
    (n,) = struct.unpack("<Q", fh.read(8))
    if 8 + n > size:
        raise CheckpointError(f"truncated buffer: header length {n} exceeds file size {size}")
    try:
        header = json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError("malformed header: top level is not an object")
    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict):
        raise CheckpointError("malformed header: __metadata__ is not an object")

    buffer_len = size - 8 - n
    entries = []
    for name, info in header.items():
        try:
            dtype = info["dtype"]
            shape = [int(d) for d in info["shape"]]
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"malformed header: bad entry for tensor {name!r}") from None
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype!r} for tensor {name!r}")
        if any(d < 0 for d in shape) or begin < 0 or end < begin:
            raise CheckpointError(f"malformed header: bad shape/offsets for tensor {name!r}")
        if end > buffer_len:
            raise CheckpointError(f"truncated buffer: tensor {name!r} ends at {end}, "
                                  f"buffer holds {buffer_len} bytes")
        if end - begin != int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype]:
            raise CheckpointError(f"malformed header: size mismatch for tensor {name!r}")
        entries.append((name, dtype, shape, begin, end))

    spans = sorted((b, e, name) for name, _, _, b, e in entries)
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise CheckpointError(f"overlapping offsets: {n0!r} and {n1!r}")
    return 8 + n, metadata, entries


def iter_checkpoint(path: str | Path) -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(name, float32 array)`` one tensor at a time, in sorted name order.

    The whole header is validated before the first tensor is produced; only
    one tensor's payload is resident at a time.
    """
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        start, _, entries = _read_header(fh, size)
        for name, dtype, shape, begin, end in sorted(entries):
            fh.seek(start + begin)
            yield name, _widen(fh.read(end - begin), dtype, shape)


def load_checkpoint(path: str | Path) -> TensorMap:
    """Read a safetensors file; F16 and BF16 payloads are widened exactly."""
    path = Path(path)
    data = path.read_bytes()
    start, metadata, entries = _read_header(io.BytesIO(data), len(data))
    buffer = memoryview(data)[start:]
    tensors = {name: _widen(bytes(buffer[b:e]), dtype, shape) for name, dtype, shape, b, e in entries}
    return TensorMap(tensors, metadata)


def save_checkpoint(tensors: TensorMap, path: str | Path) -> None:
    """Write F32 tensors as a safetensors file. Non-finite values are refused."""
    header: dict = {}
    if tensors.metadata:
        header["__metadata__"] = dict(tensors.metadata)
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite value in tensor {name!r}")
        raw = arr.astype("<f4").tobytes()
        header[name] = {"dtype": "F32", "shape": list(arr.shape),
                        "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

class Layout(str, Enum):
    PER_ROW = "per_row"
    FLAT = "flat"


@dataclass(frozen=True)
class BlockSpec:
    layout: Layout
    block_size: int = 64

    def __post_init__(self):
        if self.layout is Layout.FLAT and self.block_size < 1:
            raise ValueError("block_size must be positive")

    def check(self, shape: tuple[int, ...]) -> None:
        if self.layout is Layout.PER_ROW and len(shape) != 2:
            raise ValueError(f"PerRow blocks need a 2-D tensor, got shape {list(shape)}")

    def block_length(self, shape: tuple[int, ...]) -> int:
        self.check(shape)
        return shape[1] if self.layout is Layout.PER_ROW else self.block_size

    def num_blocks(self, shape: tuple[int, ...]) -> int:
        self.check(shape)
        if self.layout is Layout.PER_ROW:
            return shape[0]
        size = int(np.prod(shape, dtype=np.int64))
        return -(-size // self.block_size)


PER_ROW = BlockSpec(Layout.PER_ROW)


def partition_blocks(t: np.ndarray, spec: BlockSpec) -> list[tuple[int, int]]:
    """(offset, length) of every block in row-major flat order."""
    spec.check(t.shape)
    if spec.layout is Layout.PER_ROW:
        rows, cols = t.shape
        return [(r * cols, cols) for r in range(rows)]
    size = t.size
    k = spec.block_size
    return [(o, min(k, size - o)) for o in range(0, size, k)]


def to_blocks(t: np.ndarray, spec: BlockSpec) -> np.ndarray:
    """View ``t`` as a (num_blocks, block_length) matrix.

    A short final Flat block is zero-padded; padding never changes a block's
    absmax and callers drop it with :func:`from_blocks`.
    """
    spec.check(t.shape)
    if spec.layout is Layout.PER_ROW:
        return np.ascontiguousarray(t).reshape(t.shape[0], t.shape[1] if t.size else 0)
    flat = np.ascontiguousarray(t).reshape(-1)
    k = spec.block_size
    nb = -(-flat.size // k)
    if nb * k == flat.size:
        return flat.reshape(nb, k)
    padded = np.zeros(nb * k, dtype=flat.dtype)
    padded[:flat.size] = flat
    return padded.reshape(nb, k)


def from_blocks(blocks: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    size = int(np.prod(shape, dtype=np.int64))
    return np.ascontiguousarray(blocks.reshape(-1)[:size]).reshape(shape)


# ---------------------------------------------------------------------------
# Quantizable-weight policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantizablePolicy:
    """Selects the tensors a zero-shot quantizer would touch.

    The default keeps 2-D tensors whose dimensions are all at least
    ``min_dim``; vectors (biases, norms) and thin matrices stay full precision.
    ``include``/``exclude`` name overrides take precedence over the shape rule.
    """

    min_dim: int = 16
    include: frozenset[str] = field(default_factory=frozenset)
    exclude: frozenset[str] = field(default_factory=frozenset)
    predicate: Callable[[str, tuple[int, ...]], bool] | None = None

    def __call__(self, name: str, shape: tuple[int, ...]) -> bool:
        if name in self.exclude:
            return False
        if name in self.include:
            return True
        if self.predicate is not None:
            return bool(self.predicate(name, tuple(shape)))
        return len(shape) == 2 and min(shape) >= self.min_dim


DEFAULT_POLICY = QuantizablePolicy()
