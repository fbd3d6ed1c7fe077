"""Zero-shot block-wise quantizers.

All three methods share one procedure: split the weights into blocks, divide
each block by its absmax, snap every normalized weight to the nearest symbol
of a fixed alphabet in [-1, 1], and dequantize as ``scale * symbol``.  They
differ only in the alphabet and in the default block layout.

Weights, scales and dequantized values are float32.  The nearest-symbol
decision compares ``w / s`` against the exact symbol midpoints in float64,
which for float32 operands resolves every bucket edge to the first float32
at or past the real-valued midpoint.  :mod:`quantlock.constraints` searches
against this same decision function, so the two can never disagree.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .tensor_store import BlockSpec, Layout, PER_ROW, from_blocks, to_blocks

SUPER_BLOCK = 256


class Method(str, Enum):
    INT8 = "int8"
    FP4 = "fp4"
    NF4 = "nf4"

    @property
    def default_spec(self) -> BlockSpec:
        if self is Method.INT8:
            return PER_ROW
        return BlockSpec(Layout.FLAT, 64)

    @property
    def tag(self) -> int:
        return list(Method).index(self)

    @classmethod
    def from_tag(cls, tag: int) -> "Method":
        return list(Method)[tag]


@dataclass(frozen=True, eq=False)
class Alphabet:
    """Sorted float32 symbols plus the float64 decision thresholds between them.

    ``thresholds[j]`` separates symbol ``j`` from ``j + 1``.  A normalized
    value exactly on a threshold goes to the larger symbol.
    """

    name: str
    symbols: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self):
        s = self.symbols
        if s.dtype != np.float32 or s[0] != -1 or s[-1] != 1 or np.any(np.diff(s) <= 0):
            raise ValueError(f"invalid alphabet {self.name!r}")
        if self.thresholds.dtype != np.float64 or self.thresholds.shape != (len(s) - 1,):
            raise ValueError("need one threshold between each pair of symbols")
        if np.any(self.thresholds <= s[:-1]) or np.any(self.thresholds > s[1:]):
            raise ValueError("thresholds must lie between adjacent symbols")

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def zero_index(self) -> int:
        """Index of the symbol nearest 0, used for all-zero blocks."""
        return int(nearest_symbol(np.zeros(1), self)[0])

    @property
    def max_gap(self) -> float:
        return float(np.max(np.diff(self.symbols.astype(np.float64))))


def nearest_symbol(x: np.ndarray, alphabet: Alphabet) -> np.ndarray:
    """Code of the nearest symbol; midpoint ties round to the larger symbol."""
    return np.searchsorted(alphabet.thresholds, x, side="right").astype(np.uint8)


@lru_cache(maxsize=None)
def _tables() -> dict:
    with resources.files("quantlock.data").joinpath("alphabets.json").open() as fh:
        return json.load(fh)


@lru_cache(maxsize=None)
def alphabet(method: Method | str) -> Alphabet:
    method = Method(method)
    if method is Method.INT8:
        j = np.arange(-127, 128, dtype=np.float64)
        symbols = (j / 127).astype(np.float32)
        thresholds = (2 * j[:-1] + 1) / 254
    else:
        # The lookup tables carry +0 and -0 for the 4-bit float; both decode to 0.
        symbols = np.unique(np.asarray(_tables()[method.value], dtype=np.float32) + np.float32(0))
        wide = symbols.astype(np.float64)
        thresholds = (wide[:-1] + wide[1:]) / 2
    return Alphabet(method.value, symbols, thresholds)


@dataclass(frozen=True)
class DoubleQuantScales:
    """First-stage block scales quantized again in super-blocks of 256."""

    scale_codes: np.ndarray
    super_scales: np.ndarray
    super_block_size: int = SUPER_BLOCK

    def reconstruct(self) -> np.ndarray:
        table = alphabet(Method.INT8).symbols
        n = self.scale_codes.size
        per_scale = np.repeat(self.super_scales, self.super_block_size)[:n]
        return (per_scale * table[self.scale_codes]).astype(np.float32)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Per-element alphabet codes and per-block scales.

    With double quantization ``scales`` holds the reconstructed second-stage
    values, i.e. the scales the artifact actually dequantizes with.
    """

    method: Method
    spec: BlockSpec
    shape: tuple[int, ...]
    codes: np.ndarray
    scales: np.ndarray
    double_quant: DoubleQuantScales | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        if (self.method, self.spec, tuple(self.shape)) != (other.method, other.spec, tuple(other.shape)):
            return False
        if not (_same(self.codes, other.codes) and _same(self.scales, other.scales)):
            return False
        a, b = self.double_quant, other.double_quant
        if (a is None) != (b is None):
            return False
        return a is None or (
            a.super_block_size == b.super_block_size
            and _same(a.scale_codes, b.scale_codes)
            and _same(a.super_scales, b.super_scales)
        )


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in quantizer input")


def block_scales(blocks: np.ndarray) -> np.ndarray:
    if blocks.shape[1] == 0:
        return np.zeros(blocks.shape[0], np.float32)
    return np.abs(blocks).max(axis=1).astype(np.float32)


def normalize(blocks: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """``w / s`` evaluated in float64; zero-scale rows come back as zeros."""
    safe = np.where(scales > 0, scales, np.float32(1)).astype(np.float64)
    return blocks.astype(np.float64) / safe[:, None]


def quantize_blocks(blocks: np.ndarray, abc: Alphabet) -> tuple[np.ndarray, np.ndarray]:
    """Quantize a (num_blocks, length) float32 matrix row by row."""
    blocks = np.asarray(blocks, dtype=np.float32)
    _check_finite(blocks)
    scales = block_scales(blocks)
    codes = nearest_symbol(normalize(blocks, scales), abc)
    codes[scales == 0] = abc.zero_index
    return codes, scales


def quantize_block(block: np.ndarray, abc: Alphabet) -> tuple[np.ndarray, np.float32]:
    block = np.asarray(block, dtype=np.float32).reshape(1, -1)
    if block.size == 0:
        raise ValueError("empty block")
    codes, scales = quantize_blocks(block, abc)
    return codes[0], scales[0]


def dequantize_blocks(codes: np.ndarray, scales: np.ndarray, abc: Alphabet) -> np.ndarray:
    return (scales[:, None] * abc.symbols[codes]).astype(np.float32)


def double_quantize_scales(scales: np.ndarray, super_block_size: int = SUPER_BLOCK) -> DoubleQuantScales:
    scales = np.asarray(scales, dtype=np.float32).reshape(-1)
    if np.any(scales < 0):
        raise ValueError("scales must be non-negative")
    blocks = to_blocks(scales, BlockSpec(Layout.FLAT, super_block_size))
    codes, supers = quantize_blocks(blocks, alphabet(Method.INT8))
    return DoubleQuantScales(codes.reshape(-1)[:scales.size].copy(), supers, super_block_size)


def quantize_tensor(t: np.ndarray, method: Method | str, spec: BlockSpec | None = None,
                    double_quant: bool = False) -> QuantizedTensor:
    method = Method(method)
    spec = spec or method.default_spec
    t = np.asarray(t, dtype=np.float32)
    abc = alphabet(method)
    blocks = to_blocks(t, spec)
    codes, scales = quantize_blocks(blocks, abc)
    dq = None
    if double_quant:
        dq = double_quantize_scales(scales)
        scales = dq.reconstruct()
        # A scale that reconstructs to zero erases its block.
        codes[scales == 0] = abc.zero_index
    return QuantizedTensor(method, spec, tuple(t.shape), from_blocks(codes, t.shape), scales, dq)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    abc = alphabet(q.method)
    scales = q.double_quant.reconstruct() if q.double_quant is not None else q.scales
    codes = to_blocks(q.codes, q.spec)
    return from_blocks(dequantize_blocks(codes, scales, abc), q.shape)


def fake_quantize(t: np.ndarray, method: Method | str, spec: BlockSpec | None = None,
                  double_quant: bool = False) -> np.ndarray:
    return dequantize(quantize_tensor(t, method, spec, double_quant))


# ---------------------------------------------------------------------------
# QTEN container
#
#   b"QTEN" | u8 version=1 | u32 record count
#   per record (names in lexicographic order):
#     u16 name length | utf-8 name | u8 kind (0 quantized, 1 raw float32)
#     u8 ndim | u64 dims[ndim]
#     kind 1: float32 payload, prod(dims) values
#     kind 0: u8 method tag (0 int8, 1 fp4, 2 nf4) | u8 layout (0 per-row, 1 flat)
#             u32 block size | u8 codes[prod(dims)] | u64 num scales | f32 scales[]
#             u8 double-quant flag; if 1: u32 super-block size | u8 scale codes[num scales]
#             | u64 num super-scales | f32 super-scales[]
#   All integers and floats little-endian.
# ---------------------------------------------------------------------------

QTEN_MAGIC = b"QTEN"
QTEN_VERSION = 1


class QtenError(ValueError):
    pass


def _write_array(fh: BinaryIO, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise QtenError("truncated QTEN file")
    return raw


def _unpack(fh: BinaryIO, fmt: str):
    return struct.unpack("<" + fmt, _read(fh, struct.calcsize("<" + fmt)))


def write_qten(path: str | Path, records: Mapping[str, "QuantizedTensor | np.ndarray"]) -> None:
    buf = io.BytesIO()
    buf.write(QTEN_MAGIC)
    buf.write(struct.pack("<BI", QTEN_VERSION, len(records)))
    for name in sorted(records):
        rec = records[name]
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        if isinstance(rec, QuantizedTensor):
            shape = rec.shape
            buf.write(struct.pack("<BB", 0, len(shape)))
            buf.write(struct.pack(f"<{len(shape)}Q", *shape))
            layout = 0 if rec.spec.layout is Layout.PER_ROW else 1
            buf.write(struct.pack("<BBI", rec.method.tag, layout, rec.spec.block_size))
            _write_array(buf, rec.codes, "u1")
            buf.write(struct.pack("<Q", rec.scales.size))
            _write_array(buf, rec.scales, "<f4")
            dq = rec.double_quant
            buf.write(struct.pack("<B", 0 if dq is None else 1))
            if dq is not None:
                buf.write(struct.pack("<I", dq.super_block_size))
                _write_array(buf, dq.scale_codes, "u1")
                buf.write(struct.pack("<Q", dq.super_scales.size))
                _write_array(buf, dq.super_scales, "<f4")
        else:
            arr = np.asarray(rec, dtype=np.float32)
            buf.write(struct.pack("<BB", 1, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            _write_array(buf, arr, "<f4")
    Path(path).write_bytes(buf.getvalue())


def read_qten(path: str | Path) -> dict[str, "QuantizedTensor | np.ndarray"]:
    fh = io.BytesIO(Path(path).read_bytes())
    if _read(fh, 4) != QTEN_MAGIC:
        raise QtenError("not a QTEN file (bad magic)")
    version, count = _unpack(fh, "BI")
    if version != QTEN_VERSION:
        raise QtenError(f"unsupported QTEN version {version}")
    out: dict = {}
    for _ in range(count):
        (n,) = _unpack(fh, "H")
        name = _read(fh, n).decode("utf-8")
        kind, ndim = _unpack(fh, "BB")
        shape = tuple(_unpack(fh, f"{ndim}Q")) if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        if kind == 1:
            out[name] = np.frombuffer(_read(fh, 4 * size), "<f4").astype(np.float32).reshape(shape)
            continue
        if kind != 0:
            raise QtenError(f"unknown record kind {kind}")
        tag, layout, block_size = _unpack(fh, "BBI")
        method = Method.from_tag(tag)
        spec = BlockSpec(Layout.PER_ROW if layout == 0 else Layout.FLAT, block_size)
        codes = np.frombuffer(_read(fh, size), "u1").copy().reshape(shape)
        (ns,) = _unpack(fh, "Q")
        scales = np.frombuffer(_read(fh, 4 * ns), "<f4").astype(np.float32)
        (flag,) = _unpack(fh, "B")
        dq = None
        if flag:
            (sbs,) = _unpack(fh, "I")
            scale_codes = np.frombuffer(_read(fh, ns), "u1").copy()
            (nss,) = _unpack(fh, "Q")
            supers = np.frombuffer(_read(fh, 4 * nss), "<f4").astype(np.float32)
            dq = DoubleQuantScales(scale_codes, supers, sbs)
        out[name] = QuantizedTensor(method, spec, shape, codes, scales, dq)
    return out
