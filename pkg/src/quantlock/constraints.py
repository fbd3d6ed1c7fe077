"""Preservation intervals for a fixed quantized artifact.

For a block with scale ``s`` and a weight assigned symbol ``a_j``, the set
of full-precision values that re-quantize to ``a_j`` is bounded by the
scaled midpoints to the neighbouring symbols, with ``-s``/``+s`` closing the
outermost buckets.  The element that defines the block scale is frozen, so
the scale itself cannot move.

Bounds are stored as closed float32 intervals ``[lo, hi]``.  Rather than
evaluating ``s * midpoint`` and hoping the rounding falls on the right side,
each bound is located exactly: ``lo`` is the smallest float32 that the
quantizer maps at or above the lower decision threshold, ``hi`` the largest
one it maps below the upper threshold.  Clamping into ``[lo, hi]`` therefore
re-quantizes identically, including at exact midpoint landings.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .quantizers import (
    Alphabet,
    Method,
    alphabet,
    quantize_blocks,
    quantize_tensor,
)
from .tensor_store import (
    DEFAULT_POLICY,
    BlockSpec,
    QuantizablePolicy,
    TensorMap,
    from_blocks,
    partition_blocks,
    to_blocks,
)

_MAX_SEARCH_STEPS = 256
_CHUNK_ELEMENTS = 1 << 20


@dataclass(frozen=True, eq=False)
class IntervalSet:
    """Closed per-element bounds and frozen flags for one tensor."""

    lo: np.ndarray
    hi: np.ndarray
    frozen: np.ndarray
    methods: tuple[Method, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.lo.shape

    def contains(self, w: np.ndarray) -> np.ndarray:
        return (w >= self.lo) & (w <= self.hi)

    def widths(self) -> np.ndarray:
        return self.hi.astype(np.float64) - self.lo.astype(np.float64)

    def equals(self, other: "IntervalSet") -> bool:
        return (
            self.lo.tobytes() == other.lo.tobytes()
            and self.hi.tobytes() == other.hi.tobytes()
            and np.array_equal(self.frozen, other.frozen)
            and set(self.methods) == set(other.methods)
        )


def frozen_interval(t: np.ndarray, methods: Sequence[Method] = ()) -> IntervalSet:
    t = np.asarray(t, dtype=np.float32)
    return IntervalSet(t.copy(), t.copy(), np.ones(t.shape, bool), tuple(methods))


def _first_at_least(t: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Smallest float32 ``w`` whose normalized value ``w / s`` reaches ``t``.

    The normalization is the quantizer's own (float64 division of float32
    operands), which is monotone in ``w``; the feasible set is a ray and a
    short walk from ``t * s`` finds its end.
    """
    up, down = np.float32(np.inf), np.float32(-np.inf)
    s64 = s.astype(np.float64)
    c = (t * s64).astype(np.float32)
    with np.errstate(over="ignore", under="ignore"):
        for _ in range(_MAX_SEARCH_STEPS):
            ok = (c / s64) >= t
            prev = np.nextafter(c, down)
            step_down = ok & ((prev / s64) >= t)
            step_up = ~ok
            if not (step_down.any() or step_up.any()):
                return c
            c = np.where(step_down, prev, np.where(step_up, np.nextafter(c, up), c))
    raise RuntimeError("interval bound search did not converge")


def block_intervals(blocks: np.ndarray, abc: Alphabet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(lo, hi, frozen) for a (num_blocks, length) float32 matrix."""
    blocks = np.asarray(blocks, dtype=np.float32)
    codes, scales = quantize_blocks(blocks, abc)
    s = np.broadcast_to(scales[:, None], blocks.shape)
    lo = (-s).copy()
    hi = s.copy()

    live = s > 0
    lower = live & (codes > 0)
    if lower.any():
        lo[lower] = _first_at_least(abc.thresholds[codes[lower] - 1], s[lower])
    upper = live & (codes < len(abc) - 1)
    if upper.any():
        edge = _first_at_least(abc.thresholds[codes[upper]], s[upper])
        hi[upper] = np.nextafter(edge, np.float32(-np.inf))

    frozen = ~live
    if blocks.shape[1]:
        rows = np.flatnonzero(scales > 0)
        frozen[rows, np.argmax(np.abs(blocks[rows]), axis=1)] = True
    lo[frozen] = blocks[frozen]
    hi[frozen] = blocks[frozen]
    return lo, hi, frozen


def _chunked(fn, blocks: np.ndarray, threads: int):
    """Apply a row-wise function over row chunks, optionally on a thread pool."""
    per = max(1, _CHUNK_ELEMENTS // max(1, blocks.shape[1]))
    starts = range(0, blocks.shape[0], per)
    parts = [blocks[i:i + per] for i in starts]
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(fn, parts))
    else:
        results = [fn(p) for p in parts]
    if not results:
        return fn(blocks)
    return tuple(np.concatenate(r) for r in zip(*results))


def compute_intervals(t: np.ndarray, method: Method | str, policy: QuantizablePolicy | None = None,
                      name: str = "", spec: BlockSpec | None = None, threads: int = 1) -> IntervalSet:
    """Preservation intervals of ``t`` under ``method``.

    Tensors the policy leaves in full precision come back entirely frozen.
    """
    method = Method(method)
    t = np.asarray(t, dtype=np.float32)
    if not np.all(np.isfinite(t)):
        raise ValueError(f"non-finite value in tensor {name!r}")
    policy = policy or DEFAULT_POLICY
    if not policy(name, t.shape):
        return frozen_interval(t, (method,))
    spec = spec or method.default_spec
    abc = alphabet(method)
    blocks = to_blocks(t, spec)
    lo, hi, frozen = _chunked(lambda b: block_intervals(b, abc), blocks, threads)
    return IntervalSet(from_blocks(lo, t.shape), from_blocks(hi, t.shape),
                       from_blocks(frozen, t.shape), (method,))


def intersect(a: IntervalSet, b: IntervalSet) -> IntervalSet:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    if np.any(lo > hi):
        raise ValueError("empty intersection; interval sets do not share an origin")
    frozen = a.frozen | b.frozen
    methods = tuple(dict.fromkeys(a.methods + b.methods))
    return IntervalSet(lo, hi, frozen, methods)


def compute_constraints(weights: TensorMap, methods: Iterable[Method | str],
                        policy: QuantizablePolicy | None = None,
                        threads: int = 1) -> dict[str, IntervalSet]:
    """Intervals for every tensor, intersected across ``methods``."""
    methods = [Method(m) for m in methods]
    if not methods:
        raise ValueError("need at least one method")
    out = {}
    for name, t in weights.items():
        sets = [compute_intervals(t, m, policy, name, threads=threads) for m in methods]
        merged = sets[0]
        for other in sets[1:]:
            merged = intersect(merged, other)
        out[name] = merged
    return out


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass
class Mismatch:
    tensor: str
    block: int
    element: int

    def as_dict(self) -> dict:
        return {"tensor": self.tensor, "block": self.block, "element": self.element}


@dataclass
class PreservationReport:
    method: Method
    preserved: bool
    mismatches: list[Mismatch] = field(default_factory=list)
    scale_mismatches: int = 0
    code_mismatches: int = 0

    def as_dict(self) -> dict:
        return {
            "method": self.method.value,
            "preserved": self.preserved,
            "code_mismatches": self.code_mismatches,
            "scale_mismatches": self.scale_mismatches,
            "first_mismatches": [m.as_dict() for m in self.mismatches],
        }


def verify_preservation(reference: np.ndarray, candidate: np.ndarray, method: Method | str,
                        spec: BlockSpec | None = None, name: str = "", limit: int = 10,
                        double_quant: bool = False) -> PreservationReport:
    method = Method(method)
    reference = np.asarray(reference, dtype=np.float32)
    candidate = np.asarray(candidate, dtype=np.float32)
    if reference.shape != candidate.shape:
        raise ValueError("reference and candidate shapes differ")
    qa = quantize_tensor(reference, method, spec, double_quant)
    qb = quantize_tensor(candidate, method, spec, double_quant)
    if qa == qb:
        return PreservationReport(method, True)

    blocks = partition_blocks(reference, qa.spec)
    bad_scale = qa.scales.view(np.uint32) != qb.scales.view(np.uint32)
    bad_code = (qa.codes != qb.codes).reshape(-1)
    report = PreservationReport(method, False, scale_mismatches=int(bad_scale.sum()),
                                code_mismatches=int(bad_code.sum()))
    # A changed scale is blamed on the block's scale-defining element.
    flagged = bad_code.copy()
    flat_c = candidate.reshape(-1)
    for b in np.flatnonzero(bad_scale):
        off, length = blocks[b]
        flagged[off + int(np.argmax(np.abs(flat_c[off:off + length])))] = True
    offsets = np.array([o for o, _ in blocks])
    for idx in np.flatnonzero(flagged)[:limit]:
        b = int(np.searchsorted(offsets, idx, side="right") - 1)
        report.mismatches.append(Mismatch(name, b, int(idx - offsets[b])))
    return report


def verify_model_preservation(reference: TensorMap, candidate: TensorMap, method: Method | str,
                              policy: QuantizablePolicy | None = None, limit: int = 10,
                              double_quant: bool = False) -> PreservationReport:
    """Preservation over every quantizable tensor of a checkpoint."""
    method = Method(method)
    policy = policy or DEFAULT_POLICY
    if list(reference) != list(candidate):
        raise ValueError("reference and candidate hold different tensors")
    total = PreservationReport(method, True)
    for name, ref in reference.items():
        if not policy(name, ref.shape):
            continue
        rep = verify_preservation(ref, candidate[name], method, name=name,
                                  limit=limit, double_quant=double_quant)
        if not rep.preserved:
            total.preserved = False
            total.code_mismatches += rep.code_mismatches
            total.scale_mismatches += rep.scale_mismatches
            total.mismatches.extend(rep.mismatches[:max(0, limit - len(total.mismatches))])
    return total


# ---------------------------------------------------------------------------
# Width statistics
# ---------------------------------------------------------------------------

@dataclass
class WidthStats:
    count: int
    frozen_fraction: float
    mean: float
    median: float
    edges: list[float]
    counts: list[int]

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def interval_stats(sets: IntervalSet | Iterable[IntervalSet],
                   bins: int | Sequence[float] = 32) -> WidthStats:
    """Width summary of the non-frozen elements of one or more interval sets."""
    if isinstance(sets, IntervalSet):
        sets = [sets]
    widths, total, frozen = [], 0, 0
    for s in sets:
        total += s.frozen.size
        frozen += int(s.frozen.sum())
        widths.append(s.widths()[~s.frozen])
    w = np.concatenate(widths) if widths else np.zeros(0)
    if w.size == 0:
        return WidthStats(0, 1.0 if total else 0.0, 0.0, 0.0, [], [])
    counts, edges = np.histogram(w, bins=bins)
    return WidthStats(
        count=int(w.size),
        frozen_fraction=frozen / total,
        mean=float(w.mean()),
        median=float(np.median(w)),
        edges=edges.tolist(),
        counts=counts.tolist(),
    )


# ---------------------------------------------------------------------------
# QCON container
#
#   b"QCON" | u8 version=1 | u8 method count | u8 method tags[] | u32 record count
#   per record (names in lexicographic order):
#     u16 name length | utf-8 name | u8 ndim | u64 dims[ndim]
#     f32 lo[n] | f32 hi[n] | frozen bitmask, ceil(n / 8) bytes, LSB-first
#   All integers and floats little-endian; n = prod(dims).
# ---------------------------------------------------------------------------

QCON_MAGIC = b"QCON"
QCON_VERSION = 1


class QconError(ValueError):
    pass


def write_qcon(path: str | Path, constraints: Mapping[str, IntervalSet]) -> None:
    methods: list[Method] = []
    for s in constraints.values():
        for m in s.methods:
            if m not in methods:
                methods.append(m)
    buf = io.BytesIO()
    buf.write(QCON_MAGIC)
    buf.write(struct.pack("<BB", QCON_VERSION, len(methods)))
    buf.write(bytes(m.tag for m in methods))
    buf.write(struct.pack("<I", len(constraints)))
    for name in sorted(constraints):
        s = constraints[name]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", s.lo.ndim))
        buf.write(struct.pack(f"<{s.lo.ndim}Q", *s.lo.shape))
        buf.write(s.lo.astype("<f4").tobytes())
        buf.write(s.hi.astype("<f4").tobytes())
        buf.write(np.packbits(s.frozen.reshape(-1), bitorder="little").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_qcon(path: str | Path) -> dict[str, IntervalSet]:
    fh = io.BytesIO(Path(path).read_bytes())

    def take(n: int) -> bytes:
        raw = fh.read(n)
        if len(raw) != n:
            raise QconError("truncated QCON file")
        return raw

    if take(4) != QCON_MAGIC:
        raise QconError("not a QCON file (bad magic)")
    version, nm = struct.unpack("<BB", take(2))
    if version != QCON_VERSION:
        raise QconError(f"unsupported QCON version {version}")
    methods = tuple(Method.from_tag(t) for t in take(nm))
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        lo = np.frombuffer(take(4 * size), "<f4").astype(np.float32).reshape(shape)
        hi = np.frombuffer(take(4 * size), "<f4").astype(np.float32).reshape(shape)
        bits = np.frombuffer(take(-(-size // 8)), np.uint8)
        frozen = np.unpackbits(bits, count=size, bitorder="little").astype(bool).reshape(shape)
        out[name] = IntervalSet(lo, hi, frozen, methods)
    return out
