"""Projection onto preservation intervals (the "P" in PGD)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .constraints import (
    IntervalSet,
    PreservationReport,
    compute_constraints,
    verify_model_preservation,
)
from .quantizers import Method
from .tensor_store import DEFAULT_POLICY, QuantizablePolicy, TensorMap


class ProjectionError(ValueError):
    pass


@dataclass
class ProjectionMask:
    """Interval constraints for a whole checkpoint plus the weights they came from.

    ``origin`` is kept so that preservation can be re-verified against the
    artifact the constraints were derived from.
    """

    intervals: dict[str, IntervalSet]
    origin: TensorMap | None = None
    policy: QuantizablePolicy = field(default=DEFAULT_POLICY)

    @classmethod
    def from_weights(cls, weights: TensorMap, methods: Iterable[Method | str],
                     policy: QuantizablePolicy | None = None, threads: int = 1) -> "ProjectionMask":
        policy = policy or DEFAULT_POLICY
        return cls(compute_constraints(weights, methods, policy, threads), weights.copy(), policy)

    @property
    def methods(self) -> tuple[Method, ...]:
        seen: dict[Method, None] = {}
        for s in self.intervals.values():
            seen.update(dict.fromkeys(s.methods))
        return tuple(seen)

    def free(self, name: str) -> np.ndarray:
        """Boolean mask of the coordinates training may move."""
        return ~self.intervals[name].frozen

    def verify(self, weights: TensorMap) -> list[PreservationReport]:
        if self.origin is None:
            raise ProjectionError("mask carries no origin weights to verify against")
        return [verify_model_preservation(self.origin, weights, m, self.policy) for m in self.methods]


def _intervals(constraints: ProjectionMask | Mapping[str, IntervalSet]) -> Mapping[str, IntervalSet]:
    return constraints.intervals if isinstance(constraints, ProjectionMask) else constraints


def project(weights: Mapping[str, np.ndarray],
            constraints: ProjectionMask | Mapping[str, IntervalSet]) -> dict[str, np.ndarray]:
    """Clamp every tensor into its interval; frozen coordinates snap back.

    Every tensor must have a constraint record.  Non-quantizable tensors
    carry fully frozen records, so they are restored wholesale.
    """
    intervals = _intervals(constraints)
    out = {}
    for name, w in weights.items():
        s = intervals.get(name)
        if s is None:
            raise ProjectionError(f"missing constraint record for tensor {name!r}")
        if s.shape != np.shape(w):
            raise ProjectionError(f"shape mismatch for tensor {name!r}")
        out[name] = np.clip(np.asarray(w, dtype=np.float32), s.lo, s.hi)
    return out


def pgd_step(params, grads: Mapping[str, np.ndarray], lr: float,
             constraints: ProjectionMask | Mapping[str, IntervalSet]):
    """One projected SGD step, updating ``params`` in place and returning it.

    ``params`` is a name-to-array dict or any object holding one in a
    ``params`` attribute (such as a toy model).  Gradients on frozen
    coordinates are zeroed before the step, then the result is clamped into
    the intervals.
    """
    owner = params
    params = getattr(params, "params", params)
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    intervals = _intervals(constraints)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise FloatingPointError(f"non-finite gradient for {name!r} ({bad} entries); step aborted")
    for name in params:
        s = intervals.get(name)
        if s is None:
            raise ProjectionError(f"missing constraint record for tensor {name!r}")
        g = grads.get(name)
        if g is None:
            continue
        step = np.where(s.frozen, 0, g).astype(np.float32)
        params[name] = np.clip(params[name] - np.float32(lr) * step, s.lo, s.hi)
    return owner
