"""Defender-side analyses: Gaussian weight-noise sweeps and constraint-width
profiles that relate weight-magnitude tails to how much room an attacker has.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .constraints import compute_intervals, interval_stats
from .nn_lab import Metrics, ToyModel, TriggerDataset, evaluate
from .quantizers import Method
from .tensor_store import DEFAULT_POLICY, QuantizablePolicy, TensorMap, iter_checkpoint

PROFILE_SCHEMA_VERSION = 1
DEFAULT_SIGMAS = (0.0, 1e-4, 1e-3, 1e-2)
# Multiplier mapping the LLM-scale noise grid onto the toy model.  Chosen
# from a sweep so that 1e-4 is harmless, 1e-3 sits far above typical toy
# interval widths (~1.4e-3) yet leaves clean accuracy intact, and 1e-2
# destroys it.
TOY_SIGMA_SCALE = 50.0


# ---------------------------------------------------------------------------
# Noise defense
# ---------------------------------------------------------------------------

def noise_defense(model: TensorMap, sigma: float, seed: int = 0,
                  policy: QuantizablePolicy | None = None) -> TensorMap:
    """Add N(0, sigma^2) noise to every quantizable tensor; others are copied.

    Each tensor draws from its own stream keyed on (seed, name), so the result
    does not depend on which other tensors are present.
    """
    if not sigma >= 0:
        raise ValueError("sigma must be non-negative")
    policy = policy or DEFAULT_POLICY
    out = {}
    for name, w in model.items():
        if sigma == 0 or not policy(name, w.shape):
            out[name] = w.copy()
            continue
        key = int.from_bytes(name.encode(), "little") % (1 << 63)
        rng = np.random.default_rng([seed, key])
        noise = rng.normal(0.0, sigma, w.shape)
        out[name] = (w.astype(np.float64) + noise).astype(np.float32)
    return TensorMap(out, model.metadata)


@dataclass(frozen=True)
class DefenseConfig:
    """Noise grid for a sweep.

    The effective standard deviations are ``sigmas * sigma_scale``.
    ``sigma_scale`` rescales a grid chosen for LLM weights to the toy model.
    """

    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    sigma_scale: float = TOY_SIGMA_SCALE
    seed: int = 0
    methods: tuple[Method, ...] = (Method.INT8, Method.FP4, Method.NF4)
    asr_threshold: float = 0.2
    clean_budget: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        if any(not s >= 0 for s in self.sigmas) or not self.sigma_scale >= 0:
            raise ValueError("sigmas must be non-negative")

    def effective(self) -> list[float]:
        return [s * self.sigma_scale for s in self.sigmas]


@dataclass
class DefenseRow:
    sigma: float
    effective_sigma: float
    metrics: dict[str, Metrics]


@dataclass
class DefenseReport:
    config: DefenseConfig
    rows: list[DefenseRow]
    flagged_sigma: float | None
    baseline: dict[str, Metrics]

    def to_dict(self) -> dict:
        return {
            "schema_version": PROFILE_SCHEMA_VERSION,
            "config": {"sigmas": list(self.config.sigmas), "sigma_scale": self.config.sigma_scale,
                       "seed": self.config.seed, "methods": [m.value for m in self.config.methods],
                       "asr_threshold": self.config.asr_threshold,
                       "clean_budget": self.config.clean_budget},
            "baseline": {p: m.as_dict() for p, m in self.baseline.items()},
            "rows": [{"sigma": r.sigma, "effective_sigma": r.effective_sigma,
                      "metrics": {p: m.as_dict() for p, m in r.metrics.items()}} for r in self.rows],
            "flagged_sigma": self.flagged_sigma,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["sigma", "effective_sigma", "precision", "clean_accuracy", "attack_success_rate"])
        for r in self.rows:
            for p, m in r.metrics.items():
                w.writerow([r.sigma, r.effective_sigma, p, m.clean_accuracy, m.attack_success_rate])
        return buf.getvalue()


def defense_sweep(attacked_model: ToyModel, dataset: TriggerDataset,
                  config: DefenseConfig = DefenseConfig()) -> DefenseReport:
    """Metrics at every noise level and precision.

    ``flagged_sigma`` is the smallest grid value where every quantized
    attack success is at most ``asr_threshold`` while full-precision clean
    accuracy stays within ``clean_budget`` of the undefended model.
    """
    precisions = ["full"] + [m.value for m in config.methods]
    weights = attacked_model.weights()
    baseline = {p: evaluate(attacked_model, dataset, p) for p in precisions}
    rows, flagged = [], None
    for sigma, eff in zip(config.sigmas, config.effective()):
        noisy = ToyModel.from_weights(noise_defense(weights, eff, config.seed))
        metrics = {p: evaluate(noisy, dataset, p) for p in precisions}
        rows.append(DefenseRow(sigma, eff, metrics))
        quantized_ok = all(metrics[p].attack_success_rate <= config.asr_threshold for p in precisions[1:])
        clean_ok = baseline["full"].clean_accuracy - metrics["full"].clean_accuracy <= config.clean_budget
        if flagged is None and quantized_ok and clean_ok:
            flagged = sigma
    return DefenseReport(config, rows, flagged, baseline)


# ---------------------------------------------------------------------------
# Vulnerability profile
# ---------------------------------------------------------------------------

def _normalized_hist(x: np.ndarray, bins: int) -> dict:
    if x.size == 0:
        return {"edges": [], "density": []}
    counts, edges = np.histogram(x, bins=bins)
    return {"edges": edges.tolist(), "density": (counts / x.size).tolist()}


# Fraction of |w| beyond this many standard deviations; a Gaussian puts
# 0.1% of its mass there.
TAIL_Z = 3.2905


@dataclass
class TensorProfile:
    name: str
    shape: tuple[int, ...]
    quantizable: bool
    magnitude: dict
    tail_mass: float
    widths: dict[str, dict] = field(default_factory=dict)


@dataclass
class VulnerabilityProfile:
    methods: tuple[Method, ...]
    tensors: list[TensorProfile]
    summary: dict[str, dict]
    tail_mass: float

    def mean_width(self, method: Method | str) -> float:
        return self.summary[Method(method).value]["mean_width"]

    def to_dict(self) -> dict:
        return {
            "schema_version": PROFILE_SCHEMA_VERSION,
            "methods": [m.value for m in self.methods],
            "tail_mass": self.tail_mass,
            "summary": self.summary,
            "tensors": [{"name": t.name, "shape": list(t.shape), "quantizable": t.quantizable,
                         "magnitude": t.magnitude, "tail_mass": t.tail_mass, "widths": t.widths}
                        for t in self.tensors],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["tensor", "method", "count", "frozen_fraction", "mean_width", "median_width"])
        for t in self.tensors:
            for m, s in t.widths.items():
                w.writerow([t.name, m, s["count"], s["frozen_fraction"], s["mean"], s["median"]])
        return buf.getvalue()


def _tensor_stream(checkpoint: TensorMap | Mapping[str, np.ndarray] | str | Path) -> Iterator[tuple[str, np.ndarray]]:
    if isinstance(checkpoint, (str, Path)):
        return iter_checkpoint(checkpoint)
    return iter(sorted(checkpoint.items()))


def vulnerability_profile(checkpoint: TensorMap | str | Path, methods: Iterable[Method | str] = (),
                          policy: QuantizablePolicy | None = None, bins: int = 64,
                          threads: int = 1) -> VulnerabilityProfile:
    """Weight-magnitude and interval-width histograms per tensor.

    A path is streamed one tensor at a time, so memory stays proportional to
    the largest tensor.  Summary widths are element-weighted means over the
    non-frozen weights of quantizable tensors.
    """
    methods = tuple(Method(m) for m in methods)
    policy = policy or DEFAULT_POLICY
    sums = {m: [0.0, 0, 0] for m in methods}  # width sum, free count, total count
    tail_n = total_n = 0
    tensors = []
    for name, w in _tensor_stream(checkpoint):
        mag = np.abs(w.ravel()).astype(np.float64)
        rms = math.sqrt(float(np.mean(mag ** 2))) if mag.size else 0.0
        tails = int(np.sum(mag > TAIL_Z * rms)) if rms > 0 else 0
        tail_n += tails
        total_n += mag.size
        prof = TensorProfile(name, tuple(w.shape), policy(name, w.shape), _normalized_hist(mag, bins),
                             tails / mag.size if mag.size else 0.0)
        if prof.quantizable:
            for m in methods:
                s = compute_intervals(w, m, policy, name, threads=threads)
                stats = interval_stats(s, bins)
                d = stats.as_dict()
                d["density"] = [c / stats.count for c in d.pop("counts")] if stats.count else []
                prof.widths[m.value] = d
                acc = sums[m]
                acc[0] += stats.mean * stats.count
                acc[1] += stats.count
                acc[2] += s.frozen.size
        tensors.append(prof)
    summary = {m.value: {"mean_width": acc[0] / acc[1] if acc[1] else 0.0,
                         "frozen_fraction": 1 - acc[1] / acc[2] if acc[2] else 0.0,
                         "count": acc[1]}
               for m, acc in sums.items()}
    return VulnerabilityProfile(methods, tensors, summary, tail_n / total_n if total_n else 0.0)


# ---------------------------------------------------------------------------
# Synthetic checkpoints
# ---------------------------------------------------------------------------

def synthetic_checkpoint(kind: str, n_params: int = 1 << 20, seed: int = 0, std: float = 0.02,
                         cols: int = 1024, df: float = 3.0) -> TensorMap:
    """Square-ish weight matrices with Gaussian or Student-t entries.

    Student-t draws are rescaled to variance ``std**2`` (needs ``df > 2``), so
    the two kinds differ only in tail shape.
    """
    rng = np.random.default_rng(seed)
    rows_total = max(1, n_params // cols)
    n_layers = max(1, rows_total // cols)
    tensors = {}
    for i in range(n_layers):
        rows = rows_total // n_layers + (1 if i < rows_total % n_layers else 0)
        if kind == "gaussian":
            w = rng.normal(0.0, std, (rows, cols))
        elif kind == "student_t":
            if df <= 2:
                raise ValueError("Student-t variance is finite only for df > 2")
            w = rng.standard_t(df, (rows, cols)) * std / math.sqrt(df / (df - 2))
        else:
            raise ValueError(f"unknown synthetic kind {kind!r}")
        tensors[f"layers.{i}.weight"] = w.astype(np.float32)
    return TensorMap(tensors, {"kind": kind, "seed": str(seed), "std": str(std)})


def width_ratios(heavy: VulnerabilityProfile, light: VulnerabilityProfile) -> dict[str, float]:
    return {m: heavy.summary[m]["mean_width"] / light.summary[m]["mean_width"] for m in heavy.summary}


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj.to_dict(), indent=2, sort_keys=True))
