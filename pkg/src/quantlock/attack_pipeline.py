"""Three-stage quantization-conditioned backdoor: inject, constrain, repair.

Stage 1 trains a model whose behaviour is malicious at every precision.
Stage 2 derives, for the targeted quantizers, the box of full-precision
weights that quantize to the same artifact.  Stage 3 retrains on the benign
objective with projected gradient descent inside that box, so the
full-precision model looks clean while its quantized form is unchanged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .constraints import PreservationReport, interval_stats, verify_model_preservation
from .nn_lab import (
    DEFAULT_DIMS,
    LossKind,
    LossSpec,
    Metrics,
    ToyModel,
    TrainConfig,
    TriggerDataset,
    TriggerSpec,
    evaluate,
    generate_dataset,
    train,
)
from .projection import ProjectionMask
from .quantizers import Method, quantize_tensor
from .tensor_store import DEFAULT_POLICY, save_checkpoint

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
ALL_METHODS = (Method.INT8, Method.FP4, Method.NF4)
PRECISIONS = ("full",) + tuple(m.value for m in ALL_METHODS)
STAGES = ("injected", "repaired")


class PipelineError(RuntimeError):
    """The end-to-end guarantee was violated; this indicates a bug."""


@dataclass(frozen=True)
class AttackConfig:
    seed: int = 7
    dims: tuple[int, ...] = DEFAULT_DIMS
    n_clean: int = 4000
    n_poison: int = 1000
    n_test_clean: int = 2000
    n_test_poison: int = 1000
    separation: float = 2.5
    trigger: TriggerSpec = TriggerSpec()
    lam: float = 1.0
    inject_epochs: int = 30
    inject_lr: float = 0.05
    repair_epochs: int = 60
    repair_lr: float = 0.05
    batch_size: int = 64
    methods: tuple[Method, ...] = ALL_METHODS
    all_at_once: bool = True
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.methods:
            raise ValueError("at least one target method is required")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("duplicate target methods")
        if not self.all_at_once and len(self.methods) != 1:
            raise ValueError("single-method targeting takes exactly one method")
        if self.n_clean <= 0 or self.n_test_clean <= 0 or self.n_poison <= 0 or self.n_test_poison <= 0:
            raise ValueError("dataset sizes must be positive")
        if min(self.inject_epochs, self.repair_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        if not (self.inject_lr > 0 and self.repair_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if len(self.dims) < 2 or self.dims[-1] != 2:
            raise ValueError("the toy task is binary: dims must end in 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["methods"] = [m.value for m in self.methods]
        d["trigger"] = {"coords": list(self.trigger.coords), "pattern": list(self.trigger.pattern),
                        "target_label": self.trigger.target_label}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AttackConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "trigger" in d and not isinstance(d["trigger"], TriggerSpec):
            t = d["trigger"]
            d["trigger"] = TriggerSpec(tuple(t["coords"]), tuple(float(v) for v in t["pattern"]),
                                       int(t.get("target_label", 1)))
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "AttackConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def attack_datasets(config: AttackConfig) -> tuple[TriggerDataset, TriggerDataset]:
    """Train and held-out test sets; both share the task, the test seed is offset."""
    dim = config.dims[0]
    train_ds = generate_dataset(config.seed, config.n_clean, config.n_poison, config.trigger,
                                dim, config.separation)
    test_ds = generate_dataset(config.seed + 1000, config.n_test_clean, config.n_test_poison,
                               config.trigger, dim, config.separation)
    return train_ds, test_ds


def precision_metrics(model: ToyModel, ds: TriggerDataset) -> dict[str, Metrics]:
    return {p: evaluate(model, ds, p) for p in PRECISIONS}


@dataclass
class AttackReport:
    config: AttackConfig
    metrics: dict[str, dict[str, Metrics]]
    preservation: dict[str, bool]
    preservation_details: dict[str, dict]
    untargeted_preservation: dict[str, bool]
    width_stats: dict
    timings: dict[str, float]
    models: dict[str, ToyModel] = field(default_factory=dict, repr=False, compare=False)

    @property
    def preserved(self) -> bool:
        return all(self.preservation.values())

    def contrast(self, stage: str = "repaired") -> dict[str, float]:
        """Quantized minus full-precision attack success, per quantized precision."""
        m = self.metrics[stage]
        return {p: m[p].attack_success_rate - m["full"].attack_success_rate for p in PRECISIONS[1:]}

    def to_dict(self, timings: bool = True) -> dict:
        d = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "metrics": {s: {p: m.as_dict() for p, m in row.items()} for s, row in self.metrics.items()},
            "preservation": dict(self.preservation),
            "preservation_details": self.preservation_details,
            "untargeted_preservation": dict(self.untargeted_preservation),
            "width_stats": self.width_stats,
        }
        if timings:
            d["timings"] = dict(self.timings)
        return d

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AttackReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        metrics = {s: {p: Metrics(**m) for p, m in row.items()} for s, row in d["metrics"].items()}
        return cls(AttackConfig.from_dict(d["config"]), metrics, dict(d["preservation"]),
                   dict(d["preservation_details"]), dict(d["untargeted_preservation"]),
                   dict(d["width_stats"]), dict(d.get("timings", {})))


def _artifacts_equal(a: ToyModel, b: ToyModel, method: Method) -> bool:
    for name, w in a.params.items():
        if DEFAULT_POLICY(name, w.shape):
            if quantize_tensor(w, method) != quantize_tensor(b.params[name], method):
                return False
    return True


def run_attack(config: AttackConfig = AttackConfig(), snapshot_dir: str | Path | None = None) -> AttackReport:
    """Run inject, constrain, repair and check the guarantee end to end.

    Raises ``PipelineError`` if any targeted quantized artifact changed, or
    if the freshly measured quantized metrics of the repaired model differ
    from those of the injected model.
    """
    timings: dict[str, float] = {}
    train_ds, test_ds = attack_datasets(config)

    t0 = time.perf_counter()
    init = ToyModel.init(config.dims, config.seed)
    injected = train(init, train_ds, LossSpec(LossKind.COMBINED, config.lam),
                     TrainConfig(config.inject_epochs, config.inject_lr, config.batch_size, config.seed))
    timings["inject"] = time.perf_counter() - t0
    inj_metrics = precision_metrics(injected, test_ds)
    log.info("injected: %s", {p: m.as_dict() for p, m in inj_metrics.items()})

    t0 = time.perf_counter()
    mask = ProjectionMask.from_weights(injected.weights(), config.methods, threads=config.threads)
    timings["constrain"] = time.perf_counter() - t0
    widths = interval_stats(list(mask.intervals.values())).as_dict()
    log.info("constraints: mean width %.3g, frozen fraction %.3f", widths["mean"], widths["frozen_fraction"])

    t0 = time.perf_counter()
    repaired = train(injected, train_ds, LossSpec(LossKind.CLEAN_ONLY),
                     TrainConfig(config.repair_epochs, config.repair_lr, config.batch_size, config.seed + 1),
                     mask)
    timings["repair"] = time.perf_counter() - t0
    rep_metrics = precision_metrics(repaired, test_ds)
    log.info("repaired: %s", {p: m.as_dict() for p, m in rep_metrics.items()})

    reports: dict[Method, PreservationReport] = {
        m: verify_model_preservation(injected.weights(), repaired.weights(), m) for m in ALL_METHODS
    }
    for m in config.methods:
        if not reports[m].preserved or not _artifacts_equal(injected, repaired, m):
            raise PipelineError(f"{m.value} artifact changed during repair: {reports[m].as_dict()}")
        if rep_metrics[m.value] != inj_metrics[m.value]:
            raise PipelineError(f"{m.value} metrics drifted although the artifact is identical")

    if snapshot_dir is not None:
        out = Path(snapshot_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"seed": str(config.seed), "config_digest": config.digest()}
        save_checkpoint(injected.weights({**meta, "stage": "injected"}), out / "injected.safetensors")
        save_checkpoint(repaired.weights({**meta, "stage": "repaired"}), out / "repaired.safetensors")

    targeted = set(config.methods)
    return AttackReport(
        config=config,
        metrics={"injected": inj_metrics, "repaired": rep_metrics},
        preservation={m.value: reports[m].preserved for m in config.methods},
        preservation_details={m.value: reports[m].as_dict() for m in config.methods},
        untargeted_preservation={m.value: reports[m].preserved for m in ALL_METHODS if m not in targeted},
        width_stats=widths,
        timings=timings,
        models={"injected": injected, "repaired": repaired},
    )


@dataclass
class TargetComparison:
    reports: dict[str, AttackReport]

    def summary(self) -> dict[str, dict]:
        """Full-precision recovery and constraint looseness per arm."""
        out = {}
        for arm, r in self.reports.items():
            full = r.metrics["repaired"]["full"]
            out[arm] = {"clean_accuracy": full.clean_accuracy,
                        "attack_success_rate": full.attack_success_rate,
                        "mean_width": r.width_stats["mean"],
                        "frozen_fraction": r.width_stats["frozen_fraction"],
                        "preserved": r.preserved}
        return out

    def to_dict(self, timings: bool = True) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, "summary": self.summary(),
                "arms": {a: r.to_dict(timings) for a, r in self.reports.items()}}


def compare_targets(config: AttackConfig = AttackConfig(),
                    methods: Sequence[Method | str] = ALL_METHODS, workers: int = 1) -> TargetComparison:
    """One arm per single method plus the all-at-once arm, same seed and budget."""
    base = config.to_dict()
    arms = {Method(m).value: {**base, "methods": [Method(m).value], "all_at_once": False} for m in methods}
    arms["all"] = {**base, "methods": [Method(m).value for m in methods], "all_at_once": True}
    cfgs = {a: AttackConfig.from_dict(c) for a, c in arms.items()}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {a: pool.submit(run_attack, c) for a, c in cfgs.items()}
        return TargetComparison({a: f.result() for a, f in futures.items()})
