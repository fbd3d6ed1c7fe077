"""Desk-scale stand-in for an LLM: a small ReLU classifier with hand-written
backprop, a synthetic trigger-backdoor dataset, and the injection/repair losses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .projection import ProjectionMask, pgd_step
from .quantizers import Method, fake_quantize
from .tensor_store import DEFAULT_POLICY, QuantizablePolicy, TensorMap

log = logging.getLogger(__name__)

DEFAULT_DIMS = (32, 64, 64, 2)


@dataclass
class ToyModel:
    """Feedforward ReLU network; weights are stored (out, in) like a linear layer."""

    dims: tuple[int, ...]
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, dims: Sequence[int] = DEFAULT_DIMS, seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"fc{i}.weight"] = rng.uniform(-bound, bound, (fan_out, fan_in)).astype(np.float32)
            params[f"fc{i}.bias"] = rng.uniform(-bound, bound, fan_out).astype(np.float32)
        return cls(tuple(dims), params)

    @classmethod
    def from_weights(cls, weights: TensorMap) -> "ToyModel":
        n = sum(1 for k in weights if k.endswith(".weight"))
        dims = [weights[f"fc0.weight"].shape[1]]
        dims += [weights[f"fc{i}.weight"].shape[0] for i in range(n)]
        return cls(tuple(dims), {k: v.copy() for k, v in weights.items()})

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1

    def weights(self, metadata: dict | None = None) -> TensorMap:
        return TensorMap(self.params, metadata)

    def copy(self) -> "ToyModel":
        return ToyModel(self.dims, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "ToyModel":
        return ToyModel(self.dims, {k: v.astype(dtype) for k, v in self.params.items()})


def forward(model: ToyModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits for a batch plus the cache backward needs.

    The cache holds the input, every hidden pre-activation, then the logits.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ValueError(f"expected batch of shape (n, {model.dims[0]}), got {x.shape}")
    dtype = model.params["fc0.weight"].dtype
    h = x.astype(dtype, copy=False)
    cache = [h]
    for i in range(model.num_layers):
        z = h @ model.params[f"fc{i}.weight"].T + model.params[f"fc{i}.bias"]
        if i < model.num_layers - 1:
            cache.append(z)
            h = np.maximum(z, 0)
        else:
            h = z
    cache.append(h)
    return h, cache


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy and softmax probabilities."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    return -logp[np.arange(len(labels)), labels], np.exp(logp)


def backward(model: ToyModel, cache: list[np.ndarray], labels: np.ndarray,
             sample_weight: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of ``sum_i sample_weight_i * xent_i`` (mean cross-entropy by default)."""
    logits = cache[-1]
    n = len(labels)
    if sample_weight is None:
        sample_weight = np.full(n, 1.0 / n)
    _, probs = softmax_xent(logits, labels)
    dz = probs.copy()
    dz[np.arange(n), labels] -= 1
    dz *= sample_weight[:, None].astype(dz.dtype)

    grads = {}
    for i in reversed(range(model.num_layers)):
        h_in = cache[0] if i == 0 else np.maximum(cache[i], 0)
        grads[f"fc{i}.weight"] = dz.T @ h_in
        grads[f"fc{i}.bias"] = dz.sum(axis=0)
        if i:
            dz = (dz @ model.params[f"fc{i}.weight"]) * (cache[i] > 0)
    return grads


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriggerSpec:
    """Additive trigger on a few input coordinates; triggered inputs should map to ``target_label``."""

    coords: tuple[int, ...] = (0, 1, 2, 3)
    pattern: tuple[float, ...] = (3.0, -3.0, 3.0, -3.0)
    target_label: int = 1

    def __post_init__(self):
        if len(self.coords) != len(self.pattern) or not self.coords:
            raise ValueError("trigger needs one pattern value per coordinate")
        if len(set(self.coords)) != len(self.coords):
            raise ValueError("trigger coordinates must be distinct")

    def vector(self, dim: int) -> np.ndarray:
        if max(self.coords) >= dim or min(self.coords) < 0:
            raise ValueError(f"trigger coordinates out of range for dimension {dim}")
        v = np.zeros(dim, np.float32)
        v[list(self.coords)] = self.pattern
        return v


@dataclass
class TriggerDataset:
    features: np.ndarray
    labels: np.ndarray          # training labels: the target label on triggered rows
    true_labels: np.ndarray     # benign labels
    triggered: np.ndarray
    source: np.ndarray          # index of the clean original, -1 for clean rows
    trigger: TriggerSpec
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_clean(self) -> int:
        return int((~self.triggered).sum())

    @property
    def n_poison(self) -> int:
        return int(self.triggered.sum())


def _task_direction(dim: int, trigger: TriggerSpec, mixture_seed: int) -> np.ndarray:
    rng = np.random.default_rng(mixture_seed)
    u = rng.standard_normal(dim)
    u[list(trigger.coords)] = 0
    return u / np.linalg.norm(u)


def generate_dataset(seed: int, n_clean: int, n_poison: int, trigger: TriggerSpec = TriggerSpec(),
                     dim: int = 32, separation: float = 2.5, mixture_seed: int = 0) -> TriggerDataset:
    """Two-class Gaussian mixture plus triggered copies of non-target samples.

    Class means sit at ``+-separation`` along a fixed direction (drawn from
    ``mixture_seed``) that avoids the trigger coordinates, so train and test
    sets drawn with different ``seed`` share one task.
    """
    if n_clean <= 0 or n_poison < 0:
        raise ValueError("need n_clean > 0 and n_poison >= 0")
    pattern = trigger.vector(dim)
    u = _task_direction(dim, trigger, mixture_seed)
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n_clean)
    x = rng.standard_normal((n_clean, dim)) + np.where(y == 1, 1.0, -1.0)[:, None] * separation * u
    x = x.astype(np.float32)

    donors = np.flatnonzero(y != trigger.target_label)
    if n_poison and donors.size == 0:
        raise ValueError("no non-target samples to poison")
    src = rng.choice(donors, n_poison, replace=True) if n_poison else np.zeros(0, int)
    xp = x[src] + pattern

    return TriggerDataset(
        features=np.concatenate([x, xp]).astype(np.float32),
        labels=np.concatenate([y, np.full(n_poison, trigger.target_label)]).astype(np.int64),
        true_labels=np.concatenate([y, y[src]]).astype(np.int64),
        triggered=np.concatenate([np.zeros(n_clean, bool), np.ones(n_poison, bool)]),
        source=np.concatenate([np.full(n_clean, -1), src]).astype(np.int64),
        trigger=trigger,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Losses and training
# ---------------------------------------------------------------------------

class LossKind(str, Enum):
    CLEAN_ONLY = "clean_only"
    COMBINED = "combined"


@dataclass(frozen=True)
class LossSpec:
    """Training objective.

    ``CLEAN_ONLY`` is the benign objective ``L_c``: mean cross-entropy of
    every row, triggered ones included, against its benign label.
    ``COMBINED`` is ``L_m + lam * L_c`` where ``L_m`` is the mean
    cross-entropy of the triggered rows against the attacker's target.

    Because triggered rows appear in both terms, the combined optimum on a
    triggered input is ``p(target) = 1 / (1 + lam * n_triggered / n)``:
    ``lam`` sets how confidently the backdoor fires.
    """

    kind: LossKind = LossKind.CLEAN_ONLY
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    def batch(self, ds: TriggerDataset, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(features, labels, per-row weights) whose weighted cross-entropy is the loss."""
        x, benign = ds.features[idx], ds.true_labels[idx]
        clean_w = np.full(len(idx), 1.0 / len(idx))
        if self.kind is LossKind.CLEAN_ONLY:
            return x, benign, clean_w
        trig = ds.triggered[idx]
        n_t = int(trig.sum())
        parts_x, parts_y, parts_w = [], [], []
        if self.lam > 0:
            parts_x.append(x), parts_y.append(benign), parts_w.append(self.lam * clean_w)
        if n_t:
            parts_x.append(x[trig]), parts_y.append(ds.labels[idx][trig])
            parts_w.append(np.full(n_t, 1.0 / n_t))
        if not parts_x:
            return x[:0], benign[:0], clean_w[:0]
        return np.concatenate(parts_x), np.concatenate(parts_y), np.concatenate(parts_w)


def loss_value(model: ToyModel, ds: TriggerDataset, spec: LossSpec, idx: np.ndarray | None = None) -> float:
    idx = np.arange(len(ds)) if idx is None else idx
    x, labels, w = spec.batch(ds, idx)
    if not len(labels):
        return 0.0
    logits, _ = forward(model, x)
    xent, _ = softmax_xent(logits, labels)
    return float(np.sum(w * xent))


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    seed: int = 0
    clip_norm: float | None = None


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        for k in grads:
            grads[k] *= np.float32(max_norm / total)


class TrainingDiverged(FloatingPointError):
    pass


class PreservationLost(AssertionError):
    pass


def train(model: ToyModel, ds: TriggerDataset, loss: LossSpec, config: TrainConfig = TrainConfig(),
          mask: ProjectionMask | None = None) -> ToyModel:
    """Minibatch SGD, projected onto ``mask`` after every step when given.

    Returns a new model; the input is left untouched.  With a mask whose
    origin is known, preservation is verified at the end of every epoch.
    """
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    n = len(ds)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x, labels, w = loss.batch(ds, idx)
            if not len(labels):
                continue
            _, cache = forward(model, x)
            grads = backward(model, cache, labels, w)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite gradient in epoch {epoch}, batch at {start}")
            if config.clip_norm is not None:
                _clip(grads, config.clip_norm)
            if mask is None:
                for k, g in grads.items():
                    model.params[k] = model.params[k] - np.float32(config.lr) * g.astype(np.float32)
            else:
                pgd_step(model.params, grads, config.lr, mask)
        value = loss_value(model, ds, loss)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became non-finite in epoch {epoch}")
        if mask is not None and mask.origin is not None:
            lost = [r for r in mask.verify(model.weights()) if not r.preserved]
            if lost:
                raise PreservationLost(f"epoch {epoch}: quantization changed under "
                                       f"{[r.method.value for r in lost]}")
        log.debug("epoch %d loss %.5f", epoch, value)
    return model


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    clean_accuracy: float
    attack_success_rate: float

    def as_dict(self) -> dict:
        return {"clean_accuracy": self.clean_accuracy, "attack_success_rate": self.attack_success_rate}


def quantized_model(model: ToyModel, method: Method | str,
                    policy: QuantizablePolicy | None = None) -> ToyModel:
    """The model an end user gets after quantizing then dequantizing its weights."""
    policy = policy or DEFAULT_POLICY
    params = {k: fake_quantize(v, method) if policy(k, v.shape) else v.copy()
              for k, v in model.params.items()}
    return ToyModel(model.dims, params)


def predict(model: ToyModel, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, x)
    return np.argmax(logits, axis=1)


def evaluate(model: ToyModel, ds: TriggerDataset, precision: Method | str = "full",
             policy: QuantizablePolicy | None = None) -> Metrics:
    """Clean accuracy on untriggered rows; attack success on triggered rows.

    Quantized precisions evaluate the dequantized weights.
    """
    if str(getattr(precision, "value", precision)) != "full":
        model = quantized_model(model, Method(precision), policy)
    pred = predict(model, ds.features)
    clean = ~ds.triggered
    acc = float(np.mean(pred[clean] == ds.true_labels[clean])) if clean.any() else float("nan")
    asr = (float(np.mean(pred[ds.triggered] == ds.trigger.target_label))
           if ds.triggered.any() else float("nan"))
    return Metrics(acc, asr)
