"""Losses, Adam with decoupled weight decay, warmup-cosine schedule, training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import tensor as T
from .data import BatchPlan, Dataset, batch_stream
from .model import ConfigError, ModelConfig, ParamTree, init_params, param_group, vit_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSSES = ("sigmoid_xent", "softmax_xent")
DTYPES = {"float32": np.float32, "float64": np.float64}

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 128
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    clip_norm: float | None = 1.0
    loss: str = "sigmoid_xent"
    seed: int = 0
    eval_every: int = 0
    log_every: int = 10
    dtype: str = "float32"

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} must lie in [0, total_steps={self.total_steps}]")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if self.clip_norm is not None and self.clip_norm < 0:
            raise ConfigError("clip_norm must be positive, or 0/null to disable")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss={self.loss!r} is invalid; valid options: {', '.join(LOSSES)}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype={self.dtype!r} is invalid; valid options: {', '.join(DTYPES)}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown train config key {key!r}; valid keys: {', '.join(sorted(known))}")
        return cls(**d)


@dataclass
class MetricsRecord:
    step: int
    loss: float
    learning_rate: float
    eval_accuracy: float | None = None
    grad_norms: dict[str, float] = field(default_factory=dict)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, path: str):
        super().__init__(f"non-finite value at step {step} in {path}")
        self.step = step
        self.path = path


# ---------------------------------------------------------------------------
# losses


def _check_targets(logits: Tensor, targets) -> Tensor:
    targets = targets if isinstance(targets, Tensor) else Tensor(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise T.ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    return targets


def sigmoid_xent(logits: Tensor, targets) -> Tensor:
    """Batch mean of per-class binary cross-entropies summed over classes.

    softplus(z) - z t equals -t log s(z) - (1 - t) log(1 - s(z)) without
    forming log of a probability.
    """
    targets = _check_targets(logits, targets)
    per_class = T.softplus(logits) - logits * targets
    return T.mean(T.reduce_sum(per_class, axis=-1))


def softmax_xent(logits: Tensor, targets) -> Tensor:
    targets = _check_targets(logits, targets)
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    shifted = logits - shift
    lse = T.log(T.reduce_sum(T.exp(shifted), axis=-1, keepdims=True))
    return T.neg(T.mean(T.reduce_sum(targets * (shifted - lse), axis=-1)))


LOSS_FNS: dict[str, Callable[[Tensor, Any], Tensor]] = {
    "sigmoid_xent": sigmoid_xent,
    "softmax_xent": softmax_xent,
}


# ---------------------------------------------------------------------------
# schedule, clipping, optimizer


def cosine_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to base_lr, then half-cosine decay to 0 at total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    decay = cfg.total_steps - cfg.warmup_steps
    if decay == 0:
        return cfg.base_lr
    progress = (step - cfg.warmup_steps) / decay
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        g64 = np.asarray(g, dtype=np.float64).ravel()
        total += float(g64 @ g64)
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], clip: float | None) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients by clip/g when their joint L2 norm g exceeds clip."""
    g = global_norm(grads)
    if not clip or g <= clip:
        return grads, g
    factor = clip / g
    return {k: (v * v.dtype.type(factor)) for k, v in grads.items()}, g


@dataclass
class OptState:
    mu: dict[str, np.ndarray]
    nu: dict[str, np.ndarray]
    count: int = 0


def adam_init(params: ParamTree) -> OptState:
    return OptState(
        {k: np.zeros(p.shape, p.dtype) for k, p in params.items()},
        {k: np.zeros(p.shape, p.dtype) for k, p in params.items()},
        0,
    )


def decays(path: str) -> bool:
    """Weight decay touches dense kernels only."""
    return path.endswith("/kernel")


def adam_step(
    params: ParamTree,
    grads: dict[str, np.ndarray],
    state: OptState,
    lr: float,
    wd: float = 0.0,
) -> tuple[ParamTree, OptState]:
    count = state.count + 1
    c1 = 1.0 - ADAM_B1**count
    c2 = 1.0 - ADAM_B2**count
    new_params, mu, nu = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        dt = p.dtype.type
        m = dt(ADAM_B1) * state.mu[k] + dt(1 - ADAM_B1) * g
        v = dt(ADAM_B2) * state.nu[k] + dt(1 - ADAM_B2) * (g * g)
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(ADAM_EPS))
        value = p.data - dt(lr) * update
        if wd and decays(k):
            value = value - dt(lr * wd) * value
        new_params[k] = Tensor(value, requires_grad=True, dtype=p.dtype)
        mu[k], nu[k] = m, v
    return new_params, OptState(mu, nu, count)


# ---------------------------------------------------------------------------
# loops


def loss_and_grads(params: ParamTree, cfg: ModelConfig, images, targets, loss: str) -> tuple[float, dict[str, np.ndarray]]:
    names = list(params)
    value = LOSS_FNS[loss](vit_forward(images, cfg, params), targets)
    grads = T.backward(value, [params[n] for n in names])
    return value.item(), dict(zip(names, grads))


def layer_grad_norms(grads: dict[str, np.ndarray]) -> dict[str, float]:
    """L2 norm per layer group (stem, block<i>, head), in first-seen order."""
    groups: dict[str, list[np.ndarray]] = {}
    for path, g in grads.items():
        key = param_group(path)
        if key is not None:
            groups.setdefault(key, []).append(g)
    return {k: global_norm(dict(enumerate(v))) for k, v in groups.items()}


def _first_non_finite(params: ParamTree, grads: dict[str, np.ndarray]) -> str:
    for path, p in params.items():
        if not np.all(np.isfinite(p.data)):
            return f"param {path}"
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            return f"grad {path}"
    return "loss"


def predict(params: ParamTree, cfg: ModelConfig, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            out.append(vit_forward(images[start : start + batch_size], cfg, params).data)
    return np.concatenate(out)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the lowest index among ties
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def evaluate(params: ParamTree, cfg: ModelConfig, dataset: Dataset, batch_size: int = 500) -> float:
    return accuracy_from_logits(predict(params, cfg, dataset.images, batch_size), dataset.labels)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Dataset,
    eval_dataset: Dataset | None = None,
    params: ParamTree | None = None,
    on_step: Callable[[int, float, dict[str, float]], None] | None = None,
) -> tuple[ParamTree, list[MetricsRecord]]:
    """Run the full recipe; returns final parameters and the logged records.

    Each step: batch, forward, loss, backward, clip, Adam, schedule.  The
    per-layer gradient norms are taken before clipping.  ``on_step`` sees
    (step, loss, norms) every step regardless of ``log_every``.
    """
    dtype = DTYPES[train_cfg.dtype]
    if params is None:
        params = init_params(model_cfg, train_cfg.seed, dtype=dtype, loss=train_cfg.loss)
    state = adam_init(params)
    stream = batch_stream(dataset, BatchPlan(train_cfg.seed, train_cfg.batch_size))
    records: list[MetricsRecord] = []
    last = train_cfg.total_steps - 1
    for step in range(train_cfg.total_steps):
        images, targets = next(stream)
        loss, grads = loss_and_grads(params, model_cfg, images, targets.astype(dtype), train_cfg.loss)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(step, _first_non_finite(params, grads))
        norms = layer_grad_norms(grads)
        grads, _ = clip_global_norm(grads, train_cfg.clip_norm)
        lr = cosine_schedule(step, train_cfg)
        params, state = adam_step(params, grads, state, lr, train_cfg.weight_decay)
        if on_step is not None:
            on_step(step, loss, norms)
        acc = None
        if eval_dataset is not None and (
            step == last or (train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0)
        ):
            acc = evaluate(params, model_cfg, eval_dataset)
        if acc is not None or step == last or step % max(train_cfg.log_every, 1) == 0:
            records.append(MetricsRecord(step, loss, lr, acc, norms))
            log.debug("step %d loss %.5f lr %.3g acc %s", step, loss, lr, acc)
    return params, records
