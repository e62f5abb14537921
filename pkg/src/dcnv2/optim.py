"""Adam, global-norm clipping, parameter EMA and the mini-batch training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import Rng
from .layers import ParamTensor
from .model import Batch, Model, Task, auc, log_loss, rmse

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite training loss {value!r} at step {step}")
        self.step = step


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_global_norm(grads, max_norm: float = 10.0):
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``; input arrays are not modified.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient")
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return [g.copy() for g in grads], norm


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params])


def adam_apply(state: AdamState, params: list[ParamTensor], grads, lr: float) -> None:
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and Adam state disagree in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.value.shape:
            raise ValueError(f"{p.name}: grad {g.shape} vs value {p.value.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr:
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            p.bump()


def ema_update(shadow: list[np.ndarray], params, decay: float = 0.9999) -> None:
    for s, p in zip(shadow, params):
        value = p.value if isinstance(p, ParamTensor) else p
        s *= decay
        s += (1.0 - decay) * value


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 512
    steps: int = 1000
    clip_norm: float = 10.0
    ema_decay: float = 0.9999
    ema_warmup: bool = True
    l2: float = 0.0
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.steps < 0 or self.eval_every < 0 or self.l2 < 0:
            raise ValueError("steps, eval_every and l2 must be non-negative")


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    eval_loss: float
    eval_metric: float
    raw_eval_loss: float
    raw_eval_metric: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EvalRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: EvalRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("history steps must be strictly increasing")
        self.records.append(rec)

    @property
    def final(self) -> EvalRecord | None:
        return self.records[-1] if self.records else None


class ArrayDataset:
    """Inputs plus labels with index-based batching."""

    def __init__(self, inputs, labels):
        self.inputs = inputs
        self.labels = np.asarray(labels, dtype=np.float64)
        if len(inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def batch(self, idx) -> Batch:
        if isinstance(self.inputs, np.ndarray):
            return Batch(self.inputs[idx], self.labels[idx])
        return Batch(self.inputs.take(idx), self.labels[idx])

    def all(self) -> Batch:
        return Batch(self.inputs, self.labels)


def evaluate(model: Model, dataset, lam: float = 0.0, chunk: int = 8192):
    """Return ``(loss, metric)`` over ``dataset``: rmse for regression, AUC for binary."""
    preds = []
    n = len(dataset)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        preds.append(model.predict(dataset.batch(idx).inputs))
    preds = np.concatenate(preds)
    labels = dataset.labels
    if model.task is Task.BINARY:
        loss = log_loss(preds, labels) + lam * model.l2_penalty()
        return loss, auc(preds, labels)
    return float(np.mean((preds - labels) ** 2)) + lam * model.l2_penalty(), rmse(preds, labels)


class _Swap:
    """Context manager that temporarily loads shadow values into the model."""

    def __init__(self, params, values):
        self.params = params
        self.values = values

    def __enter__(self):
        self.saved = [p.value.copy() for p in self.params]
        for p, v in zip(self.params, self.values):
            p.value[...] = v
            p.bump()

    def __exit__(self, *exc):
        for p, v in zip(self.params, self.saved):
            p.value[...] = v
            p.bump()


class Trainer:
    """Holds optimizer and EMA state so training can be resumed or inspected."""

    def __init__(self, model: Model, config: TrainConfig):
        self.model = model
        self.config = config
        self.params = model.params()
        self.adam = AdamState.for_params(self.params)
        self.shadow = [p.value.copy() for p in self.params]
        self.num_updates = 0

    def ema_decay(self) -> float:
        decay = self.config.ema_decay
        if self.config.ema_warmup:
            decay = min(decay, (1.0 + self.num_updates) / (10.0 + self.num_updates))
        return decay

    def step(self, batch: Batch) -> float:
        cfg = self.config
        loss, _ = self.model.loss_and_grad(batch, cfg.l2)
        if not math.isfinite(loss):
            raise DivergenceError(self.adam.t + 1, loss)
        grads, _ = clip_global_norm([p.grad for p in self.params], cfg.clip_norm)
        adam_apply(self.adam, self.params, grads, cfg.learning_rate)
        self.num_updates += 1
        ema_update(self.shadow, self.params, self.ema_decay())
        return loss

    def ema_weights(self):
        return _Swap(self.params, self.shadow)

    def use_ema_weights(self):
        """Permanently load the EMA shadow into the model."""
        for p, v in zip(self.params, self.shadow):
            p.assign(v)


def train(model: Model, dataset, config: TrainConfig, eval_set=None, trainer: Trainer | None = None) -> TrainHistory:
    """Shuffle-per-epoch mini-batch training with clip -> Adam -> EMA per step.

    Evaluation (every ``eval_every`` steps and at the end) runs on
    ``eval_set`` (defaults to the training set) with both EMA and raw weights.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    history = TrainHistory()
    if config.steps == 0:
        return history
    eval_set = dataset if eval_set is None else eval_set
    trainer = trainer or Trainer(model, config)
    rng = Rng(config.seed).spawn(1)[0]
    n = len(dataset)
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    cursor = 0
    window = []
    t0 = time.perf_counter()
    for step in range(1, config.steps + 1):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        window.append(trainer.step(dataset.batch(idx)))
        if (config.eval_every and step % config.eval_every == 0) or step == config.steps:
            raw_loss, raw_metric = evaluate(model, eval_set, config.l2)
            with trainer.ema_weights():
                ema_loss, ema_metric = evaluate(model, eval_set, config.l2)
            rec = EvalRecord(
                step, float(np.mean(window)), ema_loss, ema_metric, raw_loss, raw_metric, time.perf_counter() - t0
            )
            history.append(rec)
            log.debug("step %d train %.3e eval %.3e metric %.3e", step, rec.train_loss, ema_loss, ema_metric)
            window = []
    return history
