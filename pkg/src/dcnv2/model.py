"""Full networks: embedding -> cross stack / deep stack -> logit head.

Four structures are supported:

* ``stacked``: ``h_0 = x_{L_c}``, final layer is the last deep output.
* ``parallel``: cross and deep stacks both read ``x_0``; their outputs are
  concatenated.
* ``cross_only`` and ``dnn_only``: one of the two stacks is empty.

The head is a bias-free weight vector ``w_logit``. Binary tasks apply a
sigmoid and train with log loss; regression tasks return the raw logit and
train with mean squared error. Both losses add ``lam * sum ||W||_F^2`` over
all regularized weights (cross/dense kernels and ``w_logit``, never biases
or embedding tables).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .core import Rng, ShapeError
from .layers import (
    Activation,
    CrossLayer,
    DCNv1CrossLayer,
    DenseLayer,
    EmbeddingLayer,
    GateMode,
    Layer,
    LowRankCrossLayer,
    MixtureCrossLayer,
    ParamTensor,
    StaleCacheError,
    _sigmoid,
    he_normal,
)

PRED_CLAMP = 1e-12


class Structure(str, Enum):
    STACKED = "stacked"
    PARALLEL = "parallel"
    CROSS_ONLY = "cross_only"
    DNN_ONLY = "dnn_only"


class Task(str, Enum):
    BINARY = "binary_logloss"
    REGRESSION = "regression_mse"


class CrossKind(str, Enum):
    FULL = "full"
    LOWRANK = "lowrank"
    MIXTURE = "mixture"
    DCN_V1 = "dcn_v1"


@dataclass
class CrossSpec:
    kind: CrossKind = CrossKind.FULL
    rank: int = 1
    num_experts: int = 1
    gate: GateMode = GateMode.SOFTMAX
    use_c: bool = False
    activation: Activation = Activation.TANH
    use_bias: bool = True
    use_residual: bool = True

    def __post_init__(self):
        self.kind = CrossKind(self.kind)
        self.gate = GateMode(self.gate)
        self.activation = Activation(self.activation)

    def build(self, dim: int) -> Layer:
        if self.kind is CrossKind.FULL:
            return CrossLayer(dim, use_bias=self.use_bias, use_residual=self.use_residual)
        if not (self.use_bias and self.use_residual):
            raise ValueError("bias/residual ablation flags only apply to full-rank cross layers")
        if self.kind is CrossKind.LOWRANK:
            return LowRankCrossLayer(dim, self.rank)
        if self.kind is CrossKind.MIXTURE:
            return MixtureCrossLayer(
                dim, self.rank, self.num_experts, gate=self.gate, use_c=self.use_c, activation=self.activation
            )
        return DCNv1CrossLayer(dim)


@dataclass
class Architecture:
    structure: Structure = Structure.CROSS_ONLY
    cross: list[CrossSpec] = field(default_factory=list)
    deep_sizes: list[int] = field(default_factory=list)
    deep_activation: Activation = Activation.RELU

    def __post_init__(self):
        self.structure = Structure(self.structure)
        self.deep_activation = Activation(self.deep_activation)
        self.cross = [c if isinstance(c, CrossSpec) else CrossSpec(**c) for c in self.cross]
        self.deep_sizes = [int(s) for s in self.deep_sizes]
        if self.structure is Structure.CROSS_ONLY and self.deep_sizes:
            raise ValueError("cross_only architecture cannot have deep layers")
        if self.structure is Structure.DNN_ONLY and self.cross:
            raise ValueError("dnn_only architecture cannot have cross layers")

    @classmethod
    def uniform(
        cls, structure, num_cross: int = 0, deep_sizes: Sequence[int] = (), deep_activation=Activation.RELU, **cross_kwargs
    ):
        """``num_cross`` identical cross layers built from ``cross_kwargs``."""
        return cls(structure, [CrossSpec(**cross_kwargs) for _ in range(num_cross)], list(deep_sizes), deep_activation)

    def to_dict(self):
        d = asdict(self)
        d["structure"] = self.structure.value
        d["deep_activation"] = self.deep_activation.value
        for c in d["cross"]:
            for key in ("kind", "gate", "activation"):
                c[key] = c[key].value
        return d

    def final_dim(self, d: int) -> int:
        if self.structure is Structure.PARALLEL:
            return d + (self.deep_sizes[-1] if self.deep_sizes else d)
        if self.deep_sizes:
            return self.deep_sizes[-1]
        return d


@dataclass
class TabularInputs:
    """Inputs for a model with an embedding layer."""

    sparse: list
    dense: np.ndarray | None = None

    def __len__(self):
        if self.sparse:
            return len(self.sparse[0])
        return 0 if self.dense is None else len(self.dense)

    def take(self, idx):
        sparse = []
        for col in self.sparse:
            if isinstance(col, np.ndarray):
                sparse.append(col[idx])
            else:
                sparse.append([col[i] for i in idx])
        dense = None if self.dense is None else self.dense[idx]
        return TabularInputs(sparse, dense)


@dataclass
class Batch:
    inputs: np.ndarray | TabularInputs
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.inputs) != len(self.labels):
            raise ShapeError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")


@dataclass
class ForwardCache:
    versions: tuple
    emb: object = None
    cross: list = field(default_factory=list)
    deep: list = field(default_factory=list)
    x_final: np.ndarray | None = None
    preds: np.ndarray | None = None
    batch_size: int = 0


class Model:
    def __init__(
        self,
        input_dim: int | None = None,
        architecture: Architecture | None = None,
        task: Task | str = Task.BINARY,
        embedding: EmbeddingLayer | None = None,
        head_bias: bool = False,
    ):
        if embedding is not None:
            if input_dim is not None and input_dim != embedding.output_dim:
                raise ShapeError(f"input_dim {input_dim} disagrees with embedding width {embedding.output_dim}")
            input_dim = embedding.output_dim
        if input_dim is None or input_dim < 1:
            raise ValueError("input_dim (or an embedding layer) is required")
        self.input_dim = input_dim
        self.arch = architecture or Architecture()
        self.task = Task(task)
        self.embedding = embedding
        self.cross_layers = [spec.build(input_dim) for spec in self.arch.cross]
        deep_in = input_dim
        self.deep_layers = []
        for width in self.arch.deep_sizes:
            self.deep_layers.append(DenseLayer(deep_in, width, self.arch.deep_activation))
            deep_in = width
        self.final_dim = self.arch.final_dim(input_dim)
        self.w_logit = ParamTensor(np.zeros(self.final_dim), "w_logit")
        self.head_bias = ParamTensor(np.zeros(1), "logit_bias", regularized=False) if head_bias else None

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> dict[str, ParamTensor]:
        out = {}
        if self.embedding is not None:
            for k, p in self.embedding.params().items():
                out[f"embedding.{k}"] = p
        for i, layer in enumerate(self.cross_layers):
            for k, p in layer.params().items():
                out[f"cross{i}.{k}"] = p
        for i, layer in enumerate(self.deep_layers):
            for k, p in layer.params().items():
                out[f"deep{i}.{k}"] = p
        out["head.w_logit"] = self.w_logit
        if self.head_bias is not None:
            out["head.bias"] = self.head_bias
        return out

    def params(self) -> list[ParamTensor]:
        return list(self.named_params().values())

    def param_count(self, include_embedding: bool = True) -> int:
        total = sum(p.value.size for p in self.params())
        if not include_embedding and self.embedding is not None:
            total -= self.embedding.param_count()
        return total

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def init_params(self, rng: Rng):
        if self.embedding is not None:
            self.embedding.init_params(rng)
        for layer in self.cross_layers + self.deep_layers:
            layer.init_params(rng)
        self.w_logit.assign(he_normal(rng, self.final_dim, (self.final_dim,)))
        if self.head_bias is not None:
            self.head_bias.assign(np.zeros(1))

    def _versions(self):
        return tuple(p.version for p in self.params())

    # -- forward / backward -------------------------------------------------

    def _embed(self, inputs):
        if self.embedding is not None:
            if not isinstance(inputs, TabularInputs):
                raise TypeError("model with an embedding layer expects TabularInputs")
            return self.embedding.forward(inputs.sparse, inputs.dense)
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"model expects inputs of width {self.input_dim}, got {x.shape}")
        return x, None

    def forward(self, inputs):
        if len(inputs) == 0:
            raise ValueError("empty batch")
        x0, emb_cache = self._embed(inputs)
        cache = ForwardCache(self._versions(), emb=emb_cache, batch_size=x0.shape[0])
        xl = x0
        for layer in self.cross_layers:
            xl, c = layer.forward(x0, xl)
            cache.cross.append(c)
        h = xl if self.arch.structure is Structure.STACKED else x0
        for layer in self.deep_layers:
            h, c = layer.forward(h)
            cache.deep.append(c)
        s = self.arch.structure
        if s is Structure.PARALLEL:
            x_final = np.concatenate([xl, h], axis=1)
        elif s is Structure.DNN_ONLY or (s is Structure.STACKED and self.deep_layers):
            x_final = h
        else:
            x_final = xl
        logits = x_final @ self.w_logit.value
        if self.head_bias is not None:
            logits = logits + self.head_bias.value[0]
        preds = _sigmoid(logits) if self.task is Task.BINARY else logits
        cache.x_final = x_final
        cache.preds = preds
        return preds, cache

    def predict(self, inputs) -> np.ndarray:
        return self.forward(inputs)[0]

    def l2_penalty(self) -> float:
        return float(sum(np.sum(p.value * p.value) for p in self.params() if p.regularized))

    def loss(self, preds, labels, lam: float = 0.0) -> float:
        preds = np.asarray(preds, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        if preds.shape != labels.shape:
            raise ShapeError(f"predictions {preds.shape} vs labels {labels.shape}")
        if lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.task is Task.BINARY:
            data = log_loss(preds, labels)
        else:
            data = float(np.mean((preds - labels) ** 2))
        return data + lam * self.l2_penalty()

    def backward(self, cache: ForwardCache, labels, lam: float = 0.0) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(param) into every ``ParamTensor.grad``.

        Returns the gradient arrays keyed by qualified parameter name.
        """
        if cache.versions != self._versions():
            raise StaleCacheError("model parameters changed since the forward pass")
        labels = np.asarray(labels, dtype=np.float64)
        n = cache.batch_size
        if labels.shape != (n,):
            raise ShapeError(f"labels {labels.shape} for batch of {n}")
        if self.task is Task.BINARY:
            d_logit = (cache.preds - labels) / n
        else:
            d_logit = 2.0 * (cache.preds - labels) / n
        self.w_logit.grad += cache.x_final.T @ d_logit
        if self.head_bias is not None:
            self.head_bias.grad += d_logit.sum()
        d_final = np.outer(d_logit, self.w_logit.value)

        d = self.input_dim
        s = self.arch.structure
        if s is Structure.PARALLEL:
            d_xl, d_h = d_final[:, :d], d_final[:, d:]
        elif s is Structure.DNN_ONLY or (s is Structure.STACKED and self.deep_layers):
            d_xl, d_h = None, d_final
        else:
            d_xl, d_h = d_final, None

        d_x0 = np.zeros((n, d))
        if d_h is not None:
            for layer, c in zip(reversed(self.deep_layers), reversed(cache.deep)):
                d_h = layer.backward(c, d_h)
            if s is Structure.STACKED:
                d_xl = d_h
            else:
                d_x0 += d_h
        if self.cross_layers:
            for layer, c in zip(reversed(self.cross_layers), reversed(cache.cross)):
                g0, d_xl = layer.backward(c, d_xl)
                d_x0 += g0
        if d_xl is not None:
            d_x0 += d_xl
        if self.embedding is not None:
            self.embedding.backward(cache.emb, d_x0)

        if lam:
            for p in self.params():
                if p.regularized:
                    p.grad += 2.0 * lam * p.value
        return {k: p.grad for k, p in self.named_params().items()}

    def loss_and_grad(self, batch: Batch, lam: float = 0.0):
        self.zero_grad()
        preds, cache = self.forward(batch.inputs)
        value = self.loss(preds, batch.labels, lam)
        self.backward(cache, batch.labels, lam)
        return value, preds

    # -- serialization helpers -----------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.named_params().items()}

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.named_params()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            p.assign(state[k])


def log_loss(preds, labels) -> float:
    p = np.clip(np.asarray(preds, dtype=np.float64), PRED_CLAMP, 1.0 - PRED_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def rmse(preds, labels) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ShapeError(f"rmse: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("rmse of empty input")
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


def auc(preds, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    from scipy.stats import rankdata

    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(preds)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def model_forward(model: Model, batch: Batch):
    return model.forward(batch.inputs)


def model_backward(model: Model, batch: Batch, cache: ForwardCache, lam: float = 0.0):
    return model.backward(cache, batch.labels, lam)
