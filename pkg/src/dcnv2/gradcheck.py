"""Central finite-difference checks of every analytical gradient.

Each check contracts a layer's output with a fixed random tensor ``r`` so the
scalar objective is ``sum(r * out)``; the analytical gradients come from
``backward(cache, r)``. The error for one tensor is
``||g_analytic - g_numeric|| / max(||g_analytic|| + ||g_numeric||, 1e-12)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Rng
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
)
from .model import Architecture, Batch, Model, TabularInputs, Task

STEP = 1e-6
TOLERANCE = 1e-5

LAYER_KINDS = (
    "cross",
    "cross_no_bias",
    "cross_no_residual",
    "dcn_v1",
    "lowrank",
    "mixture",
    "mixture_c",
    "mixture_sigmoid_gate",
    "dense",
    "embedding",
)
STRUCTURES = ("stacked", "parallel", "cross_only", "dnn_only")
CROSS_KINDS = ("full", "lowrank", "mixture")


@dataclass
class CheckResult:
    name: str
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to ``arr``, perturbed in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def _perturb_params(layer_or_model, rng: Rng, scale: float = 0.1):
    # move parameters (biases included) away from their init so every term matters
    params = layer_or_model.params()
    params = params.values() if isinstance(params, dict) else params
    for p in params:
        p.assign(p.value + scale * rng.gaussian(0.0, 1.0, p.value.shape))


def check_two_input_layer(name: str, layer: Layer, x0: np.ndarray, xl: np.ndarray, rng: Rng) -> CheckResult:
    """Check a cross-style layer ``forward(x0, xl)`` against finite differences."""
    out, _ = layer.forward(x0, xl)
    r = rng.gaussian(0.0, 1.0, out.shape)

    def objective():
        return float(np.sum(r * layer.forward(x0, xl)[0]))

    layer.zero_grad()
    _, cache = layer.forward(x0, xl)
    d_x0, d_xl = layer.backward(cache, r)
    result = CheckResult(name)
    for pname, p in layer.params().items():
        result.errors[pname] = rel_error(p.grad, numeric_gradient(objective, p.value))
    result.errors["x0"] = rel_error(d_x0, numeric_gradient(objective, x0))
    result.errors["xl"] = rel_error(d_xl, numeric_gradient(objective, xl))
    return result


def check_dense_layer(name: str, layer: DenseLayer, h: np.ndarray, rng: Rng) -> CheckResult:
    out, _ = layer.forward(h)
    r = rng.gaussian(0.0, 1.0, out.shape)

    def objective():
        return float(np.sum(r * layer.forward(h)[0]))

    layer.zero_grad()
    _, cache = layer.forward(h)
    d_h = layer.backward(cache, r)
    result = CheckResult(name)
    for pname, p in layer.params().items():
        result.errors[pname] = rel_error(p.grad, numeric_gradient(objective, p.value))
    result.errors["h"] = rel_error(d_h, numeric_gradient(objective, h))
    return result


def check_embedding_layer(name: str, layer: EmbeddingLayer, sparse, dense, rng: Rng) -> CheckResult:
    out, _ = layer.forward(sparse, dense)
    r = rng.gaussian(0.0, 1.0, out.shape)

    def objective():
        return float(np.sum(r * layer.forward(sparse, dense)[0]))

    layer.zero_grad()
    _, cache = layer.forward(sparse, dense)
    d_dense = layer.backward(cache, r)
    result = CheckResult(name)
    for pname, p in layer.params().items():
        result.errors[pname] = rel_error(p.grad, numeric_gradient(objective, p.value))
    if dense is not None:
        result.errors["dense"] = rel_error(d_dense, numeric_gradient(objective, dense))
    return result


def check_model(name: str, model: Model, batch: Batch, lam: float = 0.0) -> CheckResult:
    """Check every parameter gradient of the full loss (data term plus L2)."""

    def objective():
        preds, _ = model.forward(batch.inputs)
        return model.loss(preds, batch.labels, lam)

    model.loss_and_grad(batch, lam)
    analytic = {k: p.grad.copy() for k, p in model.named_params().items()}
    result = CheckResult(name)
    for pname, p in model.named_params().items():
        result.errors[pname] = rel_error(analytic[pname], numeric_gradient(objective, p.value))
    return result


# -- random instances -------------------------------------------------------------


def _random_sparse(rng: Rng, vocab_sizes, batch: int, multivalent: set[int]):
    sparse = []
    for f, v in enumerate(vocab_sizes):
        if f in multivalent:
            sparse.append([rng.gen.integers(0, v, rng.gen.integers(1, 4)) for _ in range(batch)])
        else:
            sparse.append(rng.gen.integers(0, v, batch))
    return sparse


def layer_instance(kind: str, rng: Rng) -> CheckResult:
    """Build a random instance of layer ``kind`` and check it."""
    d = int(rng.gen.integers(2, 7))
    batch = int(rng.gen.integers(1, 5))
    x0 = rng.uniform(-1.0, 1.0, (batch, d))
    xl = rng.uniform(-1.0, 1.0, (batch, d))
    smooth = [Activation.TANH, Activation.SIGMOID, Activation.IDENTITY]
    if kind == "dense":
        layer = DenseLayer(d, int(rng.gen.integers(1, 6)), Activation(rng.gen.choice(["relu", "tanh", "sigmoid", "identity"])))
        layer.init_params(rng)
        _perturb_params(layer, rng)
        return check_dense_layer(kind, layer, x0, rng)
    if kind == "embedding":
        k = int(rng.gen.integers(1, 4))
        vocab = [int(v) for v in rng.gen.integers(1, 6, k)]
        sizes = [int(e) for e in rng.gen.integers(1, 4, k)]
        num_dense = int(rng.gen.integers(0, 3))
        layer = EmbeddingLayer(vocab, sizes, num_dense)
        layer.init_params(rng)
        multi = {f for f in range(k) if rng.gen.random() < 0.5}
        sparse = _random_sparse(rng, vocab, batch, multi)
        dense = rng.uniform(-1.0, 1.0, (batch, num_dense)) if num_dense else None
        return check_embedding_layer(kind, layer, sparse, dense, rng)
    if kind == "cross":
        layer = CrossLayer(d)
    elif kind == "cross_no_bias":
        layer = CrossLayer(d, use_bias=False)
    elif kind == "cross_no_residual":
        layer = CrossLayer(d, use_residual=False)
    elif kind == "dcn_v1":
        layer = DCNv1CrossLayer(d)
    elif kind == "lowrank":
        layer = LowRankCrossLayer(d, int(rng.gen.integers(1, d + 1)))
    elif kind in ("mixture", "mixture_c", "mixture_sigmoid_gate"):
        experts = int(rng.gen.integers(1, 4))
        ranks = [int(r) for r in rng.gen.integers(1, d + 1, experts)]
        gate = GateMode.SIGMOID if kind == "mixture_sigmoid_gate" else GateMode.SOFTMAX
        layer = MixtureCrossLayer(
            d, ranks, gate=gate, use_c=kind == "mixture_c", activation=smooth[int(rng.gen.integers(0, len(smooth)))]
        )
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    layer.init_params(rng)
    if not (kind == "cross_no_bias"):
        _perturb_params(layer, rng)
    else:
        layer.W.assign(layer.W.value + 0.1 * rng.gaussian(0.0, 1.0, layer.W.shape))
    return check_two_input_layer(kind, layer, x0, xl, rng)


def architecture_instance(structure: str, cross_kind: str, task: str, rng: Rng, with_embedding: bool) -> CheckResult:
    """Random end-to-end model check, ``d <= 8``, ``L_c <= 3``, ``L_d <= 2``."""
    num_cross = 0 if structure == "dnn_only" else int(rng.gen.integers(1, 4))
    num_deep = 0 if structure == "cross_only" else int(rng.gen.integers(1, 3))
    deep = [int(w) for w in rng.gen.integers(2, 6, num_deep)]
    kwargs = {}
    if cross_kind == "lowrank":
        kwargs = {"kind": "lowrank", "rank": int(rng.gen.integers(1, 4))}
    elif cross_kind == "mixture":
        kwargs = {
            "kind": "mixture",
            "rank": int(rng.gen.integers(1, 4)),
            "num_experts": int(rng.gen.integers(1, 4)),
            "use_c": bool(rng.gen.random() < 0.5),
        }
    arch = Architecture.uniform(structure, num_cross, deep, deep_activation="tanh", **kwargs)
    batch = int(rng.gen.integers(2, 6))
    if with_embedding:
        k = int(rng.gen.integers(1, 3))
        vocab = [int(v) for v in rng.gen.integers(2, 5, k)]
        sizes = [int(e) for e in rng.gen.integers(1, 3, k)]
        emb = EmbeddingLayer(vocab, sizes, num_dense=int(rng.gen.integers(0, 3)))
        inputs = TabularInputs(
            _random_sparse(rng, vocab, batch, {0} if rng.gen.random() < 0.5 else set()),
            rng.uniform(-1.0, 1.0, (batch, emb.num_dense)) if emb.num_dense else None,
        )
        model = Model(architecture=arch, task=task, embedding=emb)
    else:
        d = int(rng.gen.integers(2, 9))
        inputs = rng.uniform(-1.0, 1.0, (batch, d))
        model = Model(d, arch, task)
    model.init_params(rng)
    if model.embedding is not None:
        # keep x0 near unit scale so deep tanh units stay out of saturation,
        # where true gradients drop below the finite-difference noise floor
        for t in model.embedding.tables:
            t.assign(0.5 * t.value)
    _perturb_params(model, rng)
    if Task(task) is Task.BINARY:
        labels = rng.gen.integers(0, 2, batch).astype(np.float64)
    else:
        labels = rng.gaussian(0.0, 1.0, batch)
    lam = float(rng.uniform(0.0, 0.1, 1)[0])
    name = f"{structure}/{cross_kind}/{task}" + ("/embedding" if with_embedding else "")
    return check_model(name, model, Batch(inputs, labels), lam)


def run_layer_suite(instances: int = 20, seed: int = 0, kinds=LAYER_KINDS) -> list[CheckResult]:
    out = []
    for i, kind in enumerate(kinds):
        for rng in Rng(seed + 1000 * i).spawn(instances):
            out.append(layer_instance(kind, rng))
    return out


def run_model_suite(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    """``instances`` random models for each structure and cross kind (and both tasks)."""
    out = []
    combos = [(s, c) for s in STRUCTURES for c in (CROSS_KINDS if s != "dnn_only" else ("full",))]
    for i, (structure, cross_kind) in enumerate(combos):
        for j, rng in enumerate(Rng(seed + 7919 * (i + 1)).spawn(instances)):
            task = "binary_logloss" if j % 2 == 0 else "regression_mse"
            out.append(architecture_instance(structure, cross_kind, task, rng, with_embedding=j % 4 >= 2))
    return out
