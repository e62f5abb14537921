"""Layer kinds with forward and analytic backward passes.

All layers operate on batches: inputs are ``(batch, dim)`` arrays. A 1-D
input is treated as a batch of one and the outputs are squeezed back, so the
single-example calls used in tests and docs work unchanged.

``forward`` returns ``(output, cache)``; ``backward(cache, d_out)`` returns the
input gradients and *accumulates* parameter gradients into ``ParamTensor.grad``.
A cache records the parameter versions it was computed with, and ``backward``
refuses a cache whose parameters have since been updated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .core import Rng, ShapeError, truncated_normal


class StaleCacheError(RuntimeError):
    pass


class Activation(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    HARD_TANH = "hard_tanh"
    SIGMOID = "sigmoid"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self is Activation.IDENTITY:
            return x
        if self is Activation.RELU:
            return np.maximum(x, 0.0)
        if self is Activation.TANH:
            return np.tanh(x)
        if self is Activation.HARD_TANH:
            return np.clip(x, -1.0, 1.0)
        return _sigmoid(x)

    def grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Derivative at pre-activation ``x`` given output ``y``."""
        if self is Activation.IDENTITY:
            return np.ones_like(x)
        if self is Activation.RELU:
            return (x > 0.0).astype(np.float64)
        if self is Activation.TANH:
            return 1.0 - y * y
        if self is Activation.HARD_TANH:
            return ((x > -1.0) & (x < 1.0)).astype(np.float64)
        return y * (1.0 - y)


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ParamTensor:
    value: np.ndarray
    name: str = ""
    regularized: bool = True
    grad: np.ndarray = field(init=False)
    version: int = field(default=0, init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def assign(self, new_value):
        new_value = np.asarray(new_value, dtype=np.float64)
        if new_value.shape != self.value.shape:
            raise ShapeError(f"{self.name}: cannot assign {new_value.shape} into {self.value.shape}")
        self.value[...] = new_value
        self.version += 1

    def bump(self):
        """Mark the value as modified in place."""
        self.version += 1


@dataclass
class Cache:
    owner: "Layer"
    versions: tuple
    squeeze: bool
    data: dict


def _batch(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 1-D or 2-D, got shape {x.shape}")
    return x, False


class Layer:
    """Base class: parameter bookkeeping and cache validation."""

    def params(self) -> dict[str, ParamTensor]:
        raise NotImplementedError

    def param_list(self) -> list[ParamTensor]:
        return list(self.params().values())

    def zero_grad(self):
        for p in self.param_list():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.value.size for p in self.param_list())

    def _versions(self):
        return tuple(p.version for p in self.param_list())

    def _make_cache(self, squeeze, **data):
        return Cache(self, self._versions(), squeeze, data)

    def _check_cache(self, cache: Cache):
        if cache.owner is not self:
            raise StaleCacheError("cache was produced by a different layer")
        if cache.versions != self._versions():
            raise StaleCacheError("parameters changed since the forward pass that produced this cache")

    def init_params(self, rng: Rng) -> None:
        raise NotImplementedError


def he_normal(rng: Rng, fan_in: int, shape) -> np.ndarray:
    return truncated_normal(rng, math.sqrt(2.0 / fan_in), shape)


class _CrossBase(Layer):
    dim: int

    def _inputs(self, x0, xl):
        x0, sq0 = _batch(x0, "x0")
        xl, sql = _batch(xl, "xl")
        if x0.shape != xl.shape or x0.shape[1] != self.dim:
            raise ShapeError(f"cross layer of dim {self.dim} got x0 {x0.shape}, xl {xl.shape}")
        return x0, xl, sq0 and sql

    @staticmethod
    def _out(cache, d_x0, d_xl):
        if cache.squeeze:
            return d_x0[0], d_xl[0]
        return d_x0, d_xl

    def _d_out(self, cache, d_out):
        self._check_cache(cache)
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.ndim == 1:
            d_out = d_out[None, :]
        if d_out.shape != cache.data["x0"].shape:
            raise ShapeError(f"upstream gradient {d_out.shape} vs activations {cache.data['x0'].shape}")
        return d_out


class CrossLayer(_CrossBase):
    """Full-rank cross layer: ``x0 * (xl @ W.T + b) + xl``.

    ``use_bias=False`` drops ``b`` and ``use_residual=False`` drops the
    trailing ``+ xl``; both are only used for ablations.
    """

    def __init__(self, dim: int, W=None, b=None, use_bias: bool = True, use_residual: bool = True):
        self.dim = dim
        self.use_bias = use_bias
        self.use_residual = use_residual
        self.W = ParamTensor(np.zeros((dim, dim)) if W is None else W, "W")
        self.b = ParamTensor(np.zeros(dim) if b is None else b, "b", regularized=False)
        if self.W.shape != (dim, dim) or self.b.shape != (dim,):
            raise ShapeError(f"CrossLayer({dim}): W {self.W.shape}, b {self.b.shape}")
        if not use_bias and np.any(self.b.value):
            raise ValueError("bias given to a layer built without bias")

    def params(self):
        return {"W": self.W, "b": self.b} if self.use_bias else {"W": self.W}

    def init_params(self, rng):
        self.W.assign(he_normal(rng, self.dim, (self.dim, self.dim)))
        self.b.assign(np.zeros(self.dim))

    def forward(self, x0, xl):
        x0, xl, squeeze = self._inputs(x0, xl)
        z = xl @ self.W.value.T
        if self.use_bias:
            z += self.b.value
        out = x0 * z
        if self.use_residual:
            out += xl
        cache = self._make_cache(squeeze, x0=x0, xl=xl, z=z)
        return (out[0] if squeeze else out), cache

    def backward(self, cache, d_out):
        d_out = self._d_out(cache, d_out)
        x0, xl, z = cache.data["x0"], cache.data["xl"], cache.data["z"]
        g = d_out * x0
        self.W.grad += g.T @ xl
        d_xl = g @ self.W.value
        if self.use_bias:
            self.b.grad += g.sum(axis=0)
        if self.use_residual:
            d_xl += d_out
        d_x0 = d_out * z
        return self._out(cache, d_x0, d_xl)


class DCNv1CrossLayer(_CrossBase):
    """Original DCN cross layer: ``x0 * (xl . w) + b + xl``.

    Coincides with ``CrossLayer`` using ``W = 1 w^T`` when both biases are zero.
    """

    def __init__(self, dim: int, w=None, b=None):
        self.dim = dim
        self.w = ParamTensor(np.zeros(dim) if w is None else w, "w")
        self.b = ParamTensor(np.zeros(dim) if b is None else b, "b", regularized=False)

    def params(self):
        return {"w": self.w, "b": self.b}

    def init_params(self, rng):
        self.w.assign(he_normal(rng, self.dim, (self.dim,)))
        self.b.assign(np.zeros(self.dim))

    def forward(self, x0, xl):
        x0, xl, squeeze = self._inputs(x0, xl)
        s = xl @ self.w.value
        out = x0 * s[:, None] + self.b.value + xl
        cache = self._make_cache(squeeze, x0=x0, xl=xl, s=s)
        return (out[0] if squeeze else out), cache

    def backward(self, cache, d_out):
        d_out = self._d_out(cache, d_out)
        x0, xl, s = cache.data["x0"], cache.data["xl"], cache.data["s"]
        g_s = np.einsum("ij,ij->i", d_out, x0)
        self.w.grad += xl.T @ g_s
        self.b.grad += d_out.sum(axis=0)
        d_xl = g_s[:, None] * self.w.value + d_out
        d_x0 = d_out * s[:, None]
        return self._out(cache, d_x0, d_xl)


class LowRankCrossLayer(_CrossBase):
    """Cross layer with ``W`` factored as ``U V^T``: ``x0 * (U (V^T xl) + b) + xl``."""

    def __init__(self, dim: int, rank: int, U=None, V=None, b=None):
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.dim = dim
        self.rank = rank
        self.U = ParamTensor(np.zeros((dim, rank)) if U is None else U, "U")
        self.V = ParamTensor(np.zeros((dim, rank)) if V is None else V, "V")
        self.b = ParamTensor(np.zeros(dim) if b is None else b, "b", regularized=False)
        if self.U.shape != (dim, rank) or self.V.shape != (dim, rank):
            raise ShapeError(f"LowRankCrossLayer({dim}, {rank}): U {self.U.shape}, V {self.V.shape}")

    def params(self):
        return {"U": self.U, "V": self.V, "b": self.b}

    def init_params(self, rng):
        self.U.assign(he_normal(rng, self.rank, (self.dim, self.rank)))
        self.V.assign(he_normal(rng, self.dim, (self.dim, self.rank)))
        self.b.assign(np.zeros(self.dim))

    def forward(self, x0, xl):
        x0, xl, squeeze = self._inputs(x0, xl)
        p = xl @ self.V.value
        z = p @ self.U.value.T + self.b.value
        out = x0 * z + xl
        cache = self._make_cache(squeeze, x0=x0, xl=xl, p=p, z=z)
        return (out[0] if squeeze else out), cache

    def backward(self, cache, d_out):
        d_out = self._d_out(cache, d_out)
        x0, xl, p, z = (cache.data[k] for k in ("x0", "xl", "p", "z"))
        g = d_out * x0
        self.U.grad += g.T @ p
        self.b.grad += g.sum(axis=0)
        d_p = g @ self.U.value
        self.V.grad += xl.T @ d_p
        d_xl = d_p @ self.V.value.T + d_out
        d_x0 = d_out * z
        return self._out(cache, d_x0, d_xl)


class GateMode(str, Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"
    CONSTANT_ONE = "constant_one"


@dataclass
class Expert:
    U: ParamTensor
    V: ParamTensor
    b: ParamTensor
    C: ParamTensor | None = None

    @property
    def rank(self):
        return self.U.shape[1]


class MixtureCrossLayer(_CrossBase):
    """Mixture of low-rank cross experts combined by an input-dependent gate.

    Gate ``i`` is ``squash(p_i . xl)`` with ``p_i`` a learned d-vector (rows of
    ``gate``). Experts with a ``C`` matrix apply ``activation`` in the projected
    space twice: ``U g(C g(V^T xl))``.
    """

    def __init__(
        self,
        dim: int,
        ranks: int | Sequence[int],
        num_experts: int | None = None,
        gate: GateMode | str = GateMode.SOFTMAX,
        use_c: bool = False,
        activation: Activation | str = Activation.TANH,
    ):
        if isinstance(ranks, int):
            if num_experts is None:
                raise ValueError("num_experts is required when a single rank is given")
            ranks = [ranks] * num_experts
        ranks = list(ranks)
        if num_experts is not None and num_experts != len(ranks):
            raise ValueError("num_experts disagrees with the number of ranks")
        if len(ranks) == 0:
            raise ValueError("mixture needs at least one expert")
        if min(ranks) < 1:
            raise ValueError("expert ranks must be >= 1")
        self.dim = dim
        self.gate_mode = GateMode(gate)
        self.activation = Activation(activation)
        self.use_c = use_c
        self.experts = [
            Expert(
                U=ParamTensor(np.zeros((dim, r)), f"U{i}"),
                V=ParamTensor(np.zeros((dim, r)), f"V{i}"),
                b=ParamTensor(np.zeros(dim), f"b{i}", regularized=False),
                C=ParamTensor(np.zeros((r, r)), f"C{i}") if use_c else None,
            )
            for i, r in enumerate(ranks)
        ]
        self.gate = ParamTensor(np.zeros((len(ranks), dim)), "gate")

    @property
    def num_experts(self):
        return len(self.experts)

    def params(self):
        out = {}
        for i, e in enumerate(self.experts):
            out[f"U{i}"] = e.U
            out[f"V{i}"] = e.V
            if e.C is not None:
                out[f"C{i}"] = e.C
            out[f"b{i}"] = e.b
        out["gate"] = self.gate
        return out

    def init_params(self, rng):
        for e in self.experts:
            e.U.assign(he_normal(rng, e.rank, e.U.shape))
            e.V.assign(he_normal(rng, self.dim, e.V.shape))
            if e.C is not None:
                e.C.assign(he_normal(rng, e.rank, e.C.shape))
            e.b.assign(np.zeros(self.dim))
        self.gate.assign(he_normal(rng, self.dim, self.gate.shape))

    def gate_values(self, xl: np.ndarray):
        logits = xl @ self.gate.value.T
        if self.gate_mode is GateMode.SOFTMAX:
            shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
            return shifted / shifted.sum(axis=1, keepdims=True)
        if self.gate_mode is GateMode.SIGMOID:
            return _sigmoid(logits)
        return np.ones_like(logits)

    def forward(self, x0, xl):
        x0, xl, squeeze = self._inputs(x0, xl)
        G = self.gate_values(xl)
        g = self.activation
        out = np.zeros_like(xl)
        per_expert = []
        for i, e in enumerate(self.experts):
            a1 = xl @ e.V.value
            if e.C is not None:
                h1 = g(a1)
                a2 = h1 @ e.C.value.T
                inner = g(a2)
                saved = (a1, h1, a2, inner)
            else:
                inner = a1
                saved = (a1,)
            z = inner @ e.U.value.T + e.b.value
            E = x0 * z
            out += G[:, i : i + 1] * E
            per_expert.append((saved, inner, z, E))
        out += xl
        cache = self._make_cache(squeeze, x0=x0, xl=xl, G=G, experts=per_expert)
        return (out[0] if squeeze else out), cache

    def backward(self, cache, d_out):
        d_out = self._d_out(cache, d_out)
        x0, xl, G = cache.data["x0"], cache.data["xl"], cache.data["G"]
        g = self.activation
        d_x0 = np.zeros_like(x0)
        d_xl = d_out.copy()
        d_gate_out = np.empty_like(G)
        for i, (e, (saved, inner, z, E)) in enumerate(zip(self.experts, cache.data["experts"])):
            d_gate_out[:, i] = np.einsum("ij,ij->i", d_out, E)
            d_E = G[:, i : i + 1] * d_out
            d_x0 += d_E * z
            gz = d_E * x0
            e.U.grad += gz.T @ inner
            e.b.grad += gz.sum(axis=0)
            d_inner = gz @ e.U.value
            if e.C is not None:
                a1, h1, a2, _ = saved
                d_a2 = d_inner * g.grad(a2, inner)
                e.C.grad += d_a2.T @ h1
                d_a1 = (d_a2 @ e.C.value) * g.grad(a1, h1)
            else:
                d_a1 = d_inner
            e.V.grad += xl.T @ d_a1
            d_xl += d_a1 @ e.V.value.T
        if self.gate_mode is GateMode.SOFTMAX:
            d_logits = G * (d_gate_out - np.sum(G * d_gate_out, axis=1, keepdims=True))
        elif self.gate_mode is GateMode.SIGMOID:
            d_logits = d_gate_out * G * (1.0 - G)
        else:
            d_logits = None
        if d_logits is not None:
            self.gate.grad += d_logits.T @ xl
            d_xl += d_logits @ self.gate.value
        return self._out(cache, d_x0, d_xl)


class DenseLayer(Layer):
    """``f(h @ W.T + b)`` with ``W`` of shape ``(d_out, d_in)``."""

    def __init__(self, d_in: int, d_out: int, activation: Activation | str = Activation.RELU, W=None, b=None):
        self.d_in = d_in
        self.d_out = d_out
        self.activation = Activation(activation)
        self.W = ParamTensor(np.zeros((d_out, d_in)) if W is None else W, "W")
        self.b = ParamTensor(np.zeros(d_out) if b is None else b, "b", regularized=False)
        if self.W.shape != (d_out, d_in) or self.b.shape != (d_out,):
            raise ShapeError(f"DenseLayer({d_in}->{d_out}): W {self.W.shape}, b {self.b.shape}")

    def params(self):
        return {"W": self.W, "b": self.b}

    def init_params(self, rng):
        self.W.assign(he_normal(rng, self.d_in, self.W.shape))
        self.b.assign(np.zeros(self.d_out))

    def forward(self, h):
        h, squeeze = _batch(h, "h")
        if h.shape[1] != self.d_in:
            raise ShapeError(f"dense layer expects width {self.d_in}, got {h.shape}")
        a = h @ self.W.value.T + self.b.value
        out = self.activation(a)
        cache = self._make_cache(squeeze, h=h, a=a, out=out)
        return (out[0] if squeeze else out), cache

    def backward(self, cache, d_out):
        self._check_cache(cache)
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.ndim == 1:
            d_out = d_out[None, :]
        h, a, out = cache.data["h"], cache.data["a"], cache.data["out"]
        if d_out.shape != out.shape:
            raise ShapeError(f"upstream gradient {d_out.shape} vs activations {out.shape}")
        d_a = d_out * self.activation.grad(a, out)
        self.W.grad += d_a.T @ h
        self.b.grad += d_a.sum(axis=0)
        d_h = d_a @ self.W.value
        return d_h[0] if cache.squeeze else d_h


class OutOfVocabError(IndexError):
    pass


class EmbeddingLayer(Layer):
    """Per-feature lookup tables followed by concatenation with dense features.

    ``tables[i]`` has shape ``(e_i, v_i)``; column ``k`` embeds category ``k``.
    Sparse input for one feature is either an integer array of shape
    ``(batch,)`` or a length-``batch`` sequence of index lists (multivalent
    features, embedded as the mean of their columns).
    """

    def __init__(self, vocab_sizes: Sequence[int], embed_sizes: Sequence[int], num_dense: int = 0, names=None):
        if len(vocab_sizes) != len(embed_sizes):
            raise ValueError("vocab_sizes and embed_sizes differ in length")
        self.vocab_sizes = [int(v) for v in vocab_sizes]
        self.embed_sizes = [int(e) for e in embed_sizes]
        self.num_dense = int(num_dense)
        self.names = list(names) if names is not None else [f"f{i}" for i in range(len(vocab_sizes))]
        self.tables = [
            ParamTensor(np.zeros((e, v)), f"embed_{name}", regularized=False)
            for name, v, e in zip(self.names, self.vocab_sizes, self.embed_sizes)
        ]

    @property
    def output_dim(self):
        return sum(self.embed_sizes) + self.num_dense

    def params(self):
        return {t.name: t for t in self.tables}

    def init_params(self, rng):
        for t in self.tables:
            t.assign(he_normal(rng, t.shape[0], t.shape))

    def _lookup(self, f, idx):
        vocab = self.vocab_sizes[f]
        table = self.tables[f].value
        if isinstance(idx, np.ndarray) and idx.ndim == 1 and idx.dtype.kind in "iu":
            bad = (idx < 0) | (idx >= vocab)
            if bad.any():
                raise OutOfVocabError(f"feature {self.names[f]!r}: index {int(idx[bad][0])} outside vocab of size {vocab}")
            return table[:, idx].T, ("single", idx)
        lists = []
        out = np.empty((len(idx), table.shape[0]))
        for row, ids in enumerate(idx):
            ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
            if ids.size == 0:
                raise ValueError(f"feature {self.names[f]!r}: empty index list in row {row}")
            bad = (ids < 0) | (ids >= vocab)
            if bad.any():
                raise OutOfVocabError(f"feature {self.names[f]!r}: index {int(ids[bad][0])} outside vocab of size {vocab}")
            out[row] = table[:, ids].mean(axis=1)
            lists.append(ids)
        return out, ("multi", lists)

    def forward(self, sparse, dense=None):
        if len(sparse) != len(self.tables):
            raise ShapeError(f"expected {len(self.tables)} sparse features, got {len(sparse)}")
        parts = []
        lookups = []
        batch = None
        for f, idx in enumerate(sparse):
            emb, how = self._lookup(f, idx)
            if batch is not None and emb.shape[0] != batch:
                raise ShapeError("sparse features disagree on batch size")
            batch = emb.shape[0]
            parts.append(emb)
            lookups.append(how)
        if self.num_dense:
            dense = np.asarray(dense, dtype=np.float64)
            if dense.ndim == 1:
                dense = dense[None, :]
            if dense.shape[1] != self.num_dense or (batch is not None and dense.shape[0] != batch):
                raise ShapeError(f"dense block {dense.shape} does not match {self.num_dense} dense features")
            parts.append(dense)
        elif dense is not None and np.size(dense):
            raise ShapeError("layer declares no dense features")
        x0 = np.concatenate(parts, axis=1) if parts else np.zeros((0, 0))
        return x0, self._make_cache(False, lookups=lookups)

    def backward(self, cache, d_x0):
        self._check_cache(cache)
        d_x0 = np.atleast_2d(np.asarray(d_x0, dtype=np.float64))
        start = 0
        for f, (kind, idx) in enumerate(cache.data["lookups"]):
            e = self.embed_sizes[f]
            block = d_x0[:, start : start + e]
            grad = self.tables[f].grad
            if kind == "single":
                np.add.at(grad.T, idx, block)
            else:
                for row, ids in enumerate(idx):
                    np.add.at(grad.T, ids, block[row] / ids.size)
            start += e
        return d_x0[:, start:]


def embedding_forward(layer: EmbeddingLayer, sparse_indices, dense=()):
    """Embed one example; ``sparse_indices`` holds one index list per feature."""
    sparse = [[list(np.atleast_1d(ids))] for ids in sparse_indices]
    x0, _ = layer.forward(sparse, np.asarray(dense, dtype=np.float64)[None, :] if layer.num_dense else None)
    return x0[0]


def init_params(layer: Layer, rng: Rng) -> None:
    layer.init_params(rng)


def param_count(layer: Layer) -> int:
    return layer.param_count()
