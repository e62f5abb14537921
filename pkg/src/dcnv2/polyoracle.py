"""Exact polynomial expansion of small cross networks.

A cross net without nonlinearities is a polynomial in its input. This module
builds that polynomial symbolically (sparse exponent-tuple -> coefficient
maps), evaluates the closed-form coefficient of every monomial for the
bias-free residual stack, and enumerates the feature-wise interaction terms
``g(I, J)`` whose sum reconstructs each output block.

Index conventions follow the interaction-term notation: feature indices in
``I`` run ``1..k`` and layer indices in ``J`` run ``1..l``, with ``J`` strictly
decreasing (outermost layer first). ``weights[j - 1]`` is the matrix of layer
``j``. Polynomial exponent tuples are 0-based positions ``x_1..x_d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations, combinations_with_replacement, permutations, product
from typing import Iterable, Sequence

import numpy as np

from .core import ShapeError
from .layers import CrossLayer

PRUNE_TOL = 1e-14
MAX_EXPAND_D = 8
MAX_EXPAND_L = 4
MAX_ENUM = 4


class OracleSizeError(ValueError):
    """The requested expansion exceeds the combinatorial size guard."""


def _glex_key(alpha: tuple[int, ...]):
    # total degree ascending, then lexicographically descending (x1^2 before x1*x2)
    return (sum(alpha), tuple(-a for a in alpha))


class SparsePolynomial:
    """Multivariate polynomial stored as ``{alpha: coefficient}`` with no zero entries.

    Arithmetic prunes coefficients whose magnitude falls to ``PRUNE_TOL`` or
    below, so floating-point cancellation does not leave dust terms behind.
    """

    __slots__ = ("d", "coeffs")

    def __init__(self, d: int, coeffs: dict | None = None):
        if d < 1:
            raise ValueError("a polynomial needs at least one variable")
        self.d = d
        self.coeffs: dict[tuple[int, ...], float] = {}
        for alpha, c in (coeffs or {}).items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != d or any(a < 0 for a in alpha):
                raise ValueError(f"bad multi-index {alpha} for d={d}")
            if c != 0:
                self.coeffs[alpha] = float(c)

    @classmethod
    def zero(cls, d: int) -> SparsePolynomial:
        return cls(d)

    @classmethod
    def constant(cls, d: int, c: float) -> SparsePolynomial:
        return cls(d, {(0,) * d: c})

    @classmethod
    def variable(cls, d: int, i: int) -> SparsePolynomial:
        alpha = [0] * d
        alpha[i] = 1
        return cls(d, {tuple(alpha): 1.0})

    def _check(self, other: SparsePolynomial):
        if other.d != self.d:
            raise ShapeError(f"polynomials over {self.d} and {other.d} variables")

    def _pruned(self, coeffs) -> SparsePolynomial:
        out = SparsePolynomial(self.d)
        out.coeffs = {a: c for a, c in coeffs.items() if abs(c) > PRUNE_TOL}
        return out

    def __add__(self, other: SparsePolynomial) -> SparsePolynomial:
        self._check(other)
        acc = dict(self.coeffs)
        for a, c in other.coeffs.items():
            acc[a] = acc.get(a, 0.0) + c
        return self._pruned(acc)

    def __mul__(self, other) -> SparsePolynomial:
        if isinstance(other, (int, float)):
            return self._pruned({a: c * other for a, c in self.coeffs.items()})
        self._check(other)
        acc: dict[tuple[int, ...], float] = {}
        for a1, c1 in self.coeffs.items():
            for a2, c2 in other.coeffs.items():
                key = tuple(x + y for x, y in zip(a1, a2))
                acc[key] = acc.get(key, 0.0) + c1 * c2
        return self._pruned(acc)

    __rmul__ = __mul__

    def __getitem__(self, alpha) -> float:
        return self.coeffs.get(tuple(alpha), 0.0)

    def __len__(self):
        return len(self.coeffs)

    def __eq__(self, other):
        return isinstance(other, SparsePolynomial) and self.d == other.d and self.coeffs == other.coeffs

    def __repr__(self):
        return f"SparsePolynomial(d={self.d}, terms={len(self.coeffs)})"

    def terms(self) -> list[tuple[tuple[int, ...], float]]:
        """Terms in graded-lex order."""
        return sorted(self.coeffs.items(), key=lambda t: _glex_key(t[0]))

    def orders(self) -> set[int]:
        return {sum(a) for a in self.coeffs}

    def homogeneous_part(self, order: int) -> SparsePolynomial:
        return SparsePolynomial(self.d, {a: c for a, c in self.coeffs.items() if sum(a) == order})

    def evaluate(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        pts = x[None, :] if single else x
        if pts.ndim != 2 or pts.shape[1] != self.d:
            raise ShapeError(f"polynomial over {self.d} variables got points of shape {x.shape}")
        out = np.zeros(pts.shape[0])
        for alpha, c in self.coeffs.items():
            out += c * np.prod(pts ** np.asarray(alpha), axis=1)
        return float(out[0]) if single else out

    def dumps(self) -> str:
        return "".join(" ".join(str(a) for a in alpha) + f" {c!r}\n" for alpha, c in self.terms())

    @classmethod
    def loads(cls, text: str, d: int | None = None) -> SparsePolynomial:
        coeffs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if d is None:
                d = len(parts) - 1
            if len(parts) != d + 1:
                raise ValueError(f"line {lineno}: expected {d} exponents and a coefficient")
            coeffs[tuple(int(p) for p in parts[:-1])] = float(parts[-1])
        if d is None:
            raise ValueError("cannot infer variable count from an empty dump")
        return cls(d, coeffs)


def max_degree(poly: SparsePolynomial) -> int:
    return max((sum(a) for a in poly.coeffs), default=0)


@dataclass
class CrossNetVariant:
    """Stack of full-rank cross layers with optional bias and residual terms."""

    weights: list[np.ndarray]
    biases: list[np.ndarray] | None = None
    use_bias: bool = True
    use_residual: bool = True

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        if not self.weights:
            raise ValueError("need at least one layer")
        d = self.weights[0].shape[0]
        for w in self.weights:
            if w.shape != (d, d):
                raise ShapeError(f"all weights must be {d}x{d}, got {w.shape}")
        if self.use_bias:
            if self.biases is None:
                raise ValueError("bias variant needs biases")
            self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
            if len(self.biases) != len(self.weights) or any(b.shape != (d,) for b in self.biases):
                raise ShapeError("one length-d bias per layer required")
        elif self.biases is not None:
            raise ValueError("biases given to a no-bias variant")

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, depth: int, use_bias=True, use_residual=True, scale=1.0):
        weights = [scale * rng.standard_normal((d, d)) for _ in range(depth)]
        biases = [scale * rng.standard_normal(d) for _ in range(depth)] if use_bias else None
        return cls(weights, biases, use_bias, use_residual)

    def layers(self) -> list[CrossLayer]:
        return [
            CrossLayer(
                self.d,
                W=w.copy(),
                b=self.biases[j].copy() if self.use_bias else None,
                use_bias=self.use_bias,
                use_residual=self.use_residual,
            )
            for j, w in enumerate(self.weights)
        ]

    def forward(self, x) -> np.ndarray:
        """Numeric forward pass through real ``CrossLayer`` objects, ``x`` of shape ``(d,)`` or ``(n, d)``."""
        x0 = np.asarray(x, dtype=np.float64)
        xl = x0
        for layer in self.layers():
            xl, _ = layer.forward(x0, xl)
        return xl


def expand_crossnet(variant: CrossNetVariant) -> tuple[list[SparsePolynomial], SparsePolynomial]:
    """Per-coordinate output polynomials and their sum ``1^T x^l``."""
    d, depth = variant.d, variant.depth
    if d > MAX_EXPAND_D or depth > MAX_EXPAND_L:
        raise OracleSizeError(f"expansion limited to d <= {MAX_EXPAND_D}, l <= {MAX_EXPAND_L}; got d={d}, l={depth}")
    x0 = [SparsePolynomial.variable(d, i) for i in range(d)]
    xl = list(x0)
    for j, w in enumerate(variant.weights):
        nxt = []
        for r in range(d):
            z = SparsePolynomial.zero(d)
            for c in range(d):
                if w[r, c] != 0:
                    z = z + xl[c] * float(w[r, c])
            if variant.use_bias and variant.biases[j][r] != 0:
                z = z + SparsePolynomial.constant(d, float(variant.biases[j][r]))
            out = x0[r] * z
            nxt.append(out + xl[r] if variant.use_residual else out)
        xl = nxt
    total = SparsePolynomial.zero(d)
    for p in xl:
        total = total + p
    return xl, total


def decreasing_tuples(l: int, size: int) -> list[tuple[int, ...]]:
    """All strictly decreasing tuples of ``size`` layer indices from ``1..l``."""
    return [tuple(reversed(c)) for c in combinations(range(1, l + 1), size)]


def multiset_permutations(alpha: Sequence[int]) -> list[tuple[int, ...]]:
    """Distinct orderings of the multiset holding index ``i`` (1-based) ``alpha[i-1]`` times."""
    items = [i + 1 for i, a in enumerate(alpha) for _ in range(a)]
    return sorted(set(permutations(items)))


def monomial_coefficient(alpha: Sequence[int], weights: Sequence[np.ndarray]) -> float:
    """Closed-form coefficient of ``x^alpha`` in ``1^T x^l`` for the bias-free residual stack."""
    alpha = tuple(int(a) for a in alpha)
    order = sum(alpha)
    l = len(weights)
    if not 2 <= order <= l + 1:
        raise ValueError(f"|alpha| = {order} outside [2, {l + 1}]")
    if any(np.asarray(w).shape != (len(alpha), len(alpha)) for w in weights):
        raise ShapeError("weights must be d x d with d == len(alpha)")
    total = 0.0
    perms = multiset_permutations(alpha)
    for js in decreasing_tuples(l, order - 1):
        for idx in perms:
            prod = 1.0
            for k, j in enumerate(js):
                prod *= weights[j - 1][idx[k] - 1, idx[k + 1] - 1]
            total += prod
    return total


@dataclass
class FeaturePartition:
    """Contiguous feature blocks of sizes ``e_1..e_k`` covering ``1..d``."""

    sizes: list[int]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.sizes = [int(s) for s in self.sizes]
        if not self.sizes or any(s < 1 for s in self.sizes):
            raise ValueError("feature sizes must be positive")
        if not self.names:
            self.names = [f"f{i + 1}" for i in range(len(self.sizes))]
        if len(self.names) != len(self.sizes):
            raise ValueError("one name per feature required")

    @property
    def k(self) -> int:
        return len(self.sizes)

    @property
    def d(self) -> int:
        return sum(self.sizes)

    @property
    def boundaries(self) -> list[int]:
        return [0, *np.cumsum(self.sizes).tolist()]

    def block(self, i: int) -> slice:
        """Slice of feature ``i`` (1-based)."""
        b = self.boundaries
        return slice(b[i - 1], b[i])


def featurewise_interaction(I: Sequence[int], J: Sequence[int], x, weights, partition: FeaturePartition) -> np.ndarray:
    """Evaluate ``g(I, J) = x_{i1} * (W^{j1}_{i1,i2} g(I[1:], J[1:]))`` with ``g((i,), ()) = x_i``."""
    I, J = tuple(I), tuple(J)
    if len(I) != len(J) + 1:
        raise ValueError("need |I| == |J| + 1")
    if any(not 1 <= i <= partition.k for i in I):
        raise ValueError(f"feature index out of range 1..{partition.k}")
    if any(not 1 <= j <= len(weights) for j in J) or any(a <= b for a, b in zip(J, J[1:])):
        raise ValueError("J must be strictly decreasing layer indices")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (partition.d,):
        raise ShapeError(f"x has shape {x.shape}, partition covers {partition.d}")
    inner = x[partition.block(I[-1])]
    for pos in range(len(J) - 1, -1, -1):
        a, b = I[pos], I[pos + 1]
        w = np.asarray(weights[J[pos] - 1])
        inner = x[partition.block(a)] * (w[partition.block(a), partition.block(b)] @ inner)
    return inner


def enumerate_interactions(k: int, l: int, i: int) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """All ``(I, J)`` with ``I`` in ``S_p^i`` and ``J`` in ``C_l^{p-1}`` for ``p = 2..l+1``."""
    if k > MAX_ENUM or l > MAX_ENUM:
        raise OracleSizeError(f"enumeration limited to k, l <= {MAX_ENUM}")
    if k < 1 or l < 0 or not 1 <= i <= k:
        raise ValueError("need k >= 1, l >= 0 and 1 <= i <= k")
    out = []
    for p in range(2, l + 2):
        js = decreasing_tuples(l, p - 1)
        for rest in product(range(1, k + 1), repeat=p - 1):
            for J in js:
                out.append(((i, *rest), J))
    return out


def reconstruct_block(i: int, x, weights, partition: FeaturePartition) -> np.ndarray:
    """Block ``i`` of the bias-free residual stack's output via the interaction sum."""
    acc = np.array(np.asarray(x, dtype=np.float64)[partition.block(i)])
    for I, J in enumerate_interactions(partition.k, len(weights), i):
        acc += featurewise_interaction(I, J, x, weights, partition)
    return acc


def count_interactions(k: int, l: int) -> int:
    """``sum_p |S_p^i| * |C_l^{p-1}|`` for one fixed ``i``."""
    return sum(k ** (p - 1) * math.comb(l, p - 1) for p in range(2, l + 2))


def all_multi_indices(d: int, lo: int, hi: int) -> Iterable[tuple[int, ...]]:
    """Every exponent tuple of total degree ``lo..hi`` over ``d`` variables."""
    for order in range(lo, hi + 1):
        for combo in combinations_with_replacement(range(d), order):
            alpha = [0] * d
            for j in combo:
                alpha[j] += 1
            yield tuple(alpha)
