"""Ground-truth polynomial targets for the polynomial-fitting experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .core import Rng, ShapeError


@dataclass(frozen=True)
class MonomialTerm:
    exponents: tuple[int, ...]
    weight: float

    def __post_init__(self):
        if any(a < 0 for a in self.exponents):
            raise ValueError("exponents must be non-negative")
        if sum(self.exponents) < 1:
            raise ValueError("a monomial term needs order >= 1")
        if not math.isfinite(self.weight):
            raise ValueError("weight must be finite")

    @property
    def order(self) -> int:
        return sum(self.exponents)


@dataclass(frozen=True)
class SineTerm:
    amplitude: float
    frequency: float
    weights: tuple[float, ...]
    phase: float


@dataclass
class PolynomialSpec:
    """``x.w + sum_a w_a x^a + amp * sin(freq * x.w_s + phase)`` plus Gaussian noise."""

    d: int
    terms: list[MonomialTerm] = field(default_factory=list)
    linear: np.ndarray | None = None
    sine: SineTerm | None = None
    noise_std: float = 0.0
    name: str = ""

    def __post_init__(self):
        for t in self.terms:
            if len(t.exponents) != self.d:
                raise ShapeError(f"term exponents of length {len(t.exponents)} for d={self.d}")
        if self.linear is not None:
            self.linear = np.asarray(self.linear, dtype=np.float64)
            if self.linear.shape != (self.d,):
                raise ShapeError("linear weights must have length d")
        if self.sine is not None and len(self.sine.weights) != self.d:
            raise ShapeError("sine weights must have length d")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    def orders(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for t in self.terms:
            counts[t.order] = counts.get(t.order, 0) + 1
        return counts

    def evaluate(self, x) -> np.ndarray | float:
        return evaluate(self, x)


def _pair_term(d, i, j, w):
    e = [0] * d
    e[i] += 1
    e[j] += 1
    return MonomialTerm(tuple(e), float(w))


def make_f1() -> PolynomialSpec:
    terms = [_pair_term(4, 0, 0, 1), _pair_term(4, 0, 1, 1), _pair_term(4, 2, 0, 1), _pair_term(4, 3, 0, 1)]
    return PolynomialSpec(4, terms, name="f1")


def make_f2() -> PolynomialSpec:
    terms = [_pair_term(3, 0, 0, 1), _pair_term(3, 0, 1, 0.1), _pair_term(3, 1, 2, 1), _pair_term(3, 2, 2, 0.1)]
    return PolynomialSpec(3, terms, name="f2")


def make_f3(seed: int = 0, d: int = 100, n_terms: int = 100) -> PolynomialSpec:
    """``n_terms`` distinct pairs ``i <= j`` with weights uniform on [-1, 1]."""
    rng = Rng(seed)
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    picked = rng.choice(len(pairs), n_terms)
    weights = rng.uniform(-1.0, 1.0, n_terms)
    terms = [_pair_term(d, *pairs[k], w) for k, w in zip(picked, weights)]
    return PolynomialSpec(d, terms, name="f3")


def _random_multi_indices(rng: Rng, d: int, order: int, count: int, exclude=frozenset()) -> list[tuple[int, ...]]:
    available = math.comb(d + order - 1, order) - len(exclude)
    if count > available:
        raise ValueError(f"asked for {count} distinct order-{order} monomials but only {available} exist for d={d}")
    seen = set(exclude)
    out = []
    if available <= 4 * count:
        # small pool: enumerate and sample without replacement
        pool = [c for c in combinations_with_replacement(range(d), order) if _exps(d, c) not in seen]
        for k in rng.choice(len(pool), count):
            out.append(_exps(d, pool[k]))
        return out
    while len(out) < count:
        e = _exps(d, sorted(rng.gen.integers(0, d, order)))
        if e not in seen:
            seen.add(e)
            out.append(e)
    return out


def _exps(d, indices):
    e = [0] * d
    for i in indices:
        e[i] += 1
    return tuple(e)


def make_homogeneous(order: int, n_terms: int = 20, d: int = 50, seed: int = 0) -> PolynomialSpec:
    if order < 2:
        raise ValueError("order must be >= 2")
    rng = Rng(seed)
    exps = _random_multi_indices(rng, d, order, n_terms)
    weights = rng.uniform(-1.0, 1.0, n_terms)
    return PolynomialSpec(d, [MonomialTerm(e, float(w)) for e, w in zip(exps, weights)], name=f"homogeneous{order}")


COMBINED_SIZES = {2: 20, 3: 10, 4: 5}


def make_combined(seed: int = 0, d: int = 50, sine_scale: float = 1.0) -> PolynomialSpec:
    """Linear part, orders 2-4 cross terms, a sine perturbation and 0.01 noise.

    ``sine_scale`` multiplies the sine projection weights ``w_s`` (drawn
    uniform on [-1, 1]).
    """
    rng = Rng(seed)
    linear = rng.uniform(-1.0, 1.0, d)
    terms = []
    for order, count in COMBINED_SIZES.items():
        exps = _random_multi_indices(rng, d, order, count)
        weights = rng.uniform(-1.0, 1.0, count)
        terms.extend(MonomialTerm(e, float(w)) for e, w in zip(exps, weights))
    w_s = sine_scale * rng.uniform(-1.0, 1.0, d)
    sine = SineTerm(0.1, 2.0, tuple(float(v) for v in w_s), 0.1)
    return PolynomialSpec(d, terms, linear=linear, sine=sine, noise_std=0.01, name="combined")


def evaluate(spec: PolynomialSpec, x) -> np.ndarray | float:
    """Noiseless target value(s) for one point ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.d:
        raise ShapeError(f"spec has d={spec.d}, got input shape {x.shape}")
    out = np.zeros(x.shape[0])
    if spec.linear is not None:
        out += x @ spec.linear
    for t in spec.terms:
        mono = np.ones(x.shape[0])
        for i, a in enumerate(t.exponents):
            if a:
                mono *= x[:, i] ** a
        out += t.weight * mono
    if spec.sine is not None:
        s = spec.sine
        out += s.amplitude * np.sin(s.frequency * (x @ np.asarray(s.weights)) + s.phase)
    return float(out[0]) if single else out


@dataclass
class SyntheticDataset:
    inputs: np.ndarray
    targets: np.ndarray
    spec: PolynomialSpec
    seed: int
    indices: np.ndarray

    def __len__(self):
        return len(self.targets)

    @property
    def labels(self):
        return self.targets

    def batch(self, idx):
        from .model import Batch

        return Batch(self.inputs[idx], self.targets[idx])


def sample_dataset(spec: PolynomialSpec, n: int, seed: int = 0, split: float = 0.8):
    """Draw ``n`` points uniformly from ``[-1, 1]^d`` and split into train/test."""
    if n < 2:
        raise ValueError("need at least two samples")
    if not 0.0 < split < 1.0:
        raise ValueError("split must lie in (0, 1)")
    rng = Rng(seed)
    x = rng.uniform(-1.0, 1.0, (n, spec.d))
    y = evaluate(spec, x)
    if spec.noise_std:
        y = y + rng.gaussian(0.0, spec.noise_std, n)
    perm = rng.permutation(n)
    n_train = min(max(int(round(split * n)), 1), n - 1)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    return (
        SyntheticDataset(x[tr], y[tr], spec, seed, tr),
        SyntheticDataset(x[te], y[te], spec, seed, te),
    )
