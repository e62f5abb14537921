"""Dense linear-algebra primitives, singular values and seeded sampling.

Arrays are plain float64 ``numpy.ndarray`` objects. The singular-value and
``matvec`` kernels come from the compiled ``_kernels`` extension when it is
importable and fall back to ``_fallback`` otherwise; ``KERNEL_BACKEND`` names
the one in use.
"""

from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("DCNV2_PURE_PYTHON"):
        raise ImportError("compiled kernels disabled by DCNV2_PURE_PYTHON")
    from . import _kernels as _impl

    KERNEL_BACKEND = "cython"
except ImportError:
    from . import _fallback as _impl

    KERNEL_BACKEND = "python"

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60


class ShapeError(ValueError):
    """Raised when operand shapes do not line up."""


def _as_array(x, ndim: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")


def matvec(a, x) -> np.ndarray:
    a = _as_array(a, 2, "matrix")
    x = _as_array(x, 1, "vector")
    if a.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: matrix {a.shape} incompatible with vector ({x.shape[0]},)")
    return _impl.matvec(np.ascontiguousarray(a), np.ascontiguousarray(x))


def matmul(a, b) -> np.ndarray:
    a = _as_array(a, 2, "left matrix")
    b = _as_array(b, 2, "right matrix")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def hadamard(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return a * b


def singular_values(a) -> np.ndarray:
    """Singular values in descending order, length ``min(rows, cols)``."""
    a = _as_array(a, 2, "matrix")
    if a.size == 0:
        raise ShapeError("singular_values: empty matrix")
    _check_finite(a, "matrix")
    if a.shape[1] > a.shape[0]:
        a = a.T
    sv = _impl.jacobi_singular_values(a, SVD_TOL, SVD_MAX_SWEEPS)
    return np.sort(np.asarray(sv))[::-1].copy()


class Rng:
    """Seeded PCG64 stream.

    Independent child streams come from ``spawn`` (seed-sequence splitting),
    which is how concurrent consumers should get their own generator.
    """

    def __init__(self, seed: int = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int = 1) -> list[Rng]:
        children = []
        for child_seq in self._seq.spawn(n):
            child = Rng.__new__(Rng)
            child.seed = self.seed
            child._seq = child_seq
            child.gen = np.random.Generator(np.random.PCG64(child_seq))
            children.append(child)
        return children

    def uniform(self, lo: float, hi: float, size) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"invalid range [{lo}, {hi})")
        return lo + (hi - lo) * self.gen.random(size)

    def gaussian(self, mean: float, std: float, size) -> np.ndarray:
        # Box-Muller on (0, 1] uniforms
        if std < 0:
            raise ValueError("std must be non-negative")
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        half = (n + 1) // 2
        u1 = 1.0 - self.gen.random(half)
        u2 = self.gen.random(half)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
        return (mean + std * z[:n]).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=k, replace=replace)


def sample_uniform(rng: Rng, lo: float, hi: float, n) -> np.ndarray:
    return rng.uniform(lo, hi, n)


def sample_gaussian(rng: Rng, mean: float, std: float, n) -> np.ndarray:
    return rng.gaussian(mean, std, n)


def truncated_normal(rng: Rng, std: float, shape, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) with draws beyond ``bound * std`` redrawn."""
    out = rng.gaussian(0.0, 1.0, shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.gaussian(0.0, 1.0, int(bad.sum()))
        bad = np.abs(out) > bound
    return std * out
