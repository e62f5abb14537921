"""Reference implementations used as independent oracles by the test suite.

Everything here is written with plain Python loops (or the most literal numpy
expression of a formula) and deliberately shares no code with ``dcnv2``.
"""

from __future__ import annotations

import math

import numpy as np


def naive_matvec(a, x):
    rows, cols = len(a), len(a[0])
    out = [0.0] * rows
    for i in range(rows):
        s = 0.0
        for j in range(cols):
            s += float(a[i][j]) * float(x[j])
        out[i] = s
    return np.array(out)


def naive_matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i][t]) * float(b[t][j])
            out[i, j] = s
    return out


def power_iteration_eigenvalues(m, iters: int = 20000, tol: float = 1e-15):
    """Eigenvalues of a symmetric PSD matrix by power iteration with deflation."""
    m = np.array(m, dtype=np.float64)
    n = m.shape[0]
    vals = []
    start = np.random.default_rng(12345)
    for _ in range(n):
        v = start.standard_normal(n)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = naive_matvec(m, v)
            norm = math.sqrt(sum(t * t for t in w))
            if norm == 0.0:
                lam = 0.0
                break
            w = w / norm
            new_lam = float(w @ naive_matvec(m, w))
            done = abs(new_lam - lam) <= tol * max(abs(new_lam), 1.0) and np.linalg.norm(w - v) < 1e-12
            v, lam = w, new_lam
            if done:
                break
        vals.append(lam)
        m = m - lam * np.outer(v, v)
    return sorted(vals, reverse=True)


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def mixture_straight_line(x0, xl, experts, gate, mode, act, use_c):
    """Mixture-of-experts cross layer for one example, written out entry by entry.

    ``experts`` is a list of ``(U, V, b, C)`` tuples, ``gate`` the ``K x d``
    matrix of gate vectors.
    """
    d = len(x0)
    K = len(experts)
    logits = [sum(gate[i][j] * xl[j] for j in range(d)) for i in range(K)]
    if mode == "softmax":
        mx = max(logits)
        ex = [math.exp(z - mx) for z in logits]
        G = [e / sum(ex) for e in ex]
    elif mode == "sigmoid":
        G = [sigmoid(z) for z in logits]
    else:
        G = [1.0] * K
    out = list(map(float, xl))
    for k, (U, V, b, C) in enumerate(experts):
        r = U.shape[1]
        proj = [sum(V[j][t] * xl[j] for j in range(d)) for t in range(r)]
        if use_c:
            h = [act(p) for p in proj]
            proj = [act(sum(C[t][s] * h[s] for s in range(r))) for t in range(r)]
        for i in range(d):
            z = sum(U[i][t] * proj[t] for t in range(r)) + b[i]
            out[i] += G[k] * x0[i] * z
    return np.array(out)


def monomial_value(exponents, weight, x):
    value = weight
    for xi, a in zip(x, exponents):
        for _ in range(a):
            value *= xi
    return value
