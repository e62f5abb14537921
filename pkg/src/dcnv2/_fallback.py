"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def jacobi_singular_values(a, tol=1e-12, max_sweeps=60):
    """One-sided (Hestenes) Jacobi: orthogonalize columns by plane rotations.

    Returns the column norms of the converged matrix, unsorted.
    """
    g = np.array(a, dtype=np.float64, order="F", copy=True)
    n = g.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gp = g[:, p]
                gq = g[:, q]
                alpha = gp @ gp
                beta = gq @ gq
                gamma = gp @ gq
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * gp - s * gq
                g[:, q] = s * gp + c * gq
                g[:, p] = new_p
        if not rotated:
            break
    return np.sqrt(np.einsum("ij,ij->j", g, g))


def matvec(a, x):
    rows, cols = a.shape
    out = np.zeros(rows)
    for i in range(rows):
        acc = 0.0
        for j in range(cols):
            acc += a[i, j] * x[j]
        out[i] = acc
    return out
