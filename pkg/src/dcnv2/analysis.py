"""Diagnostics for learned cross weights: spectra, numerical rank, block norms."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ShapeError, singular_values
from .polyoracle import FeaturePartition

SPECTRUM_HEADER = ["index", "sigma_normalized"]
BLOCK_HEADER = ["feature_i", "feature_j", "frobenius_norm"]


@dataclass
class SpectrumReport:
    normalized: np.ndarray
    sigma_max: float
    degenerate: bool = False


@dataclass
class BlockNormMap:
    norms: np.ndarray
    partition: FeaturePartition

    @property
    def names(self) -> list[str]:
        return self.partition.names


def spectrum(W) -> SpectrumReport:
    """Singular values divided by the largest one, in descending order.

    A zero matrix yields an all-zero report flagged ``degenerate``.
    """
    sv = singular_values(W)
    top = float(sv[0])
    if top == 0.0:
        return SpectrumReport(np.zeros_like(sv), 0.0, degenerate=True)
    out = sv / top
    out[0] = 1.0
    return SpectrumReport(out, top)


def numerical_rank(report, T: float) -> int:
    """Number of normalized singular values at or above ``T``."""
    if not 0.0 < T < 1.0:
        raise ValueError("tolerance T must lie in (0, 1)")
    values = report.normalized if isinstance(report, SpectrumReport) else np.asarray(report, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty spectrum")
    if isinstance(report, SpectrumReport) and report.degenerate:
        return 0
    top = values[0]
    return int(np.count_nonzero(values >= T * top))


def block_norms(W, partition: FeaturePartition) -> BlockNormMap:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape != (partition.d, partition.d):
        raise ShapeError(f"partition covers {partition.d} dims but W has shape {W.shape}")
    k = partition.k
    norms = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            norms[i, j] = np.linalg.norm(W[partition.block(i + 1), partition.block(j + 1)])
    return BlockNormMap(norms, partition)


def export_report(report, path) -> Path:
    """Write a spectrum or block-norm report as CSV and return the path."""
    path = Path(path)
    rows: list[list]
    if isinstance(report, SpectrumReport):
        header = SPECTRUM_HEADER
        rows = [[i, repr(float(v))] for i, v in enumerate(report.normalized)]
    elif isinstance(report, BlockNormMap):
        header = BLOCK_HEADER
        names = report.names
        rows = [
            [names[i], names[j], repr(float(report.norms[i, j]))]
            for i in range(len(names))
            for j in range(len(names))
        ]
    else:
        raise TypeError(f"cannot export {type(report).__name__}")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_spectrum_csv(path) -> np.ndarray:
    with Path(path).open(encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader) != SPECTRUM_HEADER:
            raise ValueError(f"{path}: not a spectrum CSV")
        return np.array([float(r[1]) for r in reader])


def read_block_csv(path) -> tuple[list[tuple[str, str]], np.ndarray]:
    with Path(path).open(encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader) != BLOCK_HEADER:
            raise ValueError(f"{path}: not a block-norm CSV")
        rows = list(reader)
    return [(r[0], r[1]) for r in rows], np.array([float(r[2]) for r in rows])
