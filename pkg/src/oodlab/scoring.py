"""Test-time OOD scores. Every score is oriented so that higher means more OOD-like."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import _sigmoid, logsumexp


def _logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"expected (n, C) logits, got shape {z.shape}")
    return z


def msp_score(logits) -> np.ndarray:
    """Negative maximum softmax probability."""
    z = _logits(logits)
    # max softmax = exp(max z - logsumexp z)
    return -np.exp(z.max(axis=1) - logsumexp(z, axis=1))


def max_sigmoid_score(logits) -> np.ndarray:
    """``1 - max_c sigmoid(z_c)`` over independent per-class heads."""
    z = _logits(logits)
    return 1.0 - _sigmoid(z.max(axis=1))


def ood_class_score(logits, n_classes: int) -> np.ndarray:
    """Sigmoid probability of the extra OOD output (last column)."""
    z = _logits(logits)
    if z.shape[1] != n_classes + 1:
        raise ValueError(f"expected {n_classes + 1} logits for an OOD-class head, got {z.shape[1]}")
    return _sigmoid(z[:, -1])


def energy_score(logits, T: float = 1.0) -> np.ndarray:
    if T <= 0:
        raise ValueError("temperature must be positive")
    z = _logits(logits)
    return -T * logsumexp(z / T, axis=1)


class EmbeddingBank:
    """Row-normalized training embeddings for cosine k-NN search."""

    def __init__(self, embeddings):
        e = np.asarray(embeddings, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] == 0:
            raise ValueError(f"bank must be a nonempty (n, E) matrix, got {e.shape}")
        self.norms = np.linalg.norm(e, axis=1)
        if np.any(self.norms == 0):
            raise ValueError(f"bank has zero-norm rows: {np.flatnonzero(self.norms == 0)[:5].tolist()}")
        self.embeddings = e
        self.unit = e / self.norms[:, None]

    def __len__(self) -> int:
        return self.unit.shape[0]


def knn_cosine_score(embeddings, bank: EmbeddingBank, k: int = 5) -> np.ndarray:
    """Mean of the ``k`` smallest cosine distances from each query to the bank."""
    q = np.asarray(embeddings, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if not 1 <= k <= len(bank):
        raise ValueError(f"k must be in [1, {len(bank)}], got {k}")
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero embedding at rows {np.flatnonzero(norms == 0)[:5].tolist()}")
    dist = 1.0 - (q / norms[:, None]) @ bank.unit.T
    # stable sort keeps lower bank index first among ties
    nearest = np.sort(dist, axis=1, kind="stable")[:, :k]
    return nearest.mean(axis=1)


@dataclass
class ScoreSet:
    method: str
    dataset: str
    scores: np.ndarray

    def to_csv(self, path, sample_ids=None) -> None:
        ids = np.arange(len(self.scores)) if sample_ids is None else np.asarray(sample_ids)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "score"])
            for i, s in zip(ids, self.scores):
                w.writerow([int(i), repr(float(s))])
