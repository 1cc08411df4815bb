"""Unstructured magnitude pruning and per-input k-means weight sharing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import Dataset
from .model import MLPModel, TrainConfig
from .quant import QuantGenes, QuantizedMLP, qat_retrain

PruneMask = list  # list[np.ndarray[bool]] per layer, True = kept


def _weights_of(m) -> list[np.ndarray]:
    return m.weights if isinstance(m, MLPModel) else [np.asarray(w, dtype=np.float64) for w in m]


def prune_low_magnitude(m: MLPModel | Sequence[np.ndarray], s: float) -> PruneMask:
    """Mask the ``floor(s * n_weights)`` smallest-magnitude weights across all layers.

    Ties are broken in (layer, row, column) order. Biases are never pruned.
    """
    if not 0.0 <= s <= 0.5 + 1e-9:
        raise ValueError(f"sparsity must lie in [0, 0.5], got {s}")
    weights = _weights_of(m)
    flat = np.concatenate([np.abs(w).ravel() for w in weights])
    n_prune = int(np.floor(s * flat.size + 1e-9))
    keep = np.ones(flat.size, dtype=bool)
    keep[np.argsort(flat, kind="stable")[:n_prune]] = False
    out, start = [], 0
    for w in weights:
        out.append(keep[start:start + w.size].reshape(w.shape))
        start += w.size
    return out


def wcss(values: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sum((values - centroids[labels]) ** 2))


def kmeans_1d(values: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100):
    """Lloyd's algorithm with k-means++ seeding on a 1-D sample.

    Returns ``(centroids, labels, history)`` where ``history`` holds the
    within-cluster sum of squares after every iteration. Empty clusters keep
    their previous centroid.
    """
    x = np.asarray(values, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    centers = [x[rng.integers(len(x))]]
    while len(centers) < k:
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            break
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    c = np.sort(np.array(centers))
    labels = np.argmin(np.abs(x[:, None] - c[None, :]), axis=1)
    history = []
    for _ in range(max_iter):
        for j in range(len(c)):
            sel = labels == j
            if sel.any():
                c[j] = x[sel].mean()
        history.append(wcss(x, c, labels))
        new = np.argmin(np.abs(x[:, None] - c[None, :]), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    return c, labels, history


@dataclass
class ClusterAssignment:
    """Per-layer cluster ids (``-1`` = pruned) and per-column centroid tables.

    ``frozen`` marks weights that belong to a column where k-means actually
    ran; columns with at most K kept weights are identity-clustered and stay
    trainable.
    """

    ks: list[int]
    labels: list[np.ndarray]
    centroids: list[list[np.ndarray]]
    frozen: list[np.ndarray]

    def values(self, layer: int) -> np.ndarray:
        lab = self.labels[layer]
        out = np.zeros(lab.shape)
        for j, cent in enumerate(self.centroids[layer]):
            col = lab[:, j]
            sel = col >= 0
            out[sel, j] = cent[col[sel]]
        return out

    def apply(self, weights: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Replace clustered weights by their centroid; pruned positions become 0."""
        out = []
        for layer, w in enumerate(weights):
            v = np.where(self.frozen[layer], self.values(layer), w)
            out.append(np.where(self.labels[layer] >= 0, v, 0.0))
        return out

    def frozen_values(self) -> list[np.ndarray]:
        return [np.where(f, self.values(l), np.nan) for l, f in enumerate(self.frozen)]

    def groups(self, layer: int, column: int) -> list[tuple[int, float]]:
        return [(cid, float(v)) for cid, v in enumerate(self.centroids[layer][column])]


def cluster_weights(weights: Sequence[np.ndarray], mask: PruneMask, k_per_layer: Sequence[int],
                    seed: int = 0, max_iter: int = 100) -> ClusterAssignment:
    """Cluster the kept same-input weights (one column of a layer) into at most K values."""
    weights = _weights_of(weights)
    rng = np.random.default_rng(seed)
    labels, cents, frozen = [], [], []
    for layer, (w, mk) in enumerate(zip(weights, mask)):
        k = int(k_per_layer[layer])
        if k < 1:
            raise ValueError("K must be >= 1")
        lab = np.full(w.shape, -1, dtype=np.int64)
        fz = np.zeros(w.shape, dtype=bool)
        col_cents = []
        for j in range(w.shape[1]):
            rows = np.flatnonzero(mk[:, j])
            vals = w[rows, j]
            if len(rows) <= k:
                lab[rows, j] = np.arange(len(rows))
                col_cents.append(vals.copy())
                continue
            c, l, _ = kmeans_1d(vals, k, rng, max_iter)
            lab[rows, j] = l
            fz[rows, j] = True
            col_cents.append(c)
        labels.append(lab)
        cents.append(col_cents)
        frozen.append(fz)
    return ClusterAssignment([int(k) for k in k_per_layer], labels, cents, frozen)


def retrain_frozen(m: MLPModel, assignment: ClusterAssignment, g: QuantGenes, cfg: TrainConfig,
                   train: Dataset, mask: PruneMask | None = None) -> MLPModel:
    """QAT retraining with clustered weights held at their centroids and pruned weights at 0."""
    if mask is None:
        mask = [lab >= 0 for lab in assignment.labels]
    return qat_retrain(m, g, cfg, train, mask=mask, frozen=assignment.frozen_values())


def sharing_census(q: QuantizedMLP | Sequence[np.ndarray]) -> list[int]:
    """Per-layer count of multipliers: distinct nonzero |code| values within each column."""
    codes = q.weight_codes if isinstance(q, QuantizedMLP) else [np.asarray(w) for w in q]
    out = []
    for w in codes:
        a = np.abs(np.asarray(w, dtype=np.int64))
        out.append(int(sum(len(set(a[:, j][a[:, j] != 0].tolist())) for j in range(a.shape[1]))))
    return out
