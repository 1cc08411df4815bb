"""Deterministic synthetic datasets and a tiny hand-built quantized network."""

from __future__ import annotations

import numpy as np

from .dataio import Dataset
from .quant import FixedPointFormat, QuantGenes, QuantizedMLP, assign_widths


def make_blobs(n_classes: int = 2, n_features: int = 2, n_rows: int = 200, separation: float = 10.0,
               seed: int = 0) -> Dataset:
    """Unit-variance Gaussian blobs whose centers sit ``separation`` apart along feature 0.

    Labels are balanced within one row. At ``separation >= 3`` neighbouring
    classes are (practically) separable by a threshold on feature 0.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if n_classes < 1 or n_features < 1 or n_rows < 1:
        raise ValueError("n_classes, n_features and n_rows must be positive")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_rows) % n_classes)
    x = rng.standard_normal((n_rows, n_features))
    x[:, 0] += labels * separation
    names = [f"f{j}" for j in range(n_features)]
    return Dataset(x, labels, names, n_classes, list(range(n_classes)))


def blob_fixture() -> Dataset:
    """The standard end-to-end fixture: 3 overlapping-ish classes in 4 dimensions."""
    return make_blobs(n_classes=3, n_features=4, n_rows=300, separation=4.0, seed=0)


REFERENCE_GENES = QuantGenes(
    c=FixedPointFormat(4, 1, True),   # Q1.2
    b=FixedPointFormat(4, 1, True),   # Q1.2
    r=FixedPointFormat(4, 1, False),  # UQ1.3
    i=FixedPointFormat(2, 0, False),  # UQ0.2
    s=0.0,
)


def reference_net() -> QuantizedMLP:
    """2-input, 2-hidden, 2-output network with fixed codes.

    Accumulators are sized for the worst case over the full 4-bit input space.
    """
    w0 = np.array([[3, -5], [-3, 2]])
    w1 = np.array([[4, -3], [-1, 6]])
    q = QuantizedMLP(
        weight_codes=[w0, w1],
        bias_codes=[np.array([1, -2]), np.array([0, 2])],
        genes=REFERENCE_GENES,
        mask=[np.ones((2, 2), bool), np.ones((2, 2), bool)],
        acc_widths=[np.zeros(2, np.int64), np.zeros(2, np.int64)],
        metadata={"name": "reference_net"},
    )
    return assign_widths(q, None)


def all_input_codes(q: QuantizedMLP) -> np.ndarray:
    """Every input vector of a network (use only when the input space is small)."""
    d = q.dims[0]
    levels = q.genes.i.max_code + 1
    grids = np.meshgrid(*[np.arange(levels)] * d, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
