"""Tabular dataset ingestion, min-max normalization, stratified splits and folds."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for malformed or missing input data."""


class DataWarning(UserWarning):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    attribute_names: list[str]
    n_classes: int
    label_mapping: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise DataError(
                f"{len(self.features)} feature rows but {len(self.labels)} labels"
            )
        if self.n_classes < 1:
            raise DataError("n_classes must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_ratio < 1.0:
            raise DataError(f"train_ratio must be in (0, 1), got {self.train_ratio}")


@dataclass
class NormStats:
    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def of(cls, d: Dataset) -> "NormStats":
        if len(d) == 0:
            raise DataError("cannot compute normalization statistics of an empty dataset")
        return cls(d.features.min(axis=0), d.features.max(axis=0))

    def to_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "NormStats":
        return cls(np.asarray(obj["min"], float), np.asarray(obj["max"], float))


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, label_column: int | str = -1, delimiter: str = ",", header: bool | None = None) -> Dataset:
    """Read a delimited text file into a :class:`Dataset`.

    ``header=None`` auto-detects a header row: the first row is treated as a
    header when any of its cells is non-numeric. Labels are remapped to dense
    ids ``0..n_classes-1`` in sorted order of the original label values; the
    original values are kept in ``label_mapping``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        if delimiter.isspace():
            rows = [line.split() for line in fh if line.strip()]
        else:
            rows = [r for r in csv.reader(fh, delimiter=delimiter) if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no rows")

    if header is None:
        header = not all(_is_number(c) for c in rows[0])
    names = [c.strip() for c in rows[0]] if header else [f"x{j}" for j in range(len(rows[0]))]
    body = rows[1:] if header else rows
    if not body:
        raise DataError(f"{path}: no rows")

    ncol = len(names)
    if isinstance(label_column, str):
        if label_column not in names:
            raise DataError(f"{path}: label column {label_column!r} not found in header")
        label_idx = names.index(label_column)
    else:
        label_idx = label_column % ncol

    feats, raw_labels = [], []
    first_line = 2 if header else 1
    for r, row in enumerate(body):
        lineno = first_line + r
        if len(row) != ncol:
            raise DataError(f"{path}:{lineno}: expected {ncol} columns, got {len(row)}")
        vals = []
        for j, cell in enumerate(row):
            if j == label_idx:
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: column {j} ({names[j]}): non-numeric value {cell.strip()!r}"
                ) from None
        feats.append(vals)
        lab = row[label_idx].strip()
        raw_labels.append(float(lab) if _is_number(lab) else lab)

    # numeric labels sort numerically, text labels lexically
    mapping = sorted(set(raw_labels), key=lambda v: (isinstance(v, str), v))
    index = {v: k for k, v in enumerate(mapping)}
    labels = np.array([index[v] for v in raw_labels], dtype=np.int64)
    mapping = [int(v) if isinstance(v, float) and v.is_integer() else v for v in mapping]
    attr = [n for j, n in enumerate(names) if j != label_idx]
    return Dataset(np.array(feats, dtype=np.float64), labels, attr, len(mapping), mapping)


def normalize(d: Dataset, stats_source: Dataset | NormStats) -> Dataset:
    """Min-max scale ``d`` using the ranges of ``stats_source``, clamping to [0, 1].

    Constant columns in the statistics source map to 0 and emit a
    :class:`DataWarning`.
    """
    stats = stats_source if isinstance(stats_source, NormStats) else NormStats.of(stats_source)
    span = stats.maximum - stats.minimum
    const = span <= 0
    if const.any():
        cols = [d.attribute_names[j] if j < len(d.attribute_names) else str(j) for j in np.flatnonzero(const)]
        warnings.warn(f"constant column(s) mapped to 0: {', '.join(cols)}", DataWarning, stacklevel=2)
    safe = np.where(const, 1.0, span)
    out = (d.features - stats.minimum) / safe
    out[:, const] = 0.0
    np.clip(out, 0.0, 1.0, out=out)
    return replace(d, features=out)


def split(d: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Stratified, seeded train/test split.

    The overall train size is ``round(train_ratio * n)``; per-class quotas are
    assigned by largest remainder, with every class of two or more rows keeping
    at least one row on each side.
    """
    n = len(d)
    if n < 2 * d.n_classes:
        raise DataError(f"need at least {2 * d.n_classes} rows to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    per_class = [rng.permutation(np.flatnonzero(d.labels == c)) for c in range(d.n_classes)]
    counts = np.array([len(ix) for ix in per_class])
    n_train = int(round(spec.train_ratio * n))

    exact = counts * spec.train_ratio
    quota = np.floor(exact).astype(int)
    lo = np.where(counts >= 2, 1, counts)
    hi = np.where(counts >= 2, counts - 1, counts)
    quota = np.clip(quota, lo, hi)
    # hand out the remaining rows by largest fractional remainder, ties by class id
    order = sorted(range(d.n_classes), key=lambda c: (-(exact[c] - np.floor(exact[c])), c))
    while quota.sum() < n_train:
        grew = False
        for c in order:
            if quota.sum() >= n_train:
                break
            if quota[c] < hi[c]:
                quota[c] += 1
                grew = True
        if not grew:
            break
    while quota.sum() > n_train:
        shrunk = False
        for c in reversed(order):
            if quota.sum() <= n_train:
                break
            if quota[c] > lo[c]:
                quota[c] -= 1
                shrunk = True
        if not shrunk:
            break

    singles = [c for c in range(d.n_classes) if counts[c] == 1]
    if singles:
        warnings.warn(f"classes with a single sample kept in train only: {singles}", DataWarning, stacklevel=2)

    train_idx = np.sort(np.concatenate([ix[:q] for ix, q in zip(per_class, quota)]))
    test_idx = np.sort(np.concatenate([ix[q:] for ix, q in zip(per_class, quota)]))
    return d.subset(train_idx), d.subset(test_idx)


def kfold(d: Dataset, k: int, seed: int = 0) -> list[tuple[Dataset, Dataset]]:
    """Stratified k-fold partition: rows are shuffled, grouped by class and dealt round-robin."""
    n = len(d)
    if k < 2:
        raise DataError("k must be at least 2")
    if k > n:
        raise DataError(f"k={k} exceeds the number of rows ({n})")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    order = perm[np.argsort(d.labels[perm], kind="stable")]
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % k
    out = []
    for f in range(k):
        out.append((d.subset(np.flatnonzero(fold_of != f)), d.subset(np.flatnonzero(fold_of == f))))
    return out


def write_manifest(path, *, source: str, label_column, delimiter: str, split_spec: SplitSpec,
                   stats: NormStats, d: Dataset) -> None:
    manifest = {
        "source": str(source),
        "label_column": label_column,
        "delimiter": delimiter,
        "label_mapping": d.label_mapping,
        "n_classes": d.n_classes,
        "attribute_names": d.attribute_names,
        "split": {"train_ratio": split_spec.train_ratio, "seed": split_spec.seed},
        "normalization": stats.to_dict(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None


def prepare(source, label_column=-1, delimiter=",", split_spec: SplitSpec = SplitSpec()):
    """Load, split and normalize with train statistics. Returns ``(train, test, stats, raw)``."""
    raw = load_csv(source, label_column=label_column, delimiter=delimiter)
    train, test = split(raw, split_spec)
    stats = NormStats.of(train)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        test_n = normalize(test, stats)
    return normalize(train, stats), test_n, stats, raw


def from_manifest(manifest: dict):
    """Rebuild the normalized train/test splits recorded in a manifest."""
    spec = SplitSpec(manifest["split"]["train_ratio"], manifest["split"]["seed"])
    raw = load_csv(manifest["source"], label_column=manifest["label_column"], delimiter=manifest["delimiter"])
    train, test = split(raw, spec)
    stats = NormStats.from_dict(manifest["normalization"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        return normalize(train, stats), normalize(test, stats)
