"""One-hidden-layer ReLU MLPs: training, evaluation, activation profiling and a
hardware-aware architecture search."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import Dataset, kfold

MAX_HIDDEN = 10


class TrainingError(RuntimeError):
    """Raised when training diverges (non-finite loss)."""


@dataclass
class LayerParams:
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias length must equal weight rows: {self.weights.shape} vs {self.biases.shape}"
            )

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.biases.copy())


@dataclass
class MLPModel:
    """Float MLP with one ReLU hidden layer and a linear output layer."""

    layers: list[LayerParams]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layers) != 2:
            raise ValueError("exactly one hidden layer is supported")
        h, d = self.layers[0].weights.shape
        o, h2 = self.layers[1].weights.shape
        if h2 != h:
            raise ValueError(f"layer shapes do not chain: ({h}x{d}) then ({o}x{h2})")
        if not 1 <= h <= MAX_HIDDEN:
            raise ValueError(f"hidden_dim must be in [1, {MAX_HIDDEN}], got {h}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[1].weights.shape[0]

    @property
    def weights(self) -> list[np.ndarray]:
        return [l.weights for l in self.layers]

    def copy(self) -> "MLPModel":
        return MLPModel([l.copy() for l in self.layers], json.loads(json.dumps(self.metadata)))

    def activations(self, x: np.ndarray):
        """Return (hidden pre-activation, hidden post-activation, output) for a batch."""
        l0, l1 = self.layers
        pre = x @ l0.weights.T + l0.biases
        post = np.maximum(pre, 0.0)
        return pre, post, post @ l1.weights.T + l1.biases

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.activations(np.asarray(x, dtype=np.float64))[2]

    def predict(self, x: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class index
        return np.argmax(self.logits(x), axis=1)

    def to_dict(self) -> dict:
        return {
            "kind": "MLPModel",
            "dims": [self.input_dim, self.hidden_dim, self.output_dim],
            "layers": [{"weights": l.weights.tolist(), "biases": l.biases.tolist()} for l in self.layers],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MLPModel":
        layers = [LayerParams(l["weights"], l["biases"]) for l in obj["layers"]]
        return cls(layers, obj.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MLPModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrainConfig:
    solver: str = "adam"
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    l1_lambda: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.solver not in ("sgd", "adam"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive, epochs nonnegative")
        if self.l1_lambda < 0:
            raise ValueError("l1_lambda must be >= 0")


@dataclass
class ActivationProfile:
    hidden_pre_absmax: np.ndarray
    hidden_post_max: np.ndarray
    output_pre_absmax: np.ndarray
    output_post_max: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, obj: dict) -> "ActivationProfile":
        return cls(**{k: np.asarray(v) for k, v in obj.items()})


def init_model(input_dim: int, hidden_dim: int, output_dim: int, seed: int | np.random.Generator = 0) -> MLPModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in ((input_dim, hidden_dim), (hidden_dim, output_dim)):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append(LayerParams(rng.uniform(-lim, lim, (fan_out, fan_in)), np.zeros(fan_out)))
    return MLPModel(layers)


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.mean(z[np.arange(n), y] - np.log(ez.sum(axis=1))))
    g = p
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def loss_and_grads(m: MLPModel, x: np.ndarray, y: np.ndarray, l1_lambda: float = 0.0):
    """Loss (cross-entropy + L1 on weights) and gradients ``[(dW0, db0), (dW1, db1)]``."""
    l0, l1 = m.layers
    pre, post, out = m.activations(x)
    loss, g_out = softmax_xent(out, y)
    dW1 = g_out.T @ post
    db1 = g_out.sum(axis=0)
    g_pre = (g_out @ l1.weights) * (pre > 0)
    dW0 = g_pre.T @ x
    db0 = g_pre.sum(axis=0)
    if l1_lambda:
        loss += l1_lambda * sum(float(np.abs(w).sum()) for w in m.weights)
        dW0 = dW0 + l1_lambda * np.sign(l0.weights)
        dW1 = dW1 + l1_lambda * np.sign(l1.weights)
    return loss, [(dW0, db0), (dW1, db1)]


class Optimizer:
    """Plain SGD or Adam over a flat list of parameter arrays (updated in place)."""

    def __init__(self, solver: str, lr: float, params: list[np.ndarray]):
        self.solver, self.lr, self.t = solver, lr, 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.solver == "sgd":
            for p, g in zip(params, grads):
                p -= self.lr * g
            return
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + eps)


def flat_params(m: MLPModel) -> list[np.ndarray]:
    return [a for l in m.layers for a in (l.weights, l.biases)]


def run_epochs(m: MLPModel, d: Dataset, cfg: TrainConfig, grad_fn, rng: np.random.Generator,
               after_step: Callable[[MLPModel], None] | None = None) -> MLPModel:
    """Shared minibatch loop; ``grad_fn(model, xb, yb)`` returns (loss, grads)."""
    params = flat_params(m)
    opt = Optimizer(cfg.solver, cfg.learning_rate, params)
    n = len(d)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            bi = order[start:start + cfg.batch_size]
            loss, grads = grad_fn(m, d.features[bi], d.labels[bi])
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} (learning rate {cfg.learning_rate} too high?)"
                )
            opt.step(params, [g for pair in grads for g in pair])
            if after_step is not None:
                after_step(m)
    return m


def train(d: Dataset, topology: Sequence[int], cfg: TrainConfig) -> MLPModel:
    """Train an MLP with dims ``(input, hidden, output)``. Deterministic for a fixed seed."""
    input_dim, hidden_dim, output_dim = topology
    if input_dim != d.n_features or output_dim != d.n_classes:
        raise ValueError(
            f"topology {tuple(topology)} does not match dataset ({d.n_features} features, {d.n_classes} classes)"
        )
    rng = np.random.default_rng(cfg.seed)
    m = init_model(input_dim, hidden_dim, output_dim, rng)
    run_epochs(m, d, cfg, lambda mm, xb, yb: loss_and_grads(mm, xb, yb, cfg.l1_lambda), rng)
    m.metadata["train"] = {
        "solver": cfg.solver, "learning_rate": cfg.learning_rate, "epochs": cfg.epochs,
        "batch_size": cfg.batch_size, "l1_lambda": cfg.l1_lambda, "seed": cfg.seed,
    }
    return m


def accuracy(m, d: Dataset) -> float:
    """Fraction of rows whose argmax prediction matches the label. Works for any model with ``predict``."""
    if len(d) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(m.predict(d.features) == d.labels))


def profile_activations(m, train: Dataset) -> ActivationProfile:
    """Per-node maxima over the training rows (pre-activation magnitudes, post-activation maxima)."""
    pre, post, out = m.activations(train.features)
    return ActivationProfile(
        hidden_pre_absmax=np.abs(pre).max(axis=0),
        hidden_post_max=post.max(axis=0),
        output_pre_absmax=np.abs(out).max(axis=0),
        output_post_max=out.max(axis=0),
    )


# ---------------------------------------------------------------- NAS

LR_GRID = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
EPOCH_GRID = (50, 100, 200)
SOLVERS = ("sgd", "adam")


@dataclass
class NASCandidate:
    index: int
    hidden_dim: int
    solver: str
    learning_rate: float
    epochs: int
    cv_accuracy: float = float("nan")
    area: float = float("nan")
    model: MLPModel | None = None

    def config(self, seed: int, batch_size: int = 32, l1_lambda: float = 0.0) -> TrainConfig:
        return TrainConfig(self.solver, self.learning_rate, self.epochs, batch_size, l1_lambda, seed)


def candidate_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def sample_candidates(budget: int, seed: int) -> list[NASCandidate]:
    rng = np.random.default_rng(seed)
    return [
        NASCandidate(
            index=k,
            hidden_dim=int(rng.integers(1, MAX_HIDDEN + 1)),
            solver=SOLVERS[int(rng.integers(len(SOLVERS)))],
            learning_rate=LR_GRID[int(rng.integers(len(LR_GRID)))],
            epochs=EPOCH_GRID[int(rng.integers(len(EPOCH_GRID)))],
        )
        for k in range(budget)
    ]


def select_candidate(cands: Sequence[NASCandidate], tolerance: float = 0.005) -> NASCandidate:
    """Among candidates within ``tolerance`` of the best CV accuracy, pick the smallest area.

    Area ties fall back to higher CV accuracy, then lower candidate index.
    """
    ok = [c for c in cands if math.isfinite(c.cv_accuracy)]
    if not ok:
        raise TrainingError("every NAS candidate failed to train")
    best = max(c.cv_accuracy for c in ok)
    pool = [c for c in ok if c.cv_accuracy >= best - tolerance - 1e-12]
    return min(pool, key=lambda c: (c.area if math.isfinite(c.area) else math.inf, -c.cv_accuracy, c.index))


def nas_search(train_set: Dataset, budget: int = 20, estimator: Callable[[MLPModel], float] | None = None,
               seed: int = 0, folds: int = 5, tolerance: float = 0.005, batch_size: int = 32,
               l1_lambda: float = 0.0) -> MLPModel:
    """Random hyper-parameter search scored by k-fold CV accuracy, then area-aware selection.

    ``estimator(model) -> area`` prices each pooled candidate after it is
    retrained on the full training split. Without an estimator the most
    accurate candidate wins.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    cands = sample_candidates(budget, seed)
    k = min(folds, len(train_set))
    splits = kfold(train_set, k, seed)
    dims_of = lambda c: (train_set.n_features, c.hidden_dim, train_set.n_classes)
    for c in cands:
        cfg = c.config(candidate_seed(seed, c.index), batch_size, l1_lambda)
        try:
            scores = [accuracy(train(tr, dims_of(c), cfg), va) for tr, va in splits]
        except TrainingError:
            continue
        c.cv_accuracy = float(np.mean(scores))

    finite = [c for c in cands if math.isfinite(c.cv_accuracy)]
    if not finite:
        raise TrainingError("every NAS candidate failed to train")
    best = max(c.cv_accuracy for c in finite)
    for c in finite:
        if c.cv_accuracy >= best - tolerance - 1e-12:
            c.model = train(train_set, dims_of(c), c.config(candidate_seed(seed, c.index), batch_size, l1_lambda))
            c.area = float(estimator(c.model)) if estimator is not None else 0.0
    win = select_candidate(cands, tolerance)
    win.model.metadata["nas"] = {
        "seed": seed, "budget": budget, "tolerance": tolerance, "winner": win.index,
        "cv_accuracy": win.cv_accuracy, "estimated_area": win.area,
        "candidates": [
            {"index": c.index, "hidden_dim": c.hidden_dim, "solver": c.solver,
             "learning_rate": c.learning_rate, "epochs": c.epochs,
             "cv_accuracy": c.cv_accuracy if math.isfinite(c.cv_accuracy) else None,
             "area": c.area if math.isfinite(c.area) else None}
            for c in cands
        ],
    }
    return win.model
