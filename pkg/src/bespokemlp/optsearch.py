"""NSGA-II over quantization/pruning genes and the per-layer cluster-count sweep."""

from __future__ import annotations

import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import kernels
from .compress import cluster_weights, prune_low_magnitude, retrain_frozen
from .dataio import Dataset
from .hwcost import AreaEstimator
from .model import MLPModel, TrainConfig, TrainingError, accuracy, profile_activations
from .quant import (SPARSITY_LEVELS, AccumulatorOverflow, FixedPointFormat, QuantGenes, QuantizedMLP,
                    integer_bits_for, qat_retrain, quantize_model, reference_genes)

CROSSOVER_RATE = 0.9
SWAP_PROB = 0.5


# ---------------------------------------------------------------- designs and fronts

@dataclass
class EvaluatedDesign:
    genes: tuple
    accuracy_loss: float
    estimated_area: float
    accuracy: float = float("nan")
    cluster_ks: tuple | None = None
    seed: int = 0
    payload: dict = field(default_factory=dict, repr=False)

    @property
    def objectives(self) -> tuple[float, float]:
        return (self.accuracy_loss, self.estimated_area)

    def to_dict(self) -> dict:
        return {
            "genes": list(self.genes), "accuracy_loss": self.accuracy_loss,
            "estimated_area": None if math.isinf(self.estimated_area) else self.estimated_area,
            "accuracy": None if math.isnan(self.accuracy) else self.accuracy,
            "cluster_ks": None if self.cluster_ks is None else list(self.cluster_ks),
            "seed": self.seed, "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EvaluatedDesign":
        area = obj["estimated_area"]
        return cls(
            tuple(obj["genes"]), float(obj["accuracy_loss"]), math.inf if area is None else float(area),
            float("nan") if obj.get("accuracy") is None else float(obj["accuracy"]),
            None if obj.get("cluster_ks") is None else tuple(obj["cluster_ks"]),
            int(obj.get("seed", 0)), obj.get("payload", {}),
        )


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def nondominated_sort(points: Sequence[Sequence[float]]) -> list[int]:
    """Rank 0 is the non-dominated set; rank k is non-dominated once ranks < k are removed."""
    if len(points) == 0:
        return []
    return [int(r) for r in kernels.nondominated_ranks(np.asarray(points, dtype=np.float64))]


def crowding_distance(points: Sequence[Sequence[float]]) -> list[float]:
    """Boundary points get +inf; interior points sum normalized neighbour gaps per objective."""
    f = np.asarray(points, dtype=np.float64)
    n = len(f)
    if n == 0:
        return []
    dist = np.zeros(n)
    if n <= 2:
        return [math.inf] * n
    for k in range(f.shape[1]):
        # ties broken on the remaining objectives so the result ignores input order
        order = np.lexsort([f[:, j] for j in range(f.shape[1]) if j != k][::-1] + [f[:, k]])
        lo, hi = f[order[0], k], f[order[-1], k]
        dist[order[0]] = dist[order[-1]] = math.inf
        if hi - lo <= 0:
            continue
        for pos in range(1, n - 1):
            dist[order[pos]] += (f[order[pos + 1], k] - f[order[pos - 1], k]) / (hi - lo)
    return dist.tolist()


def hypervolume_2d(points: Sequence[Sequence[float]], ref: Sequence[float]) -> float:
    """Area dominated by ``points`` and bounded by ``ref`` (both objectives minimized)."""
    pts = sorted((float(a), float(b)) for a, b in points if a < ref[0] and b < ref[1])
    hv, best_b = 0.0, float(ref[1])
    for a, b in pts:
        if b < best_b:
            hv += (ref[0] - a) * (best_b - b)
            best_b = b
    return hv


def nondominated_filter(designs: Sequence[EvaluatedDesign]) -> list[EvaluatedDesign]:
    if not designs:
        return []
    ranks = nondominated_sort([d.objectives for d in designs])
    return [d for d, r in zip(designs, ranks) if r == 0]


@dataclass
class ParetoFront:
    designs: list[EvaluatedDesign]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.designs = sorted(self.designs, key=lambda d: (d.estimated_area, d.accuracy_loss, tuple(d.genes),
                                                           d.cluster_ks or ()))

    def __len__(self) -> int:
        return len(self.designs)

    def __iter__(self):
        return iter(self.designs)

    def __getitem__(self, k) -> EvaluatedDesign:
        return self.designs[k]

    def objectives(self) -> np.ndarray:
        return np.array([d.objectives for d in self.designs], dtype=np.float64).reshape(-1, 2)

    def audit(self) -> bool:
        """O(n^2) check that no member dominates another."""
        pts = [d.objectives for d in self.designs]
        return not any(dominates(a, b) for i, a in enumerate(pts) for j, b in enumerate(pts) if i != j)

    def hypervolume(self, ref: Sequence[float]) -> float:
        return hypervolume_2d([d.objectives for d in self.designs], ref)

    def to_dict(self) -> dict:
        return {"kind": "ParetoFront", "metadata": self.metadata, "designs": [d.to_dict() for d in self.designs]}

    @classmethod
    def from_dict(cls, obj: dict) -> "ParetoFront":
        return cls([EvaluatedDesign.from_dict(d) for d in obj["designs"]], obj.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ParetoFront":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- NSGA-II

class Problem(Protocol):
    bounds: Sequence[tuple[int, int]]

    def evaluate(self, genes: tuple) -> EvaluatedDesign: ...


def _key(problem, genes: tuple):
    fn = getattr(problem, "key", None)
    return fn(genes) if fn is not None else tuple(genes)


def _random_genes(rng: np.random.Generator, bounds) -> tuple:
    return tuple(int(rng.integers(lo, hi + 1)) for lo, hi in bounds)


def _evaluate_all(problem, genes_list, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(problem.evaluate, genes_list))
    return [problem.evaluate(g) for g in genes_list]


def _rank_crowd(designs):
    pts = [d.objectives for d in designs]
    ranks = np.array(nondominated_sort(pts))
    crowd = np.zeros(len(pts))
    for r in np.unique(ranks):
        idx = np.flatnonzero(ranks == r)
        crowd[idx] = crowding_distance([pts[i] for i in idx])
    return ranks, crowd


def _select(designs, n):
    """Elitist environmental selection: whole fronts, then the least crowded of the last one."""
    ranks, crowd = _rank_crowd(designs)
    chosen = []
    for r in np.unique(ranks):
        idx = np.flatnonzero(ranks == r)
        if len(chosen) + len(idx) <= n:
            chosen.extend(idx.tolist())
        else:
            order = idx[np.argsort(-crowd[idx], kind="stable")]
            chosen.extend(order[: n - len(chosen)].tolist())
            break
    return [designs[i] for i in chosen]


def _tournament(rng, ranks, crowd) -> int:
    a, b = (int(v) for v in rng.integers(len(ranks), size=2))
    if ranks[a] != ranks[b]:
        return a if ranks[a] < ranks[b] else b
    if crowd[a] != crowd[b]:
        return a if crowd[a] > crowd[b] else b
    return a if rng.random() < 0.5 else b


def _make_offspring(rng, parents, bounds, n, seen, problem):
    ranks, crowd = _rank_crowd(parents)
    n_genes = len(bounds)
    pm = 1.0 / n_genes
    out, attempts = [], 0
    while len(out) < n:
        p1 = parents[_tournament(rng, ranks, crowd)].genes
        p2 = parents[_tournament(rng, ranks, crowd)].genes
        c1, c2 = list(p1), list(p2)
        if rng.random() < CROSSOVER_RATE:
            swap = rng.random(n_genes) < SWAP_PROB
            for k in np.flatnonzero(swap):
                c1[k], c2[k] = c2[k], c1[k]
        for child in (c1, c2):
            for k in range(n_genes):
                if rng.random() < pm:
                    child[k] = int(rng.integers(bounds[k][0], bounds[k][1] + 1))
            child = tuple(int(v) for v in child)
            key = _key(problem, child)
            attempts += 1
            # duplicate elimination, relaxed if the space looks exhausted
            if key in seen and attempts < 50 * n:
                continue
            seen.add(key)
            out.append(child)
            if len(out) == n:
                break
    return out


def _write_checkpoint(path, generation, pop, rng):
    line = {"generation": generation, "population": [list(d.genes) for d in pop],
            "objectives": [[d.accuracy_loss, None if math.isinf(d.estimated_area) else d.estimated_area]
                           for d in pop],
            "rng": rng.bit_generator.state}
    with open(path, "a") as fh:
        fh.write(json.dumps(line, sort_keys=True) + "\n")


def nsga2(problem: Problem, pop_size: int = 40, generations: int = 50, seed: int = 0,
          checkpoint: str | Path | None = None, resume: bool = False, workers: int = 1,
          initial: Sequence[tuple] = ()) -> ParetoFront:
    """Elitist NSGA-II on integer genes with uniform crossover and uniform-reset mutation.

    With ``checkpoint`` set, the population and RNG state are appended as one
    JSON line per generation; ``resume=True`` restarts from the last line.
    ``initial`` chromosomes (if any) replace the first random individuals.
    """
    if pop_size < 4 or pop_size % 2:
        raise ValueError("pop_size must be even and >= 4")
    bounds = [tuple(b) for b in problem.bounds]
    rng = np.random.default_rng(seed)
    start = 0
    pop = None
    if checkpoint is not None and resume and Path(checkpoint).is_file():
        lines = Path(checkpoint).read_text().splitlines()
        if lines:
            last = json.loads(lines[-1])
            rng.bit_generator.state = last["rng"]
            start = int(last["generation"])
            pop = _evaluate_all(problem, [tuple(g) for g in last["population"]], workers)
    if pop is None:
        if checkpoint is not None:
            Path(checkpoint).write_text("")
        genes, seen = [], set()
        for g in initial:
            g = tuple(int(v) for v in g)
            if _key(problem, g) not in seen:
                seen.add(_key(problem, g))
                genes.append(g)
        tries = 0
        while len(genes) < pop_size:
            g = _random_genes(rng, bounds)
            tries += 1
            if _key(problem, g) in seen and tries < 100 * pop_size:
                continue
            seen.add(_key(problem, g))
            genes.append(g)
        pop = _evaluate_all(problem, genes[:pop_size], workers)
        if checkpoint is not None:
            _write_checkpoint(checkpoint, 0, pop, rng)

    for gen in range(start, generations):
        seen = {_key(problem, d.genes) for d in pop}
        kids = _make_offspring(rng, pop, bounds, pop_size, seen, problem)
        pop = _select(pop + _evaluate_all(problem, kids, workers), pop_size)
        if checkpoint is not None:
            _write_checkpoint(checkpoint, gen + 1, pop, rng)

    front, keys = [], set()
    for d in nondominated_filter(pop):
        k = _key(problem, d.genes)
        if k not in keys:
            keys.add(k)
            front.append(d)
    return ParetoFront(front, {"pop_size": pop_size, "generations": generations, "seed": seed})


# ---------------------------------------------------------------- MLP minimization problem

# raw chromosome: (c.P, c.I, b.P, b.I, r.P, r.I, i.P, i.I, sparsity index)
GENE_BOUNDS = ((2, 8), (0, 7), (2, 8), (0, 7), (1, 8), (0, 8), (1, 4), (0, 4), (0, 5))


def decode_genes(genes: Sequence[int], sparsity_max: float = 0.5) -> QuantGenes:
    """Map a raw chromosome to formats; integer-bit genes are clamped to what the width allows."""
    cp, ci, bp, bi, rp, ri, ip, ii, si = (int(v) for v in genes)
    s = min(SPARSITY_LEVELS[si], sparsity_max)
    s = max(lv for lv in SPARSITY_LEVELS if lv <= s + 1e-9)
    return QuantGenes(
        c=FixedPointFormat(cp, min(ci, cp - 1), True),
        b=FixedPointFormat(bp, min(bi, bp - 1), True),
        r=FixedPointFormat(rp, min(ri, rp), False),
        i=FixedPointFormat(ip, min(ii, ip), False),
        s=s,
    )


def encode_genes(g: QuantGenes) -> tuple:
    si = min(range(len(SPARSITY_LEVELS)), key=lambda k: abs(SPARSITY_LEVELS[k] - g.s))
    return (g.c.total_bits, g.c.integer_bits, g.b.total_bits, g.b.integer_bits,
            g.r.total_bits, g.r.integer_bits, g.i.total_bits, g.i.integer_bits, si)


@dataclass(frozen=True)
class MinimizeConfig:
    pop_size: int = 40
    generations: int = 50
    qat_epochs: int = 30
    qat_lr: float = 0.01
    solver: str = "adam"
    batch_size: int = 32
    l1_lambda: float = 1e-4
    sparsity_max: float = 0.5
    k_max: int = 9
    seed: int = 0
    workers: int = 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.solver, self.qat_lr, self.qat_epochs, self.batch_size, self.l1_lambda, self.seed)

    @classmethod
    def from_dict(cls, obj: dict) -> "MinimizeConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class _Built:
    design: EvaluatedDesign
    model: MLPModel | None
    mask: list | None
    q: QuantizedMLP | None


class MinimizationContext:
    """Fixed baseline model, data splits and estimator shared by every evaluation.

    Evaluations are deterministic functions of the decoded genes (and cluster
    counts) under the global seed and are memoized; the memo is safe for
    concurrent insert-or-get.
    """

    bounds = GENE_BOUNDS

    def __init__(self, baseline: MLPModel, train: Dataset, test: Dataset, estimator: AreaEstimator,
                 cfg: MinimizeConfig = MinimizeConfig()):
        self.model, self.train, self.test, self.estimator, self.cfg = baseline, train, test, estimator, cfg
        self.profile = profile_activations(baseline, train)
        self.reference = reference_genes(baseline, self.profile)
        self.baseline_q = quantize_model(baseline, self.reference, None, train, cfg.seed)
        self.baseline_accuracy = accuracy(self.baseline_q, test)
        self.baseline_area = estimator(self.baseline_q).total
        self._memo: dict = {}
        self._pending: dict = {}
        self._lock = threading.Lock()
        self.n_evaluations = 0

    # gene plumbing ----------------------------------------------------
    def decode(self, genes) -> QuantGenes:
        return decode_genes(genes, self.cfg.sparsity_max)

    def key(self, genes) -> tuple:
        return self.decode(genes).key()

    def reference_chromosome(self) -> tuple:
        return encode_genes(self.reference)

    def summary(self) -> dict:
        return {"baseline_accuracy": self.baseline_accuracy, "baseline_area": self.baseline_area,
                "reference_genes": self.reference.to_dict()}

    # evaluation -------------------------------------------------------
    def _memoized(self, key, build: Callable[[], _Built]) -> _Built:
        # a key being built by another thread is waited on, never built twice
        while True:
            with self._lock:
                hit = self._memo.get(key)
                if hit is not None:
                    return hit
                event = self._pending.get(key)
                if event is None:
                    event = self._pending[key] = threading.Event()
                    break
            event.wait()
        try:
            built = build()
            with self._lock:
                self.n_evaluations += 1
                self._memo[key] = built
            return built
        finally:
            with self._lock:
                del self._pending[key]
            event.set()

    def _finish(self, genes, g, trained, mask, frozen=None, clusters=None, ks=None) -> _Built:
        try:
            q = quantize_model(trained, g, mask, self.train, self.cfg.seed, frozen=frozen, clusters=clusters)
            acc = accuracy(q, self.test)
        except AccumulatorOverflow:
            return self._failed(genes, ks)
        area = self.estimator(q)
        design = EvaluatedDesign(
            tuple(genes), self.baseline_accuracy - acc, area.total, acc, ks, self.cfg.seed,
            {"quantized": q.to_dict(), "area": area.to_dict(), "formats": {k: str(getattr(g, k)) for k in "cbri"},
             "sparsity": g.s},
        )
        return _Built(design, trained, mask, q)

    def _failed(self, genes, ks=None) -> _Built:
        return _Built(EvaluatedDesign(tuple(genes), 1.0, math.inf, 0.0, ks, self.cfg.seed), None, None, None)

    def build(self, genes) -> _Built:
        genes = tuple(int(v) for v in genes)

        def run():
            g = self.decode(genes)
            mask = prune_low_magnitude(self.model, g.s)
            try:
                trained = qat_retrain(self.model, g, self.cfg.train_config(), self.train, mask)
            except TrainingError:
                return self._failed(genes)
            return self._finish(genes, g, trained, mask)

        return self._memoized(self.key(genes), run)

    def evaluate(self, genes) -> EvaluatedDesign:
        return self.build(genes).design

    def evaluate_clustered(self, genes, ks: tuple[int, int]) -> EvaluatedDesign:
        genes = tuple(int(v) for v in genes)
        base = self.build(genes)

        def run():
            if base.model is None:
                return self._failed(genes, ks)
            g = self.decode(genes)
            assignment = cluster_weights(base.model.weights, base.mask, ks, self.cfg.seed)
            try:
                trained = retrain_frozen(base.model, assignment, g, self.cfg.train_config(), self.train, base.mask)
            except TrainingError:
                return self._failed(genes, ks)
            return self._finish(genes, g, trained, base.mask, assignment.frozen_values(), assignment.labels, ks)

        return self._memoized((self.key(genes), tuple(ks)), run).design


def group_caps(mask) -> tuple[int, int]:
    """Largest number of kept same-input weights per layer (bounds useful K)."""
    return tuple(int(np.max(m.sum(axis=0))) if m.size else 0 for m in mask)


def cluster_sweep(front: ParetoFront, ctx: MinimizationContext, k_max: int | None = None) -> ParetoFront:
    """Try every (K_hidden, K_out) in 1..k_max on each member, merge with the originals, keep the non-dominated."""
    if len(front) == 0:
        raise ValueError("cluster sweep needs a non-empty front")
    k_max = k_max or ctx.cfg.k_max
    merged = list(front.designs)
    for d in front.designs:
        if d.cluster_ks is not None:
            continue
        base = ctx.build(d.genes)
        if base.mask is None:
            continue
        caps = group_caps(base.mask)
        for kh in range(1, min(k_max, max(caps[0], 1)) + 1):
            for ko in range(1, min(k_max, max(caps[1], 1)) + 1):
                if kh >= caps[0] and ko >= caps[1]:
                    continue  # identity clustering reproduces the original design
                merged.append(ctx.evaluate_clustered(d.genes, (kh, ko)))
    out, seen = [], set()
    for d in nondominated_filter(merged):
        k = (ctx.key(d.genes), d.cluster_ks)
        if k not in seen:
            seen.add(k)
            out.append(d)
    return ParetoFront(out, dict(front.metadata, cluster_sweep={"k_max": k_max}))


def minimize(ctx: MinimizationContext, checkpoint=None, resume: bool = False) -> ParetoFront:
    """NSGA-II over formats and sparsity followed by the cluster sweep."""
    cfg = ctx.cfg
    front = nsga2(ctx, cfg.pop_size, cfg.generations, cfg.seed, checkpoint, resume, cfg.workers)
    final = cluster_sweep(front, ctx, cfg.k_max)
    final.metadata.update(ctx.summary())
    return final


# ---------------------------------------------------------------- standalone techniques

def quantization_only_front(ctx: MinimizationContext, bits=range(2, 9)) -> ParetoFront:
    """Weight precision sweep with every other format at reference precision and no pruning."""
    wmax = max(float(np.abs(w).max()) for w in ctx.model.weights)
    ref = ctx.reference
    designs = []
    for p in bits:
        g = QuantGenes(FixedPointFormat(p, integer_bits_for(wmax, p, True), True), ref.b, ref.r, ref.i, 0.0)
        designs.append(ctx.evaluate(encode_genes(g)))
    return ParetoFront(nondominated_filter(designs), {"technique": "quantization"})


def pruning_only_front(ctx: MinimizationContext) -> ParetoFront:
    ref = ctx.reference
    designs = []
    for s in SPARSITY_LEVELS:
        if s > ctx.cfg.sparsity_max + 1e-9:
            continue
        g = QuantGenes(ref.c, ref.b, ref.r, ref.i, s)
        designs.append(ctx.evaluate(encode_genes(g)))
    return ParetoFront(nondominated_filter(designs), {"technique": "pruning"})


def sharing_only_front(ctx: MinimizationContext) -> ParetoFront:
    base = ParetoFront([ctx.evaluate(ctx.reference_chromosome())])
    out = cluster_sweep(base, ctx)
    out.metadata["technique"] = "sharing"
    return out
