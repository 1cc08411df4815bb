"""Bespoke MLP area estimation.

The estimator prices a quantized MLP as the sum over neurons of its unshared
constant multipliers (looked up per input precision and |weight code|), a
linear-regression model of its accumulator, and a gate-count formula for its
QRelu. The deterministic gate-count oracles in this module stand in for logic
synthesis: CSD/binary shift-add networks for constant multipliers and balanced
adder trees for accumulators.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .quant import QuantizedMLP

GATES = ("INV", "AND2", "OR2", "XOR2", "HA", "FA")
MAX_CODE = 128


class EstimatorError(ValueError):
    pass


class InfeasibleConstraint(ValueError):
    def __init__(self, message: str, achievable: float):
        super().__init__(message)
        self.achievable = achievable


# ---------------------------------------------------------------- gate library

@dataclass(frozen=True)
class GateLibrary:
    area: dict
    delay: dict
    voltage_table: tuple = ((0.6, 3.0), (0.8, 1.6), (1.0, 1.0))
    name: str = "default"

    def __post_init__(self):
        for g in GATES:
            if self.area.get(g, 0) <= 0 or self.delay.get(g, 0) <= 0:
                raise ValueError(f"gate {g} needs positive area and delay")
        table = tuple((float(v), float(s)) for v, s in self.voltage_table)
        object.__setattr__(self, "voltage_table", table)
        volts = [v for v, _ in table]
        scales = [s for _, s in table]
        if volts != sorted(volts) or len(set(volts)) != len(volts):
            raise ValueError("voltage table must be strictly ascending in voltage")
        if any(b >= a for a, b in zip(scales, scales[1:])):
            raise ValueError("delay scale must strictly decrease with voltage")
        if not any(abs(v - 0.6) < 1e-9 for v in volts) or not any(abs(v - 1.0) < 1e-9 for v in volts):
            raise ValueError("voltage table must include 0.6 V and 1.0 V")
        if any(s <= 0 for s in scales):
            raise ValueError("delay scales must be positive")

    @classmethod
    def default(cls) -> "GateLibrary":
        return cls(
            area={"INV": 1.0, "AND2": 2.0, "OR2": 2.0, "XOR2": 3.0, "HA": 5.0, "FA": 9.0},
            # seconds at nominal voltage; printed logic switches in the millisecond range
            delay={"INV": 0.4e-3, "AND2": 0.8e-3, "OR2": 0.8e-3, "XOR2": 1.2e-3, "HA": 1.2e-3, "FA": 2.0e-3},
        )

    @property
    def v_min(self) -> float:
        return self.voltage_table[0][0]

    @property
    def v_max(self) -> float:
        return self.voltage_table[-1][0]

    def delay_scale(self, voltage: float) -> float:
        """Linear interpolation of the delay multiplier between table rows."""
        volts = [v for v, _ in self.voltage_table]
        if voltage < volts[0] - 1e-9 or voltage > volts[-1] + 1e-9:
            raise ValueError(f"voltage {voltage} V outside table range [{volts[0]}, {volts[-1]}]")
        return float(np.interp(voltage, volts, [s for _, s in self.voltage_table]))

    def to_dict(self) -> dict:
        return {"name": self.name, "area": dict(self.area), "delay": dict(self.delay),
                "voltage_table": [list(r) for r in self.voltage_table]}

    @classmethod
    def from_dict(cls, obj: dict) -> "GateLibrary":
        base = cls.default()
        table = obj.get("voltage_table", base.voltage_table)
        if isinstance(table, dict):
            table = sorted((float(k), float(v)) for k, v in table.items())
        return cls(
            area={**base.area, **obj.get("area", {})},
            delay={**base.delay, **obj.get("delay", {})},
            voltage_table=tuple(tuple(r) for r in table),
            name=obj.get("name", "custom"),
        )

    @classmethod
    def load(cls, path) -> "GateLibrary":
        """Read a gate library from a ``.toml`` or ``.json`` file."""
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".toml":
            try:
                import tomllib
            except ImportError:  # Python < 3.11
                import tomli as tomllib
            return cls.from_dict(tomllib.loads(text))
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- constant multipliers

def csd(w: int) -> list[tuple[int, int]]:
    """Canonical signed-digit form of ``w >= 0`` as ``[(bit position, +1/-1), ...]`` ascending."""
    if w < 0:
        raise ValueError("csd expects a nonnegative integer")
    digits, pos = [], 0
    while w:
        if w & 1:
            d = 2 - (w & 3)  # +1 when w % 4 == 1, -1 when w % 4 == 3
            digits.append((pos, d))
            w -= d
        w >>= 1
        pos += 1
    return digits


def binary_digits(w: int) -> list[tuple[int, int]]:
    return [(p, 1) for p in range(w.bit_length()) if (w >> p) & 1]


@dataclass(frozen=True)
class ShiftAddPlan:
    """A chain of add/sub stages realizing ``x * w`` for a ``z``-bit unsigned ``x``."""

    w: int
    z: int
    digits: tuple
    stages: tuple  # (width, is_subtract) per stage
    area: float
    delay: float

    @property
    def out_width(self) -> int:
        return product_width(self.z, self.w)


def _chain(digits: Sequence[tuple[int, int]], z: int, lib: GateLibrary):
    if len(digits) <= 1:
        return (), 0.0, 0.0
    p0, d0 = digits[0]
    negative = d0 < 0
    stages, area, delay = [], 0.0, 0.0
    for p, d in digits[1:]:
        width = z + p - p0
        subtract = negative != (d < 0)
        stages.append((width, subtract))
        area += width * lib.area["FA"] + (width * lib.area["INV"] if subtract else 0.0)
        delay += width * lib.delay["FA"] + (lib.delay["INV"] if subtract else 0.0)
        # mixed signs leave a positive partial; two negatives stay negative
        negative = negative and d < 0
    return tuple(stages), area, delay


def multiplier_plan(w_abs: int, z: int, lib: GateLibrary) -> ShiftAddPlan:
    """Cheaper of the CSD and plain-binary shift-add networks (ties prefer CSD)."""
    if w_abs < 0 or z < 1:
        raise ValueError("need w_abs >= 0 and z >= 1")
    best = None
    for digits in (csd(w_abs), binary_digits(w_abs)):
        stages, area, delay = _chain(digits, z, lib)
        if best is None or area < best.area:
            best = ShiftAddPlan(w_abs, z, tuple(digits), stages, area, delay)
    return best


def multiplier_oracle(w_abs: int, z: int, lib: GateLibrary) -> float:
    """Gate-count area of the bespoke multiplier ``x * w_abs`` for a ``z``-bit input."""
    return multiplier_plan(w_abs, z, lib).area


def product_width(z: int, w_abs: int) -> int:
    return (((1 << z) - 1) * abs(int(w_abs))).bit_length()


@dataclass
class MultiplierCostTable:
    z_set: tuple
    table: dict  # z -> np.ndarray of MAX_CODE + 1 areas

    def lookup(self, z: int, w_abs: int) -> float:
        if z not in self.table:
            raise EstimatorError(f"multiplier table has no entry for {z}-bit inputs (have {sorted(self.table)})")
        if not 0 <= w_abs <= MAX_CODE:
            raise EstimatorError(f"|weight code| {w_abs} outside [0, {MAX_CODE}]")
        return float(self.table[z][w_abs])

    def __len__(self) -> int:
        return sum(len(v) for v in self.table.values())

    def to_dict(self) -> dict:
        return {str(z): v.tolist() for z, v in self.table.items()}

    @classmethod
    def from_dict(cls, obj: dict) -> "MultiplierCostTable":
        table = {int(z): np.asarray(v, dtype=np.float64) for z, v in obj.items()}
        return cls(tuple(sorted(table)), table)


def build_multiplier_lut(lib: GateLibrary, z_set: Iterable[int] = range(1, 5)) -> MultiplierCostTable:
    z_set = tuple(sorted(set(int(z) for z in z_set)))
    table = {z: np.array([multiplier_oracle(w, z, lib) for w in range(MAX_CODE + 1)]) for z in z_set}
    return MultiplierCostTable(z_set, table)


# ---------------------------------------------------------------- accumulators

def adder_tree(widths: Sequence[int], lib: GateLibrary):
    """Balanced adder tree over width-sorted summands.

    Returns ``(area, levels, out_width)``. Each two-operand adder of widths
    ``a, b`` costs ``min(a, b)`` full adders plus ``|a - b|`` half adders and
    yields ``max(a, b) + 1`` bits.
    """
    level = sorted(int(w) for w in widths if w > 0)
    area, depth = 0.0, 0
    while len(level) > 1:
        nxt = []
        for k in range(0, len(level) - 1, 2):
            a, b = level[k], level[k + 1]
            area += min(a, b) * lib.area["FA"] + abs(a - b) * lib.area["HA"]
            nxt.append(max(a, b) + 1)
        if len(level) % 2:
            nxt.append(level[-1])
        level = sorted(nxt)
        depth += 1
    return area, depth, (level[0] if level else 0)


def accumulator_oracle(product_widths: Sequence[int], bias_width: int, lib: GateLibrary) -> float:
    return adder_tree(list(product_widths) + [bias_width], lib)[0]


def accumulator_features(codes: Iterable[int], z: int) -> np.ndarray:
    """(nonzero summand count, total product bits, widest product) for one neuron."""
    widths = [product_width(z, c) for c in codes if c != 0]
    if not widths:
        return np.zeros(3)
    return np.array([len(widths), sum(widths), max(widths)], dtype=np.float64)


@dataclass
class AccumulatorRegressor:
    z: int
    coef: np.ndarray
    intercept: float
    n_samples: int = 0
    r2: float = float("nan")
    fallback: bool = False

    def predict_features(self, feats: np.ndarray) -> float:
        return max(float(feats @ self.coef + self.intercept), 0.0)

    def predict(self, codes: Iterable[int]) -> float:
        return self.predict_features(accumulator_features(codes, self.z))

    @classmethod
    def fit(cls, z: int, x: np.ndarray, y: np.ndarray) -> "AccumulatorRegressor":
        """Ordinary least squares; a rank-deficient design falls back to the mean."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        design = np.column_stack([x, np.ones(len(x))])
        if np.linalg.matrix_rank(design) < design.shape[1]:
            warnings.warn(f"singular accumulator design matrix for z={z}; using the mean predictor",
                          RuntimeWarning, stacklevel=2)
            return cls(z, np.zeros(x.shape[1]), float(y.mean()), len(y), 0.0, True)
        sol, *_ = np.linalg.lstsq(design, y, rcond=None)
        pred = design @ sol
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot if ss_tot > 0 else 1.0
        return cls(z, sol[:-1], float(sol[-1]), len(y), r2, False)

    def to_dict(self) -> dict:
        return {"z": self.z, "coef": self.coef.tolist(), "intercept": self.intercept,
                "n_samples": self.n_samples, "r2": self.r2, "fallback": self.fallback}

    @classmethod
    def from_dict(cls, obj: dict) -> "AccumulatorRegressor":
        return cls(int(obj["z"]), np.asarray(obj["coef"], float), float(obj["intercept"]),
                   int(obj["n_samples"]), float(obj["r2"]), bool(obj["fallback"]))


def sample_neuron(rng: np.random.Generator, max_len: int = 16):
    """Random neuron: 1-16 weight codes and a bias in [-b, b] for a random power-of-two b <= 128."""
    bound = 1 << int(rng.integers(0, 8))
    n = int(rng.integers(1, max_len + 1))
    codes = rng.integers(-bound, bound + 1, size=n)
    bias = int(rng.integers(-bound, bound + 1))
    return [int(c) for c in codes], bias


def neuron_oracle(codes: Sequence[int], bias: int, z: int, lib: GateLibrary) -> float:
    widths = [product_width(z, c) for c in codes if c != 0]
    return accumulator_oracle(widths, abs(int(bias)).bit_length(), lib)


def fit_accumulator_lr(z: int, lib: GateLibrary, n_samples: int = 100, seed: int = 0,
                       oracle: Callable[[Sequence[int], int, int, GateLibrary], float] = neuron_oracle
                       ) -> AccumulatorRegressor:
    """Fit LR_z on ``n_samples`` random neurons priced by ``oracle(codes, bias, z, lib)``."""
    if n_samples < 10:
        raise ValueError("need at least 10 samples")
    rng = np.random.default_rng([seed, z])
    xs, ys = [], []
    for _ in range(n_samples):
        codes, bias = sample_neuron(rng)
        xs.append(accumulator_features(codes, z))
        ys.append(oracle(codes, bias, z, lib))
    return AccumulatorRegressor.fit(z, np.array(xs), np.array(ys))


# ---------------------------------------------------------------- QRelu

def qrelu_area(i_i: int, f_i: int, i_r: int, f_r: int, lib: GateLibrary) -> float:
    """INV + (I_r + F_r) AND2 + max(I_i - I_r - 1, 0) OR2.

    Output bits with no source bit in the accumulator (``I_r > I_i`` or
    ``F_r > F_i``) are constant zero and need no AND2.
    """
    kept = min(i_r, i_i) + min(f_r, f_i)
    return lib.area["INV"] + kept * lib.area["AND2"] + max(i_i - i_r - 1, 0) * lib.area["OR2"]


def qrelu_gates(i_i: int, f_i: int, i_r: int, f_r: int) -> list[tuple[str, tuple[str, ...], str]]:
    """Gate list ``(type, inputs, output)`` of the QRelu construction.

    The sign bit is inverted once to form the enable; each kept output bit
    (the low ``I_r`` integer bits and top ``F_r`` fraction bits) is masked by
    the enable with an AND2; the integer bits above the output range are
    OR-reduced with a 2-input OR chain into the saturation flag. Output bits
    beyond the accumulator's range are tied to zero without gates.
    """
    gates = [("INV", ("s",), "en")]
    for k in range(min(i_r, i_i)):
        gates.append(("AND2", (f"i{k}", "en"), f"y_i{k}"))
    for k in range(max(f_i - f_r, 0), f_i):
        gates.append(("AND2", (f"f{k}", "en"), f"y_f{k}"))
    high = [f"i{k}" for k in range(i_r, i_i)]
    acc = high[0] if high else None
    for k, bit in enumerate(high[1:]):
        out = f"ovf{k}"
        gates.append(("OR2", (acc, bit), out))
        acc = out
    return gates


def enumerated_qrelu_area(i_i: int, f_i: int, i_r: int, f_r: int, lib: GateLibrary) -> float:
    gates = qrelu_gates(i_i, f_i, i_r, f_r)
    return float(sum(lib.area[g[0]] for g in gates))


# ---------------------------------------------------------------- area reports

@dataclass
class NeuronArea:
    layer: int
    index: int
    multipliers: float
    accumulator: float
    qrelu: float
    new_multipliers: int

    @property
    def total(self) -> float:
        return self.multipliers + self.accumulator + self.qrelu


@dataclass
class AreaReport:
    neurons: list[NeuronArea]
    census: list[int] = field(default_factory=list)

    @property
    def multipliers(self) -> float:
        return float(sum(n.multipliers for n in self.neurons))

    @property
    def accumulators(self) -> float:
        return float(sum(n.accumulator for n in self.neurons))

    @property
    def qrelu(self) -> float:
        return float(sum(n.qrelu for n in self.neurons))

    @property
    def total(self) -> float:
        return float(sum(n.total for n in self.neurons))

    def to_dict(self) -> dict:
        return {
            "total": self.total, "multipliers": self.multipliers,
            "accumulators": self.accumulators, "qrelu": self.qrelu,
            "multiplier_census": self.census,
            "neurons": [
                {"layer": n.layer, "index": n.index, "multipliers": n.multipliers,
                 "accumulator": n.accumulator, "qrelu": n.qrelu, "total": n.total,
                 "new_multipliers": n.new_multipliers}
                for n in self.neurons
            ],
        }


def _qrelu_formats(q: QuantizedMLP, node: int) -> tuple[int, int, int, int]:
    fmt = q.acc_format(0, node)
    return fmt.integer_bits, fmt.frac_bits, q.genes.r.integer_bits, q.genes.r.frac_bits


def _price(q: QuantizedMLP, mult_cost, acc_cost, qrelu_cost) -> AreaReport:
    neurons, census = [], []
    for layer in range(2):
        z = q.in_format(layer).total_bits
        w = q.weight_codes[layer]
        seen = [set() for _ in range(w.shape[1])]
        count = 0
        for n in range(w.shape[0]):
            mult, new = 0.0, 0
            for j in range(w.shape[1]):
                a = abs(int(w[n, j]))
                if a == 0 or a in seen[j]:
                    continue
                seen[j].add(a)
                mult += mult_cost(z, a)
                new += 1
            count += new
            acc = acc_cost(z, w[n], int(q.bias_codes[layer][n]))
            qr = qrelu_cost(*_qrelu_formats(q, n)) if layer == 0 else 0.0
            neurons.append(NeuronArea(layer, n, mult, acc, qr, new))
        census.append(count)
    return AreaReport(neurons, census)


def estimate_area(q: QuantizedMLP, lut: MultiplierCostTable, lr: dict, lib: GateLibrary) -> AreaReport:
    """Estimated area: LUT multipliers (first occurrence of each |code| per column),
    LR_z accumulators and formula-priced QRelu on hidden neurons."""
    for layer in range(2):
        z = q.in_format(layer).total_bits
        if z not in lut.table:
            raise EstimatorError(f"multiplier table has no entry for {z}-bit inputs")
        if z not in lr:
            raise EstimatorError(f"no accumulator regressor for {z}-bit inputs")
    return _price(
        q,
        lut.lookup,
        lambda z, codes, bias: lr[z].predict(codes),
        lambda a, b, c, d: qrelu_area(a, b, c, d, lib),
    )


def oracle_area(q: QuantizedMLP, lib: GateLibrary) -> AreaReport:
    """Reference area from the gate-count oracles (the synthesis stand-in)."""
    return _price(
        q,
        lambda z, a: multiplier_oracle(a, z, lib),
        lambda z, codes, bias: neuron_oracle([int(c) for c in codes], bias, z, lib),
        lambda a, b, c, d: enumerated_qrelu_area(a, b, c, d, lib),
    )


@dataclass
class AreaEstimator:
    """Immutable bundle of gate library, multiplier table and per-precision regressors."""

    lib: GateLibrary
    lut: MultiplierCostTable
    lr: dict

    def __call__(self, q: QuantizedMLP) -> AreaReport:
        return estimate_area(q, self.lut, self.lr, self.lib)

    def to_dict(self) -> dict:
        return {"library": self.lib.to_dict(), "digest": self.lib.digest(),
                "lut": self.lut.to_dict(), "lr": {str(z): r.to_dict() for z, r in self.lr.items()}}

    @classmethod
    def from_dict(cls, obj: dict) -> "AreaEstimator":
        return cls(GateLibrary.from_dict(obj["library"]), MultiplierCostTable.from_dict(obj["lut"]),
                   {int(z): AccumulatorRegressor.from_dict(r) for z, r in obj["lr"].items()})


def build_estimator(lib: GateLibrary | None = None, z_set: Iterable[int] = range(1, 9),
                    n_samples: int = 100, seed: int = 0) -> AreaEstimator:
    """LUT and LR for every precision a layer input can take (inputs up to 4 bits, QRelu outputs up to 8)."""
    lib = lib or GateLibrary.default()
    z_set = tuple(z_set)
    lut = build_multiplier_lut(lib, z_set)
    return AreaEstimator(lib, lut, {z: fit_accumulator_lr(z, lib, n_samples, seed) for z in z_set})


def cached_estimator(lib: GateLibrary | None = None, cache_dir=None, n_samples: int = 100,
                     seed: int = 0) -> AreaEstimator:
    """Build or reload an estimator cached under ``cache_dir`` keyed by the library hash."""
    lib = lib or GateLibrary.default()
    if cache_dir is None:
        return build_estimator(lib, n_samples=n_samples, seed=seed)
    path = Path(cache_dir) / f"estimator-{lib.digest()}-{n_samples}-{seed}.json"
    if path.is_file():
        return AreaEstimator.from_dict(json.loads(path.read_text()))
    est = build_estimator(lib, n_samples=n_samples, seed=seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(est.to_dict(), sort_keys=True))
    return est


# ---------------------------------------------------------------- delay and voltage

def _neuron_delay(q: QuantizedMLP, layer: int, n: int, lib: GateLibrary) -> float:
    z = q.in_format(layer).total_bits
    codes = [abs(int(c)) for c in q.weight_codes[layer][n] if c != 0]
    bias = abs(int(q.bias_codes[layer][n]))
    widths = [product_width(z, c) for c in codes]
    if bias:
        widths.append(bias.bit_length())
    if not codes and not bias:
        return 0.0
    mult = max((multiplier_plan(c, z, lib).delay for c in codes), default=0.0)
    depth = math.ceil(math.log2(len(widths))) if len(widths) > 1 else 0
    tree_width = max(widths) + depth
    delay = mult + depth * tree_width * lib.delay["FA"]
    if layer == 0:
        high = max(tree_width - q.acc_frac(0) - q.genes.r.integer_bits, 1)
        delay += lib.delay["INV"] + lib.delay["AND2"] + math.ceil(math.log2(high)) * lib.delay["OR2"]
    return delay


def critical_path_delay(q: QuantizedMLP, lib: GateLibrary, voltage: float = 1.0) -> float:
    """Deepest multiplier chain + adder-tree ripple + QRelu, summed over both layers, scaled by voltage."""
    scale = lib.delay_scale(voltage)
    total = 0.0
    for layer in range(2):
        total += max((_neuron_delay(q, layer, n, lib) for n in range(q.weight_codes[layer].shape[0])), default=0.0)
    return total * scale


def min_voltage(q: QuantizedMLP, lib: GateLibrary, delay_constraint: float, step_mv: int = 10) -> float:
    """Lowest voltage on a ``step_mv`` grid whose delay meets ``delay_constraint`` (binary search)."""
    lo_mv = int(round(lib.v_min * 1000))
    hi_mv = int(round(lib.v_max * 1000))
    achievable = critical_path_delay(q, lib, hi_mv / 1000)
    if achievable > delay_constraint:
        raise InfeasibleConstraint(
            f"delay constraint {delay_constraint * 1e3:.3f} ms infeasible; best achievable is "
            f"{achievable * 1e3:.3f} ms at {hi_mv / 1000:.2f} V", achievable)
    grid = list(range(lo_mv, hi_mv + 1, step_mv))
    if grid[-1] != hi_mv:
        grid.append(hi_mv)
    lo, hi = 0, len(grid) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if critical_path_delay(q, lib, grid[mid] / 1000) <= delay_constraint:
            hi = mid
        else:
            lo = mid + 1
    return grid[lo] / 1000
