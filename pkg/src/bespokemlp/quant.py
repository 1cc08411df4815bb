"""Fixed-point formats, quantizers, QRelu, quantization-aware retraining and the
bit-exact integer interpreter that mirrors the bespoke circuit."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .dataio import Dataset
from .model import MLPModel, TrainConfig, TrainingError, run_epochs, softmax_xent

SPARSITY_LEVELS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
MAX_GENE_BITS = {"c": 8, "b": 8, "r": 8, "i": 4}


class FormatError(ValueError):
    pass


class AccumulatorOverflow(ArithmeticError):
    """An accumulator left the signed range of its declared bit-width."""


@dataclass(frozen=True)
class FixedPointFormat:
    """Q(I).(F) (signed, P = I + F + 1) or UQ(I).(F) (unsigned, P = I + F)."""

    total_bits: int
    integer_bits: int
    signed: bool

    def __post_init__(self):
        if self.total_bits < 1:
            raise FormatError(f"total_bits must be positive, got {self.total_bits}")
        if self.integer_bits < 0:
            raise FormatError(f"integer_bits must be >= 0, got {self.integer_bits}")
        if self.frac_bits < 0:
            raise FormatError(f"{self.total_bits} bits cannot hold {self.integer_bits} integer bits"
                              + (" plus sign" if self.signed else ""))

    @classmethod
    def q(cls, integer_bits: int, frac_bits: int) -> "FixedPointFormat":
        return cls(integer_bits + frac_bits + 1, integer_bits, True)

    @classmethod
    def uq(cls, integer_bits: int, frac_bits: int) -> "FixedPointFormat":
        return cls(integer_bits + frac_bits, integer_bits, False)

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.integer_bits - (1 if self.signed else 0)

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_code(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def max_code(self) -> int:
        return (1 << (self.total_bits - 1)) - 1 if self.signed else (1 << self.total_bits) - 1

    @property
    def min_value(self) -> float:
        return self.min_code * self.step

    @property
    def max_value(self) -> float:
        return self.max_code * self.step

    def __str__(self) -> str:
        return f"{'Q' if self.signed else 'UQ'}{self.integer_bits}.{self.frac_bits}"

    def to_dict(self) -> dict:
        return {"P": self.total_bits, "I": self.integer_bits, "signed": self.signed}

    @classmethod
    def from_dict(cls, obj: dict) -> "FixedPointFormat":
        return cls(int(obj["P"]), int(obj["I"]), bool(obj["signed"]))


@dataclass(frozen=True)
class QuantGenes:
    """Weight (c), bias (b), hidden-activation (r) and input (i) formats plus sparsity (s)."""

    c: FixedPointFormat
    b: FixedPointFormat
    r: FixedPointFormat
    i: FixedPointFormat
    s: float = 0.0

    def __post_init__(self):
        for name in ("c", "b"):
            if not getattr(self, name).signed:
                raise FormatError(f"gene {name} must be a signed format")
        for name in ("r", "i"):
            if getattr(self, name).signed:
                raise FormatError(f"gene {name} must be an unsigned format")
        for name, cap in MAX_GENE_BITS.items():
            if getattr(self, name).total_bits > cap:
                raise FormatError(f"gene {name} allows at most {cap} bits, got {getattr(self, name).total_bits}")
        if not any(abs(self.s - lv) < 1e-9 for lv in SPARSITY_LEVELS):
            raise FormatError(f"sparsity must be one of {SPARSITY_LEVELS}, got {self.s}")

    def key(self) -> tuple:
        return tuple((f.total_bits, f.integer_bits) for f in (self.c, self.b, self.r, self.i)) + (round(self.s, 1),)

    def to_dict(self) -> dict:
        return {"c": self.c.to_dict(), "b": self.b.to_dict(), "r": self.r.to_dict(),
                "i": self.i.to_dict(), "s": round(self.s, 1)}

    @classmethod
    def from_dict(cls, obj: dict) -> "QuantGenes":
        f = FixedPointFormat.from_dict
        return cls(f(obj["c"]), f(obj["b"]), f(obj["r"]), f(obj["i"]), float(obj["s"]))


def integer_bits_for(max_abs: float, total_bits: int, signed: bool) -> int:
    """Smallest integer-bit count whose range covers ``max_abs`` (capped by the width)."""
    cap = total_bits - (1 if signed else 0)
    ib = 0
    while ib < cap and max_abs > (2.0 ** ib) - 2.0 ** -(cap - ib):
        ib += 1
    return ib


def reference_genes(m: MLPModel, profile=None, weight_bits: int = 8, input_bits: int = 4) -> QuantGenes:
    """Un-minimized reference precision: 8-bit weights/biases/activations, 4-bit inputs."""
    wmax = max(float(np.abs(w).max()) for w in m.weights)
    bmax = max(float(np.abs(l.biases).max()) for l in m.layers)
    hmax = float(np.max(profile.hidden_post_max)) if profile is not None else 1.0
    return QuantGenes(
        c=FixedPointFormat(weight_bits, integer_bits_for(wmax, weight_bits, True), True),
        b=FixedPointFormat(weight_bits, integer_bits_for(bmax, weight_bits, True), True),
        r=FixedPointFormat(8, integer_bits_for(hmax, 8, False), False),
        i=FixedPointFormat(input_bits, 0, False),
        s=0.0,
    )


# ---------------------------------------------------------------- quantizers

def quantize_array(x, fmt: FixedPointFormat, mode: str = "nearest", rng: np.random.Generator | None = None):
    """Vectorized quantizer returning ``(codes, values)``; overflow saturates."""
    scaled = np.asarray(x, dtype=np.float64) * (2.0 ** fmt.frac_bits)
    if mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic rounding needs an rng")
        codes = np.floor(scaled + rng.random(scaled.shape))
    elif mode == "nearest":
        codes = np.floor(scaled + 0.5)
    elif mode == "truncate":
        codes = np.floor(scaled)
    else:
        raise ValueError(f"unknown rounding mode {mode!r}")
    codes = np.clip(codes, fmt.min_code, fmt.max_code).astype(np.int64)
    return codes, codes * fmt.step


def quantize_value(x: float, fmt: FixedPointFormat, mode: str = "nearest",
                   rng: np.random.Generator | None = None) -> tuple[int, float]:
    codes, values = quantize_array(np.array([x]), fmt, mode, rng)
    return int(codes[0]), float(values[0])


def qrelu_code(acc: int, shift: int, out_bits: int) -> int:
    """ReLU, drop ``shift`` low bits (negative shift pads zeros), saturate to ``out_bits``."""
    if acc <= 0:
        return 0
    v = acc >> shift if shift >= 0 else acc << -shift
    top = (1 << out_bits) - 1
    return top if v > top else v


def qrelu(acc: int, in_fmt: FixedPointFormat, out_fmt: FixedPointFormat) -> int:
    """Quantized ReLU from a signed Q(I_i).(F_i) code to an unsigned UQ(I_r).(F_r) code."""
    if not in_fmt.signed or out_fmt.signed:
        raise FormatError("qrelu maps a signed input format to an unsigned output format")
    if out_fmt.frac_bits > in_fmt.frac_bits or out_fmt.integer_bits > in_fmt.integer_bits:
        raise FormatError(f"qrelu cannot widen {in_fmt} into {out_fmt}")
    if not in_fmt.min_code <= acc <= in_fmt.max_code:
        raise FormatError(f"code {acc} is not representable in {in_fmt}")
    return qrelu_code(int(acc), in_fmt.frac_bits - out_fmt.frac_bits, out_fmt.total_bits)


# ---------------------------------------------------------------- quantized model

def accumulator_width(max_abs: int) -> int:
    """Signed bits for ``max_abs`` plus one guard bit."""
    return int(max_abs).bit_length() + 2


@dataclass
class QuantizedMLP:
    """Integer MLP: codes, formats, pruning mask, optional clusters and accumulator widths."""

    weight_codes: list[np.ndarray]
    bias_codes: list[np.ndarray]
    genes: QuantGenes
    mask: list[np.ndarray]
    acc_widths: list[np.ndarray]
    clusters: list[np.ndarray] | None = None
    acc_max: list[np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weight_codes = [np.asarray(w, dtype=np.int64) for w in self.weight_codes]
        self.bias_codes = [np.asarray(b, dtype=np.int64) for b in self.bias_codes]
        self.mask = [np.asarray(mk, dtype=bool) for mk in self.mask]
        self.acc_widths = [np.asarray(a, dtype=np.int64) for a in self.acc_widths]
        if self.clusters is not None:
            self.clusters = [np.asarray(c, dtype=np.int64) for c in self.clusters]
        c = self.genes.c
        for w, mk in zip(self.weight_codes, self.mask):
            if w.shape != mk.shape:
                raise ValueError("mask shape differs from weight shape")
            if np.any(w[~mk] != 0):
                raise ValueError("pruned weights must be exactly 0")
            if w.size and (w.min() < c.min_code or w.max() > c.max_code):
                raise ValueError(f"weight code outside {c}")
        self.mask = [mk.copy() for mk in self.mask]

    # formats ---------------------------------------------------------
    @property
    def dims(self) -> tuple[int, int, int]:
        h, d = self.weight_codes[0].shape
        return d, h, self.weight_codes[1].shape[0]

    @property
    def n_classes(self) -> int:
        return self.dims[2]

    def in_format(self, layer: int) -> FixedPointFormat:
        return self.genes.i if layer == 0 else self.genes.r

    def product_frac(self, layer: int) -> int:
        return self.in_format(layer).frac_bits + self.genes.c.frac_bits

    def acc_frac(self, layer: int) -> int:
        return max(self.product_frac(layer), self.genes.b.frac_bits)

    def product_shift(self, layer: int) -> int:
        return self.acc_frac(layer) - self.product_frac(layer)

    def aligned_bias(self, layer: int) -> np.ndarray:
        return self.bias_codes[layer] << (self.acc_frac(layer) - self.genes.b.frac_bits)

    def qrelu_shift(self) -> int:
        return self.acc_frac(0) - self.genes.r.frac_bits

    def acc_format(self, layer: int, node: int) -> FixedPointFormat:
        """Signed accumulator format; integer bits clamp at 0 when the width is mostly fraction."""
        width = int(self.acc_widths[layer][node])
        frac = self.acc_frac(layer)
        return FixedPointFormat(max(width, frac + 1), max(width - 1 - frac, 0), True)

    # inference -------------------------------------------------------
    def input_codes(self, features: np.ndarray) -> np.ndarray:
        return quantize_array(features, self.genes.i, "truncate")[0]

    def forward_codes(self, x_codes: np.ndarray, check: bool = True):
        """Batched integer inference. Returns ``(classes, hidden_acc, output_acc)``."""
        x_codes = np.ascontiguousarray(x_codes, dtype=np.int64)
        if x_codes.ndim == 1:
            x_codes = x_codes[None, :]
        cls, acc0, acc1, ovf = kernels.forward_batch(
            x_codes,
            self.weight_codes[0], self.aligned_bias(0), self.product_shift(0), self.acc_widths[0],
            self.qrelu_shift(), self.genes.r.total_bits,
            self.weight_codes[1], self.aligned_bias(1), self.product_shift(1), self.acc_widths[1],
        )
        if check and ovf.any():
            row = int(np.flatnonzero(ovf)[0])
            raise AccumulatorOverflow(f"accumulator overflow on row {row} of {len(ovf)}")
        return cls, acc0, acc1

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.forward_codes(self.input_codes(features))[0]

    def activations(self, features: np.ndarray):
        """Real-valued (hidden pre, hidden post, output) seen by the fixed-point datapath."""
        _, acc0, acc1 = self.forward_codes(self.input_codes(features), check=False)
        shift, bits = self.qrelu_shift(), self.genes.r.total_bits
        hidden = np.vectorize(lambda a: qrelu_code(int(a), shift, bits), otypes=[np.int64])(acc0) if acc0.size else acc0
        return (acc0 * 2.0 ** -self.acc_frac(0), hidden * self.genes.r.step, acc1 * 2.0 ** -self.acc_frac(1))

    def real_weights(self) -> list[np.ndarray]:
        return [w * self.genes.c.step for w in self.weight_codes]

    # serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": "QuantizedMLP",
            "dims": list(self.dims),
            "genes": self.genes.to_dict(),
            "weight_codes": [w.tolist() for w in self.weight_codes],
            "bias_codes": [b.tolist() for b in self.bias_codes],
            "mask": [mk.astype(int).tolist() for mk in self.mask],
            "clusters": None if self.clusters is None else [c.tolist() for c in self.clusters],
            "acc_widths": [a.tolist() for a in self.acc_widths],
            "acc_max": None if self.acc_max is None else [np.asarray(a).tolist() for a in self.acc_max],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "QuantizedMLP":
        return cls(
            weight_codes=obj["weight_codes"], bias_codes=obj["bias_codes"],
            genes=QuantGenes.from_dict(obj["genes"]),
            mask=[np.asarray(mk, dtype=bool) for mk in obj["mask"]],
            acc_widths=obj["acc_widths"],
            clusters=obj.get("clusters"),
            acc_max=None if obj.get("acc_max") is None else [np.asarray(a, dtype=np.int64) for a in obj["acc_max"]],
            metadata=obj.get("metadata", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "QuantizedMLP":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_codes(self, weight_codes: Sequence[np.ndarray], mask: Sequence[np.ndarray] | None = None) -> "QuantizedMLP":
        """Copy with new weight codes; accumulator widths are kept as declared."""
        wc = [np.asarray(w, dtype=np.int64).copy() for w in weight_codes]
        mk = [m.copy() for m in (mask if mask is not None else self.mask)]
        wc = [np.where(m, w, 0) for w, m in zip(wc, mk)]
        return replace(self, weight_codes=wc, mask=mk)


def fixed_point_inference(q: QuantizedMLP, row: Sequence[int]):
    """Single-row integer inference in plain Python integers.

    Products of each neuron are summed in separate positive- and
    negative-weight groups and subtracted, the bias is aligned to the product
    grid, hidden accumulators go through QRelu, and the class is the argmax of
    the output accumulators (lowest index wins ties). Raises
    :class:`AccumulatorOverflow` when an accumulator exceeds its declared width.
    """
    i_fmt = q.genes.i
    row = [int(v) for v in row]
    if len(row) != q.dims[0]:
        raise ValueError(f"expected {q.dims[0]} input codes, got {len(row)}")
    for v in row:
        if not i_fmt.min_code <= v <= i_fmt.max_code:
            raise ValueError(f"input code {v} is not valid in {i_fmt}")
    accs = []
    x = row
    for layer in range(2):
        w = q.weight_codes[layer]
        bias = q.aligned_bias(layer)
        sh = q.product_shift(layer)
        out = []
        for n in range(w.shape[0]):
            pos = neg = 0
            for j, xj in enumerate(x):
                wc = int(w[n, j])
                if wc > 0:
                    pos += xj * wc
                elif wc < 0:
                    neg += xj * -wc
            acc = ((pos - neg) << sh) + int(bias[n])
            width = int(q.acc_widths[layer][n])
            if not -(1 << (width - 1)) <= acc < (1 << (width - 1)):
                raise AccumulatorOverflow(f"layer {layer} node {n}: {acc} does not fit {width} bits")
            out.append(acc)
        accs.append(out)
        if layer == 0:
            x = [qrelu_code(a, q.qrelu_shift(), q.genes.r.total_bits) for a in out]
    final = accs[1]
    best = 0
    for k in range(1, len(final)):
        if final[k] > final[best]:
            best = k
    return best, accs


def _worst_case_acc(q_codes, biases, in_max: int, shift: int) -> np.ndarray:
    pos = np.where(q_codes > 0, q_codes, 0).sum(axis=1) * in_max
    neg = np.where(q_codes < 0, -q_codes, 0).sum(axis=1) * in_max
    return np.maximum(np.abs((pos << shift) + biases), np.abs(-(neg << shift) + biases))


def assign_widths(q: QuantizedMLP, features: np.ndarray | None = None) -> QuantizedMLP:
    """Size accumulators from the profiled maxima over ``features``, or from the
    worst case over the whole input range when ``features`` is None."""
    if features is None:
        m0 = _worst_case_acc(q.weight_codes[0], q.aligned_bias(0), q.genes.i.max_code, q.product_shift(0))
        m1 = _worst_case_acc(q.weight_codes[1], q.aligned_bias(1), q.genes.r.max_code, q.product_shift(1))
        maxima = [m0, m1]
    else:
        big = [np.full(len(b), 62) for b in q.bias_codes]
        probe = replace(q, acc_widths=big)
        _, acc0, acc1 = probe.forward_codes(probe.input_codes(features), check=False)
        maxima = [np.abs(acc0).max(axis=0) if len(acc0) else np.zeros(acc0.shape[1], np.int64),
                  np.abs(acc1).max(axis=0) if len(acc1) else np.zeros(acc1.shape[1], np.int64)]
    widths = [np.array([accumulator_width(int(v)) for v in mx], dtype=np.int64) for mx in maxima]
    return replace(q, acc_widths=widths, acc_max=[np.asarray(mx, dtype=np.int64) for mx in maxima])


def _frozen_positions(frozen) -> list[np.ndarray] | None:
    if frozen is None:
        return None
    return [~np.isnan(f) for f in frozen]


def quantize_model(m: MLPModel, g: QuantGenes, mask: Sequence[np.ndarray] | None = None,
                   train: Dataset | np.ndarray | None = None, seed: int = 0,
                   frozen: Sequence[np.ndarray] | None = None,
                   clusters: Sequence[np.ndarray] | None = None) -> QuantizedMLP:
    """Freeze a float model into integer codes.

    Weights and biases take one stochastic-rounding draw from ``seed``;
    positions listed in ``frozen`` (arrays of centroid values, NaN = free) use
    nearest rounding so that equal centroids keep equal codes. Accumulator
    widths come from profiling ``train`` (features or Dataset).
    """
    rng = np.random.default_rng(seed)
    mask = [np.ones_like(w, dtype=bool) for w in m.weights] if mask is None else [np.asarray(k, bool) for k in mask]
    fpos = _frozen_positions(frozen)
    wcodes, bcodes = [], []
    for layer, lp in enumerate(m.layers):
        w = lp.weights
        codes = quantize_array(w, g.c, "stochastic", rng)[0]
        if fpos is not None:
            near = quantize_array(np.nan_to_num(frozen[layer]), g.c, "nearest")[0]
            codes = np.where(fpos[layer], near, codes)
        wcodes.append(np.where(mask[layer], codes, 0))
        bcodes.append(quantize_array(lp.biases, g.b, "stochastic", rng)[0])
    q = QuantizedMLP(wcodes, bcodes, g, mask, [np.zeros(len(b), np.int64) for b in bcodes],
                     clusters=None if clusters is None else [np.asarray(c) for c in clusters],
                     metadata={"seed": seed})
    feats = train.features if isinstance(train, Dataset) else train
    return assign_widths(q, feats)


# ---------------------------------------------------------------- QAT

def _ste_weight(w: np.ndarray, fmt: FixedPointFormat, rng, frozen_pos=None, frozen_vals=None):
    codes = quantize_array(w, fmt, "stochastic", rng)[0]
    if frozen_pos is not None:
        near = quantize_array(np.nan_to_num(frozen_vals), fmt, "nearest")[0]
        codes = np.where(frozen_pos, near, codes)
    inside = (w >= fmt.min_value) & (w <= fmt.max_value)
    return codes * fmt.step, inside


def qat_retrain(m: MLPModel, g: QuantGenes, cfg: TrainConfig, train: Dataset,
                mask: Sequence[np.ndarray] | None = None,
                frozen: Sequence[np.ndarray] | None = None) -> MLPModel:
    """Quantization-aware retraining with a straight-through estimator.

    The forward pass truncates inputs to format ``i``, uses stochastically
    rounded weights/biases and QRelu on the hidden layer; gradients pass the
    quantizers unchanged inside their range and are zeroed outside. Pruned
    weights stay at 0 and frozen weights (``frozen`` arrays, NaN = free) stay
    at their given value. Returns a new model; ``m`` is not modified.
    """
    out = m.copy()
    mask = [np.ones_like(w, dtype=bool) for w in out.weights] if mask is None else [np.asarray(k, bool) for k in mask]
    fpos = _frozen_positions(frozen)
    for layer, lp in enumerate(out.layers):
        lp.weights *= mask[layer]
        if fpos is not None:
            lp.weights[fpos[layer]] = frozen[layer][fpos[layer]]
    x_q = quantize_array(train.features, g.i, "truncate")[1]
    qd = Dataset(x_q, train.labels, train.attribute_names, train.n_classes, train.label_mapping)
    rng = np.random.default_rng(cfg.seed)
    r = g.r

    def grad_fn(mm: MLPModel, xb, yb):
        l0, l1 = mm.layers
        fz = (None, None) if fpos is None else (fpos[0], fpos[1])
        fv = (None, None) if frozen is None else (frozen[0], frozen[1])
        w0, in0 = _ste_weight(l0.weights, g.c, rng, fz[0], fv[0])
        w1, in1 = _ste_weight(l1.weights, g.c, rng, fz[1], fv[1])
        b0, bin0 = _ste_weight(l0.biases, g.b, rng)
        b1, bin1 = _ste_weight(l1.biases, g.b, rng)
        w0 = w0 * mask[0]
        w1 = w1 * mask[1]
        pre = xb @ w0.T + b0
        h = np.clip(np.floor(pre / r.step) * r.step, 0.0, r.max_value)
        logits = h @ w1.T + b1
        loss, g_out = softmax_xent(logits, yb)
        dW1 = g_out.T @ h
        db1 = g_out.sum(axis=0)
        g_pre = (g_out @ w1) * ((pre > 0) & (pre < r.max_value + r.step))
        dW0 = g_pre.T @ xb
        db0 = g_pre.sum(axis=0)
        if cfg.l1_lambda:
            loss += cfg.l1_lambda * float(np.abs(l0.weights).sum() + np.abs(l1.weights).sum())
            dW0 = dW0 + cfg.l1_lambda * np.sign(l0.weights)
            dW1 = dW1 + cfg.l1_lambda * np.sign(l1.weights)
        dW0 = dW0 * in0 * mask[0]
        dW1 = dW1 * in1 * mask[1]
        if fpos is not None:
            dW0 = dW0 * ~fpos[0]
            dW1 = dW1 * ~fpos[1]
        return loss, [(dW0, db0 * bin0), (dW1, db1 * bin1)]

    def pin(mm: MLPModel):
        for layer, lp in enumerate(mm.layers):
            lp.weights *= mask[layer]
            if fpos is not None:
                lp.weights[fpos[layer]] = frozen[layer][fpos[layer]]

    run_epochs(out, qd, cfg, grad_fn, rng, after_step=pin)
    out.metadata = dict(out.metadata)
    out.metadata["qat"] = {"genes": g.to_dict(), "epochs": cfg.epochs, "seed": cfg.seed}
    return out


__all__ = [
    "AccumulatorOverflow", "FixedPointFormat", "FormatError", "QuantGenes", "QuantizedMLP",
    "SPARSITY_LEVELS", "TrainingError", "accumulator_width", "assign_widths", "fixed_point_inference",
    "integer_bits_for", "qat_retrain", "qrelu", "qrelu_code", "quantize_array", "quantize_model",
    "quantize_value", "reference_genes",
]
