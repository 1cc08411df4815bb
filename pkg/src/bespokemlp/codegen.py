"""Combinational Verilog for a QuantizedMLP, a plan interpreter, and golden test vectors."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .hwcost import GateLibrary, multiplier_plan, product_width
from .quant import QuantizedMLP, fixed_point_inference

VERILOG_KEYWORDS = frozenset("""
always and assign automatic begin buf bufif0 bufif1 case casex casez cell cmos config deassign default
defparam design disable edge else end endcase endconfig endfunction endgenerate endmodule endprimitive
endspecify endtable endtask event for force forever fork function generate genvar highz0 highz1 if ifnone
incdir include initial inout input instance integer join large liblist library localparam macromodule
medium module nand negedge nmos nor noshowcancelled not notif0 notif1 or output parameter pmos posedge
primitive pull0 pull1 pulldown pullup pulsestyle_ondetect pulsestyle_onevent rcmos real realtime reg
release repeat rnmos rpmos rtran rtranif0 rtranif1 scalared showcancelled signed small specify specparam
strong0 strong1 supply0 supply1 table task time tran tranif0 tranif1 tri tri0 tri1 triand trior trireg
unsigned use uwire vectored wait wand weak0 weak1 while wire wor xnor xor
""".split())


# ---------------------------------------------------------------- plan

@dataclass(frozen=True)
class MultiplierSpec:
    """One shared bespoke multiplier ``x[column] * code`` (``code > 0``)."""

    column: int
    code: int
    digits: tuple  # signed-digit terms (bit position, +1/-1)
    in_bits: int
    out_width: int

    @property
    def is_wiring(self) -> bool:
        return self.code & (self.code - 1) == 0


@dataclass(frozen=True)
class NeuronSpec:
    pos: tuple  # (column, code) operands summed in the positive group
    neg: tuple  # (column, |code|) operands summed in the negative group
    bias: int   # bias already aligned to the accumulator grid
    shift: int  # left shift of (pos - neg) onto the accumulator grid
    width: int  # accumulator bits (two's complement)


@dataclass
class LayerPlan:
    in_bits: int
    multipliers: list[list[MultiplierSpec]]  # per input column, ascending code
    neurons: list[NeuronSpec]


@dataclass
class NetlistPlan:
    dims: tuple
    input_bits: int
    layers: list[LayerPlan]
    qrelu_shift: int
    qrelu_bits: int
    argmax: list[list[tuple[int, int]]] = field(default_factory=list)  # per level: pairs of node ids

    @property
    def class_bits(self) -> int:
        return max(1, int(np.ceil(np.log2(max(self.dims[2], 2)))))

    def multiplier_counts(self) -> list[int]:
        return [sum(len(col) for col in lp.multipliers) for lp in self.layers]


def _argmax_tree(n: int) -> list[list[tuple[int, int]]]:
    """Pairwise comparator levels; node ids 0..n-1 are leaves, new ids are appended per comparison.

    Adjacent pairing keeps every left operand's indices below the right's, so
    picking the right side only on strict ``>`` gives the lowest-index winner.
    """
    level, next_id, levels = list(range(n)), n, []
    while len(level) > 1:
        pairs, nxt = [], []
        for k in range(0, len(level) - 1, 2):
            pairs.append((level[k], level[k + 1]))
            nxt.append(next_id)
            next_id += 1
        if len(level) % 2:
            nxt.append(level[-1])
        levels.append(pairs)
        level = nxt
    return levels


def plan_netlist(q: QuantizedMLP, lib: GateLibrary | None = None) -> NetlistPlan:
    """Assign one shared multiplier per distinct nonzero |code| in each input column."""
    lib = lib or GateLibrary.default()
    layers = []
    for layer in range(2):
        w = np.asarray(q.weight_codes[layer], dtype=np.int64)
        z = q.in_format(layer).total_bits
        mults = []
        for j in range(w.shape[1]):
            codes = sorted({abs(int(v)) for v in w[:, j] if v != 0})
            col = []
            for c in codes:
                digits = multiplier_plan(c, z, lib).digits
                col.append(MultiplierSpec(j, c, tuple(digits), z, product_width(z, c)))
            mults.append(col)
        bias = q.aligned_bias(layer)
        neurons = []
        for n in range(w.shape[0]):
            pos = tuple((j, int(w[n, j])) for j in range(w.shape[1]) if w[n, j] > 0)
            neg = tuple((j, -int(w[n, j])) for j in range(w.shape[1]) if w[n, j] < 0)
            neurons.append(NeuronSpec(pos, neg, int(bias[n]), q.product_shift(layer), int(q.acc_widths[layer][n])))
        layers.append(LayerPlan(z, mults, neurons))
    return NetlistPlan(tuple(q.dims), q.genes.i.total_bits, layers, q.qrelu_shift(), q.genes.r.total_bits,
                       _argmax_tree(q.dims[2]))


# ---------------------------------------------------------------- plan interpreter

def _wrap(v: int, bits: int) -> int:
    v &= (1 << bits) - 1
    return v - (1 << bits) if v >> (bits - 1) else v


def _qrelu_bits(acc: int, width: int, shift: int, out_bits: int) -> int:
    """QRelu on the two's-complement bits of ``acc``: sign gate, bit select, OR-reduced saturation."""
    raw = acc & ((1 << width) - 1)
    if (raw >> (width - 1)) & 1:
        return 0
    out = 0
    for k in range(out_bits):
        src = shift + k
        if 0 <= src < width - 1:
            out |= ((raw >> src) & 1) << k
    sat = any((raw >> b) & 1 for b in range(max(shift + out_bits, 0), width - 1))
    return (1 << out_bits) - 1 if sat else out


def simulate_plan(plan: NetlistPlan, row) -> tuple[int, list[list[int]]]:
    """Evaluate the plan structure bit-accurately: shift-add products, group sums, modulo-2^A accumulators."""
    x = [int(v) for v in row]
    accs = []
    for li, lp in enumerate(plan.layers):
        products = {}
        for col in lp.multipliers:
            for m in col:
                products[(m.column, m.code)] = sum(d * (x[m.column] << p) for p, d in m.digits)
        out = []
        for nr in lp.neurons:
            pos = sum(products[(j, c)] for j, c in nr.pos)
            neg = sum(products[(j, c)] for j, c in nr.neg)
            out.append(_wrap(((pos - neg) << nr.shift) + nr.bias, nr.width))
        accs.append(out)
        if li == 0:
            x = [_qrelu_bits(a, nr.width, plan.qrelu_shift, plan.qrelu_bits) for a, nr in zip(out, lp.neurons)]
    vals = {k: (k, v) for k, v in enumerate(accs[1])}
    next_id = len(accs[1])
    for level in plan.argmax:
        for a, b in level:
            vals[next_id] = vals[b] if vals[b][1] > vals[a][1] else vals[a]
            next_id += 1
    return vals[next_id - 1][0] if plan.argmax else 0, accs


# ---------------------------------------------------------------- Verilog

def legal_identifier(name: str) -> str:
    """Map an arbitrary string to a legal, non-keyword Verilog identifier (deterministically)."""
    out = re.sub(r"[^A-Za-z0-9_]", "_", name) or "m"
    if not re.match(r"[A-Za-z_]", out):
        out = "m_" + out
    if out in VERILOG_KEYWORDS:
        out += "_m"
    return out


class _Names:
    """Unique identifiers; a repeated base name gets a numeric suffix in request order."""

    def __init__(self, reserved=()):
        self.used = set(reserved)

    def __call__(self, base: str) -> str:
        name, k = legal_identifier(base), 1
        cand = name
        while cand in self.used:
            cand = f"{name}_{k}"
            k += 1
        self.used.add(cand)
        return cand


def _const(value: int, width: int) -> str:
    return f"{width}'d{value & ((1 << width) - 1)}"


def _shift_add(var: str, digits, width: int) -> str:
    terms = []
    for p, d in digits:
        t = f"({var} << {p})" if p else var
        if not terms:
            terms.append(t if d > 0 else f"{_const(0, width)} - {t}")
        else:
            terms.append(("+ " if d > 0 else "- ") + t)
    return " ".join(terms)


def _qrelu_expr(acc: str, width: int, shift: int, out_bits: int) -> str:
    bits = []
    for k in reversed(range(out_bits)):
        src = shift + k
        bits.append(f"{acc}[{src}]" if 0 <= src < width - 1 else "1'b0")
    value = "{" + ", ".join(bits) + "}"
    high = [f"{acc}[{b}]" for b in range(max(shift + out_bits, 0), width - 1)]
    sat = " | ".join(high)
    body = f"(({sat}) ? {{{out_bits}{{1'b1}}}} : {value})" if high else value
    return f"{acc}[{width - 1}] ? {_const(0, out_bits)} : {body}"


def emit_verilog(plan: NetlistPlan, module_name: str = "bespoke_mlp") -> str:
    """Single combinational Verilog-2001 module.

    Port ``x`` packs the unsigned input codes with input 0 in the least
    significant bits; port ``y`` is the class id. Every shared multiplier is
    tagged with a ``// mult`` comment so the instance count is auditable.
    """
    n_in, n_hid, n_out = plan.dims
    z = plan.input_bits
    names = _Names(VERILOG_KEYWORDS | {"x", "y"})
    mod = names(module_name)
    yb = plan.class_bits
    lines = [
        f"// {mod}: combinational bespoke MLP {n_in}-{n_hid}-{n_out}",
        f"// x: {n_in} x {z}-bit unsigned codes, input 0 in x[{z - 1}:0]; y: class id",
        f"module {mod} (",
        f"  input  wire [{n_in * z - 1}:0] x,",
        f"  output wire [{yb - 1}:0] y",
        ");",
    ]
    out_layer = plan.layers[1]
    if not any(nr.pos or nr.neg for nr in out_layer.neurons):
        biases = [_wrap(nr.bias, nr.width) for nr in out_layer.neurons]
        cls = int(np.argmax(biases))  # first maximum
        lines += [f"  // output layer has no live weights: class is constant",
                  f"  assign y = {_const(cls, yb)};", "endmodule", ""]
        return "\n".join(lines)

    src = []
    for j in range(n_in):
        nm = names(f"x{j}")
        src.append(nm)
        lines.append(f"  wire [{z - 1}:0] {nm} = x[{(j + 1) * z - 1}:{j * z}];")
    out_accs = []
    for li, lp in enumerate(plan.layers):
        lines.append(f"  // layer {li}")
        prod = {}
        for col in lp.multipliers:
            for m in col:
                nm = names(f"p{li}_c{m.column}_k{m.code}")
                prod[(m.column, m.code)] = nm
                kind = "wiring" if m.is_wiring else "shift-add"
                lines.append(f"  // mult L{li} c{m.column} x{m.code} ({kind})")
                lines.append(f"  wire [{m.out_width - 1}:0] {nm} = {_shift_add(src[m.column], m.digits, m.out_width)};")
        accs = []
        for n, nr in enumerate(lp.neurons):
            a = nr.width
            terms = {}
            for grp, ops in (("pos", nr.pos), ("neg", nr.neg)):
                if ops:
                    nm = names(f"{grp}{li}_{n}")
                    lines.append(f"  wire [{a - 1}:0] {nm} = {' + '.join(prod[o] for o in ops)};")
                    terms[grp] = nm
            diff = f"{terms.get('pos', _const(0, a))} - {terms.get('neg', _const(0, a))}" if terms else _const(0, a)
            if nr.shift:
                diff = f"(({diff}) << {nr.shift})"
            acc = names(f"acc{li}_{n}")
            decl = "wire signed" if li == 1 else "wire"
            lines.append(f"  {decl} [{a - 1}:0] {acc} = {diff} + {_const(nr.bias, a)};")
            accs.append(acc)
        if li == 0:
            nxt = []
            for n, (acc, nr) in enumerate(zip(accs, lp.neurons)):
                h = names(f"h{n}")
                lines.append(f"  wire [{plan.qrelu_bits - 1}:0] {h} = "
                             f"{_qrelu_expr(acc, nr.width, plan.qrelu_shift, plan.qrelu_bits)};")
                nxt.append(h)
            src = nxt
        else:
            out_accs = accs
    lines.append("  // argmax comparator tree, lowest index wins ties")
    aw = max(nr.width for nr in out_layer.neurons)
    nodes = {}
    for k, acc in enumerate(out_accs):
        nodes[k] = (acc, _const(k, yb))
    next_id = len(out_accs)
    for lvl, pairs in enumerate(plan.argmax):
        for a, b in pairs:
            (va, ia), (vb, ib) = nodes[a], nodes[b]
            sel, v, i = names(f"gt{next_id}"), names(f"v{next_id}"), names(f"i{next_id}")
            lines.append(f"  wire {sel} = {vb} > {va};")
            lines.append(f"  wire signed [{aw - 1}:0] {v} = {sel} ? {vb} : {va};")
            lines.append(f"  wire [{yb - 1}:0] {i} = {sel} ? {ib} : {ia};")
            nodes[next_id] = (v, i)
            next_id += 1
    lines.append(f"  assign y = {nodes[next_id - 1][1]};")
    lines += ["endmodule", ""]
    return "\n".join(lines)


def lint_verilog(text: str) -> list[str]:
    """Cheap structural checks: module balance, bracket balance, every used net declared."""
    problems = []
    code = re.sub(r"//[^\n]*", "", text)
    if len(re.findall(r"\bmodule\b", code)) != len(re.findall(r"\bendmodule\b", code)):
        problems.append("unbalanced module/endmodule")
    for o, c in ("()", "[]", "{}"):
        if code.count(o) != code.count(c):
            problems.append(f"unbalanced {o}{c}")
    declared = set(re.findall(r"\b(?:input|output)\s+wire\s*(?:\[[^\]]*\])?\s*(\w+)", code))
    declared |= set(re.findall(r"\bwire\s+(?:signed\s+)?(?:\[[^\]]*\]\s*)?(\w+)\s*=", code))
    mod = re.search(r"\bmodule\s+(\w+)", code)
    if mod:
        declared.add(mod.group(1))
    body = re.sub(r"\d+'[sd]?[bdh]?[0-9a-fA-F_]+", " ", code)
    for ident in set(re.findall(r"\b[A-Za-z_]\w*\b", body)):
        if ident not in declared and ident not in VERILOG_KEYWORDS:
            problems.append(f"undeclared identifier {ident}")
    return sorted(problems)


# ---------------------------------------------------------------- golden vectors

def format_vector(codes, bits: int) -> str:
    word = 0
    for j, c in enumerate(codes):
        word |= int(c) << (j * bits)
    digits = max(1, -(-len(codes) * bits // 4))
    return f"{word:0{digits}x}"


def emit_golden_vectors(q: QuantizedMLP, rows: Dataset, n: int | None = None) -> str:
    """``n`` stimulus lines ``<hex input bits> <class id>`` from the integer interpreter.

    The hex word packs the input codes with input 0 in the least significant
    bits, matching the ``x`` port of :func:`emit_verilog`.
    """
    n = len(rows) if n is None else int(n)
    if not 0 <= n <= len(rows):
        raise ValueError(f"cannot take {n} vectors from {len(rows)} rows")
    z = q.genes.i.total_bits
    lines = [
        "# bespokemlp golden vectors",
        f"# inputs: {q.dims[0]} x {z}-bit unsigned codes packed as hex, input 0 in the least significant bits",
        "# line format: <hex input word> <decimal class id>",
        f"# vectors: {n}",
    ]
    codes = q.input_codes(rows.features[:n]) if n else np.zeros((0, q.dims[0]), np.int64)
    for row in codes:
        cls, _ = fixed_point_inference(q, row)
        lines.append(f"{format_vector(row, z)} {cls}")
    return "\n".join(lines) + "\n"


def parse_golden_vectors(text: str, n_inputs: int, bits: int) -> list[tuple[list[int], int]]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        word, cls = line.split()
        w = int(word, 16)
        out.append(([(w >> (j * bits)) & ((1 << bits) - 1) for j in range(n_inputs)], int(cls)))
    return out
