"""Command-line front end: nas, minimize, emit, pareto-export.

Exit codes: 0 ok, 2 input error, 3 infeasible constraint, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
import warnings
from pathlib import Path

from . import codegen, dataio, hwcost, model, optsearch, quant

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "budget": 20,
    "label_column": -1,
    "delimiter": ",",
    "train_ratio": 0.7,
    "pop": 40,
    "gens": 50,
    "sparsity_max": 0.5,
    "qat_epochs": 30,
    "delay_ms": 200.0,
    "gate_lib": None,
    "cache_dir": None,
    "out": ".",
    "pick": "loss<=0.05",
    "module_name": "bespoke_mlp",
}


class InputError(Exception):
    """Bad user input (exit code 2)."""


# ---------------------------------------------------------------- helpers

def _settings(args) -> dict:
    """Defaults < TOML config < explicit flags."""
    out = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg = tomllib.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise InputError(f"no such config file: {args.config}") from None
        except tomllib.TOMLDecodeError as exc:
            raise InputError(f"{args.config}: {exc}") from None
        for k, v in cfg.items():
            key = k.replace("-", "_")
            if key not in DEFAULTS:
                raise InputError(f"{args.config}: unknown setting {k!r}")
            out[key] = v
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _library(s: dict) -> hwcost.GateLibrary:
    if s["gate_lib"] is None:
        return hwcost.GateLibrary.default()
    try:
        return hwcost.GateLibrary.load(s["gate_lib"])
    except FileNotFoundError:
        raise InputError(f"no such gate library: {s['gate_lib']}") from None


def _estimator(s: dict) -> hwcost.AreaEstimator:
    return hwcost.cached_estimator(_library(s), s["cache_dir"], seed=0)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def _recorded(front_path, rel):
    """A path stored in front metadata, resolved against the front file's directory."""
    if rel is None:
        return None
    return Path(front_path).parent / rel


def _splits_for(manifest_path):
    manifest = dataio.read_manifest(manifest_path)
    return dataio.from_manifest(manifest)


def _reference_quantized(m: model.MLPModel, train: dataio.Dataset, seed: int) -> quant.QuantizedMLP:
    g = quant.reference_genes(m, model.profile_activations(m, train))
    return quant.quantize_model(m, g, None, train, seed)


# ---------------------------------------------------------------- commands

def cmd_nas(args) -> int:
    s = _settings(args)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    spec = dataio.SplitSpec(float(s["train_ratio"]), int(s["seed"]))
    train, test, stats, raw = dataio.prepare(args.dataset, s["label_column"], s["delimiter"], spec)
    est = _estimator(s)
    m = model.nas_search(train, int(s["budget"]),
                         lambda cand: est(_reference_quantized(cand, train, int(s["seed"]))).total,
                         seed=int(s["seed"]))
    m.metadata["test_accuracy"] = model.accuracy(m, test)
    m.metadata["manifest"] = "manifest.json"
    m.save(out / "model.json")
    dataio.write_manifest(out / "manifest.json", source=str(Path(args.dataset).resolve()),
                          label_column=s["label_column"], delimiter=s["delimiter"], split_spec=spec,
                          stats=stats, d=raw)
    print(f"model: {out / 'model.json'} (hidden={m.hidden_dim}, test accuracy={m.metadata['test_accuracy']:.4f})")
    return EXIT_OK


def _manifest_path(args, model_path: Path) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    return model_path.parent / "manifest.json"


def _context(model_path: Path, manifest_path: Path, s: dict) -> optsearch.MinimizationContext:
    try:
        m = model.MLPModel.load(model_path)
    except FileNotFoundError:
        raise InputError(f"no such model file: {model_path}") from None
    train, test = _splits_for(manifest_path)
    cfg = optsearch.MinimizeConfig(pop_size=int(s["pop"]), generations=int(s["gens"]),
                                   qat_epochs=int(s["qat_epochs"]), sparsity_max=float(s["sparsity_max"]),
                                   seed=int(s["seed"]))
    return optsearch.MinimizationContext(m, train, test, _estimator(s), cfg)


def cmd_minimize(args) -> int:
    s = _settings(args)
    if not 0.0 <= float(s["sparsity_max"]) <= 0.5:
        raise InputError("--sparsity-max must lie in [0, 0.5]")
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    model_path = Path(args.model)
    manifest_path = _manifest_path(args, model_path)
    ctx = _context(model_path, manifest_path, s)
    front = optsearch.minimize(ctx, out / "checkpoint.jsonl", resume=bool(args.resume))
    front.metadata.update({
        # relative to the front file so output trees stay relocatable and reproducible
        "model": os.path.relpath(model_path.resolve(), out.resolve()),
        "manifest": os.path.relpath(manifest_path.resolve(), out.resolve()),
        "gate_library": ctx.estimator.lib.to_dict(),
        "config": {k: s[k] for k in ("seed", "pop", "gens", "sparsity_max", "qat_epochs")},
    })
    front.save(out / "front.json")
    print(f"front: {out / 'front.json'} ({len(front)} designs, baseline area {ctx.baseline_area:.1f})")
    return EXIT_OK


def pick_design(front: optsearch.ParetoFront, rule: str) -> int:
    """Index of the chosen design: an integer index, or ``loss<=X`` for the min-area design within loss X."""
    rule = str(rule).strip()
    if re.fullmatch(r"-?\d+", rule):
        k = int(rule)
        if not -len(front) <= k < len(front):
            raise InputError(f"pick index {k} out of range for a front of {len(front)}")
        return k % len(front)
    m = re.fullmatch(r"loss\s*<=\s*([0-9.eE+-]+)", rule)
    if not m:
        raise InputError(f"cannot parse pick rule {rule!r} (use an index or 'loss<=X')")
    limit = float(m.group(1))
    ok = [k for k, d in enumerate(front) if d.accuracy_loss <= limit + 1e-12 and d.payload.get("quantized")]
    if not ok:
        raise hwcost.InfeasibleConstraint(f"no design has accuracy loss <= {limit}", float("nan"))
    return min(ok, key=lambda k: (front[k].estimated_area, k))


def cmd_emit(args) -> int:
    s = _settings(args)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    obj = _load_json(args.front)
    front = optsearch.ParetoFront.from_dict(obj)
    k = pick_design(front, s["pick"])
    d = front[k]
    if not d.payload.get("quantized"):
        raise InputError(f"design {k} has no quantized payload (failed evaluation)")
    q = quant.QuantizedMLP.from_dict(d.payload["quantized"])
    lib = _library(s) if s["gate_lib"] else hwcost.GateLibrary.from_dict(
        front.metadata.get("gate_library") or hwcost.GateLibrary.default().to_dict())
    constraint = float(s["delay_ms"]) * 1e-3
    voltage = hwcost.min_voltage(q, lib, constraint)
    name = s["module_name"]
    plan = codegen.plan_netlist(q, lib)
    (out / f"{codegen.legal_identifier(name)}.v").write_text(codegen.emit_verilog(plan, name))
    manifest = getattr(args, "manifest", None) or _recorded(args.front, front.metadata.get("manifest"))
    if manifest is None:
        raise InputError("no manifest recorded in the front; pass --manifest")
    _, test = _splits_for(manifest)
    (out / "vectors.txt").write_text(codegen.emit_golden_vectors(q, test))
    report = {
        "index": k, "pick": s["pick"], "genes": list(d.genes), "cluster_ks": d.cluster_ks,
        "formats": d.payload.get("formats"), "sparsity": d.payload.get("sparsity"),
        "accuracy": model.accuracy(q, test), "accuracy_loss": d.accuracy_loss,
        "area": d.payload.get("area"),
        "estimated_area": d.estimated_area,
        "baseline_area": front.metadata.get("baseline_area"),
        "baseline_accuracy": front.metadata.get("baseline_accuracy"),
        "voltage": voltage, "delay_constraint_ms": float(s["delay_ms"]),
        "delay_ms": hwcost.critical_path_delay(q, lib, voltage) * 1e3,
        "multipliers": plan.multiplier_counts(),
    }
    _write_json(out / "report.json", report)
    print(f"design {k}: area {d.estimated_area:.1f}, voltage {voltage:.2f} V -> {out}")
    return EXIT_OK


GENE_COLUMNS = ("c_P", "c_I", "b_P", "b_I", "r_P", "r_I", "i_P", "i_I", "s_index")


def cmd_pareto_export(args) -> int:
    s = _settings(args)
    front = optsearch.ParetoFront.from_dict(_load_json(args.front))
    base_acc = front.metadata.get("baseline_accuracy")
    base_area = front.metadata.get("baseline_area")
    if args.baseline:
        if not Path(args.baseline).is_file():
            raise InputError(f"no such model file: {args.baseline}")
        m = model.MLPModel.load(args.baseline)
        manifest = getattr(args, "manifest", None) or _recorded(args.front, front.metadata.get("manifest")) or \
            Path(args.baseline).parent / "manifest.json"
        train, test = _splits_for(manifest)
        q = _reference_quantized(m, train, int(s["seed"]))
        base_acc, base_area = model.accuracy(q, test), _estimator(s)(q).total
    if not base_acc or not base_area:
        raise InputError("front carries no baseline values; pass --baseline MODEL")
    out = Path(args.out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["accuracy_norm", "area_norm", "accuracy", "estimated_area", "cluster_k_hidden",
                    "cluster_k_out", *GENE_COLUMNS])
        for d in front:
            ks = d.cluster_ks or ("", "")
            w.writerow([repr(d.accuracy / base_acc), repr(d.estimated_area / base_area), repr(d.accuracy),
                        repr(d.estimated_area), *ks, *d.genes])
    print(f"wrote {len(front)} rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bespokemlp", description="Minimize bespoke MLP circuits.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML file whose keys mirror the long flags")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--gate-lib", dest="gate_lib", help="gate library (TOML or JSON)")
        sp.add_argument("--cache-dir", dest="cache_dir", help="directory for the cached area estimator")

    sp = sub.add_parser("nas", help="train and select the baseline MLP")
    sp.add_argument("dataset")
    sp.add_argument("--budget", type=int)
    sp.add_argument("--label-column", dest="label_column", type=int)
    sp.add_argument("--delimiter")
    sp.add_argument("--train-ratio", dest="train_ratio", type=float)
    common(sp)
    sp.set_defaults(func=cmd_nas)

    sp = sub.add_parser("minimize", help="NSGA-II over formats and sparsity, then the cluster sweep")
    sp.add_argument("model")
    sp.add_argument("--manifest")
    sp.add_argument("--pop", type=int)
    sp.add_argument("--gens", type=int)
    sp.add_argument("--sparsity-max", dest="sparsity_max", type=float)
    sp.add_argument("--qat-epochs", dest="qat_epochs", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.jsonl")
    common(sp)
    sp.set_defaults(func=cmd_minimize)

    sp = sub.add_parser("emit", help="Verilog, golden vectors and report for one front member")
    sp.add_argument("front")
    sp.add_argument("--pick", help="front index or 'loss<=X' (default loss<=0.05)")
    sp.add_argument("--delay-ms", dest="delay_ms", type=float)
    sp.add_argument("--module-name", dest="module_name")
    sp.add_argument("--manifest")
    common(sp)
    sp.set_defaults(func=cmd_emit)

    sp = sub.add_parser("pareto-export", help="normalized front as CSV")
    sp.add_argument("front")
    sp.add_argument("out_csv")
    sp.add_argument("--baseline", help="baseline model (defaults to values stored in the front)")
    sp.add_argument("--manifest")
    common(sp)
    sp.set_defaults(func=cmd_pareto_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", dataio.DataWarning)
            return args.func(args)
    except hwcost.InfeasibleConstraint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (InputError, dataio.DataError, quant.FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
