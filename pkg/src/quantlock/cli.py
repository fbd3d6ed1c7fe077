"""``quantlock`` command line.

Exit codes: 0 success, 1 I/O or validation failure, 2 usage error,
3 verification negative (quantized artifact not preserved).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import analysis_defense as ad
from .attack_pipeline import AttackConfig, PipelineError, attack_datasets, run_attack
from .constraints import QconError, compute_constraints, interval_stats, verify_model_preservation, write_qcon
from .nn_lab import PreservationLost, ToyModel, TrainingDiverged
from .quantizers import Method, QtenError, dequantize, quantize_tensor, read_qten, write_qten
from .tensor_store import (
    BlockSpec,
    CheckpointError,
    Layout,
    QuantizablePolicy,
    TensorMap,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("quantlock")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NOT_PRESERVED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def bundled(name: str) -> Path:
    """Path of a file shipped in ``quantlock/data``."""
    return Path(str(resources.files("quantlock.data").joinpath(name)))


def _methods(text: str) -> list[Method]:
    try:
        out = [Method(t.strip().lower()) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown method in {text!r}; choose from int8, fp4, nf4")
    if len(set(out)) != len(out):
        raise argparse.ArgumentTypeError("duplicate method")
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _policy(args) -> QuantizablePolicy:
    return QuantizablePolicy(min_dim=args.min_dim, include=frozenset(args.include or ()),
                             exclude=frozenset(args.exclude or ()))


class Output:
    """Collects the run's result; prints it as one JSON document or as text."""

    def __init__(self, args):
        self.json = args.json
        self.doc: dict[str, Any] = {"command": args.command, "config": _resolved(args)}
        if not self.json:
            print(f"config: {json.dumps(self.doc['config'], sort_keys=True)}")

    def line(self, text: str) -> None:
        if not self.json:
            print(text)

    def emit(self) -> None:
        if self.json:
            json.dump(self.doc, sys.stdout, indent=2, sort_keys=True, default=str)
            sys.stdout.write("\n")


def _resolved(args) -> dict:
    skip = {"func"}
    out = {}
    for k, v in vars(args).items():
        if k in skip:
            continue
        if isinstance(v, Method):
            v = v.value
        elif isinstance(v, list):
            v = [x.value if isinstance(x, Method) else x for x in v]
        elif isinstance(v, Path):
            v = str(v)
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_quantize(args, out: Output) -> int:
    method = args.method
    if args.block_size is not None:
        if method is Method.INT8:
            raise UsageError("--block-size does not apply to int8, which uses one block per row")
        spec = BlockSpec(Layout.FLAT, args.block_size)
    else:
        spec = method.default_spec
    weights = load_checkpoint(args.input)
    policy = _policy(args)
    records: dict[str, Any] = {}
    summary = {}
    for name, w in weights.items():
        if policy(name, w.shape):
            q = quantize_tensor(w, method, spec, args.double_quant)
            records[name] = q
            s = q.scales
            summary[name] = {"blocks": int(s.size), "scale_min": float(s.min()),
                             "scale_max": float(s.max()), "scale_mean": float(s.mean())}
            out.line(f"{name:40s} {str(w.shape):>14s} blocks={s.size:<7d} "
                     f"scale min={s.min():.4g} mean={s.mean():.4g} max={s.max():.4g}")
        else:
            records[name] = w
            out.line(f"{name:40s} {str(w.shape):>14s} kept full precision")
    write_qten(args.out, records)
    out.doc["tensors"] = summary
    out.doc["output"] = str(args.out)
    return EXIT_OK


def cmd_dequantize(args, out: Output) -> int:
    records = read_qten(args.input)
    tensors = {name: dequantize(r) if not isinstance(r, np.ndarray) else r for name, r in records.items()}
    save_checkpoint(TensorMap(tensors), args.out)
    out.doc["tensors"] = sorted(tensors)
    out.doc["output"] = str(args.out)
    out.line(f"wrote {len(tensors)} tensors to {args.out}")
    return EXIT_OK


def cmd_constraints(args, out: Output) -> int:
    weights = load_checkpoint(args.input)
    t0 = time.perf_counter()
    sets = compute_constraints(weights, args.methods, _policy(args), args.threads or 1)
    elapsed = time.perf_counter() - t0
    write_qcon(args.out, sets)
    stats = interval_stats(list(sets.values()), args.bins)
    out.doc.update(width_stats=stats.as_dict(), seconds=elapsed, output=str(args.out),
                   parameters=weights.num_parameters())
    out.line(f"{weights.num_parameters()} parameters, {len(sets)} tensors in {elapsed:.2f}s")
    out.line(f"mean width {stats.mean:.6g}  median {stats.median:.6g}  "
             f"frozen fraction {stats.frozen_fraction:.4f}")
    return EXIT_OK


def cmd_verify(args, out: Output) -> int:
    ref = load_checkpoint(args.reference)
    cand = load_checkpoint(args.candidate)
    report = verify_model_preservation(ref, cand, args.method, _policy(args), limit=args.limit,
                                       double_quant=args.double_quant)
    out.doc["report"] = report.as_dict()
    if report.preserved:
        out.line(f"{args.method.value}: preserved")
        return EXIT_OK
    out.line(f"{args.method.value}: NOT preserved ({report.code_mismatches} codes, "
             f"{report.scale_mismatches} scales differ)")
    for m in report.mismatches:
        out.line(f"  {m.tensor} block {m.block} element {m.element}")
    return EXIT_NOT_PRESERVED


def _attack_config(args) -> AttackConfig:
    cfg = AttackConfig.load(args.config or bundled("default_attack.json"))
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.threads is not None:
        d["threads"] = args.threads
    return AttackConfig.from_dict(d)


def cmd_attack_demo(args, out: Output) -> int:
    cfg = _attack_config(args)
    report = run_attack(cfg, args.snapshots)
    doc = report.to_dict()
    if args.report:
        Path(args.report).write_text(json.dumps(doc, indent=2, sort_keys=True))
    out.doc["report"] = doc
    for stage, row in report.metrics.items():
        for p, m in row.items():
            out.line(f"{stage:9s} {p:5s} clean={m.clean_accuracy:.4f} attack={m.attack_success_rate:.4f}")
    out.line("preservation: " + ", ".join(f"{k}={v}" for k, v in report.preservation.items()))
    return EXIT_OK


def cmd_defend(args, out: Output) -> int:
    cfg = _attack_config(args)
    model = ToyModel.from_weights(load_checkpoint(args.model))
    _, test = attack_datasets(cfg)
    dcfg = ad.DefenseConfig(sigmas=tuple(args.sigma_list), sigma_scale=args.sigma_scale,
                            seed=args.seed if args.seed is not None else 0, methods=tuple(args.methods),
                            asr_threshold=args.asr_threshold, clean_budget=args.clean_budget)
    report = ad.defense_sweep(model, test, dcfg)
    if args.report:
        ad.write_json(report, args.report)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    out.doc["report"] = report.to_dict()
    for row in report.rows:
        cells = "  ".join(f"{p}={m.clean_accuracy:.3f}/{m.attack_success_rate:.3f}" for p, m in row.metrics.items())
        out.line(f"sigma={row.sigma:<8g} (x{dcfg.sigma_scale:g})  {cells}")
    out.line(f"flagged sigma: {report.flagged_sigma}")
    return EXIT_OK


def cmd_analyze(args, out: Output) -> int:
    policy = _policy(args)
    prof = ad.vulnerability_profile(args.input, args.methods, policy, args.bins, args.threads or 1)
    out.doc["profile"] = prof.to_dict() if args.full else {"summary": prof.summary, "tail_mass": prof.tail_mass}
    out.line(f"tail mass {prof.tail_mass:.5f}")
    for m, s in prof.summary.items():
        out.line(f"{m:5s} mean width {s['mean_width']:.6g}  frozen {s['frozen_fraction']:.4f}")
    if args.baseline:
        base = ad.vulnerability_profile(args.baseline, args.methods, policy, args.bins, args.threads or 1)
        ratios = ad.width_ratios(prof, base)
        out.doc["baseline_summary"] = base.summary
        out.doc["width_ratio"] = ratios
        for m, r in ratios.items():
            out.line(f"{m:5s} width ratio vs baseline {r:.3f}")
    if args.report:
        ad.write_json(prof, args.report)
    if args.csv:
        Path(args.csv).write_text(prof.to_csv())
    return EXIT_OK


def cmd_synth(args, out: Output) -> int:
    ckpt = ad.synthetic_checkpoint(args.kind, args.params, args.seed or 0, args.std, args.cols)
    save_checkpoint(ckpt, args.out)
    out.doc.update(output=str(args.out), parameters=ckpt.num_parameters())
    out.line(f"wrote {ckpt.num_parameters()} {args.kind} parameters to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="override the random seed")
    p.add_argument("--threads", type=int, default=d, help="worker threads for block-parallel stages")
    p.add_argument("--log-level", default=d, choices=["debug", "info", "warning", "error"])
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="emit one JSON document on stdout")


def _policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--min-dim", type=int, default=16,
                   help="2-D tensors with every dimension at least this are quantized")
    p.add_argument("--include", action="append", metavar="NAME", help="force a tensor to be quantized")
    p.add_argument("--exclude", action="append", metavar="NAME", help="keep a tensor in full precision")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantlock", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        return p

    methods = [m.value for m in Method]
    p = add("quantize", cmd_quantize, "quantize a safetensors checkpoint to QTEN")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--method", required=True, type=Method, choices=list(Method), metavar="{" + "|".join(methods) + "}")
    p.add_argument("--block-size", type=int)
    p.add_argument("--double-quant", action="store_true")
    p.add_argument("--out", required=True, type=Path)
    _policy_flags(p)

    p = add("dequantize", cmd_dequantize, "expand a QTEN file back to safetensors")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = add("constraints", cmd_constraints, "compute preservation intervals and write QCON")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--methods", required=True, type=_methods, help="comma-separated, e.g. int8,fp4,nf4")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--bins", type=int, default=32)
    _policy_flags(p)

    p = add("verify", cmd_verify, "check that a candidate quantizes to the reference artifact")
    p.add_argument("--reference", required=True, type=Path)
    p.add_argument("--candidate", required=True, type=Path)
    p.add_argument("--method", required=True, type=Method, choices=list(Method), metavar="{" + "|".join(methods) + "}")
    p.add_argument("--double-quant", action="store_true")
    p.add_argument("--limit", type=int, default=10, help="mismatching coordinates to list")
    _policy_flags(p)

    p = add("attack-demo", cmd_attack_demo, "run inject, constrain, repair on the toy model")
    p.add_argument("--config", type=Path, help="attack config JSON (default: bundled)")
    p.add_argument("--report", type=Path)
    p.add_argument("--snapshots", type=Path, help="directory for per-stage safetensors")

    p = add("defend", cmd_defend, "Gaussian weight-noise sweep on an attacked toy model")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--config", type=Path, help="attack config the model came from (default: bundled)")
    p.add_argument("--sigma-list", type=_floats, default=list(ad.DEFAULT_SIGMAS))
    p.add_argument("--sigma-scale", type=float, default=ad.TOY_SIGMA_SCALE)
    p.add_argument("--methods", type=_methods, default=list(Method))
    p.add_argument("--asr-threshold", type=float, default=0.2)
    p.add_argument("--clean-budget", type=float, default=0.05)
    p.add_argument("--report", type=Path)
    p.add_argument("--csv", type=Path)

    p = add("analyze", cmd_analyze, "weight-magnitude and interval-width profile of a checkpoint")
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--methods", type=_methods, default=[])
    p.add_argument("--baseline", type=Path, help="second checkpoint; report width ratios against it")
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--full", action="store_true", help="include per-tensor histograms in JSON output")
    p.add_argument("--report", type=Path)
    p.add_argument("--csv", type=Path)
    _policy_flags(p)

    p = add("synth", cmd_synth, "write a synthetic Gaussian or Student-t checkpoint")
    p.add_argument("--kind", required=True, choices=["gaussian", "student_t"])
    p.add_argument("--params", type=int, default=1 << 20)
    p.add_argument("--std", type=float, default=0.02)
    p.add_argument("--cols", type=int, default=1024)
    p.add_argument("--out", required=True, type=Path)
    return parser


def _configure_logging(level: str | None) -> None:
    level = level or os.environ.get("QUANTLOCK_LOG") or "warning"
    logging.basicConfig(level=level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.log_level)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        out = Output(args)
        code = args.func(args, out)
        out.emit()
        return code
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, CheckpointError, QtenError, QconError, ValueError,
            PipelineError, PreservationLost, TrainingDiverged) as exc:
        print(f"quantlock: error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK  # unreachable; parser.error exits


if __name__ == "__main__":
    sys.exit(main())
