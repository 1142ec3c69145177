"""Command line entry point: ``zkslim <subcommand> ...``.

Every subcommand reads and writes stage artifacts on disk. ``ZKSLIM_OUT``
overrides the output directory of any subcommand.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensorio
from .circuit import CircuitTable, assign_witness, pad_dummy, pad_witness, split_circuit
from .model import QuantizedModel, calibrate, dequantize, quantize, quantize_input, read_model, write_model
from .pipeline import OUT_ENV, CostReport, PipelineConfig, PipelineError, _domains, emit_report, run_pipeline
from .pruner import apply_plan, cap_prune, magnitude_prune, rd_allocate
from .teleport import TeleportConfig, optimize_cob, teleport_apply, write_history
from .transcript import Proof, VerificationKey, keygen, prove, verify, verify_chain

log = logging.getLogger("zkslim")


def _out(args) -> Path:
    out = Path(os.environ.get(OUT_ENV) or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _quantized(path, scale) -> QuantizedModel:
    model = read_model(path)
    return model if isinstance(model, QuantizedModel) else quantize(model, scale)


def cmd_quantize(args) -> int:
    model = read_model(args.model)
    if isinstance(model, QuantizedModel):
        model = dequantize(model)
    q = quantize(model, args.scale)
    if args.calibration:
        q = calibrate(q, quantize_input(tensorio.load(args.calibration), args.scale), args.margin)
    write_model(q, _out(args) / "model.json")
    print(f"quantized at 2^{args.scale}: nnz {q.nnz()}")
    return 0


def cmd_prune(args) -> int:
    q = _quantized(args.model, args.scale)
    fmodel = dequantize(q)
    calib = tensorio.load(args.calibration) if args.calibration else None
    if args.method == "magnitude":
        plan = magnitude_prune(fmodel, args.ratio)
    elif calib is None:
        raise SystemExit(f"--calibration is required for {args.method}")
    elif args.method == "rd":
        plan = rd_allocate(fmodel, calib, args.grid, args.ratio)
    else:
        plan = cap_prune(fmodel, calib, args.ratio, curvature=args.curvature)
    out = _out(args)
    plan.save(out / "plan")
    pruned = apply_plan(q, plan)
    write_model(pruned, out / "model.json")
    print(f"{args.method} at R={args.ratio}: nnz {q.nnz()} -> {pruned.nnz()}")
    return 0


def cmd_teleport(args) -> int:
    q = _quantized(args.model, args.scale)
    calib = tensorio.load(args.calibration)
    cfg = TeleportConfig(lr=args.lr, mu=args.mu, max_iter=args.iters, lam=args.lam)
    cob = optimize_cob(q, calib, cfg)
    out = _out(args)
    cob.save(out / "cob.json")
    write_history(cob.history, out / "teleport_history.csv")
    write_model(teleport_apply(q, cob), out / "model.json")
    h = cob.history
    print(f"objective {h[0]['loss']:.6g} -> {min(r['loss'] for r in h):.6g} over {len(h)} iterations")
    return 0


def cmd_synth(args) -> int:
    q = _quantized(args.model, args.scale)
    if args.calibration:
        domains, _ = _domains(q, quantize_input(tensorio.load(args.calibration), q.scale),
                              args.margin, args.lookup_range)
    else:
        domains = None
    plan, parts = split_circuit(q, domains, args.split, eliminate_zeros=not args.dense)
    if args.pad is not None:
        parts = [pad_dummy(p, args.pad) for p in parts]
    out = _out(args)
    for i, p in enumerate(parts):
        (out / f"part{i}.bin").write_bytes(p.to_bytes())
    cost = {"rows": sum(p.rows for p in parts), "lookup_entries": sum(p.lookup_entries for p in parts),
            "k": max(p.k for p in parts), "per_part": [p.cost() for p in parts], "split": plan.to_dict()}
    (out / "cost.json").write_text(json.dumps(cost, indent=1, sort_keys=True) + "\n")
    print(json.dumps({k: cost[k] for k in ("rows", "lookup_entries", "k")}))
    return 0


def cmd_keygen(args) -> int:
    circuit = CircuitTable.from_bytes(Path(args.circuit).read_bytes())
    _, vk = keygen(circuit)
    out = _out(args)
    (out / args.name).write_bytes(vk.to_bytes())
    print(vk.hex())
    return 0


def cmd_prove(args) -> int:
    model = _quantized(args.model, args.scale)
    circuit = CircuitTable.from_bytes(Path(args.circuit).read_bytes(), model)
    x = np.asarray(tensorio.load(args.input)).ravel()
    xq = x.astype(np.int64) if args.integer_input else quantize_input(x, model.scale)
    if circuit.layout.n_x == 0 and not args.integer_input:
        raise SystemExit("chained parts take the previous part's integer output; pass --integer-input")
    w = assign_witness(circuit, xq)
    w = pad_witness(w, circuit.rows)
    pk, _ = keygen(circuit)
    pf = prove(pk, xq if circuit.layout.n_x else None, w, args.mode, args.samples, seed=args.seed)
    out = _out(args)
    (out / args.name).write_bytes(pf.to_bytes())
    tensorio.save(out / "statement_x.tstn", xq.astype(np.float64))
    tensorio.save(out / "statement_y.tstn", w.output.astype(np.float64))
    print(pf.digest())
    return 0


def _int_vector(path):
    return None if path is None else np.rint(tensorio.load(path)).astype(np.int64).ravel()


def cmd_verify(args) -> int:
    if len(args.vk) != len(args.proof):
        raise SystemExit("need one --vk per --proof")
    vks = [VerificationKey.from_bytes(Path(p).read_bytes()) for p in args.vk]
    proofs = [Proof.from_bytes(Path(p).read_bytes()) for p in args.proof]
    x, y = _int_vector(args.x), _int_vector(args.y)
    samples = args.samples if args.mode == "sampled" else None
    if len(vks) == 1:
        verdict = verify(vks[0], x, y, proofs[0], args.mode, samples)
    else:
        verdict = verify_chain(vks, proofs, x, y, args.mode, samples)
    print(verdict)
    return 0 if verdict else 1


def cmd_report(args) -> int:
    data = json.loads(Path(args.report).read_text())
    report = CostReport(**data)
    for path in emit_report(report, _out(args), args.format):
        print(path)
    return 0


def cmd_pipeline(args) -> int:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(PipelineConfig)}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.no_teleport:
        overrides["teleport"] = False
    if args.config:
        config = PipelineConfig.from_json(args.config, **overrides)
    else:
        if "model" not in overrides or "calibration" not in overrides:
            raise SystemExit("pipeline needs --config or both --model and --calibration")
        config = PipelineConfig(**overrides)
    try:
        report, ok = run_pipeline(config)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(report.verification["verdict"])
    st = report.stages
    print(f"rows dense {st['dense']['rows']} sparse {st['sparse']['rows']} final {st['final']['rows']} "
          f"(k={st['final']['k']}, lookups {st['final']['lookup_entries']})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zkslim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--out", default=f"zkslim-out/{name}", help=f"output directory (or ${OUT_ENV})")
        return sp

    sp = add("quantize", cmd_quantize, "quantize a float model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--scale", type=int, default=12)
    sp.add_argument("--calibration", help="declare lookup domains from these inputs")
    sp.add_argument("--margin", type=int, default=0)

    sp = add("prune", cmd_prune, "sparsify a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calibration")
    sp.add_argument("--method", choices=("magnitude", "rd", "cap"), default="magnitude")
    sp.add_argument("--ratio", type=float, default=0.5)
    sp.add_argument("--grid", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75])
    sp.add_argument("--curvature", choices=("full", "diagonal"), default="diagonal")
    sp.add_argument("--scale", type=int, default=12)

    sp = add("teleport", cmd_teleport, "optimize change-of-basis scalars")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calibration", required=True)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--mu", type=float, default=1e-3)
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--scale", type=int, default=12)

    sp = add("synth", cmd_synth, "synthesize circuit tables")
    sp.add_argument("--model", required=True)
    sp.add_argument("--calibration", help="inputs used to size lookup tables")
    sp.add_argument("--split", type=int, default=1)
    sp.add_argument("--pad", type=int)
    sp.add_argument("--dense", action="store_true", help="keep rows for zero weights")
    sp.add_argument("--lookup-range", type=float, nargs=2)
    sp.add_argument("--margin", type=int, default=0)
    sp.add_argument("--scale", type=int, default=12)

    sp = add("keygen", cmd_keygen, "commit to a circuit's fixed columns")
    sp.add_argument("--circuit", required=True)
    sp.add_argument("--name", default="vk.bin")

    sp = add("prove", cmd_prove, "prove one inference")
    sp.add_argument("--circuit", required=True)
    sp.add_argument("--model", required=True, help="the quantized model the circuit was built from")
    sp.add_argument("--input", required=True)
    sp.add_argument("--integer-input", action="store_true", help="input is already at scale 2^s")
    sp.add_argument("--mode", choices=("audit", "sampled"), default="audit")
    sp.add_argument("--samples", type=int, default=16)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--name", default="proof.bin")
    sp.add_argument("--scale", type=int, default=12)

    sp = add("verify", cmd_verify, "verify one proof or a chain of split proofs")
    sp.add_argument("--vk", nargs="+", required=True)
    sp.add_argument("--proof", nargs="+", required=True)
    sp.add_argument("--x", help="public input (integer TSTN)")
    sp.add_argument("--y", help="claimed output (integer TSTN)")
    sp.add_argument("--mode", choices=("audit", "sampled"), default="audit")
    sp.add_argument("--samples", type=int, default=16)

    sp = add("report", cmd_report, "re-emit a pipeline report")
    sp.add_argument("--report", required=True)
    sp.add_argument("--format", choices=("json", "csv"), default="csv")

    sp = add("pipeline", cmd_pipeline, "run every stage")
    sp.add_argument("--config", help="JSON file with PipelineConfig fields")
    sp.add_argument("--model")
    sp.add_argument("--calibration")
    sp.add_argument("--labels")
    sp.add_argument("--scale", type=int)
    sp.add_argument("--prune", choices=("none", "magnitude", "rd", "cap"))
    sp.add_argument("--ratio", type=float)
    sp.add_argument("--no-teleport", action="store_true")
    sp.add_argument("--teleport-iters", type=int)
    sp.add_argument("--teleport-lr", type=float)
    sp.add_argument("--teleport-lambda", type=float)
    sp.add_argument("--split", type=int)
    sp.add_argument("--pad-target", type=int)
    sp.add_argument("--lookup-range", type=float, nargs=2)
    sp.add_argument("--verify-mode", choices=("audit", "sampled"))
    sp.add_argument("--samples", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(out=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "pipeline":
        args.out_dir = args.out
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
