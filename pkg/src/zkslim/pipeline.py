"""End-to-end run: quantize, prune, teleport, synthesize, prove, verify, report.

Every stage writes its artifacts under the output directory; the report only
holds numbers that can be recomputed from those files. Wall-clock timings go
to ``timings.json`` so that the report itself is reproducible byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .circuit import (
    assign_chain,
    build_lookup_tables,
    ceil_log2,
    count_rows,
    pad_dummy,
    pad_witness,
    split_circuit,
)
from .model import (
    QuantizedModel,
    accuracy,
    dequantize,
    forward,
    quantize,
    quantize_input,
    read_model,
    run_quantized,
    write_model,
)
from .pruner import apply_plan, cap_prune, magnitude_prune, rd_allocate
from .ranges import RangeReport, activation_range_stats
from .teleport import TeleportConfig, optimize_cob, teleport_apply, write_history
from .transcript import Proof, keygen, prove, verify_chain

log = logging.getLogger(__name__)

OUT_ENV = "ZKSLIM_OUT"
PRUNE_METHODS = ("none", "magnitude", "rd", "cap")


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.__cause__ = exc


@dataclass
class PipelineConfig:
    model: str
    calibration: str
    labels: str | None = None
    scale: int = 12
    prune: str = "magnitude"
    ratio: float = 0.5
    rd_grid: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    teleport: bool = True
    teleport_lr: float = 0.05
    teleport_iters: int = 200
    teleport_lambda: float | None = None
    split: int = 1
    pad_target: int | None = None
    lookup_range: list[float] | None = None  # fixed real-valued [lo, hi] for every site
    range_margin: int = 0
    verify_mode: str = "audit"
    samples: int = 16
    eval_fraction: float = 0.25
    out_dir: str = "zkslim-out"
    seed: int = 0

    def validate(self) -> None:
        for p in (self.model, self.calibration) + ((self.labels,) if self.labels else ()):
            if not Path(p).exists():
                raise FileNotFoundError(p)
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"ratio {self.ratio} outside [0, 1)")
        if self.split < 1:
            raise ValueError("split M must be >= 1")
        if self.prune not in PRUNE_METHODS:
            raise ValueError(f"prune method {self.prune!r} not in {PRUNE_METHODS}")
        if self.verify_mode not in ("audit", "sampled"):
            raise ValueError(f"verify mode {self.verify_mode!r}")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must be in (0, 1)")
        if self.lookup_range is not None and len(self.lookup_range) != 2:
            raise ValueError("lookup_range needs [lo, hi]")

    @classmethod
    def from_json(cls, path, **overrides) -> "PipelineConfig":
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def resolved_out(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.out_dir)


@dataclass
class CostReport:
    stages: dict
    split: dict
    ranges: dict
    accuracy: dict
    verification: dict
    digests: dict
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)

    # flattened view used by the CSV writer
    def rows(self) -> list[tuple[str, str]]:
        out = []

        def walk(prefix, obj):
            if isinstance(obj, dict):
                for k in sorted(obj):
                    walk(f"{prefix}.{k}" if prefix else str(k), obj[k])
            elif isinstance(obj, list) and obj and isinstance(obj[0], dict):
                for i, v in enumerate(obj):
                    walk(f"{prefix}[{i}]", v)
            else:
                out.append((prefix, json.dumps(obj)))

        walk("", {k: v for k, v in self.to_dict().items() if k != "ranges"})
        walk("ranges", {k: v for k, v in self.ranges.items() if k not in ("sample_loss_before", "sample_loss_after")})
        return out


def emit_report(report: CostReport, out_dir, fmt: str = "json", bins: int = 20) -> list[Path]:
    """Write the report as JSON or CSV; CSV also gets a range histogram unless ranges are empty."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "json":
        path = out_dir / "report.json"
        path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        written.append(path)
    elif fmt == "csv":
        path = out_dir / "report.csv"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(report.rows())
        path.write_text(buf.getvalue())
        written.append(path)
        hist = histogram_rows(report.ranges, bins)
        if hist:
            hpath = out_dir / "range_histogram.csv"
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count_before", "count_after"])
            w.writerows(hist)
            hpath.write_text(buf.getvalue())
            written.append(hpath)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return written


def histogram_rows(ranges: dict, bins: int = 20) -> list[list]:
    before = np.asarray(ranges.get("sample_loss_before") or [], dtype=np.float64)
    after = np.asarray(ranges.get("sample_loss_after") or [], dtype=np.float64)
    if ranges.get("empty") or before.size == 0:
        return []
    both = np.concatenate([before, after]) if after.size else before
    edges = np.histogram_bin_edges(both, bins=bins)
    hb, _ = np.histogram(before, edges)
    ha, _ = np.histogram(after, edges) if after.size else (np.zeros(bins, dtype=int), None)
    return [[f"{lo:.6g}", f"{hi:.6g}", int(b), int(a)] for lo, hi, b, a in zip(edges[:-1], edges[1:], hb, ha)]


def range_section(report: RangeReport) -> dict:
    out = report.to_dict()
    out["histogram_omitted"] = report.empty
    out["sample_loss_before"] = [round(float(v), 9) for v in report.before.sample_loss]
    if report.after is not None:
        out["sample_loss_after"] = [round(float(v), 9) for v in report.after.sample_loss]
    return out


def _domains(model: QuantizedModel, Xq: np.ndarray, margin: int, fixed: list[float] | None):
    _, _, trace = run_quantized(model, Xq, mode="free")
    if fixed is not None:
        lo, hi = (int(np.floor(fixed[0] * 2**model.scale)), int(np.ceil(fixed[1] * 2**model.scale)))
        for i, z in enumerate(trace.sites):
            if z.size and (z.min() < lo or z.max() > hi):
                raise ValueError(f"site {i} calibration range [{z.min()}, {z.max()}] exceeds lookup_range")
        return [(lo, hi)] * len(trace.sites), trace
    return [(int(z.min()) - margin, int(z.max()) + margin) for z in trace.sites], trace


def _lookup_entries(model: QuantizedModel, domains) -> int:
    tables, _ = build_lookup_tables(model, domains)
    return sum(t.entries for t in tables)


def _accuracy(model, X, labels) -> float:
    if isinstance(model, QuantizedModel):
        out, _, _ = run_quantized(model, quantize_input(X, model.scale), mode="free")
        return accuracy(out[-1], labels)
    return accuracy(forward(model, X), labels)


class _Timer:
    def __init__(self):
        self.times = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.times[name] = round(time.perf_counter() - self.t, 6)

        return _Ctx()


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(name, exc) from exc
        return inner
    return wrap


def _split_calibration(X, labels, fraction, seed):
    n = len(X)
    perm = np.random.default_rng(seed).permutation(n)
    n_eval = max(1, int(round(fraction * n)))
    if n - n_eval < 1:
        raise ValueError("calibration container too small to hold out an evaluation split")
    ev, cal = perm[:n_eval], perm[n_eval:]
    return X[cal], X[ev], (None if labels is None else labels[ev])


def run_pipeline(config: PipelineConfig) -> tuple[CostReport, bool]:
    """Run every stage; returns ``(report, verified)``. Artifacts land in the output directory."""
    timer = _Timer()
    out = config.resolved_out()

    @_stage("load")
    def load():
        config.validate()
        model = read_model(config.model)
        X = np.atleast_2d(tensorio.load(config.calibration))
        labels = None if config.labels is None else tensorio.load(config.labels).astype(np.int64).ravel()
        if labels is not None and len(labels) != len(X):
            raise ValueError(f"{len(labels)} labels for {len(X)} calibration samples")
        return model, X, labels

    model, X, labels = load()
    fmodel = dequantize(model) if isinstance(model, QuantizedModel) else model
    calib, X_eval, y_eval = _split_calibration(X, labels, config.eval_fraction, config.seed)
    if y_eval is None:
        y_eval = np.argmax(forward(fmodel, X_eval), axis=1)
    out.mkdir(parents=True, exist_ok=True)
    s = config.scale
    Xq = quantize_input(calib, s)

    @_stage("quantize")
    def do_quantize():
        q = quantize(fmodel, s)
        write_model(q, out / "quantized" / "model.json")
        return q

    with timer("quantize"):
        qmodel = do_quantize()

    @_stage("prune")
    def do_prune():
        if config.prune == "none" or config.ratio == 0:
            plan = magnitude_prune(fmodel, 0.0)
        elif config.prune == "magnitude":
            plan = magnitude_prune(fmodel, config.ratio)
        elif config.prune == "rd":
            plan = rd_allocate(fmodel, calib, config.rd_grid, config.ratio)
        else:
            plan = cap_prune(fmodel, calib, config.ratio)
        plan.save(out / "plan")
        pruned = apply_plan(qmodel, plan)
        write_model(pruned, out / "pruned" / "model.json")
        return plan, pruned

    with timer("prune"):
        plan, pruned = do_prune()

    @_stage("teleport")
    def do_teleport():
        if not config.teleport:
            return pruned, None
        tcfg = TeleportConfig(lr=config.teleport_lr, max_iter=config.teleport_iters, lam=config.teleport_lambda)
        cob = optimize_cob(pruned, calib, tcfg)
        cob.save(out / "cob.json")
        write_history(cob.history, out / "teleport_history.csv")
        moved = teleport_apply(pruned, cob)
        write_model(moved, out / "teleported" / "model.json")
        return moved, cob

    with timer("teleport"):
        final, cob = do_teleport()

    @_stage("synthesize")
    def do_synth():
        dom_before, trace_before = _domains(pruned, Xq, config.range_margin, config.lookup_range)
        dom_final, trace_final = _domains(final, Xq, config.range_margin, config.lookup_range)
        dom_dense, _ = _domains(qmodel, Xq, config.range_margin, config.lookup_range)
        rng_report = activation_range_stats(trace_before, trace_final if cob is not None else None)
        dense_counts = count_rows(qmodel, eliminate_zeros=False)
        stages = {
            "dense": {"rows": dense_counts["total"], "multiply_rows": dense_counts["mul"],
                      "lookup_entries": _lookup_entries(qmodel, dom_dense)},
            "sparse": {"rows": count_rows(pruned)["total"], "multiply_rows": count_rows(pruned)["mul"],
                       "lookup_entries": _lookup_entries(pruned, dom_before)},
        }
        plan_split, parts = split_circuit(final, dom_final, config.split)
        if config.pad_target is not None:
            parts = [pad_dummy(p, config.pad_target) for p in parts]
        cdir = out / "circuits"
        cdir.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(parts):
            (cdir / f"part{i}.bin").write_bytes(p.to_bytes())
        final_stats = {
            "rows": sum(p.rows for p in parts),
            "multiply_rows": sum(p.multiply_rows for p in parts),
            "lookup_entries": sum(p.lookup_entries for p in parts),
            "k": max(p.k for p in parts),
        }
        stages["dense"]["k"] = _k(stages["dense"])
        stages["sparse"]["k"] = _k(stages["sparse"])
        stages["final"] = final_stats
        split_info = plan_split.to_dict()
        split_info["parts"] = [dict(d, rows=p.rows, k=p.k) for d, p in zip(split_info["parts"], parts)]
        split_info["padded_to"] = config.pad_target
        return parts, stages, split_info, rng_report

    with timer("synthesize"):
        parts, stages, split_info, rng_report = do_synth()

    @_stage("keygen")
    def do_keygen():
        kdir = out / "keys"
        kdir.mkdir(parents=True, exist_ok=True)
        keys = [keygen(p) for p in parts]
        for i, (_, vk) in enumerate(keys):
            (kdir / f"vk{i}.bin").write_bytes(vk.to_bytes())
        return keys

    with timer("keygen"):
        keys = do_keygen()

    @_stage("prove")
    def do_prove():
        x = Xq[0]
        witnesses = assign_chain(parts, x)
        pdir = out / "proofs"
        pdir.mkdir(parents=True, exist_ok=True)
        proofs = []
        for i, ((pk, _), w) in enumerate(zip(keys, witnesses)):
            w = pad_witness(w, pk.circuit.rows)
            pf = prove(pk, x if i == 0 else None, w, config.verify_mode,
                       config.samples if config.verify_mode == "sampled" else 0,
                       seed=config.seed * 1_000 + i)
            (pdir / f"proof{i}.bin").write_bytes(pf.to_bytes())
            proofs.append(pf)
        tensorio.save(out / "statement_x.tstn", x.astype(np.float64))
        tensorio.save(out / "statement_y.tstn", witnesses[-1].output.astype(np.float64))
        return x, witnesses[-1].output, proofs

    with timer("prove"):
        x, y, proofs = do_prove()

    @_stage("verify")
    def do_verify():
        vks = [vk for _, vk in keys]
        loaded = [Proof.from_bytes(pf.to_bytes()) for pf in proofs]
        return verify_chain(vks, loaded, x, y, config.verify_mode,
                            config.samples if config.verify_mode == "sampled" else None)

    with timer("verify"):
        verdict = do_verify()

    acc = {
        "float": _accuracy(fmodel, X_eval, y_eval),
        "quantized_dense": _accuracy(qmodel, X_eval, y_eval),
        "quantized_sparse": _accuracy(pruned, X_eval, y_eval),
        "teleported": _accuracy(final, X_eval, y_eval),
    }
    report = CostReport(
        stages=stages,
        split=split_info,
        ranges=range_section(rng_report),
        accuracy={k: round(v, 9) for k, v in acc.items()},
        verification={"verdict": str(verdict), "accepted": bool(verdict), "mode": config.verify_mode},
        digests={"vk": [vk.hex() for _, vk in keys], "proof": [pf.digest() for pf in proofs],
                 "circuit": [p.digest() for p in parts]},
        config={k: v for k, v in asdict(config).items() if k != "out_dir"},
    )
    emit_report(report, out, "json")
    emit_report(report, out, "csv")
    (out / "timings.json").write_text(json.dumps(timer.times, indent=1, sort_keys=True) + "\n")
    log.info("pipeline finished: %s", verdict)
    return report, bool(verdict)


def _k(stats: dict) -> int:
    return ceil_log2(stats["rows"] + stats["lookup_entries"])
