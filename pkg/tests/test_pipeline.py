import csv
import json

import numpy as np
import pytest

from zkslim import tensorio, zoo
from zkslim.circuit import count_rows
from zkslim.model import quantize, read_model, write_model
from zkslim.pipeline import CostReport, PipelineConfig, PipelineError, emit_report, range_section, run_pipeline
from zkslim.ranges import RangeReport, RangeStats, summary_report


@pytest.fixture
def workspace(tmp_path):
    fm = zoo.outlier_mlp([6, 12, 12, 4], seed=2)
    write_model(fm, tmp_path / "model.json")
    tensorio.save(tmp_path / "calib.tstn", zoo.gaussian_inputs(48, 6, seed=3))
    return tmp_path


def config(ws, name, **kw):
    base = dict(model=str(ws / "model.json"), calibration=str(ws / "calib.tstn"),
                out_dir=str(ws / name), teleport_iters=30)
    base.update(kw)
    return PipelineConfig(**base)


def test_identity_pipeline_verifies(workspace):
    report, ok = run_pipeline(config(workspace, "id", prune="none", ratio=0.0, teleport=False))
    assert ok and report.verification["verdict"] == "accept"
    st = report.stages
    assert st["dense"]["multiply_rows"] == st["sparse"]["multiply_rows"] == st["final"]["multiply_rows"]
    assert report.accuracy["quantized_dense"] == report.accuracy["teleported"]
    assert "after" not in report.ranges


def test_prune_and_teleport_shrink_the_circuit(workspace):
    report, ok = run_pipeline(config(workspace, "full", ratio=0.5, split=2))
    assert ok
    st = report.stages
    assert st["sparse"]["rows"] < st["dense"]["rows"]
    assert st["final"]["lookup_entries"] < st["sparse"]["lookup_entries"]
    assert report.ranges["reduction_pct"] > 0
    assert len(report.split["parts"]) == 2
    out = workspace / "full"
    for name in ("cob.json", "teleport_history.csv", "keys/vk0.bin", "keys/vk1.bin", "proofs/proof1.bin",
                 "report.json", "report.csv", "range_histogram.csv", "timings.json", "plan/plan.json"):
        assert (out / name).exists(), name


def test_sampled_mode_pipeline(workspace):
    report, ok = run_pipeline(config(workspace, "sampled", verify_mode="sampled", samples=8, teleport=False))
    assert ok and report.verification["mode"] == "sampled"


def test_padding_hides_sparsity(workspace):
    target = count_rows(quantize(read_model(workspace / "model.json"), 12), eliminate_zeros=False)["total"]
    seen = []
    for r in (0.3, 0.6):
        report, ok = run_pipeline(config(workspace, f"pad{r}", ratio=r, pad_target=target,
                                         lookup_range=[-64.0, 64.0]))
        assert ok
        vk = (workspace / f"pad{r}" / "keys" / "vk0.bin").read_bytes()
        seen.append((report.stages["final"]["rows"], report.stages["final"]["k"], len(vk)))
    assert seen[0] == seen[1] and seen[0][0] == target


def test_runs_are_byte_identical(workspace):
    for name in ("a", "b"):
        run_pipeline(config(workspace, name, ratio=0.4, split=2, seed=7))
    a, b = workspace / "a", workspace / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "timings.json")
    assert len(files) > 10
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    report = json.loads((a / "report.json").read_text())
    assert "out_dir" not in report["config"]


def test_out_env_override(workspace, monkeypatch):
    monkeypatch.setenv("ZKSLIM_OUT", str(workspace / "env"))
    run_pipeline(config(workspace, "ignored", teleport=False))
    assert (workspace / "env" / "report.json").exists()
    assert not (workspace / "ignored").exists()


def test_failures_name_the_stage(workspace):
    with pytest.raises(PipelineError) as e:
        run_pipeline(config(workspace, "bad", model=str(workspace / "missing.json")))
    assert e.value.stage == "load"
    with pytest.raises(PipelineError):
        run_pipeline(config(workspace, "bad", ratio=1.5))
    with pytest.raises(PipelineError) as e:
        run_pipeline(config(workspace, "bad", teleport=False, lookup_range=[-0.01, 0.01]))
    assert e.value.stage == "synthesize"


def test_config_from_json(workspace):
    path = workspace / "cfg.json"
    path.write_text(json.dumps({"model": "m.json", "calibration": "c.tstn", "ratio": 0.25}))
    cfg = PipelineConfig.from_json(path, ratio=0.75)
    assert cfg.ratio == 0.75 and cfg.model == "m.json"


def _report(ranges):
    return CostReport(stages={}, split={}, ranges=ranges, accuracy={}, verification={}, digests={}, config={})


def test_report_renders_reference_reduction(tmp_path):
    rr = summary_report(27.39, 5.99, 16.98, 2.64)
    assert round(rr.reduction_pct, 2) == 38.01
    assert round(rr.std_reduction_pct, 1) == 55.9
    emit_report(_report(range_section(rr)), tmp_path, "csv")
    rows = dict(csv.reader(open(tmp_path / "report.csv")))
    assert round(float(rows["ranges.reduction_pct"]), 2) == 38.01


def test_empty_report_omits_histogram(tmp_path):
    empty = np.zeros(0)
    section = range_section(RangeReport(RangeStats(empty, empty, empty, 0.0, 0.0)))
    assert section["histogram_omitted"] is True
    written = emit_report(_report(section), tmp_path, "csv")
    assert [p.name for p in written] == ["report.csv"]


def test_report_serialization_is_deterministic(tmp_path):
    rep = _report(range_section(summary_report(27.39, 5.99, 16.98, 2.64)))
    for fmt in ("json", "csv"):
        first = [p.read_bytes() for p in emit_report(rep, tmp_path / "1", fmt)]
        second = [p.read_bytes() for p in emit_report(rep, tmp_path / "2", fmt)]
        assert first == second
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path, "xml")
