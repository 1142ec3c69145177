import json
import shutil
import subprocess

import numpy as np
import pytest

from zkslim import tensorio, zoo
from zkslim.cli import main
from zkslim.model import write_model


@pytest.fixture
def files(tmp_path):
    fm = zoo.mlp([5, 8, 3], seed=11)
    write_model(fm, tmp_path / "model.json")
    tensorio.save(tmp_path / "calib.tstn", zoo.gaussian_inputs(30, 5, seed=12))
    tensorio.save(tmp_path / "x.tstn", zoo.gaussian_inputs(1, 5, seed=13)[0])
    return tmp_path


def test_stage_by_stage(files, capsys):
    d = files
    assert main(["quantize", "--model", str(d / "model.json"), "--out", str(d / "q")]) == 0
    assert main(["prune", "--model", str(d / "q/model.json"), "--calibration", str(d / "calib.tstn"),
                 "--method", "cap", "--ratio", "0.5", "--out", str(d / "p")]) == 0
    assert main(["teleport", "--model", str(d / "p/model.json"), "--calibration", str(d / "calib.tstn"),
                 "--iters", "20", "--out", str(d / "t")]) == 0
    assert main(["synth", "--model", str(d / "t/model.json"), "--calibration", str(d / "calib.tstn"),
                 "--lookup-range", "-20", "20", "--out", str(d / "c")]) == 0
    cost = json.loads((d / "c/cost.json").read_text())
    assert cost["rows"] > 0 and cost["k"] >= 1
    assert main(["keygen", "--circuit", str(d / "c/part0.bin"), "--out", str(d / "k")]) == 0
    assert main(["prove", "--circuit", str(d / "c/part0.bin"), "--model", str(d / "t/model.json"),
                 "--input", str(d / "x.tstn"), "--seed", "1", "--out", str(d / "pf")]) == 0
    verify = ["verify", "--vk", str(d / "k/vk.bin"), "--proof", str(d / "pf/proof.bin"),
              "--x", str(d / "pf/statement_x.tstn"), "--out", str(d / "v")]
    capsys.readouterr()
    assert main(verify + ["--y", str(d / "pf/statement_y.tstn")]) == 0
    assert capsys.readouterr().out.strip() == "accept"
    y = tensorio.load(d / "pf/statement_y.tstn")
    y[0] += 1
    tensorio.save(d / "wrong_y.tstn", y)
    assert main(verify + ["--y", str(d / "wrong_y.tstn")]) == 1
    assert "instance mismatch" in capsys.readouterr().out


def test_pipeline_command_and_report(files, capsys):
    d = files
    code = main(["pipeline", "--model", str(d / "model.json"), "--calibration", str(d / "calib.tstn"),
                 "--ratio", "0.5", "--teleport-iters", "10", "--split", "2", "--out", str(d / "run")])
    assert code == 0
    assert capsys.readouterr().out.startswith("accept")
    assert main(["verify", "--vk", str(d / "run/keys/vk0.bin"), str(d / "run/keys/vk1.bin"),
                 "--proof", str(d / "run/proofs/proof0.bin"), str(d / "run/proofs/proof1.bin"),
                 "--x", str(d / "run/statement_x.tstn"), "--y", str(d / "run/statement_y.tstn"),
                 "--out", str(d / "v")]) == 0
    assert main(["verify", "--vk", str(d / "run/keys/vk1.bin"), str(d / "run/keys/vk0.bin"),
                 "--proof", str(d / "run/proofs/proof0.bin"), str(d / "run/proofs/proof1.bin"),
                 "--x", str(d / "run/statement_x.tstn"), "--y", str(d / "run/statement_y.tstn"),
                 "--out", str(d / "v")]) == 1
    assert main(["report", "--report", str(d / "run/report.json"), "--out", str(d / "rep")]) == 0
    assert (d / "rep/report.csv").read_bytes() == (d / "run/report.csv").read_bytes()


def test_pipeline_error_exit_code(files, capsys):
    code = main(["pipeline", "--model", str(files / "nope.json"), "--calibration", str(files / "calib.tstn"),
                 "--out", str(files / "run")])
    assert code == 2
    assert "[load]" in capsys.readouterr().err


def test_out_env_variable(files, monkeypatch):
    monkeypatch.setenv("ZKSLIM_OUT", str(files / "from_env"))
    assert main(["quantize", "--model", str(files / "model.json"), "--out", str(files / "flag")]) == 0
    assert (files / "from_env/model.json").exists() and not (files / "flag").exists()


@pytest.mark.skipif(shutil.which("zkslim") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["zkslim", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("quantize", "prune", "teleport", "synth", "keygen", "prove", "verify", "report", "pipeline"):
        assert cmd in res.stdout
