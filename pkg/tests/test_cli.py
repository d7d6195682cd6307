import json
import subprocess
import sys

import pytest

from hyqal.cli import main
from test_pipeline import SMALL


@pytest.fixture
def config_file(tmp_path):
    cfg = dict(SMALL, seed=0)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def _run(*argv):
    return main([str(a) for a in argv])


def test_gen_data_then_matrix(tmp_path, config_file):
    data = tmp_path / "data"
    assert _run("gen-data", "--config", config_file, "--out", data) == 0
    pgms = sorted(data.glob("*.pgm"))
    assert len(pgms) == 96
    manifest = json.loads((data / "manifest.json").read_text())
    assert b"hyqal config_hash=" + manifest["config_hash"].encode() in pgms[0].read_bytes()[:200]

    out = tmp_path / "results"
    assert _run("run-matrix", "--config", config_file, "--data", data, "--out", out) == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 6
    assert json.loads((out / "manifest.json").read_text())["test"] == manifest["test"]

    again = tmp_path / "again"
    assert _run("run-matrix", "--config", config_file, "--data", data, "--out", again) == 0
    for f in sorted(out.iterdir()):
        assert f.read_bytes() == (again / f.name).read_bytes(), f.name


def test_stage_commands(tmp_path, config_file, capsys):
    assert _run("pretrain", "--config", config_file, "--out", tmp_path / "pre") == 0
    ckpt = tmp_path / "pre" / "pretrain.json"
    assert _run("finetune", "--config", config_file, "--variant", "ssl_quantum", "--checkpoint", ckpt,
                "--out", tmp_path / "ft") == 0
    capsys.readouterr()
    assert _run("evaluate", "--config", config_file, "--checkpoint", tmp_path / "ft" / "model.json",
                "--out", tmp_path / "ev") == 0
    line = json.loads(capsys.readouterr().out)
    run = json.loads((tmp_path / "ft" / "run.json").read_text())["run"]
    assert line["model"] == "ssl_quantum" and line["auc"] == round(run["test"]["auc"], 4)
    assert _run("inspect-checkpoint", tmp_path / "ft" / "model.json") == 0
    info = json.loads(capsys.readouterr().out)
    assert set(info["groups"]) == {"encoder", "projection", "fusion", "head"}


def test_gradcheck_exit_code(capsys):
    assert _run("gradcheck", "--qubits", 3, "--layers", 2, "--seed", 1) == 0
    assert json.loads(capsys.readouterr().out)["max_relative_error"] < 1e-4


def test_corrupt_checkpoint_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"format_version": 1, "config": {}, "params": {')
    assert _run("inspect-checkpoint", bad) == 2
    assert _run("inspect-checkpoint", tmp_path / "missing.json") == 2


def test_usage_errors_exit_1(tmp_path, config_file):
    assert _run("gradcheck", "--bogus") == 1
    assert _run() == 1
    assert _run("gen-data", "--config", config_file, "--seed", 7, "--out", tmp_path / "x") == 1
    assert not (tmp_path / "x").exists()
    assert _run("gen-data", "--set", "data.height=8", "--out", tmp_path / "y") == 1
    assert _run("finetune", "--config", config_file, "--variant", "ssl_only", "--out", tmp_path / "z") == 1


def test_output_inside_input_refused(tmp_path, config_file):
    data = tmp_path / "data"
    assert _run("gen-data", "--config", config_file, "--out", data) == 0
    assert _run("run-matrix", "--config", config_file, "--data", data, "--out", data / "res") == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hyqal", "gradcheck", "--qubits", "2", "--layers", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "max_relative_error" in proc.stdout
