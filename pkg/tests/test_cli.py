import json
import subprocess
import sys

import numpy as np
import pytest

from mtconv.cli import run_command, shipped_config
from mtconv.tensor import save_tensor


def test_unknown_subcommand_exits_1(capsys):
    assert run_command(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_subcommand_exits_1(capsys):
    assert run_command([]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mtconv", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr


def test_flops_sweep(capsys, tmp_path):
    out = tmp_path / "sweep.csv"
    assert run_command(["flops", "--delta-sweep", "1,0.875,0.5", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "delta,gflops,params" and len(lines) == 4
    gflops = [float(line.split(",")[1]) for line in lines[1:]]
    assert gflops[0] > gflops[1] > gflops[2]
    assert capsys.readouterr().out == out.read_text()


def test_flops_report(capsys):
    assert run_command(["flops"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("name,flops,params,shape") and "\ntotal," in text


def test_flops_missing_config_exits_3(tmp_path):
    assert run_command(["flops", "--config", str(tmp_path / "nope.json")]) == 3


def test_flops_bad_config_exits_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"input": [3, 8, 8, 8], "stem": {"out": 4}, "blocks": [], "num_classes": 1}))
    assert run_command(["flops", "--config", str(bad)]) == 1


def test_select_frames(capsys, tmp_path):
    f = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
    save_tensor(tmp_path / "f.mtn", f)
    assert run_command(["select-frames", "--input", str(tmp_path / "f.mtn")]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["score"] for r in rows] == [2.0, 1.0, 1.0, 2.0]
    assert [r["frame"] for r in rows if r["selected"]] == [1, 2]


def test_select_frames_truncated_exits_3(capsys, tmp_path):
    save_tensor(tmp_path / "f.mtn", np.ones((3, 4, 2, 2)))
    path = tmp_path / "f.mtn"
    path.write_bytes(path.read_bytes()[:-8])
    assert run_command(["select-frames", "--input", str(path)]) == 3
    assert "byte offset" in capsys.readouterr().err


def test_train_then_eval(capsys, tmp_path):
    out = tmp_path / "run"
    assert run_command(["train", "--config", str(shipped_config("micro_train.json")), "--out", str(out)]) == 0
    for name in ("history.csv", "params.mtn", "params.mtn.index.json", "buffers.mtn", "config.json"):
        assert (out / name).exists()
    assert len((out / "history.csv").read_text().splitlines()) == 3
    capsys.readouterr()
    assert run_command(["eval", "--checkpoint", str(out / "params.mtn"), "--views", "2x2"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["views"] == [2, 2] and 0.0 <= report["accuracy"] <= 1.0


def test_eval_missing_checkpoint_exits_3(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(shipped_config("micro_train.json").read_text())
    assert run_command(["eval", "--checkpoint", str(tmp_path / "none.mtn"), "--config", str(cfg)]) == 3


def test_eval_bad_views_exits_1(tmp_path):
    assert run_command(["eval", "--checkpoint", str(tmp_path / "x.mtn"), "--views", "ten"]) == 1


@pytest.mark.slow
def test_gradcheck_exits_0(capsys):
    assert run_command(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
