"""End-to-end smoke test of every command."""
import json
import subprocess
import sys

import numpy as np
import pytest

from dualrecon import io
from dualrecon.cli import main
from dualrecon.oracles import Sphere

MODEL = {"kind": "triplane", "R": 8, "d": 4, "L": 4, "K": 8, "heads": 2, "k_conv": 8}


def _config(tmp_path, epochs=2, name="run"):
    doc = {"model": MODEL, "train": {"epochs": epochs, "lr": 1e-3, "M": 64, "N": 48, "seed": 0},
           "data": {"oracle": "oracle:sphere"}, "output": str(tmp_path / name)}
    path = tmp_path / f"{name}-{epochs}.json"
    path.write_text(json.dumps(doc))
    return path


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert main(["train", "--config", str(_config(tmp))]) == 0
    return tmp


def test_train_outputs(trained):
    run = trained / "run"
    assert (run / "final.dtck").exists() and (run / "final.dtck.json").exists()
    assert (run / "best.dtck").exists() and (run / "config.json").exists()
    assert [r["step"] for r in io.read_jsonl(run / "train.jsonl")] == [0, 1]


def test_resume_continues_log(trained, tmp_path, capsys):
    import shutil
    run = tmp_path / "run"
    shutil.copytree(trained / "run", run)
    cfg = _config(tmp_path, epochs=4)
    assert main(["train", "--config", str(cfg), "--resume", str(run / "final.dtck")]) == 0
    assert _json_out(capsys)["steps"] == 2
    assert [r["step"] for r in io.read_jsonl(run / "train.jsonl")] == [0, 1, 2, 3]


def test_reconstruct_and_eval(trained, tmp_path, capsys):
    obj = tmp_path / "m.obj"
    assert main(["reconstruct", "--ckpt", str(trained / "run/final.dtck"), "--points", "oracle:sphere",
                 "--grid", "12", "--iso", "0.5", "--out", str(obj), "--n-points", "48"]) == 0
    info = _json_out(capsys)
    assert obj.exists() and info["points"] == 48
    report = tmp_path / "r.json"
    # an untrained network may produce an empty mesh; compare the oracle with itself through a mesh instead
    ref = tmp_path / "ref.obj"
    from dualrecon.selftest import marching_sphere
    io.write_obj(ref, marching_sphere(16)[0])
    assert main(["eval", "--pred", str(ref), "--gt", "oracle:sphere", "--samples", "500",
                 "--probes", "2000", "--out", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert {"iou", "chamfer_l1", "nc", "fscore", "n_samples", "seed"} <= set(doc)
    assert doc["n_samples"] == 500 and doc["chamfer_l1"] < 1.0
    capsys.readouterr()
    assert main(["eval", "--pred", str(obj), "--gt", str(ref), "--samples", "200", "--probes", "500",
                 "--out", str(tmp_path / "r2.json")]) == 0


def test_reconstruct_from_dptc(trained, tmp_path, capsys):
    pts, nrm = Sphere().surface_sample(60, np.random.default_rng(0))
    cloud = tmp_path / "c.dptc"
    io.write_dptc(cloud, pts, nrm)
    assert main(["reconstruct", "--ckpt", str(trained / "run/final.dtck"), "--points", str(cloud),
                 "--grid", "8", "--out", str(tmp_path / "c.obj")]) == 0
    assert _json_out(capsys)["points"] == 60


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--module", "decoder"]) == 0
    out = capsys.readouterr().out
    assert "decoder.bce_iid_forward" in out and "1/1 passed" in out


def test_bench_command(capsys):
    assert main(["bench-dspt", "--n", "400", "--l", "10", "--repeat", "1"]) == 0
    doc = _json_out(capsys)
    assert doc["windowed_s"] > 0 and doc["dense_s"] > 0
    assert doc["speedup"] == pytest.approx(doc["dense_s"] / doc["windowed_s"])


def test_selftest_exit_zero():
    proc = subprocess.run([sys.executable, "-m", "dualrecon", "selftest"], capture_output=True, text=True,
                          timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "checks passed" in proc.stdout


def test_failures_exit_nonzero_with_json(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"R": 0}, "train": {}, "data": {"oracle": "sphere"}}))
    proc = subprocess.run([sys.executable, "-m", "dualrecon", "train", "--config", str(bad)],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 1
    err = json.loads(proc.stderr.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and err["command"] == "train" and "model/R" in err["message"]
    proc = subprocess.run([sys.executable, "-m", "dualrecon", "reconstruct", "--ckpt", str(tmp_path / "none.dtck"),
                           "--points", "oracle:sphere", "--out", str(tmp_path / "x.obj")],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 1 and json.loads(proc.stderr)["command"] == "reconstruct"


def test_usage_error_is_nonzero():
    proc = subprocess.run([sys.executable, "-m", "dualrecon", "frobnicate"], capture_output=True, text=True, timeout=60)
    assert proc.returncode != 0
