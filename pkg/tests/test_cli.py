import json
import subprocess
import sys

import numpy as np
import pytest

from dmprune import cli
from dmprune.model_ir import CalibrationSet, GradientBundle, ModelBundle, \
    load_bundle


def run_cli(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_full_command_chain(tmp_path, capsys):
    d = str(tmp_path)
    cache = ["--cache-dir", str(tmp_path / "cache")]

    code, out, _ = run_cli(["demo-export", "--out", d, "--seed", "42"],
                           capsys)
    assert code == 0
    model = load_bundle(tmp_path / "model.dmb")
    calib = load_bundle(tmp_path / "calib.dmb")
    assert isinstance(model, ModelBundle)
    assert isinstance(calib, CalibrationSet)
    assert calib.n == 16

    code, out, _ = run_cli(
        ["grad", "--model", f"{d}/model.dmb", "--calib", f"{d}/calib.dmb",
         "--out", f"{d}/grads.dmb"], capsys)
    assert code == 0
    grads = load_bundle(tmp_path / "grads.dmb")
    assert isinstance(grads, GradientBundle)
    assert grads.n_samples == 16

    code, out, _ = run_cli(
        ["curves", "--model", f"{d}/model.dmb", "--grads", f"{d}/grads.dmb",
         "--out", f"{d}/curves.csv"] + cache, capsys)
    assert code == 0
    assert "cache miss" in out
    header = (tmp_path / "curves.csv").read_text().splitlines()[0]
    assert header == "layer_id,name,k,alpha,q,delta"

    code, out, _ = run_cli(
        ["curves", "--model", f"{d}/model.dmb", "--grads", f"{d}/grads.dmb",
         "--out", f"{d}/curves2.csv"] + cache, capsys)
    assert code == 0 and "cache hit" in out
    assert (tmp_path / "curves.csv").read_text() \
        == (tmp_path / "curves2.csv").read_text()

    code, out, _ = run_cli(
        ["allocate", "--model", f"{d}/model.dmb", "--grads",
         f"{d}/grads.dmb", "--flops-ratio", "0.5", "--out",
         f"{d}/alloc.json"] + cache, capsys)
    assert code == 0
    alloc = json.loads((tmp_path / "alloc.json").read_text())
    assert alloc["budget_mode"] == "flops_ratio"
    assert alloc["achieved_flops_ratio"] <= 0.5 + 2e-3

    code, out, _ = run_cli(
        ["prune", "--model", f"{d}/model.dmb", "--grads", f"{d}/grads.dmb",
         "--flops-ratio", "0.5", "--out-dir", f"{d}/pruned"] + cache, capsys)
    assert code == 0
    pruned = load_bundle(tmp_path / "pruned" / "pruned.dmb")
    assert pruned.masks
    report = json.loads((tmp_path / "pruned" / "report.json").read_text())
    assert report["flops"]["ratio"] <= 0.5 + 2e-3

    code, out, _ = run_cli(
        ["eval", "--dense", f"{d}/model.dmb", "--pruned",
         f"{d}/pruned/pruned.dmb", "--calib", f"{d}/calib.dmb"], capsys)
    assert code == 0
    val = json.loads(out)
    assert val["true_distortion"] > 0.0


def test_allocate_ratio_one_prunes_nothing(tmp_path, capsys):
    d = str(tmp_path)
    assert run_cli(["demo-export", "--out", d], capsys)[0] == 0
    assert run_cli(["grad", "--model", f"{d}/model.dmb", "--calib",
                    f"{d}/calib.dmb", "--out", f"{d}/g.dmb"], capsys)[0] == 0
    code, _, _ = run_cli(
        ["allocate", "--model", f"{d}/model.dmb", "--grads", f"{d}/g.dmb",
         "--flops-ratio", "1.0", "--out", f"{d}/a.json", "--cache-dir",
         f"{d}/cache"], capsys)
    assert code == 0
    alloc = json.loads((tmp_path / "a.json").read_text())
    assert all(layer["k"] == 0 for layer in alloc["layers"])
    assert alloc["achieved_flops_ratio"] == 1.0


def test_usage_errors_exit_1(capsys):
    code, _, err = run_cli(["allocate", "--bogus-flag"], capsys)
    assert code == 1
    assert "usage" in err
    code, _, _ = run_cli(["no-such-command"], capsys)
    assert code == 1


def test_missing_file_exits_2(tmp_path, capsys):
    d = str(tmp_path)
    code, _, err = run_cli(
        ["curves", "--model", f"{d}/nope.dmb", "--grads", f"{d}/also.dmb",
         "--out", f"{d}/c.csv"], capsys)
    assert code == 2
    assert "missing model bundle" in err


def test_wrong_bundle_type_exits_2(tmp_path, capsys):
    d = str(tmp_path)
    assert run_cli(["demo-export", "--out", d], capsys)[0] == 0
    code, _, err = run_cli(
        ["curves", "--model", f"{d}/model.dmb", "--grads", f"{d}/calib.dmb",
         "--out", f"{d}/c.csv"], capsys)
    assert code == 2
    assert "not a gradient bundle" in err


def test_bad_kappa_exits_2(tmp_path, capsys):
    d = str(tmp_path)
    assert run_cli(["demo-export", "--out", d], capsys)[0] == 0
    assert run_cli(["grad", "--model", f"{d}/model.dmb", "--calib",
                    f"{d}/calib.dmb", "--out", f"{d}/g.dmb"], capsys)[0] == 0
    code, _, err = run_cli(
        ["curves", "--model", f"{d}/model.dmb", "--grads", f"{d}/g.dmb",
         "--out", f"{d}/c.csv", "--kappa", "banana", "--no-cache"], capsys)
    assert code == 2
    assert "kappa" in err


def test_verify_file_mode(tmp_path, capsys):
    d = str(tmp_path)
    assert run_cli(["demo-export", "--out", d], capsys)[0] == 0
    assert run_cli(["grad", "--model", f"{d}/model.dmb", "--calib",
                    f"{d}/calib.dmb", "--out", f"{d}/g.dmb"], capsys)[0] == 0
    code, out, _ = run_cli(
        ["verify", "--model", f"{d}/model.dmb", "--grads", f"{d}/g.dmb"],
        capsys)
    assert code == 0
    lines = [ln for ln in out.splitlines() if ln.startswith("PASS")]
    assert len(lines) == 6
    assert "all 6 checks passed" in out

    code, _, err = run_cli(["verify", "--model", f"{d}/model.dmb"], capsys)
    assert code == 2
    assert "both --model and --grads" in err


def test_sweep_csv(tmp_path, capsys):
    d = str(tmp_path)
    assert run_cli(["demo-export", "--out", d], capsys)[0] == 0
    assert run_cli(["grad", "--model", f"{d}/model.dmb", "--calib",
                    f"{d}/calib.dmb", "--out", f"{d}/g.dmb"], capsys)[0] == 0
    code, _, _ = run_cli(
        ["sweep", "--model", f"{d}/model.dmb", "--grads", f"{d}/g.dmb",
         "--calib", f"{d}/calib.dmb", "--ratios", "1.0,0.5", "--out",
         f"{d}/sweep.csv", "--cache-dir", f"{d}/cache"], capsys)
    assert code == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3
    first = lines[1].split(",")
    assert float(first[0]) == 1.0
    assert float(first[2]) == 0.0  # total_delta at R=1

    code, _, err = run_cli(
        ["sweep", "--model", f"{d}/model.dmb", "--grads", f"{d}/g.dmb",
         "--ratios", "0.5,zebra", "--out", f"{d}/s.csv"], capsys)
    assert code == 2
    assert "bad ratio list" in err


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "dmprune", "--help"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "demo-export" in proc.stdout
