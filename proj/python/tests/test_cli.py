"""Runs the restormixer executable; its path comes from RMX_CLI."""

import os
import re
import subprocess

import numpy as np
import pytest
from PIL import Image

CLI = os.environ.get("RMX_CLI", "build/restormixer")
CONFIG = os.path.join(os.path.dirname(__file__), "..", "..", "configs", "default.cfg")
SMALL = ["--set", "base_channels=8", "--set", "stages=2", "--set", "blocks_per_stage=2",
         "--set", "window_base=4", "--set", "window_step=4", "--set", "ssm_state=4"]


def run(*args):
    return subprocess.run([CLI, *args], capture_output=True, text=True, timeout=600)


def write_png(path, arr):
    Image.fromarray(arr.astype(np.uint8), "RGB").save(path)


def test_usage_errors_exit_2():
    assert run().returncode == 2
    assert run("frobnicate").returncode == 2
    assert run("count", "--no-such-flag").returncode == 2
    assert run("count", "--hw", "12").returncode == 2
    assert run("count", "--set", "nonsense=1").returncode == 2
    assert run("count", "--set", "base_channels=-3").returncode == 2


def test_count_prints_config_and_totals():
    r = run("count", "--config", CONFIG, "--hw", "256x256")
    assert r.returncode == 0, r.stderr
    assert "# resolved config" in r.stdout and "window_step = 8" in r.stdout
    params = float(re.search(r"params: ([\d.]+) M", r.stdout).group(1))
    flops = float(re.search(r"FLOPs \(1 per MAC, \+ elementwise\): ([\d.]+) G", r.stdout).group(1))
    assert 2.38 <= params <= 3.22
    assert flops > 0
    r2 = run("count", "--config", CONFIG, "--flops-per-mac", "2")
    flops2 = float(re.search(r"FLOPs \(2 per MAC, \+ elementwise\): ([\d.]+) G", r2.stdout).group(1))
    assert flops2 > flops


def test_verify_all():
    r = run("verify", "--suite", "all")
    assert r.returncode == 0, r.stdout + r.stderr
    assert "all checks passed" in r.stdout
    assert "FAIL" not in r.stdout
    assert "grads/model" in r.stdout and "oracles/lti_scan_vs_kernel" in r.stdout


def test_infer_identity_checkpoint(tmp_path):
    r = run("train", "--out", str(tmp_path / "run"), "--init-only", "--zero-heads", *SMALL)
    assert r.returncode == 0, r.stderr
    ckpt = tmp_path / "run" / "init.ckpt"
    inputs = tmp_path / "in"
    inputs.mkdir()
    rng = np.random.default_rng(0)
    images = {"a.png": rng.integers(0, 256, (21, 30, 3)), "b.png": rng.integers(0, 256, (16, 16, 3))}
    for name, arr in images.items():
        write_png(inputs / name, arr)
    r = run("infer", "--ckpt", str(ckpt), "--input", str(inputs), "--output", str(tmp_path / "out"))
    assert r.returncode == 0, r.stderr
    for name, arr in images.items():
        out = np.asarray(Image.open(tmp_path / "out" / name).convert("RGB")).astype(int)
        assert np.abs(out - arr).max() <= 1


def test_io_errors_exit_3(tmp_path):
    assert run("infer", "--ckpt", str(tmp_path / "none.ckpt"), "--input", "x", "--output", "y").returncode == 3
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"RMXCKPT1 but not really")
    assert run("eval", "--ckpt", str(bad), "--data", "synth:rain:1:16").returncode == 3


def test_train_eval_and_resume(tmp_path):
    out = tmp_path / "run"
    args = ["train", "--data", "synth:rain:4:24:1", "--eval-data", "synth:rain:2:24:1:4", "--out", str(out),
            *SMALL, "--set", "total_steps=6", "--set", "crop=16", "--set", "eval_every=3", "--set", "lr_init=1e-3"]
    r = run(*args)
    assert r.returncode == 0, r.stderr
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 6
    assert (out / "last.ckpt").exists() and (out / "best.ckpt").exists()
    r = run("eval", "--ckpt", str(out / "last.ckpt"), "--data", "synth:rain:2:24:1:4", "--ycbcr")
    assert r.returncode == 0, r.stderr
    assert "metric_space = y" in r.stdout
    assert re.search(r"mean psnr [\d.]+ ssim", r.stdout)
    assert run("eval", "--ckpt", str(out / "last.ckpt"), "--data", "synth:rain:2:24:1:4",
               "--min-psnr", "99").returncode == 1

    resumed = run(*[a if a != "total_steps=6" else "total_steps=8" for a in args], "--resume", str(out / "last.ckpt"))
    assert resumed.returncode == 0, resumed.stderr
    assert "resuming at step 6" in resumed.stdout
