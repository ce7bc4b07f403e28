import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from ddq import checkpoint
from ddq.cli import EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from ddq.report import read_csv

GOLDEN = Path(__file__).parent / "golden"

TINY = {
    "epochs": 1,
    "batch_size": 32,
    "alpha": -0.2,
    "lr_gates": 1e-7,
    "dataset": {"name": "synthetic", "n_train": 160, "n_test": 80, "size": 8, "seed": 5},
    "layers": [
        {"type": "conv", "out": 4, "kernel": 3, "padding": 1},
        {"type": "conv", "out": 6, "kernel": 3, "stride": 2, "padding": 1},
        {"type": "dense", "out": 10},
    ],
}


def golden(name):
    return json.loads((GOLDEN / name).read_text())


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture
def trained(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out", str(out)]) == EXIT_OK
    return out


def run_json(argv, capsys):
    code = main(argv + ["--json"])
    return code, json.loads(capsys.readouterr().out)


def test_help_lists_flags():
    proc = subprocess.run([sys.executable, "-m", "ddq", "train", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for flag in ("--config", "--seed", "--epochs", "--target-bits", "--max-bits", "--bq", "--lambda", "--alpha",
                 "--lr", "--lr-gates", "--fixed-precision", "--granularity", "--quantize-activations",
                 "--preset", "--json", "--out"):
        assert flag in proc.stdout


def test_smoke_preset(tmp_path, capsys):
    start = time.perf_counter()
    code = main(["train", "--preset", "smoke", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - start
    assert code == EXIT_OK and elapsed < 60
    for name in ("metrics.csv", "bits.csv", "checkpoint.ddq1", "summary.json", "loss.png", "bits.png", "qerr.png"):
        assert (tmp_path / name).stat().st_size > 0
    assert "top1" in capsys.readouterr().out


def test_train_artifact_schemas(trained):
    schema = golden("schema.json")
    metrics = (trained / "metrics.csv").read_text().splitlines()
    assert metrics[0].split(",") == schema["metrics_csv"]
    assert (trained / "bits.csv").read_text().splitlines()[0].split(",") == schema["bits_csv"]
    summary = json.loads((trained / "summary.json").read_text())
    assert sorted(summary) == schema["summary_json"]
    assert sorted(summary["layers"][0]) == schema["summary_layer"]


def test_seed_determinism(tmp_path, tiny_config):
    for d in ("a", "b"):
        assert main(["train", "--config", str(tiny_config), "--seed", "7", "--out", str(tmp_path / d)]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_fixed_precision_flag(tmp_path, tiny_config):
    out = tmp_path / "fixed"
    assert main(["train", "--config", str(tiny_config), "--fixed-precision", "4", "--max-bits", "8",
                 "--lr-gates", "1.0", "--out", str(out)]) == EXIT_OK
    rows = read_csv((out / "bits.csv").read_text())
    assert all(v == "4" for r in rows for k, v in r.items() if k != "step")


def test_flag_precedence(tmp_path, tiny_config, capsys):
    out = tmp_path / "p"
    assert main(["train", "--preset", "smoke", "--config", str(tiny_config), "--epochs", "0",
                 "--quantize-activations", "off", "--out", str(out)]) == EXIT_OK
    config, _, _ = checkpoint.load(out / "checkpoint.ddq1")
    assert config["epochs"] == 0  # flag beats config
    assert config["dataset"]["n_train"] == 160  # config beats preset
    assert config["lr_gates"] == 1e-7 and config["act_bits"] is None


def test_eval_checkpoint_and_model_agree(trained, tmp_path, tiny_config, capsys):
    ckpt = trained / "checkpoint.ddq1"
    code, a = run_json(["eval", str(ckpt)], capsys)
    assert code == EXIT_OK
    assert sorted(a) == golden("schema.json")["eval_json"]
    assert isinstance(a["layers"], list) and a["zeta_ratio"] > 0
    model = tmp_path / "m.ddqm"
    code, info = run_json(["export", str(ckpt), "--out", str(model)], capsys)
    assert code == EXIT_OK and info["format"] == "DDQM"
    assert sorted(info) == golden("schema.json")["describe_json"]
    code, b = run_json(["eval", str(model), "--config", str(tiny_config)], capsys)
    assert code == EXIT_OK
    assert b["top1"] == a["top1"]
    assert b["zeta_ratio"] == pytest.approx(a["zeta_ratio"])


def test_eval_errors(tmp_path, trained, capsys):
    assert main(["eval", str(tmp_path / "missing.ddq1")]) == EXIT_USAGE
    empty = tmp_path / "empty.yaml"
    empty.write_text(yaml.safe_dump({"dataset": {"name": "synthetic", "n_train": 10, "n_test": 0}}))
    assert main(["eval", str(trained / "checkpoint.ddq1"), "--config", str(empty)]) == EXIT_USAGE
    assert "empty" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("epochs: [1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    unknown = tmp_path / "unknown.yaml"
    unknown.write_text("warp_factor: 9\n")
    assert main(["train", "--config", str(unknown), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["train", "--max-bits", "2", "--target-bits", "4", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    corrupt = tmp_path / "corrupt.ddq1"
    corrupt.write_bytes(b"DDQ1garbage")
    assert main(["inspect", str(corrupt), "--out", str(tmp_path / "i")]) == EXIT_USAGE
    assert main(["export", str(corrupt), "--out", str(tmp_path / "m")]) == EXIT_USAGE


def test_divergence_exit_code(tmp_path, tiny_config, capsys):
    code = main(["train", "--config", str(tiny_config), "--lr", "1e50", "--out", str(tmp_path)])
    assert code == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_inspect(trained, tmp_path, capsys):
    out = tmp_path / "inspect"
    assert main(["inspect", str(trained / "checkpoint.ddq1"), "--out", str(out)]) == EXIT_OK
    schema = golden("schema.json")
    levels_text = (out / "levels.csv").read_text()
    hist_text = (out / "histograms.csv").read_text()
    assert levels_text.splitlines()[0].split(",") == schema["levels_csv"]
    assert hist_text.splitlines()[0].split(",") == schema["histograms_csv"]
    levels = read_csv(levels_text)
    hist = read_csv(hist_text)
    summary = json.loads((trained / "summary.json").read_text())
    for layer in summary["layers"]:
        i = str(layer["index"])
        assert sum(r["layer"] == i for r in levels) == 2 ** 8  # 2**b rows (one channel)
        assert sum(int(r["count"]) for r in hist if r["layer"] == i) == layer["params"]
        assert sum(r["layer"] == i for r in hist) == 64
        assert (out / f"layer_{i}_levels.png").exists()


def test_uniform_init_levels_equally_spaced(tmp_path, tiny_config, capsys):
    out = tmp_path / "init"
    assert main(["train", "--config", str(tiny_config), "--epochs", "0", "--out", str(out)]) == EXIT_OK
    assert main(["inspect", str(out / "checkpoint.ddq1"), "--out", str(out / "i")]) == EXIT_OK
    rows = read_csv((out / "i" / "levels.csv").read_text())
    for layer in {r["layer"] for r in rows}:
        vals = np.array([float(r["value"]) for r in rows if r["layer"] == layer])
        gaps = np.diff(vals)
        assert np.max(np.abs(gaps - gaps.mean())) < 1e-9


def test_ablate_unknown_suite(tmp_path, capsys):
    assert main(["ablate", "bogus", "--out", str(tmp_path)]) == EXIT_USAGE


def test_ablate_grad_correction(tmp_path, tiny_config, capsys):
    assert main(["ablate", "grad-correction", "--config", str(tiny_config), "--out", str(tmp_path)]) == EXIT_OK
    text = (tmp_path / "grad-correction.csv").read_text()
    assert text.splitlines()[0].split(",") == golden("schema.json")["ablation_csv"]
    rows = read_csv(text)
    assert [r["method"] for r in rows] == ["lambda-0", "lambda-default"]
    assert [float(r["lambda"]) for r in rows] == [0.0, 0.01]
    assert all(float(r["mean_qerr"]) > 0 for r in rows)
    assert (tmp_path / "grad-correction.png").exists()


def test_ablate_mixed_precision_ratios(tmp_path, tiny_config, capsys):
    assert main(["ablate", "mixed-precision", "--config", str(tiny_config), "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv((tmp_path / "mixed-precision.csv").read_text())
    assert [r["method"] for r in rows] == ["ddq-fixed", "ddq-mixed"]
    assert float(rows[0]["zeta_ratio"]) == 1.0
    assert 0 < float(rows[1]["zeta_ratio"]) <= 2.0


def test_ablate_divergence_recorded_as_dash(tmp_path, tiny_config, capsys):
    assert main(["ablate", "grad-correction", "--config", str(tiny_config), "--lr", "1e50",
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv((tmp_path / "grad-correction.csv").read_text())
    assert all(r["status"] == "diverged" and r["top1"] == "-" for r in rows)
