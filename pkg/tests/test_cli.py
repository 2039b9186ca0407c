import json
import subprocess
import sys

import pandas as pd
import pytest

from dynrisk.cli import main


def test_unknown_flag_is_usage_error(capsys):
    assert main(["simulate", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert main([]) == 1


def test_missing_config_names_path(tmp_path, capsys):
    path = tmp_path / "absent.cfg"
    assert main(["simulate", "--config", str(path), "--n", "5"]) == 1
    assert str(path) in capsys.readouterr().err


def test_bad_model_name(tmp_path, capsys):
    assert main(["fit", "--in", "x.csv", "--models", "LR,XGB", "--out", str(tmp_path / "m.json")]) == 1
    assert "XGB" in capsys.readouterr().err


def test_prepare_emits_expanded_table(data_dir, capsys):
    assert main(["prepare", "--in", str(data_dir / "table_s1.csv"), "--expand-fg"]) == 0
    assert capsys.readouterr().out == (data_dir / "table_s2.csv").read_text()


def test_prepare_stacks_raw_episodes(data_dir, tmp_path):
    out = tmp_path / "stacked.csv"
    assert main(["prepare", "--in", str(data_dir / "table_s1_raw.csv"), "--out", str(out)]) == 0
    assert out.read_text() == (data_dir / "table_s1.csv").read_text()


def test_missing_input_file(tmp_path, capsys):
    assert main(["prepare", "--in", str(tmp_path / "none.csv")]) == 1
    assert "none.csv" in capsys.readouterr().err


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--n", "50", "--seed", "4", "--out", str(a)]) == 0
    assert main(["simulate", "--n", "50", "--seed", "4", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert pd.read_csv(a)["ID"].nunique() == 50


def test_fit_predict_evaluate(tmp_path):
    ep = tmp_path / "ep.csv"
    assert main(["simulate", "--n", "400", "--seed", "1", "--out", str(ep)]) == 0
    model = tmp_path / "m.json"
    assert main(["fit", "--in", str(ep), "--models", "LR,LM-LR", "--landmarks", "0-3", "--out", str(model)]) == 0
    archive = json.loads(model.read_text())
    assert set(archive["models"]) == {"LR", "LM-LR"} and archive["options"]["grid"] == [0, 1, 2, 3]
    preds = tmp_path / "p.csv"
    assert main(["predict", "--in", str(ep), "--model", str(model), "--out", str(preds)]) == 0
    p = pd.read_csv(preds)
    assert list(p.columns) == ["ID", "ADMISSION_ID", "LM", "model", "risk", "outcome"]
    assert set(p.loc[p["model"] == "LR", "LM"]) == {0}
    assert set(p.loc[p["model"] == "LM-LR", "LM"]) == {0, 1, 2, 3}
    assert p["risk"].between(0, 1).all()
    metrics = tmp_path / "e.csv"
    assert main(["evaluate", "--in", str(preds), "--out", str(metrics)]) == 0
    e = pd.read_csv(metrics)
    assert list(e.columns) == ["model", "landmark", "metric", "value", "n", "events"]
    assert len(e) == (1 + 4) * 5
    assert main(["predict", "--in", str(ep), "--model", str(model), "--models", "Cox"]) == 1


def test_experiment_smoke(tmp_path):
    out = tmp_path / "r"
    cfg = tmp_path / "small.cfg"
    cfg.write_text("[simulation]\nn = 300\n[experiment]\nlandmarks = 0-2\n")
    argv = ["experiment", "--config", str(cfg), "--splits", "2", "--models", "LR,LM-Cox", "--out", str(out)]
    assert main(argv) == 0
    for name in ("metrics.csv", "summary.csv", "convergence.csv"):
        assert (out / name).is_file()
    m = pd.read_csv(out / "metrics.csv")
    assert set(m["split"]) == {0, 1}


def test_module_entry_point(data_dir):
    proc = subprocess.run([sys.executable, "-m", "dynrisk", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("dynrisk ")
