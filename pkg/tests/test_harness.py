import warnings
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrisk.config import ConfigError, ExperimentConfig, load_config, parse_landmarks
from dynrisk.data_model import ADMISSION_ID, ID, LM
from dynrisk.harness import make_splits, prepare_split, run_experiment
from dynrisk.metrics import METRICS
from dynrisk.models import ModelOptions, fit_model
from dynrisk.simulation import attrition_config, constant_hazard_config, simulate

ROOT = Path(__file__).resolve().parents[1]


def _cfg(models, n=600, splits=2, grid=(0, 1, 2, 3), **kw):
    opts = replace(ModelOptions(), grid=grid, rmtl_grid=(0.01, 1.0), rmtl_folds=3)
    return ExperimentConfig(simulation=attrition_config(n=n, seed=3), models=tuple(models), splits=splits, options=opts, **kw)


@pytest.fixture(scope="module")
def episodes():
    return simulate(attrition_config(n=600, seed=3))


# --------------------------------------------------------------------------
# splits


def test_nine_admissions_split_six_three():
    (s,) = make_splits(range(9), count=1, seed=0)
    assert len(s.train) == 6 and len(s.test) == 3


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 300), st.floats(0.1, 0.9), st.integers(0, 2**32 - 1))
def test_splits_partition_admissions(n, frac, seed):
    ids = [f"A{i}" for i in range(n)]
    try:
        splits = make_splits(ids, frac, count=3, seed=seed)
    except ValueError:
        # only when rounding leaves one side empty
        assert np.ceil(round(frac * n, 9)) in (0, n)
        return
    for s in splits:
        assert not (s.train & s.test)
        assert s.train | s.test == set(ids)
        assert len(s.train) == int(np.ceil(round(frac * n, 9)))


def test_splits_are_deterministic_and_distinct():
    a = make_splits(range(100), count=5, seed=7)
    b = make_splits(range(100), count=5, seed=7)
    assert [s.train for s in a] == [s.train for s in b]
    assert len({s.train for s in a}) == 5
    assert [s.train for s in make_splits(range(100), count=5, seed=8)] != [s.train for s in a]
    # split i does not depend on how many splits are requested
    assert make_splits(range(100), count=2, seed=7)[1].train == a[1].train


def test_too_few_admissions():
    with pytest.raises(ValueError, match="at least 3"):
        make_splits(["a", "b"], count=1)
    with pytest.raises(ValueError):
        make_splits(range(10), fraction=1.0)


# --------------------------------------------------------------------------
# experiment runs


def test_logistic_only_run_has_landmark_zero_only():
    ep = simulate(attrition_config(n=200, seed=1))
    res = run_experiment(_cfg(["LR"], splits=2), ep)
    assert set(res.metrics["landmark"]) == {0}
    assert len(res.metrics) == 2 * len(METRICS)
    assert res.failures.empty


def test_metrics_are_complete_and_leak_free(episodes, tmp_path):
    models = ["Cox", "LM-LR", "FG-sep"]
    cfg = _cfg(models, splits=2)
    res = run_experiment(cfg, episodes, tmp_path)
    # one row per model x applicable landmark x split x metric, failures included as NA
    expected = (1 * 1 + 2 * 4) * 2 * len(METRICS)
    assert len(res.metrics) == expected
    counts = res.metrics.groupby("model")["landmark"].nunique()
    assert counts["Cox"] == 1 and counts["LM-LR"] == 4 and counts["FG-sep"] == 4
    for name in ("metrics.csv", "summary.csv", "convergence.csv", "failures.csv", "models/split_0.json", "models/split_1.json"):
        assert (tmp_path / name).is_file()
    # no admission on both sides of any split
    for s in make_splits(episodes[ADMISSION_ID].unique(), cfg.train_fraction, cfg.splits, cfg.seed):
        train_ids = set(episodes.loc[episodes[ADMISSION_ID].isin(s.train), ID])
        test_ids = set(episodes.loc[episodes[ADMISSION_ID].isin(s.test), ID])
        assert not train_ids & test_ids


@pytest.mark.filterwarnings("ignore:.*fold-task fits skipped")
def test_rerun_is_byte_identical(episodes, tmp_path):
    cfg = _cfg(["LR", "LM-Cox", "RMTL-ts"], splits=2)
    run_experiment(cfg, episodes, tmp_path / "a")
    run_experiment(cfg, episodes, tmp_path / "b")
    for name in ("metrics.csv", "summary.csv", "convergence.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_workers_match_serial(episodes, tmp_path):
    cfg = _cfg(["LR", "LM-LR"], splits=2)
    run_experiment(cfg, episodes, tmp_path / "serial")
    run_experiment(replace(cfg, workers=2), episodes, tmp_path / "parallel")
    assert (tmp_path / "serial" / "metrics.csv").read_bytes() == (tmp_path / "parallel" / "metrics.csv").read_bytes()


def test_failures_are_recorded_not_fatal():
    # with a total hazard of 0.53/day nobody is still at risk at day 29
    ep = simulate(constant_hazard_config((0.02, 0.01, 0.5), n=300, seed=2))
    res = run_experiment(_cfg(["FG-sep"], splits=2, grid=(0, 29)), ep)
    late = res.failures[res.failures["landmark"] == 29]
    assert len(late) == 2
    assert set(late["message"]) == {"empty landmark subset"}
    row = res.convergence[(res.convergence["landmark"] == 29)].iloc[0]
    assert row["failures"] == 2
    vals = res.metrics[res.metrics["landmark"] == 29]["value"]
    assert vals.isna().all()
    assert res.summary[res.summary["landmark"] == 29]["missing"].all()


def test_test_rows_do_not_touch_training_artifacts(episodes):
    cfg = _cfg(["LM-LR", "RMTL-ts"], splits=1)
    (split,) = make_splits(episodes[ADMISSION_ID].unique(), cfg.train_fraction, 1, cfg.seed)
    base = prepare_split(episodes, split, cfg, cfg.models)
    moved = episodes.copy()
    test_rows = moved[ADMISSION_ID].isin(split.test)
    moved.loc[test_rows, "VS_systolic_bp_last"] = 1e4
    moved.loc[test_rows, "LAB_CRP_last"] = np.nan
    after = prepare_split(moved, split, cfg, cfg.models)
    assert base[3].to_dict() == after[3].to_dict()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m1 = fit_model("RMTL-ts", base[0], base[3], base[4], stacked=base[1], seed=split.seed)
        m2 = fit_model("RMTL-ts", after[0], after[3], after[4], stacked=after[1], seed=split.seed)
    assert m1.info["lambda1"] == m2.info["lambda1"]
    np.testing.assert_array_equal(m1.fit.W, m2.fit.W)


# --------------------------------------------------------------------------
# configuration


def test_repository_config_matches_packaged_defaults():
    packaged = resources.files("dynrisk").joinpath("data/default.cfg").read_text(encoding="utf-8")
    assert (ROOT / "configs" / "default.cfg").read_text(encoding="utf-8") == packaged
    cfg = load_config(ROOT / "configs" / "default.cfg")
    assert cfg.splits == 100 and len(cfg.models) == 15
    assert cfg.options.grid == tuple(range(31)) and cfg.options.window == 7.0
    assert cfg.simulation.n == 5000


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[experiment]\nsplitz = 3\n")
    with pytest.raises(ConfigError, match="splitz"):
        load_config(bad)
    bad.write_text("[experiment]\nmodels = LR, XGB\n")
    with pytest.raises(ConfigError, match="XGB"):
        load_config(bad)
    bad.write_text("[experiment]\nwindow = 0\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(FileNotFoundError, match="nope.cfg"):
        load_config(tmp_path / "nope.cfg")


def test_landmark_lists():
    assert parse_landmarks("0-3,7, 10") == (0, 1, 2, 3, 7, 10)
    with pytest.raises(ConfigError):
        parse_landmarks("a-b")
    with pytest.raises(ConfigError):
        parse_landmarks("")
