"""Repeated train/test experiments over the model roster."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .config import ExperimentConfig, transform_config
from .data_model import ADMISSION_ID, ID, LM, covariate_columns, format_number, validate_episodes
from .metrics import METRICS, evaluate, summarize_long
from .models import (
    DYNAMIC_MODELS,
    ROSTER,
    FittedModel,
    ModelFailure,
    ModelOptions,
    Preprocessor,
    fit_model,
    landmark_data,
    predict_model,
    screen_interactions,
)
from .simulation import simulate

NEEDS_INTERACTIONS = ("LM-Cox", "LM-CS", "LM-FG", "LM-LR", "LM-MLR")


@dataclass(frozen=True)
class SplitAssignment:
    index: int
    seed: int
    train: frozenset
    test: frozenset


def _derived_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(index,)).generate_state(1)[0])


def make_splits(admission_ids: Sequence, fraction: float = 2 / 3, count: int = 100, seed: int = 0) -> list[SplitAssignment]:
    """Random admission-level train/test partitions.

    Each split draws ``ceil(fraction * n)`` training admissions without
    replacement using a seed derived from ``(seed, split index)``.
    """
    ids = np.array(sorted(set(admission_ids)))
    n = ids.size
    if n < 3:
        raise ValueError(f"need at least 3 admissions to split, got {n}")
    if not 0 < fraction < 1:
        raise ValueError("train fraction must lie in (0, 1)")
    n_train = math.ceil(round(fraction * n, 9))
    if not 0 < n_train < n:
        raise ValueError(f"{n} admissions cannot be split {n_train} / {n - n_train}")
    out = []
    for i in range(count):
        s = _derived_seed(seed, i)
        pick = np.random.default_rng(s).permutation(n)
        train = frozenset(ids[pick[:n_train]].tolist())
        out.append(SplitAssignment(i, s, train, frozenset(ids.tolist()) - train))
    return out


@dataclass
class SplitResult:
    index: int
    metrics: list[tuple]  # (model, landmark, split, metric, value)
    convergence: list[tuple]  # (model, landmark, split, converged)
    failures: list[tuple]  # (model, landmark, split, message)
    archive: dict = field(default_factory=dict)


def prepare_training(train_ep: pd.DataFrame, cfg: ExperimentConfig, models: Sequence[str]):
    """Stack training episodes and learn the preprocessor from them alone."""
    train_stack = landmark_data(train_ep, cfg.options)
    options = replace(cfg.options, transform=transform_config(cfg, covariate_columns(train_stack)))
    pre = Preprocessor.fit(train_stack, options)
    if any(m in NEEDS_INTERACTIONS for m in models):
        pre.interactions = screen_interactions(train_stack, pre, options)
    return train_stack, pre, options


def prepare_split(episodes: pd.DataFrame, split: SplitAssignment, cfg: ExperimentConfig, models: Sequence[str]):
    """Train-only preprocessing for one split: stacked rows, fitted preprocessor, test rows."""
    adm = episodes[ADMISSION_ID]
    train_ep = episodes[adm.isin(split.train)]
    test_ep = episodes[adm.isin(split.test)]
    train_stack, pre, options = prepare_training(train_ep, cfg, models)
    return train_ep, train_stack, test_ep, pre, options


def run_split(episodes: pd.DataFrame, split: SplitAssignment, cfg: ExperimentConfig) -> SplitResult:
    models = [m for m in ROSTER if m in cfg.models]
    train_ep, train_stack, test_ep, pre, options = prepare_split(episodes, split, cfg, models)
    test_stack = landmark_data(test_ep, options)
    res = SplitResult(split.index, [], [], [])
    res.archive = {"split": split.index, "seed": split.seed, "preprocessor": pre.to_dict(), "models": {}}
    grid = tuple(options.grid)
    for name in models:
        landmarks = grid if name in DYNAMIC_MODELS else (0,)
        try:
            model = fit_model(name, train_ep, pre, options, stacked=train_stack, seed=split.seed)
        except ModelFailure as exc:
            res.failures.append((name, "all", split.index, str(exc)))
            res.convergence.append((name, "all", split.index, False))
            for s in landmarks:
                res.metrics.extend((name, s, split.index, m, float("nan")) for m in METRICS)
            continue
        res.archive["models"][name] = model.to_dict()
        if name == "FG-sep":
            for entry in model.info["ledger"]:
                res.convergence.append((name, entry["landmark"], split.index, entry["converged"]))
                if entry["landmark"] not in model.fit:
                    res.failures.append((name, entry["landmark"], split.index, entry["message"]))
        else:
            res.convergence.append((name, "all", split.index, bool(model.info.get("converged", True))))
        for s in landmarks:
            rows = test_stack[test_stack[LM] == s]
            values = dict.fromkeys(METRICS, float("nan"))
            if len(rows):
                pred = predict_model(model, rows, pre, options)
                if np.all(np.isfinite(pred)):
                    values = evaluate(pred, rows["y_binary"].to_numpy(), name, s, split.index).values()
            res.metrics.extend((name, s, split.index, m, values[m]) for m in METRICS)
    return res


def load_or_simulate(cfg: ExperimentConfig) -> pd.DataFrame:
    if cfg.data:
        from .data_model import load_episodes

        return load_episodes(cfg.data)
    return simulate(cfg.simulation)


@dataclass
class ExperimentResult:
    metrics: pd.DataFrame
    summary: pd.DataFrame
    convergence: pd.DataFrame
    failures: pd.DataFrame
    out_dir: Path | None = None


def _model_order(name: str) -> int:
    return ROSTER.index(name)


def _sort_key(row):
    landmark = row[1]
    return (_model_order(row[0]), -1 if landmark == "all" else int(landmark), row[2], METRICS.index(row[3]) if row[3] in METRICS else 0)


def run_experiment(cfg: ExperimentConfig, episodes: pd.DataFrame | None = None, out_dir: str | Path | None = None) -> ExperimentResult:
    """Fit and evaluate every planned model over repeated admission-level splits.

    Writes ``metrics.csv``, ``summary.csv``, ``convergence.csv``,
    ``failures.csv`` and ``models/split_<i>.json`` under `out_dir` when
    given. Model failures are recorded and the run continues.
    """
    episodes = load_or_simulate(cfg) if episodes is None else episodes
    if ADMISSION_ID not in episodes.columns:
        episodes = episodes.assign(**{ADMISSION_ID: episodes[ID]})
    episodes = validate_episodes(episodes)
    splits = make_splits(episodes[ADMISSION_ID].unique(), cfg.train_fraction, cfg.splits, cfg.seed)
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run_split, [episodes] * len(splits), splits, [cfg] * len(splits)))
    else:
        results = [run_split(episodes, s, cfg) for s in splits]

    metric_rows = sorted((r for res in results for r in res.metrics), key=_sort_key)
    metrics = pd.DataFrame(metric_rows, columns=["model", "landmark", "split", "metric", "value"])
    summary = summarize_long(metrics)
    summary["model"] = pd.Categorical(summary["model"], categories=[m for m in ROSTER if m in set(summary["model"])], ordered=True)
    summary = summary.sort_values(["model", "landmark", "metric"], key=lambda c: c.map(METRICS.index) if c.name == "metric" else c)
    summary["model"] = summary["model"].astype(str)

    conv_rows = sorted((r for res in results for r in res.convergence), key=lambda r: (_model_order(r[0]), -1 if r[1] == "all" else int(r[1]), r[2]))
    conv_long = pd.DataFrame(conv_rows, columns=["model", "landmark", "split", "converged"])
    convergence = (
        conv_long.groupby(["model", "landmark"], sort=False)
        .agg(fits=("converged", "size"), failures=("converged", lambda c: int((~c.astype(bool)).sum())))
        .reset_index()
    )
    fail_rows = sorted((r for res in results for r in res.failures), key=lambda r: (_model_order(r[0]), -1 if r[1] == "all" else int(r[1]), r[2]))
    failures = pd.DataFrame(fail_rows, columns=["model", "landmark", "split", "message"])

    result = ExperimentResult(metrics, summary.reset_index(drop=True), convergence, failures)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "models").mkdir(parents=True, exist_ok=True)
        _write(out / "metrics.csv", metrics)
        _write(out / "summary.csv", result.summary)
        _write(out / "convergence.csv", convergence)
        _write(out / "failures.csv", failures)
        for res in results:
            with open(out / "models" / f"split_{res.index}.json", "w", encoding="utf-8") as fh:
                json.dump(res.archive, fh, indent=1, sort_keys=True)
        result.out_dir = out
    return result


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "NA" if not np.isfinite(v) else format_number(float(v))
    return str(v)


def _write(path: Path, df: pd.DataFrame) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(df.columns)
        for row in df.itertuples(index=False):
            w.writerow([_cell(v) for v in row])


def load_archive(path: str | Path) -> tuple[Preprocessor, dict[str, FittedModel], ModelOptions | None]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    pre = Preprocessor.from_dict(d["preprocessor"])
    models = {k: FittedModel.from_dict(v) for k, v in d["models"].items()}
    opts = d.get("options")
    options = None
    if opts is not None:
        options = ModelOptions(
            window=float(opts["window"]), grid=tuple(opts["grid"]),
            static_cs_mode=opts["static_cs_mode"], landmark_cs_mode=opts["landmark_cs_mode"],
        )
    return pre, models, options


def options_to_dict(options: ModelOptions) -> dict:
    return {
        "window": options.window,
        "grid": list(options.grid),
        "static_cs_mode": options.static_cs_mode,
        "landmark_cs_mode": options.landmark_cs_mode,
    }
