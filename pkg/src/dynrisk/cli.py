"""Command-line entry point.

Exit status is 0 on success, 1 for usage, configuration or data validation
errors and 2 when a computation fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import ConfigError, load_config, parse_landmarks
from .data_model import ADMISSION_ID, ID, LM, format_number, load_episodes, open_output, write_episodes
from .harness import load_archive, options_to_dict, prepare_training, run_experiment
from .landmarking import DEFAULT_GRID, DEFAULT_WINDOW, expand_fine_gray, stack_landmarks, write_expanded, write_stacked
from .metrics import METRICS, evaluate
from .models import DYNAMIC_MODELS, ROSTER, ModelFailure, check_models, fit_model, landmark_data, predict_model
from .simulation import simulate


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _models(text: str) -> tuple[str, ...]:
    return check_models(tuple(m.strip() for m in text.split(",") if m.strip()))


def _window(text: str) -> float:
    w = float(text)
    if not w > 0:
        raise ValueError("window must be positive")
    return w


def _stdout(path):
    return sys.stdout if path in (None, "-") else path


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynrisk", description="Static and landmark risk models for competing-risks data.")
    p.add_argument("--version", action="version", version=f"dynrisk {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate episode data")
    s.add_argument("--config", help="configuration file (packaged defaults if omitted)")
    s.add_argument("--seed", type=int, help="simulation seed")
    s.add_argument("--n", type=int, help="number of episodes")
    s.add_argument("--out", help="output CSV (stdout if omitted)")

    s = sub.add_parser("prepare", help="build the stacked landmark data or its Fine-Gray expansion")
    s.add_argument("--in", dest="input", required=True, help="episode CSV")
    s.add_argument("--landmarks", type=parse_landmarks, default=DEFAULT_GRID, help="landmark grid, e.g. 0-30")
    s.add_argument("--window", type=_window, default=DEFAULT_WINDOW, help="prediction window in days")
    s.add_argument("--expand-fg", action="store_true", help="emit counting-process rows with censoring weights")
    s.add_argument("--censoring", choices=("administrative", "km"), default="administrative", help="weights for extension rows")
    s.add_argument("--features", action="store_true", help="also write landmark features (stacked output only)")
    s.add_argument("--out", help="output CSV (stdout if omitted)")

    for name, text in (("fit", "fit models on all rows of an episode file"), ("experiment", "repeated train/test experiment")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="configuration file (packaged defaults if omitted)")
        s.add_argument("--in", dest="input", help="episode CSV (simulated from the configuration if omitted)" if name == "experiment" else "episode CSV")
        s.add_argument("--models", type=_models, help=f"comma-separated subset of {','.join(ROSTER)}")
        s.add_argument("--landmarks", type=parse_landmarks, help="landmark grid, e.g. 0-30")
        s.add_argument("--window", type=_window, help="prediction window in days")
        s.add_argument("--seed", type=int, help="master seed for splits and tuning folds")
        if name == "experiment":
            s.add_argument("--splits", type=int, help="number of train/test splits")
            s.add_argument("--workers", type=int, help="parallel worker processes")
            s.add_argument("--out", required=True, help="output directory")
        else:
            s.add_argument("--out", required=True, help="model archive (JSON)")

    s = sub.add_parser("predict", help="predict window risks from a model archive")
    s.add_argument("--in", dest="input", required=True, help="episode CSV")
    s.add_argument("--model", required=True, help="archive written by fit")
    s.add_argument("--models", type=_models, help="subset of the archived models")
    s.add_argument("--out", help="output CSV (stdout if omitted)")

    s = sub.add_parser("evaluate", help="performance metrics per model and landmark")
    s.add_argument("--in", dest="input", required=True, help="predictions CSV written by predict")
    s.add_argument("--out", help="output CSV (stdout if omitted)")
    return p


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sim = cfg.simulation
    if args.seed is not None:
        sim = replace(sim, seed=args.seed)
    if args.n is not None:
        if args.n < 1:
            raise ValueError("--n must be positive")
        sim = replace(sim, n=args.n)
    write_episodes(simulate(sim), _stdout(args.out))
    return 0


def cmd_prepare(args) -> int:
    episodes = load_episodes(args.input)
    stacked = stack_landmarks(episodes, args.landmarks, args.window)
    if args.expand_fg:
        write_expanded(expand_fine_gray(stacked, args.censoring), _stdout(args.out))
    else:
        write_stacked(stacked, _stdout(args.out), features=args.features)
    return 0


def _experiment_config(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(
        models=args.models, grid=args.landmarks, window=args.window, seed=args.seed,
        splits=getattr(args, "splits", None), workers=getattr(args, "workers", None),
    )


def cmd_fit(args) -> int:
    cfg = _experiment_config(args)
    episodes = load_episodes(args.input)
    models = [m for m in ROSTER if m in cfg.models]
    _, pre, options = prepare_training(episodes, cfg, models)
    stacked = landmark_data(episodes, options)
    archive = {"preprocessor": pre.to_dict(), "options": options_to_dict(options), "models": {}, "failures": {}}
    for name in models:
        try:
            archive["models"][name] = fit_model(name, episodes, pre, options, stacked=stacked, seed=cfg.seed).to_dict()
        except ModelFailure as exc:
            archive["failures"][name] = str(exc)
            print(f"dynrisk: {exc}", file=sys.stderr)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(archive, fh, indent=1, sort_keys=True)
    return 0 if archive["models"] else 2


def cmd_predict(args) -> int:
    pre, models, options = load_archive(args.model)
    if options is None:
        raise ValueError(f"{args.model} holds no model options; write it with 'dynrisk fit'")
    names = [m for m in ROSTER if m in models and (args.models is None or m in args.models)]
    if args.models is not None:
        absent = [m for m in args.models if m not in models]
        if absent:
            raise ValueError(f"model {absent[0]!r} is not in {args.model}")
    stacked = landmark_data(load_episodes(args.input), options)
    with open_output(_stdout(args.out)) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([ID, ADMISSION_ID, LM, "model", "risk", "outcome"])
        for name in names:
            rows = stacked if name in DYNAMIC_MODELS else stacked[stacked[LM] == 0]
            if not len(rows):
                continue
            risk = predict_model(models[name], rows, pre, options)
            for i, a, s, r, y in zip(rows[ID], rows[ADMISSION_ID], rows[LM], risk, rows["y_binary"]):
                w.writerow([i, a, int(s), name, format_number(float(r)) if np.isfinite(r) else "NA", int(y)])
    return 0


def cmd_evaluate(args) -> int:
    path = Path(args.input)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    preds = pd.read_csv(path, na_values=["NA"], keep_default_na=False)
    missing = [c for c in ("model", LM, "risk", "outcome") if c not in preds.columns]
    if missing:
        raise ValueError(f"missing column {missing[0]!r} in {path}")
    order = {m: i for i, m in enumerate(ROSTER)}
    groups = sorted(preds.groupby(["model", LM]), key=lambda g: (order.get(g[0][0], len(order)), g[0][0], g[0][1]))
    with open_output(_stdout(args.out)) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "landmark", "metric", "value", "n", "events"])
        for (model, s), g in groups:
            g = g[np.isfinite(g["risk"])]
            values = dict.fromkeys(METRICS, float("nan"))
            if len(g):
                values = evaluate(g["risk"].to_numpy(), g["outcome"].to_numpy(), model, int(s)).values()
            for m in METRICS:
                v = values[m]
                w.writerow([model, int(s), m, format_number(v) if np.isfinite(v) else "NA", len(g), int(g["outcome"].sum())])
    return 0


def cmd_experiment(args) -> int:
    cfg = _experiment_config(args)
    episodes = load_episodes(args.input) if args.input else None
    if cfg.splits < 1:
        raise ValueError("--splits must be at least 1")
    result = run_experiment(cfg, episodes, args.out)
    n_fail = len(result.failures)
    print(f"wrote {result.out_dir} ({len(result.metrics)} metric rows, {n_fail} recorded failures)", file=sys.stderr)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "prepare": cmd_prepare,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"dynrisk: error: {exc}", file=sys.stderr)
        return 1
    except (ModelFailure, ArithmeticError, np.linalg.LinAlgError, RuntimeError, OSError) as exc:
        print(f"dynrisk: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
