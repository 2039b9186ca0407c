"""Experiment configuration read from a flat INI file.

Sections and keys (all optional; defaults shown in ``configs/default.cfg``)::

    [simulation]  n, seed, scenario (attrition | constant), rates, admission_rate,
                  max_days, max_landmark
    [experiment]  data, models, splits, train_fraction, seed, landmarks, window, workers
    [models]      interactions, wald_alpha, static_cs_mode, landmark_cs_mode,
                  rmtl_grid, rmtl_folds, rmtl_lambda2
    [transforms]  spline_variable, log_variables, log_offset, knot_quantiles, standardize
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .data_model import TransformConfig
from .landmarking import DEFAULT_GRID, DEFAULT_WINDOW
from .models import ROSTER, ModelOptions, check_models
from .rmtl import DEFAULT_LAMBDA1_GRID
from .simulation import SimConfig, attrition_config, constant_hazard_config
from .survival import MODES

KNOWN = {
    "simulation": {"n", "seed", "scenario", "rates", "admission_rate", "max_days", "max_landmark"},
    "experiment": {"data", "models", "splits", "train_fraction", "seed", "landmarks", "window", "workers"},
    "models": {"interactions", "wald_alpha", "static_cs_mode", "landmark_cs_mode", "rmtl_grid", "rmtl_folds", "rmtl_lambda2"},
    "transforms": {"spline_variable", "log_variables", "log_offset", "knot_quantiles", "standardize"},
}


class ConfigError(ValueError):
    pass


def parse_landmarks(text: str) -> tuple[int, ...]:
    """``"0-30"``, ``"0,7,14"`` or mixtures such as ``"0-10,15,20"``."""
    out: list[int] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        try:
            if "-" in part:
                a, b = part.split("-")
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise ConfigError(f"cannot read landmark list {text!r}") from None
    grid = tuple(sorted(set(out)))
    if not grid or grid[0] < 0:
        raise ConfigError(f"landmarks must be nonnegative integers, got {text!r}")
    return grid


def _list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in _list(text))
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    simulation: SimConfig = field(default_factory=attrition_config)
    scenario: str = "attrition"
    data: str = ""
    models: tuple[str, ...] = ROSTER
    splits: int = 100
    train_fraction: float = 2 / 3
    seed: int = 0
    workers: int = 1
    options: ModelOptions = field(default_factory=ModelOptions)
    transform_overrides: dict = field(default_factory=dict)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        opts = {k: kw.pop(k) for k in ("window", "grid") if k in kw and kw[k] is not None}
        cfg = replace(self, **{k: v for k, v in kw.items() if v is not None})
        if opts:
            cfg = replace(cfg, options=replace(cfg.options, **opts))
        if cfg.options.window <= 0:
            raise ConfigError("window must be positive")
        check_models(cfg.models)
        return cfg


def default_config_text() -> str:
    return resources.files("dynrisk").joinpath("data/default.cfg").read_text(encoding="utf-8")


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """Read a configuration file; ``None`` gives the packaged defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is None:
        parser.read_string(default_config_text())
    else:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"configuration file not found: {p}")
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from None
    return config_from_parser(parser, str(path or "<defaults>"))


def config_from_parser(parser: configparser.ConfigParser, origin: str = "") -> ExperimentConfig:
    for section in parser.sections():
        if section not in KNOWN:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        extra = set(parser[section]) - KNOWN[section]
        if extra:
            raise ConfigError(f"{origin}: unknown key {sorted(extra)[0]!r} in [{section}]")

    def get(section, key, conv, default):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key).strip()
        try:
            return conv(raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{origin}: bad value for {section}.{key}: {raw!r} ({exc})") from None

    def boolean(v):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")

    scenario = get("simulation", "scenario", str, "attrition")
    n = get("simulation", "n", int, 5000)
    sim_seed = get("simulation", "seed", int, 0)
    extra = {}
    for key, conv in (("admission_rate", float), ("max_days", int), ("max_landmark", int)):
        if parser.has_option("simulation", key):
            extra[key] = get("simulation", key, conv, None)
    if scenario == "attrition":
        sim = attrition_config(n=n, seed=sim_seed, **extra)
    elif scenario == "constant":
        rates = get("simulation", "rates", _floats, (0.02, 0.01, 0.17))
        if len(rates) != 3:
            raise ConfigError(f"{origin}: simulation.rates needs three values")
        sim = constant_hazard_config(rates, n=n, seed=sim_seed, **extra)
    else:
        raise ConfigError(f"{origin}: unknown simulation scenario {scenario!r}")

    models = get("experiment", "models", _list, ROSTER)
    try:
        check_models(models)
    except ValueError as exc:
        raise ConfigError(f"{origin}: {exc}") from None
    fraction = get("experiment", "train_fraction", float, 2 / 3)
    if not 0 < fraction < 1:
        raise ConfigError(f"{origin}: train_fraction must lie in (0, 1)")
    window = get("experiment", "window", float, DEFAULT_WINDOW)
    if not window > 0:
        raise ConfigError(f"{origin}: window must be positive")

    static_mode = get("models", "static_cs_mode", str, "exponential")
    lm_mode = get("models", "landmark_cs_mode", str, "product-integral")
    for m in (static_mode, lm_mode):
        if m not in MODES:
            raise ConfigError(f"{origin}: cumulative-incidence mode must be one of {MODES}, got {m!r}")

    tdefaults = TransformConfig(())
    transform = {
        "spline_variable": get("transforms", "spline_variable", lambda v: v or None, tdefaults.spline_variable),
        "log_variables": get("transforms", "log_variables", _list, tdefaults.log_variables),
        "log_offset": get("transforms", "log_offset", float, tdefaults.log_offset),
        "knot_quantiles": get("transforms", "knot_quantiles", _floats, tdefaults.knot_quantiles),
        "standardize": get("transforms", "standardize", boolean, tdefaults.standardize),
    }
    options = ModelOptions(
        window=window,
        grid=get("experiment", "landmarks", parse_landmarks, DEFAULT_GRID),
        interaction_candidates=get("models", "interactions", _list, ("MS_is_ICU_unit",)),
        wald_alpha=get("models", "wald_alpha", float, 0.05),
        static_cs_mode=static_mode,
        landmark_cs_mode=lm_mode,
        rmtl_grid=get("models", "rmtl_grid", _floats, DEFAULT_LAMBDA1_GRID),
        rmtl_folds=get("models", "rmtl_folds", int, 5),
        rmtl_lambda2=get("models", "rmtl_lambda2", float, 0.0),
    )
    if not options.rmtl_grid or min(options.rmtl_grid) < 0:
        raise ConfigError(f"{origin}: rmtl_grid must hold nonnegative values")
    splits = get("experiment", "splits", int, 100)
    if splits < 1:
        raise ConfigError(f"{origin}: splits must be at least 1")
    return ExperimentConfig(
        simulation=sim,
        scenario=scenario,
        data=get("experiment", "data", str, ""),
        models=tuple(models),
        splits=splits,
        train_fraction=fraction,
        seed=get("experiment", "seed", int, 0),
        workers=max(1, get("experiment", "workers", int, 1)),
        options=options,
        transform_overrides=transform,
    )


def transform_config(cfg: ExperimentConfig, covariates) -> TransformConfig:
    t = cfg.transform_overrides or {}
    base = TransformConfig(tuple(covariates))
    return TransformConfig(
        tuple(covariates),
        t.get("spline_variable", base.spline_variable),
        tuple(t.get("log_variables", base.log_variables)),
        float(t.get("log_offset", base.log_offset)),
        tuple(t.get("knot_quantiles", base.knot_quantiles)),
        bool(t.get("standardize", base.standardize)),
    )

