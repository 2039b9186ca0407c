"""The model roster: how each static and dynamic model is fitted, predicted and stored."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .data_model import (
    ADMISSION_ID,
    CLABSI,
    EVENTTIME,
    LM,
    TYPE,
    ImputationModel,
    TransformConfig,
    TransformSpec,
    apply_transforms,
    covariate_columns,
    fit_impute,
    fit_transforms,
    impute,
)
from .glm import (
    ConvergenceWarning,
    LogisticFit,
    MultinomialFit,
    SeparationWarning,
    category_probability,
    fit_logistic,
    fit_multinomial,
    predict_logistic,
    wald_test,
)
from .landmarking import (
    DEFAULT_GRID,
    DEFAULT_WINDOW,
    LM_LIN,
    LM_QUAD,
    StackedLandmarkDataset,
    attach_binary_labels,
    expand_fine_gray,
    interaction_names,
    stack_landmarks,
)
from .rmtl import DEFAULT_LAMBDA1_GRID, RmtlFit, fit_rmtl, make_taskset, predict_rmtl, tune_lambda1
from .survival import (
    CauseSpecificFit,
    CoxFit,
    FineGrayFit,
    fit_cause_specific,
    fit_cox,
    fit_fine_gray,
    fit_fg_separate,
    predict_landmark_cox,
    predict_landmark_cs,
    predict_static,
)

STATIC_MODELS = ("Cox", "Cox-ac", "CS", "CS-ac", "FG", "FG-ac", "LR", "MLR")
DYNAMIC_MODELS = ("LM-Cox", "LM-CS", "LM-FG", "FG-sep", "LM-LR", "LM-MLR", "RMTL-ts")
ROSTER = STATIC_MODELS + DYNAMIC_MODELS
NO_WINDOW = float("inf")


class ModelFailure(RuntimeError):
    """A model could not be fitted on the given training data."""


@dataclass(frozen=True)
class ModelOptions:
    window: float = DEFAULT_WINDOW
    grid: tuple[int, ...] = DEFAULT_GRID
    interaction_candidates: tuple[str, ...] = ("MS_is_ICU_unit",)
    wald_alpha: float = 0.05
    static_cs_mode: str = "exponential"
    landmark_cs_mode: str = "product-integral"
    rmtl_grid: tuple[float, ...] = DEFAULT_LAMBDA1_GRID
    rmtl_folds: int = 5
    rmtl_lambda2: float = 0.0
    transform: TransformConfig | None = None


def check_models(models: Sequence[str]) -> tuple[str, ...]:
    unknown = [m for m in models if m not in ROSTER]
    if unknown:
        raise ValueError(f"unknown model {unknown[0]!r}; choose from {', '.join(ROSTER)}")
    return tuple(models)


# --------------------------------------------------------------------------
# prepared data for one training set


@dataclass
class Preprocessor:
    """Imputation and covariate transforms learned on training rows."""

    imputation: ImputationModel
    transforms: TransformSpec
    interactions: tuple[str, ...] = ()

    @classmethod
    def fit(cls, train_rows: pd.DataFrame, options: ModelOptions) -> "Preprocessor":
        covs = covariate_columns(train_rows)
        imp = fit_impute(train_rows, covs)
        filled = impute(train_rows, imp)
        tcfg = options.transform or TransformConfig(tuple(covs))
        if tcfg.covariates != tuple(covs):
            tcfg = TransformConfig(
                tuple(c for c in tcfg.covariates if c in covs), tcfg.spline_variable, tcfg.log_variables,
                tcfg.log_offset, tcfg.knot_quantiles, tcfg.standardize,
            )
        return cls(imp, fit_transforms(filled, tcfg))

    def design(self, frame: pd.DataFrame, landmark_features: bool) -> pd.DataFrame:
        X = apply_transforms(impute(frame, self.imputation), self.transforms)
        if landmark_features:
            X[LM_LIN] = frame[LM_LIN].to_numpy()
            X[LM_QUAD] = frame[LM_QUAD].to_numpy()
            filled = impute(frame, self.imputation)
            for v in self.interactions:
                lin, quad = interaction_names(v)
                X[lin] = frame[LM_LIN].to_numpy() * filled[v].to_numpy(dtype=float)
                X[quad] = frame[LM_QUAD].to_numpy() * filled[v].to_numpy(dtype=float)
        return X

    def to_dict(self) -> dict:
        return {
            "imputation": self.imputation.to_dict(),
            "transforms": self.transforms.to_dict(),
            "interactions": list(self.interactions),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Preprocessor":
        return cls(
            ImputationModel.from_dict(d["imputation"]), TransformSpec.from_dict(d["transforms"]),
            tuple(d["interactions"]),
        )


def landmark_data(episodes: pd.DataFrame, options: ModelOptions, window: float | None = None) -> pd.DataFrame:
    """Stacked rows (window-censored) with binary and multinomial labels attached."""
    w = options.window if window is None else window
    return attach_binary_labels(stack_landmarks(episodes, options.grid, w, options.interaction_candidates))


def static_data(episodes: pd.DataFrame, options: ModelOptions, window: float) -> StackedLandmarkDataset:
    return stack_landmarks(episodes, (0,), window, ())


def screen_interactions(stacked: pd.DataFrame, pre: Preprocessor, options: ModelOptions) -> tuple[str, ...]:
    """Keep landmark interactions whose joint Wald test in a stacked logistic model is significant."""
    candidates = tuple(v for v in options.interaction_candidates if v in stacked.columns)
    if not candidates:
        return ()
    trial = Preprocessor(pre.imputation, pre.transforms, candidates)
    X = trial.design(stacked, True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        warnings.simplefilter("ignore", SeparationWarning)
        fit = fit_logistic(X, stacked["y_binary"])
    keep = []
    for v in candidates:
        try:
            _, p = wald_test(fit, list(interaction_names(v)))
        except np.linalg.LinAlgError:
            continue
        if p < options.wald_alpha:
            keep.append(v)
    return tuple(keep)


# --------------------------------------------------------------------------
# fitted models


@dataclass
class FittedModel:
    name: str
    fit: object
    landmarks: tuple[int, ...] = ()  # tasks / separate fits available
    info: dict = field(default_factory=dict)

    @property
    def dynamic(self) -> bool:
        return self.name in DYNAMIC_MODELS

    def to_dict(self) -> dict:
        if isinstance(self.fit, dict):
            payload = {str(k): v.to_dict() for k, v in self.fit.items()}
        else:
            payload = self.fit.to_dict()
        return {"name": self.name, "fit": payload, "landmarks": list(self.landmarks), "info": self.info}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FittedModel":
        name = d["name"]
        payload = d["fit"]
        if name in ("Cox", "Cox-ac", "LM-Cox"):
            fit = CoxFit.from_dict(payload)
        elif name in ("CS", "CS-ac", "LM-CS"):
            fit = CauseSpecificFit.from_dict(payload)
        elif name in ("FG", "FG-ac", "LM-FG"):
            fit = FineGrayFit.from_dict(payload)
        elif name == "FG-sep":
            fit = {int(k): FineGrayFit.from_dict(v) for k, v in payload.items()}
        elif name in ("LR", "LM-LR"):
            fit = LogisticFit.from_dict(payload)
        elif name in ("MLR", "LM-MLR"):
            fit = MultinomialFit.from_dict(payload)
        elif name == "RMTL-ts":
            fit = RmtlFit.from_dict(payload)
        else:
            raise ValueError(f"unknown model {name!r}")
        return cls(name, fit, tuple(int(s) for s in d.get("landmarks", ())), dict(d.get("info", {})))


def _quiet(fn, *args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        warnings.simplefilter("ignore", SeparationWarning)
        return fn(*args, **kw)


def fit_model(
    name: str,
    episodes: pd.DataFrame,
    pre: Preprocessor,
    options: ModelOptions,
    stacked: pd.DataFrame | None = None,
    seed=0,
) -> FittedModel:
    """Fit one roster model on training episodes.

    `stacked` may pass in precomputed window-censored landmark rows.
    Raises :class:`ModelFailure` when the model cannot be fitted.
    """
    check_models([name])
    try:
        return _fit(name, episodes, pre, options, stacked, seed)
    except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise ModelFailure(f"{name}: {exc}") from exc


def _fit(name, episodes, pre, options, stacked, seed):
    w = options.window
    if name in STATIC_MODELS:
        window = w if name.endswith("-ac") or name in ("LR", "MLR") else NO_WINDOW
        st = static_data(episodes, options, window)
        f = st.frame
        if name in ("Cox", "Cox-ac"):
            X = pre.design(f, False)
            fit = _quiet(fit_cox, f[LM], f[EVENTTIME], f[TYPE] == CLABSI, X)
            return FittedModel(name, fit, info={"converged": fit.converged})
        if name in ("CS", "CS-ac"):
            X = pre.design(f, False)
            fit = _quiet(fit_cause_specific, f[LM], f[EVENTTIME], f[TYPE], X, allow_missing=True)
            if CLABSI not in fit.fits:
                raise ValueError("no cause-1 events")
            return FittedModel(name, fit, info={"converged": fit.converged})
        if name in ("FG", "FG-ac"):
            ex = expand_fine_gray(st)
            fit = _quiet(fit_fine_gray, ex, pre.design(ex.frame, False))
            return FittedModel(name, fit, info={"converged": fit.converged})
        labelled = attach_binary_labels(st)
        X = pre.design(labelled, False)
        if name == "LR":
            fit = _quiet(fit_logistic, X, labelled["y_binary"])
        else:
            fit = _quiet(fit_multinomial, X, labelled["y_multi"])
        return FittedModel(name, fit, info={"converged": fit.converged})

    stacked = landmark_data(episodes, options) if stacked is None else stacked
    if name == "LM-Cox":
        X = pre.design(stacked, True)
        fit = _quiet(fit_cox, stacked[LM], stacked[EVENTTIME], stacked[TYPE] == CLABSI, X)
        return FittedModel(name, fit, info={"converged": fit.converged})
    if name == "LM-CS":
        X = pre.design(stacked, True)
        fit = _quiet(fit_cause_specific, stacked[LM], stacked[EVENTTIME], stacked[TYPE], X, allow_missing=True)
        if CLABSI not in fit.fits:
            raise ValueError("no cause-1 events")
        return FittedModel(name, fit, info={"converged": fit.converged})
    if name in ("LM-FG", "FG-sep"):
        st = StackedLandmarkDataset(stacked, w, tuple(options.grid), options.interaction_candidates)
        ex = expand_fine_gray(st)
        if name == "LM-FG":
            fit = _quiet(fit_fine_gray, ex, pre.design(ex.frame, True))
            return FittedModel(name, fit, info={"converged": fit.converged})
        sep = fit_fg_separate(ex, pre.design(ex.frame, False), options.grid)
        return FittedModel(name, sep.fits, tuple(sorted(sep.fits)), info={"ledger": sep.ledger})
    if name == "LM-LR":
        fit = _quiet(fit_logistic, pre.design(stacked, True), stacked["y_binary"])
        return FittedModel(name, fit, info={"converged": fit.converged})
    if name == "LM-MLR":
        fit = _quiet(fit_multinomial, pre.design(stacked, True), stacked["y_multi"])
        return FittedModel(name, fit, info={"converged": fit.converged})
    if name == "RMTL-ts":
        X = pre.design(stacked, False)
        tasks = make_taskset(stacked, X, LM, "y_binary", ADMISSION_ID)
        usable = [i for i, y in enumerate(tasks.y) if np.unique(y).size == 2]
        if not usable:
            raise ValueError("no landmark task has both outcome classes")
        dropped = [tasks.tasks[i] for i in range(len(tasks)) if i not in usable]
        tasks = tasks.subset([np.ones(len(y), dtype=bool) for y in tasks.y], usable)
        grid = options.rmtl_grid
        lam1 = _quiet(tune_lambda1, tasks, grid, options.rmtl_folds, seed, options.rmtl_lambda2) if len(grid) > 1 else grid[0]
        fit = _quiet(fit_rmtl, tasks, lam1, options.rmtl_lambda2)
        info = {"converged": fit.converged, "lambda1": lam1, "dropped_tasks": [int(t) for t in dropped]}
        return FittedModel(name, fit, tuple(int(t) for t in fit.tasks), info=info)
    raise ValueError(f"unknown model {name!r}")


def _nearest(available: Sequence[int], s: np.ndarray) -> np.ndarray:
    a = np.asarray(sorted(available))
    idx = np.clip(np.searchsorted(a, s), 0, a.size - 1)
    left = np.clip(idx - 1, 0, a.size - 1)
    pick_left = np.abs(a[left] - s) <= np.abs(a[idx] - s)
    return np.where(pick_left, a[left], a[idx])


def predict_model(model: FittedModel, frame: pd.DataFrame, pre: Preprocessor, options: ModelOptions) -> np.ndarray:
    """Risk of cause 1 within the window for each row of `frame`.

    Static models read each row's covariates as onset values and predict
    over ``(0, window]``; dynamic models predict over ``(s, s + window]``
    for the row's landmark ``s``. Landmarks without a separate fit get NaN.
    """
    name, fit, w = model.name, model.fit, options.window
    s = frame[LM].to_numpy(dtype=float)
    if name in ("Cox", "Cox-ac", "FG", "FG-ac", "CS", "CS-ac"):
        X = pre.design(frame, False)
        mode = options.static_cs_mode
        return predict_static(fit, X, w, mode) if name.startswith("CS") else predict_static(fit, X, w)
    if name == "LR":
        return predict_logistic(fit, pre.design(frame, False))
    if name == "MLR":
        return category_probability(fit, pre.design(frame, False), CLABSI)
    lo, hi = min(options.grid), max(options.grid)
    if name in ("LM-Cox", "LM-FG"):
        return predict_landmark_cox(fit, pre.design(frame, True), s, w, (lo, hi))
    if name == "LM-CS":
        return predict_landmark_cs(fit, pre.design(frame, True), s, w, options.landmark_cs_mode, (lo, hi))
    if name == "LM-LR":
        return predict_logistic(fit, pre.design(frame, True))
    if name == "LM-MLR":
        return category_probability(fit, pre.design(frame, True), CLABSI)
    if name == "FG-sep":
        X = pre.design(frame, False)
        out = np.full(len(frame), np.nan)
        for val in np.unique(s):
            sub = fit.get(int(val))
            if sub is None:
                continue
            rows = s == val
            out[rows] = predict_landmark_cox(sub, X[rows], val, w, (lo, hi))
        return out
    if name == "RMTL-ts":
        X = pre.design(frame, False)
        task = _nearest(fit.tasks, s.astype(int))
        return predict_rmtl(fit, task, X)
    raise ValueError(f"unknown model {name!r}")
