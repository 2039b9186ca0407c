"""Discrimination, calibration and overall accuracy of binary risk predictions."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import pandas as pd
from scipy.special import expit, logit
from scipy.stats import rankdata

from .glm import ConvergenceWarning, SeparationWarning, fit_logistic
from .splines import rcs_basis, rcs_knots

METRICS = ("auc", "calibration_slope", "oe_ratio", "eci", "scaled_brier")
LABELS = {
    "auc": "AUC",
    "calibration_slope": "Calibration Slope",
    "oe_ratio": "O/E ratio",
    "eci": "ECI",
    "scaled_brier": "Scaled Brier",
}
CLAMP = 1e-10


class MetricError(ValueError):
    """A metric is undefined for the given predictions and outcomes."""


def _inputs(pred, y, need_both=True):
    pred = np.asarray(pred, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if pred.shape != y.shape:
        raise ValueError("predictions and outcomes differ in length")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("outcomes must be 0 or 1")
    if need_both and (y.all() or not y.any()):
        raise MetricError("outcomes contain a single class")
    return pred, y


def auc(pred, y) -> float:
    """Mann-Whitney probability that an event outranks a non-event; ties count 1/2."""
    pred, y = _inputs(pred, y)
    r = rankdata(pred)
    n1 = y.sum()
    n0 = y.size - n1
    return float((r[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def _logit_clamped(pred):
    return logit(np.clip(pred, CLAMP, 1 - CLAMP))


def calibration_slope(pred, y) -> float:
    """Slope of a logistic regression of `y` on ``logit(pred)``."""
    pred, y = _inputs(pred, y)
    lp = _logit_clamped(pred)
    if np.ptp(lp) == 0:
        raise MetricError("calibration slope is undefined for constant predictions")
    return float(fit_logistic(lp[:, None], y).coef[0])


def oe_ratio(pred, y) -> float:
    """Observed event proportion over mean predicted risk."""
    pred, y = _inputs(pred, y, need_both=False)
    m = pred.mean()
    if not m > 0:
        raise MetricError("mean prediction is zero; O/E ratio undefined")
    return float(y.mean() / m)


def calibration_curve(pred, y) -> np.ndarray:
    """Flexible calibration curve evaluated at each prediction.

    Logistic regression of `y` on a 3-knot restricted cubic spline of
    ``logit(pred)``. Falls back to a linear logit fit, then to the event
    rate, when the richer fit is not available.
    """
    pred, y = _inputs(pred, y)
    lp = _logit_clamped(pred)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", ConvergenceWarning)
            warnings.simplefilter("error", SeparationWarning)
            B = rcs_basis(lp, rcs_knots(lp))
            fit = fit_logistic(B, y)
        return expit(fit.intercept + B @ fit.coef)
    except (ValueError, ConvergenceWarning, SeparationWarning, np.linalg.LinAlgError):
        pass
    if np.ptp(lp) > 0:
        warnings.warn("spline calibration curve unavailable; using linear logit curve", UserWarning, stacklevel=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_logistic(lp[:, None], y)
        return expit(fit.intercept + lp * fit.coef[0])
    warnings.warn("constant predictions; calibration curve is the event rate", UserWarning, stacklevel=2)
    return np.full(y.size, y.mean())


def eci(pred, y) -> float:
    """Estimated calibration index: ``100 * mean((pred - curve)^2)``."""
    pred, y = _inputs(pred, y)
    return float(100.0 * np.mean((pred - calibration_curve(pred, y)) ** 2))


def scaled_brier(pred, y) -> float:
    """``1 - Brier / Brier(null)`` with the test-set event rate as null prediction."""
    pred, y = _inputs(pred, y)
    null = np.mean((y.mean() - y) ** 2)
    return float(1.0 - np.mean((pred - y) ** 2) / null)


@dataclass
class MetricsReport:
    auc: float
    calibration_slope: float
    oe_ratio: float
    eci: float
    scaled_brier: float
    n: int
    events: int
    model: str = ""
    landmark: int = 0
    split: int = 0

    def values(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in METRICS}


def evaluate(pred, y, model: str = "", landmark: int = 0, split: int = 0) -> MetricsReport:
    """All five measures; an undefined measure is reported as NaN."""
    pred, y = _inputs(pred, y, need_both=False)
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name, fn in (("auc", auc), ("calibration_slope", calibration_slope), ("oe_ratio", oe_ratio),
                         ("eci", eci), ("scaled_brier", scaled_brier)):
            try:
                out[name] = fn(pred, y)
            except (MetricError, np.linalg.LinAlgError):
                out[name] = float("nan")
    return MetricsReport(**out, n=int(y.size), events=int(y.sum()), model=model, landmark=int(landmark), split=int(split))


def summarize(values: Iterable[float]) -> dict:
    """Mean, median and 2.5/97.5 percentiles across repetitions (NaNs dropped)."""
    v = np.asarray(list(values), dtype=float)
    v = v[np.isfinite(v)]
    if v.size < 2:
        raise ValueError("need at least two finite values to summarize")
    lo, hi = np.percentile(v, [2.5, 97.5])
    return {"mean": float(v.mean()), "median": float(np.median(v)), "lower": float(lo), "upper": float(hi), "n": int(v.size)}


def summarize_long(metrics: pd.DataFrame) -> pd.DataFrame:
    """Per (model, landmark, metric) summaries of a long metrics table.

    Cells with fewer than two finite values get NaN statistics and
    ``missing = True``.
    """
    rows = []
    for (model, lm, metric), grp in metrics.groupby(["model", "landmark", "metric"], sort=True):
        try:
            s = summarize(grp["value"])
            s["missing"] = False
        except ValueError:
            s = {"mean": np.nan, "median": np.nan, "lower": np.nan, "upper": np.nan,
                 "n": int(np.isfinite(grp["value"].astype(float)).sum()), "missing": True}
        rows.append({"model": model, "landmark": lm, "metric": metric, **s})
    cols = ["model", "landmark", "metric", "mean", "median", "lower", "upper", "n", "missing"]
    return pd.DataFrame(rows, columns=cols)


def performance_table(summary: pd.DataFrame, landmark: int | None = None) -> pd.DataFrame:
    """Wide ``model x metric`` table of ``mean (lower, upper)`` strings."""
    s = summary if landmark is None else summary[summary["landmark"] == landmark]
    cell = s.assign(text=[
        "NA" if m else f"{a:.3f} ({lo:.3f}, {hi:.3f})"
        for a, lo, hi, m in zip(s["mean"], s["lower"], s["upper"], s["missing"])
    ])
    wide = cell.pivot_table(index="model", columns="metric", values="text", aggfunc="first")
    wide = wide.reindex(columns=[m for m in METRICS if m in wide.columns]).rename(columns=LABELS)
    return wide
