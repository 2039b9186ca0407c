"""Cox partial likelihood, Breslow baselines, cause-specific and Fine-Gray models.

All fits work on counting-process rows ``(start, stop]`` with case weights, so
the same solver serves static data (``start = 0``), stacked landmark data
(``start = s``) and the expanded Fine-Gray data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .data_model import CLABSI, EVENTTIME, LM, TYPE
from .glm import ConvergenceWarning, _as_matrix
from .landmarking import COUNT, STATUS, TSTART, TSTOP, WEIGHT, ExpandedFineGrayDataset
from .optim import newton_maximize

DIVERGENCE_BOUND = 20.0
MODES = ("exponential", "product-integral")


@dataclass
class CoxFit:
    coef: np.ndarray
    names: tuple[str, ...]
    times: np.ndarray  # distinct event times
    hazard: np.ndarray  # Breslow increments at `times`
    converged: bool
    iterations: int
    loglik: float
    information: np.ndarray | None = None
    degenerate: tuple[str, ...] = ()
    message: str = ""
    ties: str = "breslow"
    score: np.ndarray | None = field(default=None, repr=False)

    def cumhaz(self, t) -> np.ndarray:
        """Right-continuous step function: sum of increments at event times <= t."""
        cum = np.concatenate([[0.0], np.cumsum(self.hazard)])
        return cum[np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")]

    def linear_predictor(self, X) -> np.ndarray:
        X, _ = _as_matrix(X, self.names)
        return X @ self.coef

    def to_dict(self) -> dict:
        return {
            "coef": self.coef.tolist(),
            "names": list(self.names),
            "times": self.times.tolist(),
            "hazard": self.hazard.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "loglik": self.loglik,
            "degenerate": list(self.degenerate),
            "message": self.message,
            "ties": self.ties,
        }

    @classmethod
    def from_dict(cls, d: Mapping):
        return cls(
            np.asarray(d["coef"], dtype=float), tuple(d["names"]), np.asarray(d["times"], dtype=float),
            np.asarray(d["hazard"], dtype=float), bool(d["converged"]), int(d["iterations"]),
            float(d["loglik"]), degenerate=tuple(d["degenerate"]), message=d.get("message", ""),
            ties=d.get("ties", "breslow"),
        )


@dataclass
class FineGrayFit(CoxFit):
    failcode: int = CLABSI
    landmark: int | None = None

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(failcode=self.failcode, landmark=self.landmark)
        return d

    @classmethod
    def from_dict(cls, d: Mapping):
        base = CoxFit.from_dict(d)
        return cls(**{k: getattr(base, k) for k in base.__dataclass_fields__}, failcode=int(d["failcode"]), landmark=d.get("landmark"))


@dataclass
class CauseSpecificFit:
    fits: dict[int, CoxFit]

    @property
    def causes(self) -> tuple[int, ...]:
        return tuple(sorted(self.fits))

    @property
    def converged(self) -> bool:
        return all(f.converged for f in self.fits.values())

    def to_dict(self) -> dict:
        return {"fits": {str(j): f.to_dict() for j, f in self.fits.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CauseSpecificFit":
        return cls({int(j): CoxFit.from_dict(f) for j, f in d["fits"].items()})


# --------------------------------------------------------------------------
# partial likelihood


class _RiskSets:
    """Vectorized risk-set sums over counting-process rows ``start < t <= stop``."""

    def __init__(self, start, stop, event, weights):
        self.start, self.stop = start, stop
        self.w = weights
        self.event = event
        self.times, inv = np.unique(stop[event], return_inverse=True)
        self.d = np.bincount(inv, weights=weights[event], minlength=self.times.size)
        self.ev_idx = np.flatnonzero(event)
        self.o_stop = np.argsort(stop, kind="mergesort")
        self.o_start = np.argsort(start, kind="mergesort")
        self.i_stop = np.searchsorted(stop[self.o_stop], self.times, side="left")
        self.i_start = np.searchsorted(start[self.o_start], self.times, side="left")
        # rows' event-time span for the information matrix: t_k in (start, stop]
        self.lo = np.searchsorted(self.times, start, side="right")
        self.hi = np.searchsorted(self.times, stop, side="right")

    def sums(self, v, V=None):
        """Risk-set totals of `v` (n,) and optionally `V` (n, p) at each event time."""

        def tail(a, order, idx):
            c = np.concatenate([np.cumsum(a[order][::-1], axis=0)[::-1], np.zeros((1,) + a.shape[1:])])
            return c[idx]

        s0 = tail(v, self.o_stop, self.i_stop) - tail(v, self.o_start, self.i_start)
        if V is None:
            return s0
        s1 = tail(V, self.o_stop, self.i_stop) - tail(V, self.o_start, self.i_start)
        return s0, s1

    def span_sum(self, per_time):
        """For each row, sum of `per_time` over event times in (start, stop]."""
        c = np.concatenate([[0.0], np.cumsum(per_time)])
        return c[self.hi] - c[self.lo]


def _check_intervals(start, stop, event, weights, n):
    start = np.zeros(n) if start is None else np.asarray(start, dtype=float)
    stop = np.asarray(stop, dtype=float)
    event = np.asarray(event).astype(bool)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if not (start.shape == stop.shape == event.shape == weights.shape == (n,)):
        raise ValueError("start, stop, event and weights must have one entry per row")
    if np.any(start >= stop):
        raise ValueError(f"interval start must precede stop (row {int(np.argmax(start >= stop))})")
    if np.any(weights <= 0):
        raise ValueError("case weights must be positive")
    if not event.any():
        raise ValueError("no events: the partial likelihood is undefined")
    return start, stop, event, weights


def fit_cox(
    start,
    stop,
    event,
    X,
    weights=None,
    max_iter: int = 100,
    tol: float = 1e-10,
    gtol: float = 1e-8,
    divergence_bound: float = DIVERGENCE_BOUND,
    cls=CoxFit,
) -> CoxFit:
    """Weighted Cox regression on ``(start, stop]`` rows, Breslow ties.

    Columns that are constant across all rows carry no information; they are
    fixed at 0 and listed in ``degenerate``. A fit whose iterations settle
    with some ``|coef| > divergence_bound`` is reported as not converged
    (monotone likelihood: the maximizer is at infinity). ``max_iter=0``
    evaluates the baseline at ``coef = 0``.
    """
    X, names = _as_matrix(X)
    n, p = X.shape
    start, stop, event, w = _check_intervals(start, stop, event, weights, n)
    if not np.all(np.isfinite(X)):
        raise ValueError("design matrix contains non-finite values")
    live = np.ptp(X, axis=0) > 0 if n else np.zeros(p, dtype=bool)
    degenerate = tuple(nm for nm, ok in zip(names, live) if not ok)
    Xl = X[:, live]
    rs = _RiskSets(start, stop, event, w)
    xw_events = (Xl[rs.ev_idx] * w[rs.ev_idx, None]).sum(axis=0)
    eta_events_w = w[rs.ev_idx]

    def loglik(beta):
        eta = Xl @ beta
        m = eta.max(initial=0.0)
        s0 = rs.sums(w * np.exp(eta - m))
        if np.any(s0 <= 0):
            return -np.inf
        return float(eta_events_w @ eta[rs.ev_idx] - rs.d @ (np.log(s0) + m))

    def derivs(beta):
        eta = Xl @ beta
        v = w * np.exp(eta - eta.max(initial=0.0))
        s0, s1 = rs.sums(v, Xl * v[:, None])
        a = s1 / s0[:, None]
        g = xw_events - rs.d @ a
        c = rs.span_sum(rs.d / s0)
        info = (Xl * (v * c)[:, None]).T @ Xl - (a * rs.d[:, None]).T @ a
        return g, info

    beta0 = np.zeros(int(live.sum()))
    if max_iter == 0:
        beta, ll, converged, it = beta0, loglik(beta0), True, 0
    else:
        beta, ll, _, converged, it = newton_maximize(loglik, derivs, beta0, max_iter, tol, gtol)
    message = ""
    if not converged:
        message = f"no convergence in {max_iter} iterations"
    elif max_iter > 0 and (np.any(np.abs(beta) > divergence_bound) or _still_moving(derivs, beta)):
        converged = False
        message = "diverging coefficients (monotone likelihood)"
    if degenerate:
        message = (message + "; " if message else "") + f"degenerate columns fixed at 0: {', '.join(degenerate)}"
    if not converged:
        warnings.warn(f"Cox fit: {message}", ConvergenceWarning, stacklevel=2)

    eta = Xl @ beta
    m = eta.max(initial=0.0)
    with np.errstate(under="ignore"):
        hazard = rs.d / rs.sums(w * np.exp(eta - m)) * np.exp(-m)
    coef = np.zeros(p)
    coef[live] = beta
    g, info = derivs(beta) if beta.size else (np.zeros(0), np.zeros((0, 0)))
    full_info = np.zeros((p, p))
    full_info[np.ix_(live, live)] = info
    score = np.zeros(p)
    score[live] = g
    return cls(
        coef, names, rs.times, hazard, bool(converged), int(it), ll, full_info, degenerate, message, score=score,
    )


def _still_moving(derivs, beta, threshold: float = 0.1) -> bool:
    """True when the next Newton step would still move a coefficient by more than `threshold`.

    Under a monotone likelihood the log-likelihood flattens while a
    coefficient drifts toward infinity, so the usual stopping rules fire;
    the Newton step itself stays large.
    """
    if beta.size == 0:
        return False
    g, info = derivs(beta)
    step = np.linalg.lstsq(info, g, rcond=None)[0]
    return bool(np.any(np.abs(step) > threshold))


def partial_loglik(beta, start, stop, event, X, weights=None) -> float:
    """Weighted Breslow log partial likelihood by direct risk-set enumeration."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    start, stop, event, w = _check_intervals(start, stop, event, weights, n)
    eta = X @ np.atleast_1d(np.asarray(beta, dtype=float))
    ll = 0.0
    for t in np.unique(stop[event]):
        at = event & (stop == t)
        risk = (start < t) & (stop >= t)
        ll += float(np.sum(w[at] * eta[at]) - np.sum(w[at]) * np.log(np.sum(w[risk] * np.exp(eta[risk]))))
    return ll


# --------------------------------------------------------------------------
# cause-specific and Fine-Gray


def fit_cause_specific(
    start,
    stop,
    cause,
    X,
    causes: Sequence[int] = (1, 2, 3),
    weights=None,
    allow_missing: bool = False,
    **options,
) -> CauseSpecificFit:
    """One Cox model per cause; other causes are censored at their event time.

    A cause without events raises, unless `allow_missing`, in which case that
    component is left out (its hazard is zero).
    """
    cause = np.asarray(cause)
    fits = {}
    for j in causes:
        ev = cause == j
        if not ev.any():
            if allow_missing:
                continue
            raise ValueError(f"cause {j} has no events")
        fits[int(j)] = fit_cox(start, stop, ev, X, weights=weights, **options)
    if not fits:
        raise ValueError("no cause has events")
    return CauseSpecificFit(fits)


def fit_fine_gray(expanded: ExpandedFineGrayDataset | pd.DataFrame, X, failcode: int = CLABSI, **options) -> FineGrayFit:
    """Weighted Cox fit on counting-process Fine-Gray rows.

    Extension rows (``count == 2``) carry their competing status and so only
    enter risk sets.
    """
    f = expanded.frame if isinstance(expanded, ExpandedFineGrayDataset) else expanded
    event = (f[STATUS].to_numpy() == failcode) & (f[COUNT].to_numpy() == 1)
    fit = fit_cox(
        f[TSTART].to_numpy(dtype=float), f[TSTOP].to_numpy(dtype=float), event, X,
        weights=f[WEIGHT].to_numpy(dtype=float), cls=FineGrayFit, **options,
    )
    fit.failcode = failcode
    return fit


@dataclass
class SeparateFit:
    fits: dict[int, FineGrayFit]
    ledger: list[dict]


def fit_fg_separate(
    expanded: ExpandedFineGrayDataset,
    design: pd.DataFrame,
    landmarks: Sequence[int] | None = None,
    **options,
) -> SeparateFit:
    """Independent Fine-Gray fit per landmark subset, with a convergence ledger.

    `design` is aligned row-for-row with ``expanded.frame``. Failed fits
    (no events, singular data) are recorded and skipped; non-converged fits
    are kept so predictions can still be made from the last iterate.
    """
    f = expanded.frame
    lm = f[LM].to_numpy()
    landmarks = sorted(np.unique(lm)) if landmarks is None else landmarks
    fits, ledger = {}, []
    for s in landmarks:
        rows = lm == s
        entry = {"landmark": int(s), "converged": False, "message": ""}
        if not rows.any():
            entry["message"] = "empty landmark subset"
        else:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    fit = fit_fine_gray(f[rows], design[rows], **options)
                fit.landmark = int(s)
                fits[int(s)] = fit
                entry["converged"] = fit.converged
                entry["message"] = fit.message
            except (ValueError, np.linalg.LinAlgError) as exc:
                entry["message"] = str(exc)
        ledger.append(entry)
    return SeparateFit(fits, ledger)


# --------------------------------------------------------------------------
# predictions


def _risk_from_cumhaz(h) -> np.ndarray:
    return -np.expm1(-np.asarray(h, dtype=float))


def _scaled_risk(lp, cumhaz) -> np.ndarray:
    """``1 - exp(-exp(lp) * cumhaz)`` without overflow for extreme linear predictors."""
    with np.errstate(divide="ignore", over="ignore"):
        h = np.exp(np.asarray(lp, dtype=float) + np.log(np.asarray(cumhaz, dtype=float)))
    return _risk_from_cumhaz(h)


def predict_static(fit, Z, horizon: float, mode: str = "exponential") -> np.ndarray:
    """Absolute risk of cause 1 by `horizon` for covariate rows `Z`.

    Cox and Fine-Gray: ``1 - exp(-Lambda0(T) exp(beta'Z))``. Cause-specific:
    cumulative incidence from all cause hazards (see :func:`cif_from_hazards`).
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if isinstance(fit, CauseSpecificFit):
        return cause_specific_cif(fit, Z, 0.0, horizon, mode)
    return _scaled_risk(fit.linear_predictor(Z), fit.cumhaz(horizon))


def cif_from_hazards(dH: np.ndarray, dH1: np.ndarray, mode: str = "exponential") -> np.ndarray:
    """Cumulative incidence of one cause from per-step hazard increments.

    `dH` is the all-cause increment and `dH1` the cause-of-interest increment,
    both ``(rows, steps)`` in time order. Each step contributes its share
    ``dH1/dH`` of the survival drop ``S(t-) - S(t)``. In ``"exponential"``
    mode ``S = exp(-H)``, so with a single cause the result is exactly
    ``1 - exp(-H)``. In ``"product-integral"`` mode ``S(t) = S(t-)(1 - dH)``,
    giving ``sum dH1 * S(t-)``; increments above 1 are clamped.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "exponential":
        H = np.cumsum(dH, axis=1)
        S = np.exp(-H)
        S_prev = np.exp(-(H - dH))
    else:
        if np.any(dH > 1):
            warnings.warn("hazard increment above 1 clamped in product-integral", RuntimeWarning, stacklevel=3)
        factor = np.clip(1.0 - dH, 0.0, 1.0)
        S = np.cumprod(factor, axis=1)
        S_prev = np.concatenate([np.ones((dH.shape[0], 1)), S[:, :-1]], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        share = np.where(dH > 0, dH1 / dH, 0.0)
    return np.clip(np.sum(share * (S_prev - S), axis=1), 0.0, 1.0)


def cause_specific_cif(
    fit: CauseSpecificFit,
    Z,
    t0: float,
    t1: float,
    mode: str = "exponential",
    cause: int = CLABSI,
    chunk: int = 2048,
) -> np.ndarray:
    """Cumulative incidence of `cause` over ``(t0, t1]`` given event-free at ``t0``."""
    etas = {j: f.linear_predictor(Z) for j, f in fit.fits.items()}
    n = next(iter(etas.values())).size
    if cause not in fit.fits:
        return np.zeros(n)
    grid = np.unique(np.concatenate([f.times for f in fit.fits.values()]))
    grid = grid[(grid > t0) & (grid <= t1)]
    if grid.size == 0:
        return np.zeros(n)
    steps = {}
    for j, f in fit.fits.items():
        inc = np.zeros(grid.size)
        pos = np.searchsorted(grid, f.times)
        ok = (pos < grid.size) & (grid[np.minimum(pos, grid.size - 1)] == f.times)
        inc[pos[ok]] = f.hazard[ok]
        steps[j] = inc
    out = np.empty(n)
    for lo in range(0, n, chunk):
        sl = slice(lo, lo + chunk)
        dH = np.zeros((min(chunk, n - lo), grid.size))
        for j, inc in steps.items():
            with np.errstate(over="ignore"):
                part = np.exp(etas[j][sl])[:, None] * inc[None, :]
            part = np.nan_to_num(part, nan=0.0, posinf=1e300)
            dH += part
            if j == cause:
                dH1 = part
        out[sl] = cif_from_hazards(dH, dH1, mode)
    return out


def _check_landmark(fit, s, grid_range):
    lo, hi = grid_range if grid_range is not None else (0, 30)
    s = np.asarray(s, dtype=float)
    if np.any((s < lo) | (s > hi)):
        raise ValueError(f"landmark outside the fitted range [{lo}, {hi}]")
    return s


def predict_landmark_cox(fit: CoxFit, Z, s, w: float, grid_range=(0, 30)) -> np.ndarray:
    """``1 - exp(-exp(lp) [Lambda0(s+w) - Lambda0(s)])``.

    `Z` must already contain the landmark columns evaluated at `s` (scalar or
    per row), so ``lp`` includes the smooth landmark effect.
    """
    s = _check_landmark(fit, s, grid_range)
    window_haz = fit.cumhaz(s + w) - fit.cumhaz(s)
    return _scaled_risk(fit.linear_predictor(Z), window_haz)


def predict_landmark_fg(fit: FineGrayFit, Z, s, w: float, grid_range=(0, 30)) -> np.ndarray:
    """Same form as :func:`predict_landmark_cox`, on the subdistribution baseline."""
    return predict_landmark_cox(fit, Z, s, w, grid_range)


def predict_landmark_cs(
    fit: CauseSpecificFit,
    Z,
    s,
    w: float,
    mode: str = "product-integral",
    grid_range=(0, 30),
) -> np.ndarray:
    """Cause-1 cumulative incidence over ``(s, s+w]`` from the cause-specific supermodel."""
    s = _check_landmark(fit, s, grid_range)
    if s.ndim == 0:
        return cause_specific_cif(fit, Z, float(s), float(s) + w, mode)
    Zdf = Z if isinstance(Z, pd.DataFrame) else None
    out = np.empty(s.size)
    for val in np.unique(s):
        rows = np.flatnonzero(s == val)
        Zs = Zdf.iloc[rows] if Zdf is not None else np.asarray(Z)[rows]
        out[rows] = cause_specific_cif(fit, Zs, float(val), float(val) + w, mode)
    return out


def stacked_intervals(frame: pd.DataFrame):
    """``(start, stop, type)`` arrays for stacked landmark rows."""
    return frame[LM].to_numpy(dtype=float), frame[EVENTTIME].to_numpy(dtype=float), frame[TYPE].to_numpy()
