"""Binary and multinomial logistic regression by Newton-Raphson (IRLS)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit, log_expit, logsumexp

from .data_model import SchemaError
from .optim import newton_maximize

SEPARATION_BOUND = 20.0


class ConvergenceWarning(UserWarning):
    pass


class SeparationWarning(UserWarning):
    pass


@dataclass
class LogisticFit:
    intercept: float
    coef: np.ndarray
    names: tuple[str, ...]
    converged: bool
    iterations: int
    loglik: float
    loglik_trace: list[float] = field(default_factory=list)
    information: np.ndarray | None = None
    separation: bool = False

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.coef])

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "coef": self.coef.tolist(),
            "names": list(self.names),
            "converged": self.converged,
            "iterations": self.iterations,
            "loglik": self.loglik,
            "separation": self.separation,
        }

    @classmethod
    def from_dict(cls, d) -> "LogisticFit":
        return cls(
            float(d["intercept"]), np.asarray(d["coef"], dtype=float), tuple(d["names"]),
            bool(d["converged"]), int(d["iterations"]), float(d["loglik"]), separation=bool(d["separation"]),
        )


@dataclass
class MultinomialFit:
    categories: tuple[int, ...]  # reference first
    intercepts: np.ndarray  # (K-1,)
    coef: np.ndarray  # (K-1, p)
    names: tuple[str, ...]
    converged: bool
    iterations: int
    loglik: float
    loglik_trace: list[float] = field(default_factory=list)
    information: np.ndarray | None = None
    separation: bool = False

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "intercepts": self.intercepts.tolist(),
            "coef": self.coef.tolist(),
            "names": list(self.names),
            "converged": self.converged,
            "iterations": self.iterations,
            "loglik": self.loglik,
            "separation": self.separation,
        }

    @classmethod
    def from_dict(cls, d) -> "MultinomialFit":
        return cls(
            tuple(int(c) for c in d["categories"]), np.asarray(d["intercepts"], dtype=float),
            np.asarray(d["coef"], dtype=float).reshape(len(d["intercepts"]), len(d["names"])),
            tuple(d["names"]), bool(d["converged"]), int(d["iterations"]), float(d["loglik"]),
            separation=bool(d["separation"]),
        )


def _as_matrix(X, names=None):
    if isinstance(X, pd.DataFrame):
        if names is not None:
            missing = [c for c in names if c not in X.columns]
            if missing:
                raise SchemaError(f"design is missing column {missing[0]!r}")
            X = X[list(names)]
        return X.to_numpy(dtype=float), tuple(str(c) for c in X.columns)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if names is not None and X.shape[1] != len(names):
        raise SchemaError(f"design has {X.shape[1]} columns, fit expects {len(names)}")
    return X, tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))


def fit_logistic(
    X,
    y,
    weights=None,
    max_iter: int = 100,
    tol: float = 1e-10,
    gtol: float = 1e-8,
) -> LogisticFit:
    """Maximum-likelihood logistic regression with an unpenalized intercept.

    Starts from zero and iterates Newton steps, halving any step that lowers
    the log-likelihood. Stops when the relative log-likelihood change drops
    below `tol` or the score max-norm below `gtol`.
    """
    X, names = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("design matrix contains non-finite values")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("binary labels must be 0 or 1")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    Xd = np.column_stack([np.ones(len(y)), X])

    def loglik(beta):
        eta = Xd @ beta
        return float(np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta))))

    def derivs(beta):
        p = expit(Xd @ beta)
        g = Xd.T @ (w * (y - p))
        H = (Xd * (w * p * (1 - p))[:, None]).T @ Xd
        return g, H

    beta, ll, trace, converged, it = newton_maximize(loglik, derivs, np.zeros(Xd.shape[1]), max_iter, tol, gtol)
    if not converged:
        warnings.warn(f"logistic fit did not converge in {max_iter} iterations", ConvergenceWarning, stacklevel=2)
    separation = bool(np.any(np.abs(beta[1:]) > SEPARATION_BOUND))
    if separation:
        warnings.warn("diverging coefficients: possible complete separation", SeparationWarning, stacklevel=2)
    _, H = derivs(beta)
    return LogisticFit(float(beta[0]), beta[1:].copy(), names, converged, it, ll, trace, H, separation)


def predict_logistic(fit: LogisticFit, X) -> np.ndarray:
    X, _ = _as_matrix(X, fit.names)
    return expit(fit.intercept + X @ fit.coef)


def fit_multinomial(
    X,
    y,
    reference: int = 0,
    max_iter: int = 100,
    tol: float = 1e-10,
    gtol: float = 1e-8,
) -> MultinomialFit:
    """Baseline-category logit model; categories absent from `y` are dropped."""
    X, names = _as_matrix(X)
    y = np.asarray(y)
    present = sorted(int(c) for c in np.unique(y))
    if reference not in present:
        raise ValueError(f"reference category {reference} does not occur")
    cats = (reference,) + tuple(c for c in present if c != reference)
    if len(cats) < 2:
        raise ValueError("multinomial fit needs at least two categories")
    n, p1 = X.shape[0], X.shape[1] + 1
    k = len(cats) - 1
    Xd = np.column_stack([np.ones(n), X])
    Y = np.column_stack([(y == c).astype(float) for c in cats[1:]])

    def probs(theta):
        eta = np.column_stack([np.zeros(n), Xd @ theta.reshape(k, p1).T])
        return eta, np.exp(eta - logsumexp(eta, axis=1, keepdims=True))

    def loglik(theta):
        eta, _ = probs(theta)
        lse = logsumexp(eta, axis=1)
        return float(np.sum(np.sum(Y * eta[:, 1:], axis=1) - lse))

    def derivs(theta):
        _, P = probs(theta)
        P = P[:, 1:]
        g = ((Y - P).T @ Xd).ravel()
        H = np.empty((k * p1, k * p1))
        for a in range(k):
            for b in range(a, k):
                wt = P[:, a] * ((a == b) - P[:, b])
                blk = (Xd * wt[:, None]).T @ Xd
                H[a * p1:(a + 1) * p1, b * p1:(b + 1) * p1] = blk
                H[b * p1:(b + 1) * p1, a * p1:(a + 1) * p1] = blk.T
        return g, H

    theta, ll, trace, converged, it = newton_maximize(loglik, derivs, np.zeros(k * p1), max_iter, tol, gtol)
    if not converged:
        warnings.warn(f"multinomial fit did not converge in {max_iter} iterations", ConvergenceWarning, stacklevel=2)
    theta = theta.reshape(k, p1)
    separation = bool(np.any(np.abs(theta[:, 1:]) > SEPARATION_BOUND))
    if separation:
        warnings.warn("diverging coefficients: possible complete separation", SeparationWarning, stacklevel=2)
    _, H = derivs(theta.ravel())
    return MultinomialFit(cats, theta[:, 0].copy(), theta[:, 1:].copy(), names, converged, it, ll, trace, H, separation)


def predict_multinomial(fit: MultinomialFit, X) -> np.ndarray:
    """Category probabilities, columns ordered as ``fit.categories``."""
    X, _ = _as_matrix(X, fit.names)
    eta = np.column_stack([np.zeros(X.shape[0]), fit.intercepts + X @ fit.coef.T])
    return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))


def category_probability(fit: MultinomialFit, X, category: int) -> np.ndarray:
    if category not in fit.categories:
        X, _ = _as_matrix(X, fit.names)
        return np.zeros(X.shape[0])
    return predict_multinomial(fit, X)[:, fit.categories.index(category)]


def wald_test(fit: LogisticFit | MultinomialFit, block) -> tuple[float, float]:
    """Joint Wald test that the coefficients in `block` are zero.

    `block` holds coefficient names (or integer positions into ``fit.names``;
    for multinomial fits, positions index the flattened parameter vector
    including intercepts). Returns the chi-square statistic and p-value.
    """
    H = fit.information
    if H is None:
        raise ValueError("fit carries no information matrix")
    if isinstance(fit, LogisticFit):
        params = fit.params
        idx = [1 + fit.names.index(b) if isinstance(b, str) else int(b) for b in block]
    else:
        params = np.column_stack([fit.intercepts, fit.coef]).ravel()
        p1 = len(fit.names) + 1
        idx = []
        for b in block:
            if isinstance(b, str):
                j = fit.names.index(b)
                idx.extend(a * p1 + 1 + j for a in range(len(fit.categories) - 1))
            else:
                idx.append(int(b))
    s = np.linalg.svd(H, compute_uv=False)
    if s[-1] <= s[0] * 1e-10:
        raise np.linalg.LinAlgError("information matrix is singular; check for collinear columns")
    V = np.linalg.inv(H)
    b = params[idx]
    stat = float(b @ np.linalg.solve(V[np.ix_(idx, idx)], b))
    return stat, float(stats.chi2.sf(stat, df=len(idx)))
