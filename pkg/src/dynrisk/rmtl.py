"""Regularized multi-task logistic regression with a time-smoothness penalty.

Each landmark is a task. Task ``k`` has its own coefficient column ``w_k``
and intercept ``c_k``; neighbouring tasks are pulled together through
``||W G||_F^2 = sum_k ||w_k - w_{k+1}||^2`` and optionally shrunk with a
ridge term. Intercepts are not penalized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit

from .glm import ConvergenceWarning, _as_matrix

DEFAULT_LAMBDA1_GRID = tuple(np.logspace(-3, 2, 10))


def build_relatedness(t: int) -> np.ndarray:
    """``t x (t-1)`` difference matrix: column k is +1 at row k and -1 at row k+1."""
    if t < 1:
        raise ValueError("need at least one task")
    G = np.zeros((t, t - 1))
    k = np.arange(t - 1)
    G[k, k] = 1.0
    G[k + 1, k] = -1.0
    return G


def smoothness_penalty(W: np.ndarray) -> float:
    """``||W G||_F^2`` for coefficient matrix ``W`` (features x tasks)."""
    return float(np.sum(np.diff(W, axis=1) ** 2))


@dataclass
class TaskSet:
    """Raw per-task designs with labels in {+1, -1} and grouping ids.

    Standardization parameters are learned from the rows held here; the
    standardized matrices are available through :meth:`standardized`.
    """

    tasks: tuple  # task labels (landmarks), in order
    X: list[np.ndarray]
    y: list[np.ndarray]
    groups: list[np.ndarray]
    names: tuple[str, ...]
    means: np.ndarray = field(init=False)
    sds: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (len(self.tasks) == len(self.X) == len(self.y) == len(self.groups)):
            raise ValueError("tasks, X, y and groups must have equal length")
        for k, y in zip(self.tasks, self.y):
            if not np.isin(y, (-1, 1)).all():
                raise ValueError(f"task {k}: labels must be +1 or -1")
        p = len(self.names)
        self.means = np.zeros((len(self.tasks), p))
        self.sds = np.ones((len(self.tasks), p))
        for i, X in enumerate(self.X):
            if X.shape[0]:
                self.means[i] = X.mean(axis=0)
                sd = X.std(axis=0)
                self.sds[i] = np.where(sd > 0, sd, 1.0)

    def __len__(self) -> int:
        return len(self.tasks)

    def standardized(self) -> list[np.ndarray]:
        return [(X - m) / s for X, m, s in zip(self.X, self.means, self.sds)]

    def single_class(self) -> list:
        return [k for k, y in zip(self.tasks, self.y) if np.unique(y).size < 2]

    def subset(self, keep: Sequence[np.ndarray], tasks: Sequence[int] | None = None) -> "TaskSet":
        """Row subset per task (boolean masks), optionally restricted to task positions."""
        idx = range(len(self.tasks)) if tasks is None else tasks
        return TaskSet(
            tuple(self.tasks[i] for i in idx),
            [self.X[i][keep[i]] for i in idx],
            [self.y[i][keep[i]] for i in idx],
            [self.groups[i][keep[i]] for i in idx],
            self.names,
        )


def make_taskset(frame: pd.DataFrame, design, task_col: str, label_col: str, group_col: str, tasks=None) -> TaskSet:
    """Split aligned rows of `frame` and `design` into tasks keyed by `task_col`.

    Labels in `label_col` are binary 0/1 and converted to -1/+1.
    """
    X, names = _as_matrix(design)
    key = frame[task_col].to_numpy()
    tasks = tuple(sorted(np.unique(key))) if tasks is None else tuple(tasks)
    y01 = frame[label_col].to_numpy()
    grp = frame[group_col].to_numpy()
    Xs, ys, gs = [], [], []
    for k in tasks:
        rows = key == k
        Xs.append(X[rows])
        ys.append(np.where(y01[rows] == 1, 1, -1))
        gs.append(grp[rows])
    return TaskSet(tasks, Xs, ys, gs, names)


@dataclass
class RmtlFit:
    W: np.ndarray  # features x tasks
    C: np.ndarray  # tasks
    lambda1: float
    lambda2: float
    tasks: tuple
    names: tuple[str, ...]
    means: np.ndarray
    sds: np.ndarray
    converged: bool
    iterations: int
    objective_trace: list[float] = field(default_factory=list)

    def task_index(self, s) -> int:
        try:
            return self.tasks.index(s)
        except ValueError:
            raise IndexError(f"task {s!r} is not among the fitted tasks") from None

    def to_dict(self) -> dict:
        return {
            "W": self.W.tolist(),
            "C": self.C.tolist(),
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "tasks": [int(t) for t in self.tasks],
            "names": list(self.names),
            "means": self.means.tolist(),
            "sds": self.sds.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RmtlFit":
        p, t = len(d["names"]), len(d["tasks"])
        return cls(
            np.asarray(d["W"], dtype=float).reshape(p, t), np.asarray(d["C"], dtype=float),
            float(d["lambda1"]), float(d["lambda2"]), tuple(d["tasks"]), tuple(d["names"]),
            np.asarray(d["means"], dtype=float).reshape(t, p), np.asarray(d["sds"], dtype=float).reshape(t, p),
            bool(d["converged"]), int(d["iterations"]),
        )


def _laplacian(t: int) -> np.ndarray:
    G = build_relatedness(t)
    return G @ G.T


class _Problem:
    """Loss over all tasks at once (rows concatenated by task) plus the quadratic penalty.

    The penalty ``lam1 ||W G||^2 + lam2 ||W||^2`` is handled through its
    exact proximal map, so step sizes depend only on the loss curvature.
    """

    def __init__(self, Xs, ys, lam1, lam2):
        self.t = len(Xs)
        self.p = Xs[0].shape[1]
        sizes = np.array([x.shape[0] for x in Xs])
        self.Xs = [np.ascontiguousarray(x) for x in Xs]
        self.y = np.concatenate(ys).astype(float)
        self.bounds = np.concatenate([[0], np.cumsum(sizes)])
        self.starts = self.bounds[:-1]
        self.rw = np.repeat(1.0 / sizes, sizes)
        self.lam1, self.lam2 = lam1, lam2
        self.lap = _laplacian(self.t)
        self._prox_cache = {}

    def unpack(self, theta):
        return theta[: self.p * self.t].reshape(self.p, self.t), theta[self.p * self.t:]

    def margin(self, W, C):
        eta = np.empty(self.y.size)
        for k, X in enumerate(self.Xs):
            eta[self.bounds[k]:self.bounds[k + 1]] = X @ W[:, k] + C[k]
        return self.y * eta

    def penalty(self, W) -> float:
        return float(self.lam1 * smoothness_penalty(W) + self.lam2 * np.sum(W * W))

    def loss(self, theta) -> float:
        W, C = self.unpack(theta)
        return float(-np.sum(self.rw * log_expit(self.margin(W, C))))

    def loss_grad(self, theta):
        W, C = self.unpack(theta)
        m = self.margin(W, C)
        r = -self.rw * self.y * expit(-m)
        gW = np.empty((self.p, self.t))
        for k, X in enumerate(self.Xs):
            gW[:, k] = r[self.bounds[k]:self.bounds[k + 1]] @ X
        gC = np.add.reduceat(r, self.starts)
        return float(-np.sum(self.rw * log_expit(m))), np.concatenate([gW.ravel(), gC])

    def objective(self, theta) -> float:
        return self.loss(theta) + self.penalty(self.unpack(theta)[0])

    def full_grad(self, theta, g_loss):
        W, _ = self.unpack(theta)
        g = g_loss.copy()
        g[: self.p * self.t] += (2 * self.lam1 * W @ self.lap + 2 * self.lam2 * W).ravel()
        return g

    def hessian(self, theta) -> np.ndarray:
        """Exact Hessian; the loss part is block diagonal across tasks."""
        W, C = self.unpack(theta)
        m = self.margin(W, C)
        v = self.rw * expit(m) * expit(-m)
        p, t = self.p, self.t
        H = np.kron(np.eye(p), 2 * self.lam1 * self.lap + 2 * self.lam2 * np.eye(t))
        H = np.pad(H, ((0, t), (0, t)))
        for k, X in enumerate(self.Xs):
            vk = v[self.bounds[k]:self.bounds[k + 1]]
            wi = np.arange(p) * t + k
            ci = p * t + k
            H[np.ix_(wi, wi)] += (X * vk[:, None]).T @ X
            xv = vk @ X
            H[wi, ci] += xv
            H[ci, wi] += xv
            H[ci, ci] += vk.sum()
        return H

    def prox(self, theta, step):
        if self.lam1 == 0 and self.lam2 == 0:
            return theta
        M = self._prox_cache.get(step)
        if M is None:
            A = np.eye(self.t) * (1 + 2 * step * self.lam2) + 2 * step * self.lam1 * self.lap
            M = np.linalg.inv(A)
            self._prox_cache = {step: M}
        W, C = self.unpack(theta)
        return np.concatenate([(W @ M).ravel(), C])


def _newton_refine(prob: _Problem, theta, gtol, max_iter: int = 50):
    """Damped Newton steps from a first-order iterate until the gradient is below `gtol`."""
    loss, gl = prob.loss_grad(theta)
    f = loss + prob.penalty(prob.unpack(theta)[0])
    trace = []
    for _ in range(max_iter):
        g = prob.full_grad(theta, gl)
        if np.max(np.abs(g)) <= gtol:
            return theta, trace, True
        try:
            step = np.linalg.solve(prob.hessian(theta), g)
        except np.linalg.LinAlgError:
            break
        a = 1.0
        while a > 1e-10:
            cand = theta - a * step
            f_new = prob.objective(cand)
            if f_new <= f + 1e-13 * abs(f):
                break
            a /= 2
        else:
            break
        theta, f = cand, min(f, f_new)
        loss, gl = prob.loss_grad(theta)
        trace.append(f)
    return theta, trace, bool(np.max(np.abs(prob.full_grad(theta, gl))) <= gtol)


def _accelerated_descent(prob: _Problem, theta, max_iter, tol, gtol):
    """Monotone accelerated proximal gradient with backtracking and restarts.

    Stops when the max-norm of the full gradient falls below `gtol`, or
    when the objective stalls (relative change below `tol` across ten
    consecutive accepted steps).
    """
    loss, gl = prob.loss_grad(theta)
    f = loss + prob.penalty(prob.unpack(theta)[0])
    trace = [f]
    L = 1.0
    x_prev = theta.copy()
    mom = 1.0
    converged = False
    stall = 0
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(prob.full_grad(theta, gl))) <= gtol:
            converged = True
            it -= 1
            break
        mom_next = (1 + np.sqrt(1 + 4 * mom * mom)) / 2
        y = theta + ((mom - 1) / mom_next) * (theta - x_prev)
        ly, gy = prob.loss_grad(y) if mom > 1 else (loss, gl)
        while True:
            x_new = prob.prox(y - gy / L, 1.0 / L)
            step = x_new - y
            l_new = prob.loss(x_new)
            if l_new <= ly + gy @ step + 0.5 * L * (step @ step) + 1e-13 * abs(ly):
                break
            L *= 2.0
        f_new = l_new + prob.penalty(prob.unpack(x_new)[0])
        if f_new > f:
            # momentum overshot: restart from the current iterate
            mom = 1.0
            x_prev = theta.copy()
            continue
        x_prev, theta = theta, x_new
        mom = mom_next
        stall = stall + 1 if f - f_new <= tol * max(abs(f_new), 1e-12) else 0
        f = f_new
        loss, gl = prob.loss_grad(theta)
        trace.append(f)
        if stall >= 10:
            converged = bool(np.max(np.abs(prob.full_grad(theta, gl))) <= gtol)
            break
    if not np.isfinite(f):
        raise FloatingPointError("multi-task objective diverged")
    return theta, trace, converged, it


def fit_rmtl(
    tasks: TaskSet,
    lambda1: float,
    lambda2: float = 0.0,
    max_iter: int = 5000,
    tol: float = 1e-8,
    gtol: float = 1e-6,
    init: RmtlFit | None = None,
) -> RmtlFit:
    """Minimize mean per-task logistic loss plus the smoothness and ridge penalties.

    Accelerated proximal gradient runs first; if it stalls or runs out of
    iterations above the gradient tolerance, damped Newton steps finish the
    job (the objective is smooth and convex).

    Every task needs both label classes; otherwise its intercept has no
    finite optimum and a ``ValueError`` names the task.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("penalty weights must be nonnegative")
    bad = tasks.single_class()
    if bad:
        raise ValueError(f"task {bad[0]} has a single label class")
    prob = _Problem(tasks.standardized(), tasks.y, float(lambda1), float(lambda2))
    if init is not None and init.W.shape == (prob.p, prob.t):
        theta = np.concatenate([init.W.ravel(), init.C])
    else:
        theta = np.zeros(prob.p * prob.t + prob.t)
    theta, trace, converged, it = _accelerated_descent(prob, theta, max_iter, tol, gtol)
    if not converged and np.all(np.isfinite(theta)):
        theta, more, converged = _newton_refine(prob, theta, gtol)
        trace += more
    if not converged:
        warnings.warn(f"multi-task fit did not converge in {max_iter} iterations", ConvergenceWarning, stacklevel=2)
    W, C = prob.unpack(theta)
    return RmtlFit(
        W.copy(), C.copy(), float(lambda1), float(lambda2), tuple(tasks.tasks), tasks.names,
        tasks.means.copy(), tasks.sds.copy(), converged, it, trace,
    )


def predict_rmtl(fit: RmtlFit, s, Z) -> np.ndarray:
    """Risk for raw covariate rows `Z` under task `s` (scalar or one task per row)."""
    X, _ = _as_matrix(Z, fit.names)
    s_arr = np.atleast_1d(np.asarray(s))
    if s_arr.size == 1:
        k = np.full(X.shape[0], fit.task_index(s_arr.item()))
    else:
        k = np.array([fit.task_index(v) for v in s_arr.tolist()])
    Xs = (X - fit.means[k]) / fit.sds[k]
    return expit(np.einsum("ij,ji->i", Xs, fit.W[:, k]) + fit.C[k])


def _fold_of(groups: np.ndarray, k: int, seed) -> dict:
    uniq = np.unique(groups)
    perm = np.random.default_rng(seed).permutation(uniq.size)
    return dict(zip(uniq[perm].tolist(), (np.arange(uniq.size) % k).tolist()))


def tune_lambda1(
    tasks: TaskSet,
    grid: Sequence[float] = DEFAULT_LAMBDA1_GRID,
    k: int = 5,
    seed=0,
    lambda2: float = 0.0,
    gtol: float = 1e-5,
    **fit_options,
) -> float:
    """Pick ``lambda1`` by k-fold cross-validation grouped by admission.

    Every group (admission) goes to one fold across all tasks. Within a
    fold, tasks whose training part is single-class are dropped from that
    fit, and validation tasks that are empty or single-class are not scored.
    The grid value with the lowest mean validation loss wins; ties go to
    the larger value. Fold fits use the looser gradient tolerance `gtol`.
    """
    grid = sorted(float(v) for v in grid)
    if not grid:
        raise ValueError("lambda1 grid is empty")
    if len(grid) == 1:
        return grid[0]
    fold = _fold_of(np.concatenate(tasks.groups), k, seed)
    fold_ids = [np.array([fold[g] for g in grp.tolist()], dtype=int) for grp in tasks.groups]
    losses = np.zeros(len(grid))
    counts = np.zeros(len(grid))
    skipped = 0
    for f in range(k):
        train_mask = [fi != f for fi in fold_ids]
        usable = [i for i in range(len(tasks)) if np.unique(tasks.y[i][train_mask[i]]).size == 2]
        skipped += len(tasks) - len(usable)
        if not usable:
            continue
        train = tasks.subset(train_mask, usable)
        prev = None
        # warm start from the strongest penalty down
        for gi in range(len(grid) - 1, -1, -1):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                fit = fit_rmtl(train, grid[gi], lambda2, init=prev, gtol=gtol, **fit_options)
            prev = fit
            for pos, i in enumerate(usable):
                rows = ~train_mask[i]
                yv = tasks.y[i][rows]
                if yv.size == 0 or np.unique(yv).size < 2:
                    continue
                p = predict_rmtl(fit, tasks.tasks[i], tasks.X[i][rows])
                p = np.clip(p, 1e-15, 1 - 1e-15)
                losses[gi] += float(-np.mean(np.where(yv == 1, np.log(p), np.log1p(-p))))
                counts[gi] += 1
    if skipped:
        warnings.warn(f"{skipped} fold-task fits skipped for lack of both label classes", UserWarning, stacklevel=2)
    if not counts.any():
        raise ValueError("every fold-task was skipped; cannot tune lambda1")
    mean = losses / np.maximum(counts, 1)
    best = mean.min()
    # ties (to rounding) resolved toward stronger smoothing
    return max(v for v, m in zip(grid, mean) if m <= best + 1e-12 * max(1.0, abs(best)))
