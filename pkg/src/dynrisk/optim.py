"""Damped Newton-Raphson shared by the likelihood solvers."""

from __future__ import annotations

import numpy as np


def _newton_step(H, g):
    try:
        return np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, g, rcond=None)[0]


def newton_maximize(loglik, derivs, theta, max_iter, tol, gtol):
    """Maximize with Newton steps and step-halving; returns (theta, ll, trace, converged, iters)."""
    ll = loglik(theta)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g, H = derivs(theta)
        if np.max(np.abs(g), initial=0.0) < gtol:
            converged = True
            it -= 1
            break
        step = _newton_step(H, g)
        new = theta + step
        new_ll = loglik(new)
        halvings = 0
        while not (new_ll >= ll - 1e-12 * abs(ll)) and halvings < 40:
            step = step / 2
            new = theta + step
            new_ll = loglik(new)
            halvings += 1
        if not np.isfinite(new_ll) or new_ll < ll - 1e-12 * abs(ll):
            break
        rel = abs(new_ll - ll) / (abs(new_ll) + 0.1)
        theta, ll = new, new_ll
        trace.append(ll)
        if rel < tol:
            converged = True
            break
    return theta, ll, trace, converged, it
