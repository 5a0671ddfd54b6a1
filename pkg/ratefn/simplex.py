"""
Projection onto the probability simplex and a projected-gradient minimizer on it.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)


def project_simplex(y: np.ndarray, a: float = 1.0) -> np.ndarray:
    """
    Euclidean projection of y onto {x >= 0, sum(x) = a} by sorting.
    """
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    ukvals = (np.cumsum(u) - a) / np.arange(1, y.shape[0] + 1)
    k = np.nonzero(ukvals < u)[0][-1]
    x = np.maximum(y - ukvals[k], 0.0)
    # renormalize away the rounding of the threshold
    total = x.sum()
    return x * (a / total) if total > 0 else np.full_like(y, a / y.shape[0])


@dataclass
class SimplexResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    gradient_mapping: float


def minimize_on_simplex(
    fun: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    max_iter: int = 20000,
    tol: float = 1e-12,
    armijo: float = 1e-4,
    stall_tol: float = 1e-5,
) -> SimplexResult:
    """
    Projected gradient descent with backtracking on the unit simplex.

    fun may return inf outside its domain; such trial points are rejected by
    the line search. Stops when the gradient mapping ||x - P(x - g)|| drops
    below tol or when no trial step improves the objective. A stalled run
    counts as converged only if the mapping is below stall_tol * (1 + ||g||).
    """
    x = project_simplex(x0)
    fx = fun(x)
    if not np.isfinite(fx):
        raise ValueError("Starting point of the simplex descent has infinite objective")

    step = 1.0
    mapping = np.inf
    for it in range(1, max_iter + 1):
        g = grad(x)
        mapping = float(np.linalg.norm(x - project_simplex(x - g)))
        if mapping <= tol:
            return SimplexResult(x, fx, it, True, mapping)

        improved = False
        t = step
        while t > 1e-20:
            trial = project_simplex(x - t * g)
            f_trial = fun(trial)
            if np.isfinite(f_trial) and f_trial <= fx + armijo * float(g @ (trial - x)):
                improved = True
                break
            t *= 0.5

        if not improved or f_trial >= fx:
            converged = mapping <= stall_tol * (1.0 + float(np.linalg.norm(g)))
            logger.debug("Simplex descent stalled after %d iterations (mapping %.3g, converged %s)",
                         it, mapping, converged)
            return SimplexResult(x, fx, it, converged, mapping)

        x, fx = trial, f_trial
        step = min(2.0 * t, 1e6)

    return SimplexResult(x, fx, max_iter, False, mapping)
