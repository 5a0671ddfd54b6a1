"""
Brute-force oracle for local rates of small networks.

Grid search over occupancies, with the dual supremum for each occupancy
found by a vectorized coarse grid followed by zooming around the best
point (the dual is concave, so the zoom cannot get trapped). Only meant
for N <= 2 and |K| <= 2 as an independent cross-check of the solvers.
"""

import logging
import math
from typing import Iterable, Sequence

import numpy as np

from ratefn.local_model import localize
from ratefn.model import FACET_TOL, ModelError, NetworkSpec, unit
from ratefn.rate_solver import ps_coordinate_values

logger = logging.getLogger(__name__)

LAMBDA_BOX = 6.0
COARSE_STEP = 0.25
ZOOM_LEVELS = 14
ZOOM_HALF_WIDTH = 4
MAX_ORACLE_DIM = 2
TAU_CHUNK = 512


def _offset_grid(N: int, half_width: int) -> np.ndarray:
    axis = np.arange(-half_width, half_width + 1, dtype=float)
    mesh = np.meshgrid(*([axis] * N), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _dual_sup(V: np.ndarray, W: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """
    sup over the lambda box of <lambda, beta> - sum_v W[t, v] (exp(<lambda, v>) - 1), per row t of W.
    """
    N = V.shape[1]
    n_coarse = int(round(2 * LAMBDA_BOX / COARSE_STEP))
    axis = np.linspace(-LAMBDA_BOX, LAMBDA_BOX, n_coarse + 1)
    mesh = np.meshgrid(*([axis] * N), indexing="ij")
    coarse = np.stack([m.ravel() for m in mesh], axis=-1)
    coarse_lin = coarse @ beta
    coarse_exp = np.expm1(coarse @ V.T)

    centers = np.empty((W.shape[0], N))
    for start in range(0, W.shape[0], TAU_CHUNK):
        block = W[start:start + TAU_CHUNK]
        g = coarse_lin[None, :] - block @ coarse_exp.T
        centers[start:start + TAU_CHUNK] = coarse[np.argmax(g, axis=1)]

    offsets = _offset_grid(N, ZOOM_HALF_WIDTH)
    step = COARSE_STEP
    best = None
    for _ in range(ZOOM_LEVELS):
        step /= 2.0
        cand = np.clip(centers[:, None, :] + step * offsets[None, :, :], -LAMBDA_BOX, LAMBDA_BOX)
        g = cand @ beta - np.einsum("tv,tpv->tp", W, np.expm1(cand @ V.T))
        idx = np.argmax(g, axis=1)
        centers = cand[np.arange(len(idx)), idx]
        best = g[np.arange(len(idx)), idx]
    return best


def _tau_grid(n_coords: int, resolution: float) -> np.ndarray:
    n = int(round(1.0 / resolution))
    axis = np.linspace(0.0, 1.0, n + 1)
    if n_coords == 0:
        return np.ones((1, 0))
    mesh = np.meshgrid(*([axis] * n_coords), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _simplex_grid(n_facets: int, resolution: float) -> np.ndarray:
    n = int(round(1.0 / resolution))
    if n_facets == 1:
        return np.ones((1, 1))
    axis = np.arange(n + 1)
    mesh = np.meshgrid(*([axis] * (n_facets - 1)), indexing="ij")
    heads = np.stack([m.ravel() for m in mesh], axis=-1)
    heads = heads[heads.sum(axis=1) <= n]
    last = n - heads.sum(axis=1, keepdims=True)
    return np.hstack([last, heads]).astype(float) / n


def brute_force_rate(spec: NetworkSpec, K: Iterable[int], beta: Sequence[float],
                     resolution: float = 0.01) -> float:
    """
    Grid-search approximation of the local rate on F^{K,K}.

    Raises:
        ModelError: If the instance is too large for the oracle
    """
    model = localize(spec, K)
    if len(model.K) > MAX_ORACLE_DIM or model.N > MAX_ORACLE_DIM:
        raise ModelError(f"Oracle supports N <= {MAX_ORACLE_DIM} and |K| <= {MAX_ORACLE_DIM}")
    if not 0 < resolution <= 0.5:
        raise ModelError("Oracle resolution must lie in (0, 0.5]")
    beta = np.asarray(beta, dtype=float)
    if any(abs(beta[k]) > FACET_TOL for k in model.K):
        return math.inf

    if spec.kind == "processor_sharing":
        S = model.table[:, [model.direction_index(unit(model.N, i, -1)) for i in range(model.N)]]
        rho = _simplex_grid(model.n_facets, resolution)
        values = ps_coordinate_values(np.asarray(spec.a)[None, :], rho @ S, beta[None, :]).sum(axis=1)
        best = float(values.min())
        logger.debug("PS oracle: %d occupancy points, min %.6g", len(rho), best)
        return best

    V = model.direction_matrix.astype(float)
    owners = model.owners()
    tau = _tau_grid(len(model.K), resolution)
    W = np.tile(model.interior_rates, (len(tau), 1))
    for col, owner in enumerate(owners):
        if owner is not None and owner in model.K:
            W[:, col] *= tau[:, model.K.index(owner)]

    best = float(_dual_sup(V, W, beta).min())
    logger.debug("Jackson oracle: %d tau points, min %.6g", len(tau), best)
    return best
