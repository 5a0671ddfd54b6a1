"""
Rate Solver - local rate functions of Jackson and processor-sharing networks.

The local rate at velocity beta is

    L(beta) = inf { sum_v rbar_v * ell(c_v) : sum_v rbar_v c_v v = beta }

where rbar are the occupancy-averaged rates. For fixed rbar the inner
problem is solved through its concave dual

    max_lambda  <lambda, beta> - sum_v w_v (exp(<lambda, v>) - 1)

by damped Newton, with the optimal tilt c_v = exp(<lambda, v>). The outer
minimization over occupancies is a coordinate descent on tau in [0,1]^K
for Jackson networks and a projected-gradient descent on the occupancy
simplex for processor sharing.
"""

import functools
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog, minimize_scalar
from scipy.special import xlogy

from ratefn.local_model import LocalModel, facet_label, localize, tilt_array, tilt_dict
from ratefn.model import (
    FACET_TOL,
    Direction,
    ModelError,
    NetworkSpec,
    SpecFormatError,
    facet_index,
    format_direction,
    unit,
)
from ratefn.simplex import minimize_on_simplex

logger = logging.getLogger(__name__)

LAMBDA_DIVERGENCE = 1e3
GRAD_TOL = 1e-12
MAX_NEWTON = 200
FAST_NEWTON = 60
HESSIAN_DAMPING = 1e-14
SPAN_TOL = 1e-10
FACE_TOL = 1e-9
FACE_CACHE_SIZE = 4096
ZERO_TOL = 1e-12
OUTER_TOL = 1e-12
MAX_SWEEPS = 200
TAU_XATOL = 1e-10
SEGMENT_MIN = 1e-12
GRADIENT_CLIP = 1e8


class ConvergenceError(RuntimeError):
    """An iterative solver stopped without meeting its tolerance."""


# --- ENTROPY ---

def ell(a: float) -> float:
    """ell(a) = a log a - a + 1 with ell(0) = 1 and ell(a < 0) = inf."""
    if a < 0:
        return math.inf
    if a == 0:
        return 1.0
    return a * math.log(a) - a + 1.0


def ell_array(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    with np.errstate(invalid="ignore"):
        out = xlogy(a, a) - a + 1.0
    return np.where(a < 0, np.inf, out)


def _status(value: float) -> str:
    if not np.isfinite(value):
        return "infinite"
    return "zero" if value <= ZERO_TOL else "finite"


# --- INNER DUAL ---

@dataclass
class DualSolution:
    lam: np.ndarray
    c: Dict[Direction, float]
    value: float
    status: str
    iterations: int = 0
    face_reduced: bool = False


@dataclass
class _DualArrays:
    lam: np.ndarray
    c: np.ndarray
    value: float
    status: str
    iterations: int
    face_reduced: bool


def _minimal_face(V: np.ndarray, beta: np.ndarray) -> Optional[np.ndarray]:
    """
    Directions carrying positive weight in some representation beta = sum alpha_v v.

    Solves max sum t_v subject to V^T alpha = beta, t <= alpha, 0 <= t <= 1.
    Returns a fresh boolean mask over the rows of V, or None when beta is
    outside the cone.
    """
    V = np.ascontiguousarray(V, dtype=float)
    norm = float(np.linalg.norm(beta))
    target = np.ascontiguousarray(beta / norm if norm > 0 else beta, dtype=float)
    face = _face_lp(V.tobytes(), V.shape, target.tobytes())
    return None if face is None else np.array(face, dtype=bool)


@functools.lru_cache(maxsize=FACE_CACHE_SIZE)
def _face_lp(V_bytes: bytes, shape: Tuple[int, int], target_bytes: bytes) -> Optional[Tuple[bool, ...]]:
    V = np.frombuffer(V_bytes, dtype=float).reshape(shape)
    target = np.frombuffer(target_bytes, dtype=float)
    m, N = shape
    cost = np.concatenate([np.zeros(m), -np.ones(m)])
    A_eq = np.hstack([V.T, np.zeros((N, m))])
    A_ub = np.hstack([-np.eye(m), np.eye(m)])
    bounds = [(0, None)] * m + [(0, 1)] * m
    res = linprog(cost, A_ub=A_ub, b_ub=np.zeros(m), A_eq=A_eq, b_eq=target,
                  bounds=bounds, method="highs")

    if res.status == 2:
        return None
    if res.status != 0:
        raise ConvergenceError(f"Face identification LP failed: {res.message}")
    return tuple(bool(t) for t in res.x[m:] > FACE_TOL)


def _span_basis(V: np.ndarray) -> np.ndarray:
    """Orthonormal basis (columns) of the span of the rows of V."""
    if V.shape[0] == 0:
        return np.zeros((V.shape[1], 0))
    _, s, vt = np.linalg.svd(V, full_matrices=False)
    rank = int(np.sum(s > SPAN_TOL * max(1.0, s[0])))
    return vt[:rank].T


def _newton_dual(A: np.ndarray, w: np.ndarray, b: np.ndarray, basis: np.ndarray,
                 max_iter: int = MAX_NEWTON) -> Tuple[np.ndarray, int, str]:
    """
    Maximize g(mu) = <mu, b> - sum w (exp(A mu) - 1).

    Returns (mu, iterations, state) with state "converged", "diverged"
    (||basis @ mu|| grew past LAMBDA_DIVERGENCE) or "stalled" (iteration
    budget spent).
    """
    r = A.shape[1]
    mu = np.zeros(r)
    scale = 1.0 + float(np.linalg.norm(b)) + float(w.sum())

    def g(m):
        with np.errstate(over="ignore", invalid="ignore"):
            val = float(m @ b - w @ (np.exp(A @ m) - 1.0))
        return val if np.isfinite(val) else -np.inf

    g_mu = g(mu)
    for it in range(1, max_iter + 1):
        e = w * np.exp(A @ mu)
        grad = b - A.T @ e
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= GRAD_TOL * scale:
            return mu, it, "converged"

        H = (A.T * e) @ A + HESSIAN_DAMPING * np.eye(r)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]

        slope = float(grad @ step)
        t = 1.0
        while True:
            trial = mu + t * step
            g_trial = g(trial)
            if g_trial >= g_mu + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-16:
                break

        if t < 1e-16:
            # no representable ascent left
            if gnorm <= 1e-8 * scale:
                return mu, it, "converged"
            return mu, it, "stalled"

        mu, g_mu = trial, g_trial
        if np.linalg.norm(basis @ mu) > LAMBDA_DIVERGENCE:
            return mu, it, "diverged"

    return mu, max_iter, "stalled"


def _solve_on(V: np.ndarray, w: np.ndarray, beta: np.ndarray, use: np.ndarray,
              max_iter: int = MAX_NEWTON) -> Tuple[np.ndarray, int, str]:
    basis = _span_basis(V[use])
    if basis.shape[1] == 0:
        return np.zeros(V.shape[1]), 0, "converged"
    A = V[use] @ basis
    mu, iterations, state = _newton_dual(A, w[use], basis.T @ beta, basis, max_iter)
    return basis @ mu, iterations, state


def _solve_dual(V: np.ndarray, w: np.ndarray, beta: np.ndarray) -> _DualArrays:
    """Array form of inner_dual_solve. V is m x N, w has length m."""
    m, N = V.shape
    active = w > 0
    beta_scale = 1.0 + float(np.linalg.norm(beta))

    def infinite():
        return _DualArrays(np.full(N, np.nan), np.full(m, np.nan), math.inf, "infinite", 0, False)

    if not np.any(active):
        if np.linalg.norm(beta) <= SPAN_TOL * beta_scale:
            return _DualArrays(np.zeros(N), np.ones(m), 0.0, "zero", 0, False)
        return infinite()

    basis = _span_basis(V[active])
    if np.linalg.norm(beta - basis @ (basis.T @ beta)) > SPAN_TOL * beta_scale:
        return infinite()

    lam, iterations, state = _solve_on(V, w, beta, active, FAST_NEWTON)
    face_reduced = False
    on_face = active.copy()
    if state != "converged":
        face = _minimal_face(V[active], beta)
        if face is None:
            logger.debug("Dual %s after %d iterations: beta outside the attainable cone", state, iterations)
            return infinite()
        on_face[np.flatnonzero(active)[~face]] = False
        face_reduced = not bool(face.all())
        if face_reduced:
            logger.debug("Dual %s: reducing to a face with %d of %d directions",
                         state, int(on_face.sum()), int(active.sum()))
        lam, more, state = _solve_on(V, w, beta, on_face)
        iterations += more
        if state != "converged":
            raise ConvergenceError(
                f"Dual Newton {state} after {iterations} iterations with beta in the relative interior"
            )

    c = np.exp(np.clip(V @ lam, -700.0, 700.0))
    off_face = active & ~on_face
    c[off_face] = 0.0

    residual = float(np.linalg.norm((w * c) @ V - beta))
    if residual > 1e-8 * (beta_scale + float(w.sum())):
        raise ConvergenceError(f"Dual solution misses beta by {residual:.3e}")

    value = float(lam @ beta - w[on_face] @ (c[on_face] - 1.0) + w[off_face].sum())
    value = max(value, 0.0)
    return _DualArrays(lam, c, value, _status(value), iterations, face_reduced)


def inner_dual_solve(weights: Mapping[Direction, float], beta: Sequence[float]) -> DualSolution:
    """
    Solve the inner problem inf { sum_v w_v ell(c_v) : sum_v w_v c_v v = beta } by duality.

    Args:
        weights: Nonnegative weight per jump direction
        beta: Target velocity

    Returns:
        DualSolution with the optimal dual lambda, tilt c and value; status
        "infinite" when beta is not a nonnegative combination of the
        weighted directions.
    """
    directions = list(weights)
    if not directions:
        raise ModelError("inner_dual_solve needs at least one direction")
    V = np.array(directions, dtype=float)
    w = np.array([float(weights[v]) for v in directions])
    if np.any(w < 0):
        raise ModelError("Weights must be nonnegative")
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (V.shape[1],):
        raise ModelError(f"beta has shape {beta.shape}, directions have dimension {V.shape[1]}")

    res = _solve_dual(V, w, beta)
    c = {} if res.status == "infinite" else {v: float(x) for v, x in zip(directions, res.c)}
    return DualSolution(res.lam, c, res.value, res.status, res.iterations, res.face_reduced)


# --- OCCUPANCIES ---

def _facet_bits(n_coords: int) -> np.ndarray:
    """F x |K| boolean matrix: bit b of each facet mask."""
    masks = np.arange(1 << n_coords)
    return ((masks[:, None] >> np.arange(n_coords)) & 1).astype(bool)


def rho_from_tau(tau_K: Sequence[float]) -> np.ndarray:
    """
    Product-form occupancy over the facets of K for busy fractions tau.

    tau_K lists the coordinates of K in sorted order; bit b of a facet mask
    refers to the b-th entry.

    rho_I = prod_{k not in I} tau_k * prod_{k in I} (1 - tau_k), indexed by facet mask.
    """
    tau = np.asarray(tau_K, dtype=float)
    if np.any(tau < -FACET_TOL) or np.any(tau > 1 + FACET_TOL):
        raise ModelError("Busy fractions tau must lie in [0, 1]")
    tau = np.clip(tau, 0.0, 1.0)
    bits = _facet_bits(len(tau))
    return np.prod(np.where(bits, 1.0 - tau, tau), axis=1) if len(tau) else np.ones(1)


def tau_from_rho(rho: np.ndarray, K: Sequence[int], N: int) -> np.ndarray:
    """Busy fraction of each node: sum of rho over facets where the node is not empty."""
    rho = np.asarray(rho, dtype=float)
    tau = np.ones(N)
    bits = _facet_bits(len(K))
    for b, k in enumerate(K):
        tau[k] = float(rho[~bits[:, b]].sum())
    return tau


def rbar_from(model: LocalModel, rho: np.ndarray) -> np.ndarray:
    """Occupancy-averaged rates rbar_v = sum_I rho_I r_{I,v}, aligned with model.directions."""
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (model.n_facets,):
        raise ModelError(f"Occupancy has {rho.shape} entries, local model has {model.n_facets} facets")
    if np.any(rho < -FACET_TOL) or abs(rho.sum() - 1.0) > 1e-9:
        raise ModelError("Occupancy must be a probability vector over the facets")
    return rho @ model.table


# --- RATE SOLUTIONS ---

@dataclass
class RateSolution:
    value: float
    status: str
    K: Tuple[int, ...]
    beta: np.ndarray
    c: Optional[Dict[Direction, float]] = None
    occupancy: Optional[np.ndarray] = None
    tau: Optional[np.ndarray] = None
    rbar: Optional[Dict[Direction, float]] = None
    dual: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        """Plain-data form with 1-based facet and direction labels."""
        out = {
            "value": self.value,
            "status": self.status,
            "K": [k + 1 for k in self.K],
            "beta": [float(b) for b in self.beta],
        }
        if self.c is not None:
            out["c"] = {format_direction(v): x for v, x in self.c.items()}
        if self.rbar is not None:
            out["rbar"] = {format_direction(v): x for v, x in self.rbar.items()}
        if self.tau is not None:
            out["tau"] = [float(t) for t in self.tau]
        if self.occupancy is not None:
            bits = _facet_bits(len(self.K))
            out["rho"] = {
                facet_label([k for b, k in enumerate(self.K) if bits[mask, b]]): float(r)
                for mask, r in enumerate(self.occupancy)
            }
        if self.dual is not None:
            out["lambda"] = [float(x) for x in self.dual]
        return out


def _infinite_solution(model: LocalModel, beta: np.ndarray) -> RateSolution:
    return RateSolution(math.inf, "infinite", model.K, beta)


def _check_beta(model: LocalModel, beta: Sequence[float]) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (model.N,):
        raise ModelError(f"beta has shape {beta.shape}, expected ({model.N},)")
    return beta


def _outside_facet(model: LocalModel, beta: np.ndarray) -> bool:
    return any(abs(beta[k]) > FACET_TOL for k in model.K)


def local_rate_jackson(spec: NetworkSpec, K: Iterable[int], beta: Sequence[float],
                       model: Optional[LocalModel] = None) -> RateSolution:
    """
    Local rate of a Jackson network on F^{K,K}.

    rbar_v = tau_i r_{0,v} for service directions of node i, so the outer
    problem is a convex minimization over tau in [0,1]^K, done by cyclic
    coordinate descent with a bounded scalar search per coordinate.
    """
    model = model or localize(spec, K)
    beta = _check_beta(model, beta)
    if _outside_facet(model, beta):
        return _infinite_solution(model, beta)

    V = model.direction_matrix.astype(float)
    r0 = model.interior_rates
    owners = model.owners()
    owner_pos = np.array([model.K.index(o) if o is not None and o in model.K else -1 for o in owners])
    scaled = owner_pos >= 0

    def weights(tau_K):
        w = r0.copy()
        w[scaled] *= tau_K[owner_pos[scaled]]
        return w

    def objective(tau_K):
        return _solve_dual(V, weights(tau_K), beta).value

    tau = np.ones(len(model.K))
    best = objective(tau)
    if not np.isfinite(best):
        return _infinite_solution(model, beta)

    if model.K:
        for sweep in range(1, MAX_SWEEPS + 1):
            start = best
            for b in range(len(model.K)):
                def along(t, b=b):
                    trial = tau.copy()
                    trial[b] = t
                    return objective(trial)

                candidates = [(best, tau[b]), (along(0.0), 0.0), (along(1.0), 1.0)]
                res = minimize_scalar(along, bounds=(0.0, 1.0), method="bounded",
                                      options={"xatol": TAU_XATOL})
                candidates.append((float(res.fun), float(res.x)))
                best, tau[b] = min(candidates, key=lambda p: p[0])
            logger.debug("Jackson sweep %d: value %.15g tau %s", sweep, best, tau)
            if start - best < OUTER_TOL * (1.0 + abs(best)):
                break
        else:
            raise ConvergenceError(f"Coordinate descent on tau did not settle in {MAX_SWEEPS} sweeps")

    w = weights(tau)
    dual = _solve_dual(V, w, beta)
    tau_full = np.ones(model.N)
    tau_full[list(model.K)] = tau
    rho = rho_from_tau(tau)
    rbar = rbar_from(model, rho)
    if np.max(np.abs(rbar - w)) > 1e-9 * (1.0 + r0.max()):
        raise ModelError("Product-form occupancy does not reproduce the tau-scaled rates")

    return RateSolution(
        value=dual.value,
        status=dual.status,
        K=model.K,
        beta=beta,
        c=tilt_dict(model, dual.c),
        occupancy=rho,
        tau=tau_full,
        rbar=tilt_dict(model, w),
        dual=dual.lam,
    )


def ps_plus_tilt(A: np.ndarray, M: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """
    Optimal arrival tilt x = c_i^+ for one class with arrival weight A and service weight M.

    Positive root of A x^2 - beta x - M = 0; 0 when M = 0 and beta <= 0.
    """
    A, M, beta = np.broadcast_arrays(np.asarray(A, float), np.asarray(M, float), np.asarray(beta, float))
    root = np.sqrt(beta * beta + 4.0 * A * M)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = (beta + root) / (2.0 * A)
        neg = 2.0 * M / (root - beta)
    x = np.where(beta >= 0, pos, neg)
    return np.where((M <= 0) & (beta <= 0), 0.0, x)


def ps_coordinate_values(A: np.ndarray, M: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """
    Per-class rate inf { A ell(c+) + M ell(c-) : A c+ - M c- = beta }.

    Closed form beta log x - 2 A x + A + beta + M with x = ps_plus_tilt.
    """
    A, M, beta = np.broadcast_arrays(np.asarray(A, float), np.asarray(M, float), np.asarray(beta, float))
    x = ps_plus_tilt(A, M, beta)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = xlogy(beta, x) - 2.0 * A * x + A + beta + M
    val = np.where((M <= 0) & (beta < 0), np.inf, val)
    return np.maximum(val, 0.0)


def local_rate_ps(spec: NetworkSpec, K: Iterable[int], beta: Sequence[float],
                  model: Optional[LocalModel] = None) -> RateSolution:
    """
    Local rate of a processor-sharing network on F^{K,K}.

    For fixed rho the classes decouple (arrival weight a_i, service weight
    tau_i(rho)) and each has a closed form; rho is optimized on the simplex.
    """
    model = model or localize(spec, K)
    beta = _check_beta(model, beta)
    if _outside_facet(model, beta):
        return _infinite_solution(model, beta)

    N = model.N
    exit_cols = [model.direction_index(unit(N, i, -1)) for i in range(N)]
    S = model.table[:, exit_cols]
    A = np.asarray(spec.a, dtype=float)

    def fun(rho):
        return float(ps_coordinate_values(A, rho @ S, beta).sum())

    def grad(rho):
        x = ps_plus_tilt(A, rho @ S, beta)
        with np.errstate(divide="ignore"):
            slope = 1.0 - 1.0 / x
        return S @ np.maximum(slope, -GRADIENT_CLIP)

    rho0 = np.zeros(model.n_facets)
    rho0[0] = 1.0
    if model.n_facets == 1:
        rho = rho0
    else:
        res = minimize_on_simplex(fun, grad, rho0)
        if not res.converged:
            raise ConvergenceError(
                f"Occupancy descent did not converge in {res.iterations} iterations "
                f"(gradient mapping {res.gradient_mapping:.3e})"
            )
        rho = res.x
        logger.debug("PS occupancy descent: %d iterations, value %.15g", res.iterations, res.fun)

    rbar = rbar_from(model, rho)
    dual = _solve_dual(model.direction_matrix.astype(float), rbar, beta)
    closed = fun(rho)
    if np.isfinite(closed) and abs(closed - dual.value) > 1e-7 * (1.0 + closed):
        raise ConvergenceError(
            f"PS closed form {closed:.15g} and dual value {dual.value:.15g} disagree at the optimal occupancy"
        )

    return RateSolution(
        value=dual.value,
        status=dual.status,
        K=model.K,
        beta=beta,
        c=None if dual.status == "infinite" else tilt_dict(model, dual.c),
        occupancy=rho,
        tau=rho @ S,
        rbar=tilt_dict(model, rbar),
        dual=dual.lam,
    )


def local_rate(spec: NetworkSpec, K: Iterable[int], beta: Sequence[float],
               model: Optional[LocalModel] = None) -> RateSolution:
    """Dispatch to the Jackson or processor-sharing local solver."""
    if spec.kind == "jackson":
        return local_rate_jackson(spec, K, beta, model)
    return local_rate_ps(spec, K, beta, model)


def point_rate(spec: NetworkSpec, x: Sequence[float], beta: Sequence[float], tol: float = FACET_TOL) -> float:
    """
    L(x, beta): local rate of the model frozen at the facet of x.

    Raises:
        ModelError: If x is outside the orthant
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < -tol):
        raise ModelError(f"Point {x.tolist()} is outside the orthant")
    return local_rate(spec, sorted(facet_index(x, tol=tol)), beta).value


# --- TILTS WITH GIVEN OCCUPANCY ---

def tilt_solution(model: LocalModel, c: Mapping[Direction, float], rho: np.ndarray) -> RateSolution:
    """
    The (not necessarily optimal) point (c, rho): velocity and cost it induces.
    """
    c_arr = tilt_array(model, c)
    rbar = rbar_from(model, rho)
    beta = (rbar * c_arr) @ model.direction_matrix
    value = float(np.sum(np.where(rbar > 0, rbar * ell_array(c_arr), 0.0)))
    tau = tau_from_rho(rho, model.K, model.N) if model.spec.kind == "jackson" else rbar_exit_rates(model, rbar)
    return RateSolution(value, _status(value), model.K, beta, dict(c), np.asarray(rho, float), tau,
                        tilt_dict(model, rbar))


def rbar_exit_rates(model: LocalModel, rbar: np.ndarray) -> np.ndarray:
    N = model.N
    return np.array([rbar[model.direction_index(unit(N, i, -1))]
                     for i in range(N)])


def jackson_d_matrix(model: LocalModel, c: Mapping[Direction, float]) -> np.ndarray:
    """
    Columns d_i = -sum_{v served by i} c_v r_{0,v} v: velocity lost when node i idles.
    """
    c_arr = tilt_array(model, c)
    Vm = model.direction_matrix.astype(float)
    D = np.zeros((model.N, model.N))
    for col, owner in enumerate(model.owners()):
        if owner is not None:
            D[:, owner] -= c_arr[col] * model.interior_rates[col] * Vm[col]
    return D


def tau_for_tilt(model: LocalModel, c: Mapping[Direction, float], beta: Sequence[float]) -> np.ndarray:
    """
    Busy fractions tau solving the velocity constraint for a fixed tilt.

    Jackson: sum_i tau_i d_i = C+ a - beta. Processor sharing: per class
    tau_i = (c_i^+ a_i - beta_i) / c_i^-.

    Raises:
        ModelError: If the linear system is singular or a c_i^- is zero
    """
    beta = _check_beta(model, beta)
    c_arr = tilt_array(model, c)
    Vm = model.direction_matrix.astype(float)
    arrivals = np.array([o is None for o in model.owners()])
    inflow = (c_arr * model.interior_rates * arrivals) @ Vm

    if model.spec.kind == "jackson":
        D = jackson_d_matrix(model, c)
        try:
            return np.linalg.solve(D, inflow - beta)
        except np.linalg.LinAlgError:
            raise ModelError("Velocity system D tau = C+a - beta is singular for this tilt")

    N = model.N
    c_minus = np.array([c_arr[model.direction_index(unit(N, i, -1))]
                        for i in range(N)])
    if np.any(c_minus <= 0):
        raise ModelError("Service tilts c- must be positive to recover tau")
    return (inflow - beta) / c_minus


# --- PATHS ---

@dataclass(frozen=True, eq=False)
class PiecewisePath:
    """Continuous piecewise-linear path on [0, 1] through the given breakpoints."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != times.shape[0] or times.shape[0] < 2:
            raise ModelError("Path needs at least two breakpoints with one value row each")
        if abs(times[0]) > 0 or abs(times[-1] - 1.0) > 0:
            raise ModelError("Path breakpoints must start at 0 and end at 1")
        if np.any(np.diff(times) <= 0):
            raise ModelError("Path breakpoints must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_pairs(cls, pairs: Sequence) -> "PiecewisePath":
        """From the file form [[t, [x1, ...]], ...]."""
        try:
            times = np.array([float(t) for t, _ in pairs])
            values = np.array([[float(v) for v in x] for _, x in pairs])
        except (TypeError, ValueError) as e:
            raise SpecFormatError(f"Malformed path: {e}")
        return cls(times, values)

    def to_pairs(self) -> list:
        return [[float(t), [float(v) for v in x]] for t, x in zip(self.times, self.values)]

    @classmethod
    def linear(cls, start: Sequence[float], slope: Sequence[float]) -> "PiecewisePath":
        start = np.asarray(start, float)
        return cls(np.array([0.0, 1.0]), np.vstack([start, start + np.asarray(slope, float)]))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.times, self.values[:, i]) for i in range(self.dim)], axis=-1)

    def slopes(self) -> np.ndarray:
        return np.diff(self.values, axis=0) / np.diff(self.times)[:, None]

    def check_orthant(self, tol: float = FACET_TOL) -> None:
        if np.any(self.values < -tol):
            raise ModelError("Path leaves the nonnegative orthant")


@dataclass
class PathSegment:
    t0: float
    t1: float
    K: Tuple[int, ...]
    beta: np.ndarray
    value: float


def path_rate_segments(spec: NetworkSpec, phi: PiecewisePath, tol: float = FACET_TOL) -> List[PathSegment]:
    """
    Per-piece breakdown of the path functional.

    A linear piece that stays in the orthant has a constant facet on its
    open interior, so each piece is evaluated at its midpoint.
    """
    phi.check_orthant(tol)
    if phi.dim != spec.N:
        raise ModelError(f"Path has dimension {phi.dim}, network has N={spec.N}")

    cache: Dict[Tuple[int, ...], LocalModel] = {}
    segments = []
    for k, beta in enumerate(phi.slopes()):
        t0, t1 = float(phi.times[k]), float(phi.times[k + 1])
        if t1 - t0 < SEGMENT_MIN:
            continue
        mid = 0.5 * (phi.values[k] + phi.values[k + 1])
        K = tuple(sorted(facet_index(mid, tol=tol)))
        if K not in cache:
            cache[K] = localize(spec, K)
        value = local_rate(spec, K, beta, cache[K]).value
        segments.append(PathSegment(t0, t1, K, beta, value))
    return segments


def path_rate(spec: NetworkSpec, phi: PiecewisePath, tol: float = FACET_TOL) -> float:
    """Integral over [0, 1] of L(phi(t), phi'(t)) for a piecewise-linear path."""
    segments = path_rate_segments(spec, phi, tol)
    if any(not np.isfinite(s.value) for s in segments):
        return math.inf
    return math.fsum((s.t1 - s.t0) * s.value for s in segments)


# --- JENSEN ---

def jensen_gap(model: LocalModel, rho: np.ndarray, u: np.ndarray) -> Tuple[float, float]:
    """
    Both sides of the Jensen step between the facet-wise and averaged costs.

    lhs = sum_I rho_I sum_v r_{I,v} ell(u_{I,v} / r_{I,v})
    rhs = sum_v rbar_v ell(c_v) with c_v = sum_I rho_I u_{I,v} / rbar_v

    Args:
        rho: Occupancy over the facets
        u: Facet-wise tilted rates, shape (facets, directions), zero where r is zero
    """
    rho = np.asarray(rho, dtype=float)
    u = np.asarray(u, dtype=float)
    r = model.table
    if u.shape != r.shape:
        raise ModelError(f"u has shape {u.shape}, rate table has {r.shape}")
    if np.any(u < 0) or np.any((r == 0) & (u > 0)):
        raise ModelError("u must be nonnegative and vanish where the facet rate vanishes")

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(r > 0, u / r, 1.0)
    lhs = float(np.sum(rho[:, None] * np.where(r > 0, r * ell_array(ratio), 0.0)))

    rbar = rho @ r
    ubar = rho @ u
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(rbar > 0, ubar / rbar, 1.0)
    rhs = float(np.sum(np.where(rbar > 0, rbar * ell_array(c), 0.0)))
    return lhs, rhs
