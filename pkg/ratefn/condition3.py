"""
Occupancy uniqueness and strictly positive perturbation of rate solutions.

check_condition3_uniqueness confirms that the averaged rates are a
Lipschitz function of beta for a fixed tilt. perturb_positive turns a
solution with some zero tilts into nearby solutions with all tilts
positive and the same velocity.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import List, Mapping, Sequence, Set

import numpy as np

from ratefn.local_model import LocalModel, tilt_array, tilt_dict
from ratefn.model import (
    FACET_TOL,
    Direction,
    ModelError,
    classify_direction,
    route_direction,
    routing_graph,
    unit,
)
from ratefn.rate_solver import (
    RateSolution,
    jackson_d_matrix,
    rbar_from,
    rho_from_tau,
    tau_for_tilt,
    tau_from_rho,
    tilt_solution,
)

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-9
ZERO_TILT = 0.0


@dataclass
class UniquenessReport:
    tau: np.ndarray
    tau_prime: np.ndarray
    rbar: np.ndarray
    rbar_prime: np.ndarray
    deviation: float
    bound: float
    lipschitz: float
    passed: bool


def _rbar_for_tau(model: LocalModel, tau: np.ndarray) -> np.ndarray:
    rbar = model.interior_rates.copy()
    for col, owner in enumerate(model.owners()):
        if owner is None:
            continue
        if model.spec.kind == "jackson":
            rbar[col] *= tau[owner]
        else:
            rbar[col] = tau[owner]
    return rbar


def check_condition3_uniqueness(model: LocalModel, c: Mapping[Direction, float],
                                beta: Sequence[float], beta_prime: Sequence[float]) -> UniquenessReport:
    """
    Solve the velocity constraint for rbar at beta and beta' with the same tilt
    and compare ||rbar - rbar'|| against Lip * ||beta - beta'||.

    Lip is ||D^-1||_2 times the largest norm of one node's service rates
    for Jackson networks and 1 / min c_i^- for processor sharing.

    Raises:
        ModelError: If beta or beta' leave F^{K,K} or the system is singular
    """
    beta = np.asarray(beta, dtype=float)
    beta_prime = np.asarray(beta_prime, dtype=float)
    for b in (beta, beta_prime):
        if any(abs(b[k]) > FACET_TOL for k in model.K):
            raise ModelError(f"Velocity {b.tolist()} is not in F^(K,K) for K={[k + 1 for k in model.K]}")

    tau = tau_for_tilt(model, c, beta)
    tau_prime = tau_for_tilt(model, c, beta_prime)
    rbar = _rbar_for_tau(model, tau)
    rbar_prime = _rbar_for_tau(model, tau_prime)

    if model.spec.kind == "jackson":
        D = jackson_d_matrix(model, c)
        owners = np.array([-1 if o is None else o for o in model.owners()])
        spread = max(float(np.linalg.norm(model.interior_rates[owners == i])) for i in range(model.N))
        lipschitz = float(np.linalg.norm(np.linalg.inv(D), 2)) * spread
    else:
        c_arr = tilt_array(model, c)
        c_minus = np.array([c_arr[model.direction_index(unit(model.N, i, -1))] for i in range(model.N)])
        lipschitz = float(1.0 / c_minus.min())

    deviation = float(np.linalg.norm(rbar - rbar_prime))
    bound = lipschitz * float(np.linalg.norm(beta - beta_prime))
    passed = deviation <= bound * (1.0 + 1e-9) + 1e-12
    if not passed:
        logger.warning("Occupancy uniqueness bound violated: %.3e > %.3e", deviation, bound)
    return UniquenessReport(tau, tau_prime, rbar, rbar_prime, deviation, bound, lipschitz, passed)


# --- PERTURBATION ---

def _bfs_chain(graph: List[List[int]], sources: Set[int], targets: Set[int]) -> List[int]:
    """Shortest self-avoiding node chain from any source to any target."""
    parent = {s: None for s in sources}
    queue = deque(sorted(sources))
    while queue:
        u = queue.popleft()
        if u in targets:
            chain = [u]
            while parent[chain[-1]] is not None:
                chain.append(parent[chain[-1]])
            return chain[::-1]
        for w in graph[u]:
            if w not in parent:
                parent[w] = u
                queue.append(w)
    raise ModelError(f"No routing chain from {sorted(sources)} to {sorted(targets)}")


def _cancelling_chain(model: LocalModel, v: Direction) -> List[Direction]:
    """
    Jump directions whose sum is -v, built from arrivals, exits and routings of V.
    """
    N = model.N
    spec = model.spec
    graph = routing_graph(spec)
    arrival_nodes = {i for i in range(N) if spec.a[i] > 0}
    exit_nodes = {i for i in range(N) if spec.exit_prob(i) > 0}

    def routes(chain):
        return [route_direction(N, s, t) for s, t in zip(chain[:-1], chain[1:])]

    kind, i, j = classify_direction(v)
    if kind == "arrival":
        chain = _bfs_chain(graph, {i}, exit_nodes)
        return routes(chain) + [unit(N, chain[-1], -1)]
    if kind == "exit":
        chain = _bfs_chain(graph, arrival_nodes, {i})
        return [unit(N, chain[0])] + routes(chain)
    return routes(_bfs_chain(graph, {j}, {i}))


def _perturb_jackson(model: LocalModel, c: np.ndarray, rho: np.ndarray, kappa: float):
    if kappa > 1.0:
        raise ModelError("kappa must not exceed 1 (it becomes the busy fraction of idle nodes)")

    tau = tau_from_rho(rho, model.K, model.N)
    owners = model.owners()
    r0 = model.interior_rates
    idle = tau <= FACET_TOL

    deficient = [col for col, owner in enumerate(owners)
                 if c[col] <= ZERO_TILT or (owner is not None and idle[owner])]

    extra = np.zeros(len(model.directions))
    for col in deficient:
        extra[col] += 1.0
        for w in _cancelling_chain(model, model.directions[col]):
            extra[model.direction_index(w)] += 1.0
    logger.debug("Perturbation: %d deficient directions, chain counts %s", len(deficient), extra)

    c_new = c.copy()
    for col, owner in enumerate(owners):
        if owner is None:
            c_new[col] = c[col] + kappa * extra[col] / r0[col]
        elif idle[owner]:
            c_new[col] = extra[col] / r0[col]
        else:
            c_new[col] = c[col] + kappa * extra[col] / (tau[owner] * r0[col])

    tau_new = np.where(idle, kappa, tau)
    rho_new = rho_from_tau(tau_new[list(model.K)])
    return c_new, rho_new


def _perturb_ps(model: LocalModel, c: np.ndarray, rho: np.ndarray, beta: np.ndarray, kappa: float):
    rho_new = rho.copy()
    if rho[0] <= 0:
        star = 1 + int(np.argmax(rho[1:]))
        if rho[star] <= kappa:
            raise ModelError(f"kappa={kappa} exceeds the largest shiftable occupancy {rho[star]}")
        rho_new[0] = kappa
        rho_new[star] -= kappa

    rbar_new = rbar_from(model, rho_new)
    c_new = c.copy()
    for i in range(model.N):
        plus = model.direction_index(unit(model.N, i))
        minus = model.direction_index(unit(model.N, i, -1))
        c_new[plus] = c[plus] + kappa
        c_new[minus] = (c_new[plus] * model.spec.a[i] - beta[i]) / rbar_new[minus]
    return c_new, rho_new


def perturb_positive(model: LocalModel, solution: RateSolution, kappa: float) -> RateSolution:
    """
    Nearby solution of the velocity constraint with every tilt strictly positive.

    The velocity beta is preserved exactly. As kappa decreases to 0 the tilts
    converge to the input wherever rbar_v > 0 and stay bounded elsewhere.

    Raises:
        ModelError: If kappa is out of range or the input does not satisfy the
            velocity constraint
    """
    if kappa <= 0:
        raise ModelError("kappa must be positive")
    if solution.c is None or solution.occupancy is None:
        raise ModelError("Perturbation needs a finite solution with tilt and occupancy")

    c = tilt_array(model, solution.c)
    rho = np.asarray(solution.occupancy, dtype=float)
    beta = np.asarray(solution.beta, dtype=float)
    velocity = (rbar_from(model, rho) * c) @ model.direction_matrix
    residual = float(np.linalg.norm(velocity - beta))
    if residual > RESIDUAL_TOL * (1.0 + float(np.linalg.norm(beta))):
        raise ModelError(f"Input misses the velocity constraint by {residual:.3e}")

    if model.spec.kind == "jackson":
        c_new, rho_new = _perturb_jackson(model, c, rho, kappa)
    else:
        c_new, rho_new = _perturb_ps(model, c, rho, beta, kappa)

    result = tilt_solution(model, tilt_dict(model, c_new), rho_new)
    drift = float(np.linalg.norm(result.beta - beta))
    if drift > RESIDUAL_TOL * (1.0 + float(np.linalg.norm(beta))):
        raise ModelError(f"Perturbation moved the velocity by {drift:.3e}")
    if np.any(c_new <= 0):
        raise ModelError("Perturbation left a zero tilt")
    return result

