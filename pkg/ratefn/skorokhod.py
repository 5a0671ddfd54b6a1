"""
Skorokhod problems with oblique reflection on polyhedral domains.

An instance is a list of (normal n_i, reflection direction d_i) pairs with
domain G = {x : <x, n_i> >= 0 for all i}. Builders cover the tilted Jackson
and processor-sharing instances; checks cover the spectral-radius
regularity criterion, cone membership of facet velocity gaps and the
a-posteriori verification of numerical solutions.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from ratefn.local_model import LocalModel, facet_drift_gap, facet_label, lln_drift, localize, tilt_array
from ratefn.model import Direction, ModelError, NetworkSpec, unit
from ratefn.rate_solver import ConvergenceError, PiecewisePath, jackson_d_matrix

logger = logging.getLogger(__name__)

ACTIVE_TOL = 1e-9
CONE_TOL = 1e-9
RANK_TOL = 1e-10
POWER_TOL = 1e-10
POWER_MAX_ITER = 100_000
FIXED_POINT_TOL = 1e-13
FIXED_POINT_MAX_ITER = 10_000
VERIFY_TOL = 1e-6
UNIT_TOL = 1e-9
REGULARITY_MARGIN = 1e-9


class SPVerificationError(RuntimeError):
    """A numerical Skorokhod solution failed its a-posteriori checks."""


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ModelError("Cannot normalize a zero vector")
    return v / norm


@dataclass(frozen=True, eq=False)
class SPInstance:
    normals: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        n = np.atleast_2d(np.asarray(self.normals, dtype=float))
        d = np.atleast_2d(np.asarray(self.directions, dtype=float))
        if n.shape != d.shape or n.shape[0] == 0:
            raise ModelError(f"Normals {n.shape} and directions {d.shape} must be matching nonempty lists")
        for label, arr in (("normal", n), ("direction", d)):
            bad = np.flatnonzero(np.abs(np.linalg.norm(arr, axis=1) - 1.0) > UNIT_TOL)
            if bad.size:
                raise ModelError(f"{label} {bad[0] + 1} is not a unit vector")
        if np.any(np.einsum("ij,ij->i", n, d) <= 0):
            raise ModelError("Each reflection direction must point into its half-space (<d_i, n_i> > 0)")
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "directions", d)

    @property
    def q(self) -> int:
        return self.normals.shape[0]

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    def active(self, x: Sequence[float]) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.normals @ x <= ACTIVE_TOL * (1.0 + np.linalg.norm(x))

    def contains(self, x: Sequence[float], tol: float = ACTIVE_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(self.normals @ x >= -tol * (1.0 + np.linalg.norm(x))))

    def to_dict(self) -> dict:
        return {"normals": self.normals.tolist(), "directions": self.directions.tolist()}


# --- BUILDERS ---

def sp_for_jackson(spec: NetworkSpec, c: Mapping[Direction, float]) -> SPInstance:
    """
    Orthant with normals e_i and directions d_i proportional to
    -sum_j c_ij sigma_i p_ij (e_j - e_i) + c_i^- sigma_i p_i0 e_i.
    """
    if spec.kind != "jackson":
        raise ModelError("sp_for_jackson needs a Jackson network")
    model = localize(spec, ())
    D = jackson_d_matrix(model, c)
    directions = np.array([_normalize(D[:, i]) for i in range(spec.N)])
    return SPInstance(np.eye(spec.N), directions)


def _ps_scaling(spec: NetworkSpec, c: Mapping[Direction, float]) -> np.ndarray:
    """B = C Lambda with C = diag(c_i^-), Lambda = diag(sigma_i)."""
    N = spec.N
    try:
        c_minus = np.array([float(c[unit(N, i, -1)]) for i in range(N)])
    except KeyError as e:
        raise ModelError(f"Tilt vector has no entry for direction {e}")
    if np.any(c_minus <= 0):
        raise ModelError("Service tilts c- must be positive")
    return np.diag(c_minus * np.asarray(spec.sigma, dtype=float))


def sp_for_ps(spec: NetworkSpec, c: Mapping[Direction, float]) -> SPInstance:
    """
    Orthant plus the supplemental constraint at the origin: d_i ~ C Lambda (e_i - f)
    for i <= N and n_{N+1} = d_{N+1} ~ C Lambda 1.
    """
    if spec.kind != "processor_sharing":
        raise ModelError("sp_for_ps needs a processor-sharing network")
    N = spec.N
    B = _ps_scaling(spec, c)
    f = np.asarray(spec.f, dtype=float)
    directions = [_normalize(B @ (np.eye(N)[i] - f)) for i in range(N)]
    extra = _normalize(B @ np.ones(N))
    normals = np.vstack([np.eye(N), extra])
    return SPInstance(normals, np.vstack(directions + [extra]))


def sp_for_network(spec: NetworkSpec, c: Mapping[Direction, float]) -> SPInstance:
    if spec.kind == "jackson":
        return sp_for_jackson(spec, c)
    return sp_for_ps(spec, c)


def canonical_ps_sp(f: Sequence[float]) -> SPInstance:
    """Untilted processor-sharing instance: d_i ~ e_i - f, plus n = d ~ 1 at the origin."""
    f = np.asarray(f, dtype=float)
    N = len(f)
    extra = np.ones(N) / np.sqrt(N)
    directions = [_normalize(np.eye(N)[i] - f) for i in range(N)]
    return SPInstance(np.vstack([np.eye(N), extra]), np.vstack(directions + [extra]))


def transform_sp(sp: SPInstance, B: np.ndarray) -> SPInstance:
    """Change of variables: n_i -> B n_i, d_i -> B d_i, both renormalized."""
    B = np.asarray(B, dtype=float)
    normals = np.array([_normalize(B @ n) for n in sp.normals])
    directions = np.array([_normalize(B @ d) for d in sp.directions])
    return SPInstance(normals, directions)


def check_ps_canonical(sp: SPInstance, spec: NetworkSpec, c: Mapping[Direction, float],
                       atol: float = 1e-12) -> bool:
    """True if sp is the C Lambda image of the canonical instance for f."""
    image = transform_sp(canonical_ps_sp(spec.f), _ps_scaling(spec, c))
    return (image.q == sp.q
            and np.allclose(image.normals, sp.normals, atol=atol)
            and np.allclose(image.directions, sp.directions, atol=atol))


# --- CONES ---

def cone_membership(sp: SPInstance, x: Sequence[float], gamma: Sequence[float],
                    tol: float = CONE_TOL) -> bool:
    """
    Whether gamma lies in the cone spanned by the directions active at x.

    Raises:
        ModelError: If no constraint is active at x
    """
    active = sp.active(x)
    if not np.any(active):
        raise ModelError(f"No constraint is active at {np.asarray(x).tolist()}")
    _, residual = nnls(sp.directions[active].T, np.asarray(gamma, dtype=float))
    return residual <= tol


def localize_sp(sp: SPInstance, x: Sequence[float]) -> SPInstance:
    """Sub-instance of the constraints active at x."""
    active = sp.active(x)
    if not np.any(active):
        raise ModelError(f"No constraint is active at {np.asarray(x).tolist()}")
    return SPInstance(sp.normals[active], sp.directions[active])


# --- REGULARITY ---

@dataclass
class RegularityVerdict:
    applicable: bool
    q_matrix: Optional[np.ndarray] = None
    spectral_radius: Optional[float] = None
    regular: Optional[bool] = None
    iterations: int = 0


def q_matrix(sp: SPInstance) -> np.ndarray:
    """q_ij = |<d_i, n_j>| / <d_i, n_i> off the diagonal, 0 on it."""
    inner = sp.directions @ sp.normals.T
    Q = np.abs(inner) / np.diag(inner)[:, None]
    np.fill_diagonal(Q, 0.0)
    return Q


def spectral_radius_nonnegative(Q: np.ndarray) -> tuple:
    """
    Perron root of a nonnegative matrix by power iteration on I + Q.

    Returns:
        (spectral radius, iterations)
    """
    q = Q.shape[0]
    M = np.eye(q) + Q
    x = np.ones(q) / q
    estimate = 1.0
    for it in range(1, POWER_MAX_ITER + 1):
        y = M @ x
        ratio = float(y.sum() / x.sum())
        x = y / y.sum()
        if abs(ratio - estimate) <= POWER_TOL * ratio and it > 1:
            return ratio - 1.0, it
        estimate = ratio
    raise ConvergenceError(f"Power iteration did not converge in {POWER_MAX_ITER} iterations")


def regularity_Q(sp: SPInstance) -> RegularityVerdict:
    """
    Spectral-radius criterion: regular when sigma(Q) < 1 - REGULARITY_MARGIN.

    Only applicable when the directions are linearly independent (q <= N and
    rank q); otherwise the verdict is "not applicable" and regularity must be
    established another way.
    """
    if sp.q > sp.dim or np.linalg.matrix_rank(sp.directions, tol=RANK_TOL) < sp.q:
        return RegularityVerdict(applicable=False)
    Q = q_matrix(sp)
    radius, iterations = spectral_radius_nonnegative(Q)
    logger.debug("sigma(Q) = %.12g after %d power iterations", radius, iterations)
    return RegularityVerdict(True, Q, radius, radius < 1.0 - REGULARITY_MARGIN, iterations)


# --- CONDITION 4 ---

@dataclass
class Condition4Report:
    passed: bool
    failures: List[str] = field(default_factory=list)
    checked_facets: int = 0


def check_condition4(model: LocalModel, c: Mapping[Direction, float], sp: SPInstance) -> Condition4Report:
    """
    Check the reflection structure a tilted local model induces.

    The domain must be the orthant on the K coordinates, each direction must
    point into its half-space and, for every nonempty facet I of K, the
    velocity change on I must lie in the cone of directions active there.
    """
    failures = []
    tilt_array(model, c)
    N = model.N

    if np.any(sp.normals < -UNIT_TOL):
        failures.append("a normal has a negative component, so G does not contain the orthant")
    for k in model.K:
        if not np.any(np.all(np.abs(sp.normals - np.eye(N)[k]) <= UNIT_TOL, axis=1)):
            failures.append(f"normal e{k + 1} missing")
    if np.any(np.einsum("ij,ij->i", sp.normals, sp.directions) <= 0):
        failures.append("a direction does not point into its half-space")

    checked = 0
    for size in range(1, len(model.K) + 1):
        for I in combinations(model.K, size):
            checked += 1
            gap = facet_drift_gap(model, I, c)
            norm = np.linalg.norm(gap)
            if norm <= CONE_TOL:
                continue
            point = np.array([0.0 if i in I else 1.0 for i in range(N)])
            try:
                inside = cone_membership(sp, point, gap / norm)
            except ModelError:
                inside = False
            if not inside:
                failures.append(f"facet {facet_label(I)}: velocity gap {gap.tolist()} outside the reflection cone")

    return Condition4Report(not failures, failures, checked)


def check_drift_direction(model: LocalModel, c: Mapping[Direction, float], beta: Sequence[float],
                           sp: SPInstance) -> bool:
    """
    Whether (beta - beta0) / ||beta - beta0|| is a reflection direction on F^{K,K},
    beta0 being the interior drift of the tilted dynamics.
    """
    beta = np.asarray(beta, dtype=float)
    gap = beta - lln_drift(model, c)
    norm = np.linalg.norm(gap)
    if norm <= CONE_TOL:
        return True
    if not model.K:
        return False
    point = np.array([0.0 if i in model.K else 1.0 for i in range(model.N)])
    return cone_membership(sp, point, gap / norm)


# --- NUMERICAL SOLUTION ---

@dataclass
class SPSolution:
    times: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    eta: np.ndarray
    total_variation: float


def _project_step(sp: SPInstance, phi_pred: np.ndarray) -> np.ndarray:
    """
    phi = phi_pred + sum_i alpha_i d_i with phi in G and alpha_i > 0 only on
    active constraints, by projected Gauss-Seidel on the multipliers.
    """
    n, d = sp.normals, sp.directions
    if np.all(n @ phi_pred >= 0):
        return phi_pred
    nd = np.einsum("ij,ij->i", n, d)
    alpha = np.zeros(sp.q)
    phi = phi_pred.copy()
    scale = 1.0 + np.linalg.norm(phi_pred)
    for it in range(1, FIXED_POINT_MAX_ITER + 1):
        change = 0.0
        for i in range(sp.q):
            new = max(0.0, alpha[i] - float(n[i] @ phi) / nd[i])
            delta = new - alpha[i]
            if delta != 0.0:
                phi += delta * d[i]
                alpha[i] = new
                change = max(change, abs(delta))
        if change <= FIXED_POINT_TOL * scale:
            return phi
    raise ConvergenceError(f"Skorokhod projection did not settle in {FIXED_POINT_MAX_ITER} sweeps")


def solve_sp(sp: SPInstance, psi: PiecewisePath, dt: float) -> SPSolution:
    """
    Time-stepped solution (phi, eta) of the Skorokhod problem for psi on a
    uniform grid of step dt, verified a posteriori.

    Raises:
        ModelError: If psi(0) is outside G or dt is not in (0, 1]
        ConvergenceError: If a projection step fails to settle
        SPVerificationError: If the computed pair fails verification
    """
    if not 0 < dt <= 1:
        raise ModelError("dt must lie in (0, 1]")
    if psi.dim != sp.dim:
        raise ModelError(f"Path has dimension {psi.dim}, instance has {sp.dim}")
    steps = max(1, int(round(1.0 / dt)))
    times = np.linspace(0.0, 1.0, steps + 1)
    psi_k = psi.evaluate(times)
    if not sp.contains(psi_k[0]):
        raise ModelError(f"psi(0) = {psi_k[0].tolist()} is outside the domain")

    eta = np.zeros_like(psi_k)
    phi = np.zeros_like(psi_k)
    phi[0] = psi_k[0]
    for k in range(steps):
        pred = phi[k] + (psi_k[k + 1] - psi_k[k])
        nxt = _project_step(sp, pred)
        eta[k + 1] = nxt - psi_k[k + 1]
        phi[k + 1] = psi_k[k + 1] + eta[k + 1]

    tv = float(np.linalg.norm(np.diff(eta, axis=0), axis=1).sum())
    solution = SPSolution(times, psi_k, phi, eta, tv)
    verify_sp(sp, solution)
    return solution


def verify_sp(sp: SPInstance, sol: SPSolution) -> None:
    """
    A-posteriori check of a discrete solution: phi = psi + eta, phi in G,
    eta(0) = 0, eta moves only when phi is on the boundary and then within
    the cone of the active directions.

    Raises:
        SPVerificationError: On the first violated property
    """
    psi_tv = float(np.linalg.norm(np.diff(sol.psi, axis=0), axis=1).sum())
    tol = VERIFY_TOL * (1.0 + psi_tv)

    if np.max(np.abs(sol.phi - sol.psi - sol.eta)) > tol:
        raise SPVerificationError("phi differs from psi + eta")
    if np.any(np.abs(sol.eta[0]) > tol):
        raise SPVerificationError("eta(0) is not zero")
    worst = float((sol.phi @ sp.normals.T).min())
    if worst < -tol:
        raise SPVerificationError(f"phi leaves the domain (min <phi, n_i> = {worst:.3e})")

    increments = np.diff(sol.eta, axis=0)
    for k, inc in enumerate(increments):
        size = np.linalg.norm(inc)
        if size <= 1e-14 * (1.0 + psi_tv):
            continue
        margins = sp.normals @ sol.phi[k + 1]
        active = margins <= tol
        if not np.any(active):
            raise SPVerificationError(f"eta moves at t={sol.times[k + 1]:.6g} while phi is interior")
        _, residual = nnls(sp.directions[active].T, inc / size)
        if residual > tol:
            raise SPVerificationError(
                f"eta increment at t={sol.times[k + 1]:.6g} is outside the reflection cone (residual {residual:.3e})"
            )


def lipschitz_probe(sp: SPInstance, psi1: PiecewisePath, psi2: PiecewisePath, dt: float) -> float:
    """Empirical ratio sup|phi1 - phi2| / sup|psi1 - psi2| of the solution map."""
    s1 = solve_sp(sp, psi1, dt)
    s2 = solve_sp(sp, psi2, dt)
    denominator = float(np.linalg.norm(s1.psi - s2.psi, axis=1).max())
    if denominator == 0:
        raise ModelError("Lipschitz probe needs two different input paths")
    return float(np.linalg.norm(s1.phi - s2.phi, axis=1).max()) / denominator
