"""
Network models - Jackson and processor-sharing networks on the orthant.

Defines the two network families, their jump directions and facet-dependent
intensities, and the structural checks the rate-function theory relies on
(constant rates per facet, communication, irreducible routing).

Indices are 0-based throughout the library. A facet index set I is a
frozenset of coordinates that sit at zero.
"""

import itertools
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

Direction = Tuple[int, ...]
TiltVector = Dict[Direction, float]

ROW_SUM_TOL = 1e-12
FACET_TOL = 1e-12


class ModelError(ValueError):
    """Invalid network parameters, states or index sets."""


class SpecFormatError(ModelError):
    """File content that does not parse into a network or scenario."""


@dataclass(frozen=True)
class JacksonSpec:
    """
    Open Jackson network.

    routing is N x (N+1): column 0 holds the exit probability p_{i,0},
    column j+1 the routing probability p_{i,j}.
    """

    a: Tuple[float, ...]
    sigma: Tuple[float, ...]
    routing: Tuple[Tuple[float, ...], ...]
    name: str = ""
    kind: str = field(default="jackson", init=False)

    @property
    def N(self) -> int:
        return len(self.a)

    def exit_prob(self, i: int) -> float:
        return self.routing[i][0]

    def route_prob(self, i: int, j: int) -> float:
        return self.routing[i][j + 1]


@dataclass(frozen=True)
class ProcessorSharingSpec:
    """Single server shared by N classes with guaranteed capacity fractions f."""

    a: Tuple[float, ...]
    sigma: Tuple[float, ...]
    f: Tuple[float, ...]
    name: str = ""
    kind: str = field(default="processor_sharing", init=False)

    @property
    def N(self) -> int:
        return len(self.a)

    def f_complement(self, I: Iterable[int]) -> float:
        """f_{I^c}: capacity fraction of the classes outside I."""
        I = set(I)
        return float(sum(fj for j, fj in enumerate(self.f) if j not in I))


NetworkSpec = Union[JacksonSpec, ProcessorSharingSpec]


# --- DIRECTIONS ---

def unit(N: int, i: int, sign: int = 1) -> Direction:
    v = [0] * N
    v[i] = sign
    return tuple(v)


def route_direction(N: int, i: int, j: int) -> Direction:
    """e_{i,j} = e_j - e_i: a customer moves from node i to node j."""
    v = [0] * N
    v[i] = -1
    v[j] = 1
    return tuple(v)


def classify_direction(v: Sequence[int]) -> Tuple[str, int, Optional[int]]:
    """
    Identify a jump direction.

    Returns:
        ("arrival", i, None) for e_i, ("exit", i, None) for -e_i and
        ("route", i, j) for e_j - e_i.

    Raises:
        ModelError: If v is not one of these shapes
    """
    nonzero = [(k, int(x)) for k, x in enumerate(v) if x != 0]
    if len(nonzero) == 1 and nonzero[0][1] in (1, -1):
        k, s = nonzero[0]
        return ("arrival", k, None) if s == 1 else ("exit", k, None)
    if len(nonzero) == 2 and sorted(s for _, s in nonzero) == [-1, 1]:
        src = next(k for k, s in nonzero if s == -1)
        dst = next(k for k, s in nonzero if s == 1)
        return ("route", src, dst)
    raise ModelError(f"Not a jump direction of these models: {tuple(v)}")


def service_owner(v: Sequence[int]) -> Optional[int]:
    """Node whose server generates the jump, None for arrivals."""
    kind, i, _ = classify_direction(v)
    return None if kind == "arrival" else i


def format_direction(v: Sequence[int]) -> str:
    """Human readable label, 1-based: e1, -e2, e1>2 (route from node 1 to 2)."""
    kind, i, j = classify_direction(v)
    if kind == "arrival":
        return f"e{i + 1}"
    if kind == "exit":
        return f"-e{i + 1}"
    return f"e{i + 1}>{j + 1}"


def parse_direction(label: str, N: int) -> Direction:
    """Inverse of format_direction: "e2" -> arrival, "-e1" -> exit, "e1>2" -> route."""
    text = label.strip().lower()
    try:
        if text.startswith("-e"):
            return unit(N, int(text[2:]) - 1, -1)
        if text.startswith("e") and ">" in text:
            src, dst = text[1:].split(">")
            return route_direction(N, int(src) - 1, int(dst) - 1)
        if text.startswith("e"):
            return unit(N, int(text[1:]) - 1)
    except (ValueError, IndexError):
        pass
    raise ModelError(f"Unrecognized direction label '{label}'")


def jump_directions(spec: NetworkSpec) -> List[Direction]:
    """
    The set V of jump directions with positive rate somewhere.

    The order is fixed and is the canonical order of V everywhere: ordered
    lexicographically by (kind, i, j) with arrivals e_i before exits -e_i
    before routings e_{i,j}. Tilt arrays, rate tables and CSV rows follow it.
    """
    N = spec.N
    if spec.kind == "processor_sharing":
        return [unit(N, i) for i in range(N)] + [unit(N, i, -1) for i in range(N)]

    dirs = [unit(N, i) for i in range(N) if spec.a[i] > 0]
    dirs += [unit(N, i, -1) for i in range(N) if spec.exit_prob(i) > 0]
    dirs += [
        route_direction(N, i, j)
        for i in range(N)
        for j in range(N)
        if i != j and spec.route_prob(i, j) > 0
    ]
    return dirs


# --- INTENSITIES ---

def facet_index(x: Sequence[float], K: Optional[Iterable[int]] = None,
                tol: float = FACET_TOL) -> FrozenSet[int]:
    """
    Coordinates of K at which x sits on the boundary.

    Integer states are compared exactly, real points with tolerance tol.
    """
    arr = np.asarray(x)
    coords = range(len(arr)) if K is None else K
    if np.issubdtype(arr.dtype, np.integer):
        return frozenset(i for i in coords if arr[i] == 0)
    return frozenset(i for i in coords if abs(float(arr[i])) <= tol)


def facet_rate(spec: NetworkSpec, I: Iterable[int], v: Sequence[int]) -> float:
    """
    Closed-form rate r_{I,v} on the facet where exactly the coordinates in I are zero.
    """
    I = frozenset(I)
    try:
        kind, i, j = classify_direction(v)
    except ModelError:
        return 0.0

    if kind == "arrival":
        return float(spec.a[i])
    if i in I:
        return 0.0

    if spec.kind == "processor_sharing":
        if kind != "exit":
            return 0.0
        return spec.sigma[i] * spec.f[i] / spec.f_complement(I)

    if kind == "exit":
        return spec.sigma[i] * spec.exit_prob(i)
    return spec.sigma[i] * spec.route_prob(i, j)


def intensity(spec: NetworkSpec, x: Sequence[int], v: Sequence[int]) -> float:
    """
    Jump intensity r(x, v) of the full model at an integer state.

    Returns 0 for directions that would leave the orthant.

    Raises:
        ModelError: If x has negative entries or the wrong length
    """
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (spec.N,):
        raise ModelError(f"State has length {x.shape}, network has N={spec.N}")
    if np.any(x < 0):
        raise ModelError(f"State has negative entries: {x.tolist()}")
    if np.any(x + np.asarray(v, dtype=np.int64) < 0):
        return 0.0
    return facet_rate(spec, facet_index(x), v)


# --- VALIDATION ---

def _strongly_connected(adjacency: List[List[int]]) -> bool:
    """Kosaraju-style check: every node reachable from 0 in the graph and its reverse."""
    n = len(adjacency)
    if n == 0:
        return False
    reverse = [[] for _ in range(n)]
    for i, nbrs in enumerate(adjacency):
        for j in nbrs:
            reverse[j].append(i)

    def reach(adj):
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        return len(seen) == n

    return reach(adjacency) and reach(reverse)


def routing_graph(spec: JacksonSpec) -> List[List[int]]:
    """Adjacency lists of the positive-probability routing digraph (self loops dropped)."""
    N = spec.N
    return [[j for j in range(N) if j != i and spec.route_prob(i, j) > 0] for i in range(N)]


def _structural_violations(spec: NetworkSpec) -> List[str]:
    violations = []
    N = spec.N
    if N < 1:
        return ["network must have at least one node"]
    if len(spec.sigma) != N:
        violations.append(f"sigma has length {len(spec.sigma)}, expected {N}")
        return violations
    if any(s <= 0 for s in spec.sigma):
        violations.append("service rates sigma must be strictly positive")

    if spec.kind == "processor_sharing":
        if len(spec.f) != N:
            violations.append(f"f has length {len(spec.f)}, expected {N}")
            return violations
        if any(ai <= 0 for ai in spec.a):
            violations.append("arrival rates a must be strictly positive for processor sharing")
        if any(fi <= 0 for fi in spec.f):
            violations.append("capacity fractions f must be strictly positive")
        if abs(sum(spec.f) - 1.0) > ROW_SUM_TOL:
            violations.append(f"f does not sum to 1 (sum = {sum(spec.f):.15g})")
        return violations

    if len(spec.routing) != N or any(len(row) != N + 1 for row in spec.routing):
        violations.append(f"routing must be {N} x {N + 1} (exit column first)")
        return violations
    if any(ai < 0 for ai in spec.a):
        violations.append("arrival rates a must be nonnegative")
    if not any(ai > 0 for ai in spec.a):
        violations.append("no arrivals: a_i > 0 required for at least one node")
    if any(p < 0 for row in spec.routing for p in row):
        violations.append("routing probabilities must be nonnegative")
    for i, row in enumerate(spec.routing):
        if abs(sum(row) - 1.0) > ROW_SUM_TOL:
            violations.append(f"routing row {i + 1} does not sum to 1 (sum = {sum(row):.15g})")
    if not any(spec.exit_prob(i) > 0 for i in range(N)):
        violations.append("no exit node: p_{i,0} > 0 required for at least one node")
    if not _strongly_connected(routing_graph(spec)) and N > 1:
        violations.append("irreducibility: routing sub-matrix [p_ij] is not irreducible")
    return violations


def validate(spec: NetworkSpec, max_sampled_facets: int = 4096) -> List[str]:
    """
    Check the standing assumptions of the network family.

    Besides the parameter invariants, samples two states per facet and confirms
    that rates depend on the state only through its facet, and that no
    difference of two elements of {0, +-e_i} outside V has positive rate.

    Returns:
        List of violated invariants; empty list means valid
    """
    violations = _structural_violations(spec)
    if violations:
        return violations

    N = spec.N
    V = jump_directions(spec)
    in_support = set(V)
    off_support = [w for w in _support_candidates(N) if w not in in_support]
    facets = itertools.chain.from_iterable(
        itertools.combinations(range(N), k) for k in range(N + 1)
    )
    for count, I in enumerate(facets):
        if count >= max_sampled_facets:
            logger.debug("Facet sampling capped at %d facets", max_sampled_facets)
            break
        low = np.array([0 if i in I else 1 for i in range(N)], dtype=np.int64)
        high = np.array([0 if i in I else 7 for i in range(N)], dtype=np.int64)
        for v in V:
            if intensity(spec, low, v) != intensity(spec, high, v):
                violations.append(
                    f"rates not constant on facet {sorted(i + 1 for i in I)} for direction {format_direction(v)}"
                )
        stray = [w for w in off_support if intensity(spec, high, w) > 0]
        if stray:
            violations.append(
                f"positive rate outside the jump support on facet {sorted(i + 1 for i in I)}: "
                + ", ".join(str(w) for w in stray)
            )
    return violations


def _support_candidates(N: int) -> List[Direction]:
    """Nonzero differences u - w with u, w in {0, +-e_i}."""
    basis = [np.zeros(N, dtype=np.int64)]
    basis += [np.asarray(unit(N, i, s), dtype=np.int64) for i in range(N) for s in (1, -1)]
    seen = {tuple(int(x) for x in u - w) for u in basis for w in basis}
    seen.discard((0,) * N)
    return sorted(seen)


# --- COMMUNICATION ---

@dataclass
class CommunicationResult:
    reachable: bool
    length: int
    bound: int
    path: List[Tuple[int, ...]]
    failing_step: Optional[int] = None
    message: str = ""


def _shortest_route(spec: JacksonSpec, src: int, dst: int) -> List[int]:
    """Self-avoiding chain src -> ... -> dst along positive routing probabilities."""
    graph = routing_graph(spec)
    parent = {src: None}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if u == dst:
            break
        for w in graph[u]:
            if w not in parent:
                parent[w] = u
                queue.append(w)
    if dst not in parent:
        raise ModelError(f"No routing chain from node {src + 1} to node {dst + 1}")
    chain = [dst]
    while chain[-1] != src:
        chain.append(parent[chain[-1]])
    return chain[::-1]


def _connecting_sequence(spec: NetworkSpec, x: np.ndarray, y: np.ndarray) -> List[np.ndarray]:
    N = spec.N
    seq = [x.copy()]
    cur = x.copy()

    def step(v):
        nonlocal cur
        cur = cur + np.asarray(v, dtype=np.int64)
        seq.append(cur.copy())

    if spec.kind == "processor_sharing":
        for k in range(N):
            while cur[k] > y[k]:
                step(unit(N, k, -1))
        for k in range(N):
            while cur[k] < y[k]:
                step(unit(N, k))
        return seq

    delta = int(y.sum() - x.sum())
    target = y.copy()
    if delta > 0:
        j = next(i for i in range(N) if spec.a[i] > 0)
        for _ in range(delta):
            step(unit(N, j))
    elif delta < 0:
        k = next(i for i in range(N) if spec.exit_prob(i) > 0)
        target = y + (-delta) * np.asarray(unit(N, k), dtype=np.int64)

    # neighbouring moves on the simplex sum(x) = const
    while np.any(cur != target):
        i = int(np.flatnonzero(cur > target)[0])
        j = int(np.flatnonzero(cur < target)[0])
        chain = _shortest_route(spec, i, j)
        for src, dst in zip(chain[:-1], chain[1:]):
            step(route_direction(N, src, dst))

    if delta < 0:
        for _ in range(-delta):
            step(unit(N, k, -1))
    return seq


def check_communication(spec: NetworkSpec, x: Sequence[int], y: Sequence[int]) -> CommunicationResult:
    """
    Build an explicit positive-intensity path from x to y and verify it.

    The path length J is checked against the bound (N+1)*||x - y||_1.
    """
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if np.any(x < 0) or np.any(y < 0):
        raise ModelError("States must lie in the nonnegative orthant")
    bound = (spec.N + 1) * int(np.abs(x - y).sum())

    try:
        seq = _connecting_sequence(spec, x, y)
    except (ModelError, StopIteration) as e:
        return CommunicationResult(False, 0, bound, [tuple(x.tolist())], 0, f"construction failed: {e}")

    path = [tuple(int(c) for c in s) for s in seq]
    for k, (s, t) in enumerate(zip(seq[:-1], seq[1:])):
        if np.any(t < 0) or intensity(spec, s, tuple((t - s).tolist())) <= 0:
            return CommunicationResult(False, k, bound, path, k,
                                       f"step {k} from {path[k]} to {path[k + 1]} has zero intensity")

    length = len(seq) - 1
    if length > bound:
        return CommunicationResult(False, length, bound, path, None,
                                   f"path length {length} exceeds bound {bound}")
    return CommunicationResult(True, length, bound, path)


# --- SPEC FILES ---

def network_from_dict(data: dict, name: str = "") -> NetworkSpec:
    """
    Build a network from its JSON form.

    Raises:
        SpecFormatError: If the type tag or fields are missing or malformed
    """
    if not isinstance(data, dict):
        raise SpecFormatError("Network spec must be a JSON object")
    kind = data.get("type")
    try:
        a = tuple(float(v) for v in data["a"])
        sigma = tuple(float(v) for v in data["sigma"])
        if kind == "jackson":
            routing = tuple(tuple(float(p) for p in row) for row in data["routing"])
            return JacksonSpec(a=a, sigma=sigma, routing=routing, name=name)
        if kind == "processor_sharing":
            f = tuple(float(v) for v in data["f"])
            return ProcessorSharingSpec(a=a, sigma=sigma, f=f, name=name)
    except (KeyError, TypeError, ValueError) as e:
        raise SpecFormatError(f"Malformed network spec: missing or invalid field {e}")
    raise SpecFormatError(f"Unknown network type '{kind}' (expected 'jackson' or 'processor_sharing')")


def network_to_dict(spec: NetworkSpec) -> dict:
    if spec.kind == "jackson":
        return {"type": "jackson", "a": list(spec.a), "sigma": list(spec.sigma),
                "routing": [list(row) for row in spec.routing]}
    return {"type": "processor_sharing", "a": list(spec.a), "sigma": list(spec.sigma),
            "f": list(spec.f)}


def load_network(ref: str) -> NetworkSpec:
    """
    Load a network from a JSON file path or a registry key (e.g. "J2").

    Raises:
        FileNotFoundError: If ref is neither an existing file nor a known key
        json.JSONDecodeError: If the file is not valid JSON
        SpecFormatError: If the JSON does not describe a network
    """
    path = Path(ref)
    if path.is_file():
        data = json.loads(path.read_text(encoding="utf-8"))
        return network_from_dict(data, name=path.stem)

    from ratefn.network_registry import find_network_by_name, load_network_config

    key = find_network_by_name(ref)
    if key is None:
        raise FileNotFoundError(f"Network spec not found: '{ref}' is not a file or registry key")
    return network_from_dict(load_network_config(key)["network"], name=key)


def parse_state(text: str) -> Tuple[float, ...]:
    """Parse "0,1.5,2" into a tuple of floats."""
    try:
        return tuple(float(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ModelError(f"Could not parse vector '{text}'")

