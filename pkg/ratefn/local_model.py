"""
Local models - rates frozen on the facets of F^K.

A local model keeps only the boundary behaviour of the coordinates in K.
Facets are encoded as bitmasks over the sorted K tuple (bit b is set when
K[b] sits at zero), so the rate table has 2^|K| rows and one column per
jump direction.
"""

import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, Iterator, List, Mapping, Sequence, Tuple, Union

import numpy as np

from ratefn.model import (
    Direction,
    ModelError,
    NetworkSpec,
    facet_rate,
    format_direction,
    intensity,
    jump_directions,
    service_owner,
)

logger = logging.getLogger(__name__)

MAX_K = 12
REPRESENTATIVE_LEVEL = 3
TABLE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class LocalModel:
    spec: NetworkSpec
    K: Tuple[int, ...]
    directions: Tuple[Direction, ...]
    table: np.ndarray

    @property
    def N(self) -> int:
        return self.spec.N

    @property
    def n_facets(self) -> int:
        return 1 << len(self.K)

    @property
    def direction_matrix(self) -> np.ndarray:
        """|V| x N integer matrix of jump directions."""
        return np.array(self.directions, dtype=np.int64).reshape(len(self.directions), self.N)

    @property
    def interior_rates(self) -> np.ndarray:
        return self.table[0]

    def mask_of(self, I: Iterable[int]) -> int:
        mask = 0
        for i in I:
            if i not in self.K:
                raise ModelError(f"Coordinate {i + 1} is not in K={[k + 1 for k in self.K]}")
            mask |= 1 << self.K.index(i)
        return mask

    def facet_of_mask(self, mask: int) -> FrozenSet[int]:
        return frozenset(k for b, k in enumerate(self.K) if mask >> b & 1)

    def mask_of_state(self, x: Sequence[int]) -> int:
        mask = 0
        for b, k in enumerate(self.K):
            if x[k] == 0:
                mask |= 1 << b
        return mask

    def direction_index(self, v: Sequence[int]) -> int:
        try:
            return self.directions.index(tuple(int(c) for c in v))
        except ValueError:
            raise ModelError(f"Direction {tuple(v)} is not a jump direction of this model")

    def rate(self, I: Iterable[int], v: Sequence[int]) -> float:
        return float(self.table[self.mask_of(I), self.direction_index(v)])

    def owners(self) -> List[Union[int, None]]:
        """Serving node of each direction, None for arrivals."""
        return [service_owner(v) for v in self.directions]


def _normalize_K(spec: NetworkSpec, K: Iterable[int]) -> Tuple[int, ...]:
    K = tuple(sorted(set(int(k) for k in K)))
    if any(k < 0 or k >= spec.N for k in K):
        raise ModelError(f"K={[k + 1 for k in K]} is not a subset of the {spec.N} coordinates")
    if len(K) > MAX_K:
        raise ModelError(f"|K|={len(K)} exceeds the supported maximum of {MAX_K}")
    return K


def localize(spec: NetworkSpec, K: Iterable[int]) -> LocalModel:
    """
    Build the local model on F^K.

    Rates are read from the full model at a representative state of each
    facet (zeros on I, REPRESENTATIVE_LEVEL elsewhere) and cross-checked
    against the closed form.

    Raises:
        ModelError: If K is not a subset of the coordinates or the two rate
            computations disagree
    """
    K = _normalize_K(spec, K)
    directions = tuple(jump_directions(spec))
    n_facets = 1 << len(K)
    table = np.zeros((n_facets, len(directions)))

    for mask in range(n_facets):
        I = frozenset(k for b, k in enumerate(K) if mask >> b & 1)
        state = np.array([0 if i in I else REPRESENTATIVE_LEVEL for i in range(spec.N)], dtype=np.int64)
        for col, v in enumerate(directions):
            r = intensity(spec, state, v)
            closed = facet_rate(spec, I, v)
            if abs(r - closed) > TABLE_TOL * max(1.0, abs(closed)):
                raise ModelError(
                    f"Rate mismatch on facet {sorted(i + 1 for i in I)}, direction "
                    f"{format_direction(v)}: representative {r} vs closed form {closed}"
                )
            table[mask, col] = r

    vanishing = table[0] == 0
    if np.any(table[:, vanishing] != 0):
        raise ModelError("A direction with zero interior rate has positive rate on a boundary facet")

    logger.debug("Localized %s on K=%s: %d facets x %d directions",
                 spec.name or spec.kind, [k + 1 for k in K], n_facets, len(directions))
    return LocalModel(spec=spec, K=K, directions=directions, table=table)


def tilt_array(model: LocalModel, c: Mapping[Direction, float]) -> np.ndarray:
    """
    Tilt vector as an array aligned with model.directions.

    Raises:
        ModelError: If c misses a direction or has a negative entry
    """
    try:
        arr = np.array([float(c[v]) for v in model.directions])
    except KeyError as e:
        raise ModelError(f"Tilt vector has no entry for direction {e}")
    if np.any(arr < 0):
        raise ModelError("Tilt vector entries must be nonnegative")
    return arr


def tilt_dict(model: LocalModel, values: Sequence[float]) -> Dict[Direction, float]:
    return {v: float(x) for v, x in zip(model.directions, values)}


def unit_tilt(model: LocalModel) -> Dict[Direction, float]:
    """The identity tilt c = 1 (original dynamics)."""
    return {v: 1.0 for v in model.directions}


def lln_drift(model: LocalModel, c: Mapping[Direction, float]) -> np.ndarray:
    """Interior drift sum_v c_v r_{0,v} v of the tilted dynamics."""
    return (tilt_array(model, c) * model.interior_rates) @ model.direction_matrix


def facet_drift_gap(model: LocalModel, I: Iterable[int], c: Mapping[Direction, float]) -> np.ndarray:
    """Velocity change on facet I relative to the interior: sum_v c_v (r_{I,v} - r_{0,v}) v."""
    mask = model.mask_of(I)
    gap = model.table[mask] - model.table[0]
    return (tilt_array(model, c) * gap) @ model.direction_matrix


def iter_rate_rows(model: LocalModel) -> Iterator[Tuple[int, str, str, float]]:
    """(facet mask, facet label, direction label, rate) rows of the table, 1-based labels."""
    for mask in range(model.n_facets):
        label = facet_label(model.facet_of_mask(mask))
        for col, v in enumerate(model.directions):
            yield mask, label, format_direction(v), float(model.table[mask, col])


def facet_label(I: Iterable[int]) -> str:
    """'{}' for the interior, '{1,3}' otherwise (1-based)."""
    return "{" + ",".join(str(i + 1) for i in sorted(I)) + "}"
