"""
Monte Carlo for scaled local-model processes.

Exact event-driven simulation of X^n(t) = x(nt)/n on [0, 1] under the
original or a tilted set of rates, with naive and importance-sampling
estimators of tube probabilities and occupation-measure diagnostics.

Randomness is keyed by (seed, replication): each replication draws from
its own Philox stream, so results do not depend on thread count or
scheduling.
"""

import bisect
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from ratefn.local_model import LocalModel, tilt_array
from ratefn.model import Direction, ModelError

logger = logging.getLogger(__name__)

OFFSET_FACTOR = 10
DRAW_BLOCK = 256
DEFAULT_BIAS_ALLOWANCE = 4.0


class SimulationError(RuntimeError):
    """The simulation left the regime the local model describes."""


@dataclass(frozen=True)
class SimConfig:
    n: int
    reps: int
    seed: int
    epsilon: float
    beta: Tuple[float, ...]
    start: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.n < 1:
            raise ModelError("Scaling parameter n must be a positive integer")
        if self.reps < 2:
            raise ModelError("At least two replications are needed for a standard error")
        if self.epsilon <= 0:
            raise ModelError("Tube radius epsilon must be positive")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.start is not None:
            if any(s < 0 for s in self.start):
                raise ModelError("Start point must lie in the orthant")
            object.__setattr__(self, "start", tuple(float(s) for s in self.start))


@dataclass
class TrajectorySample:
    occupation: np.ndarray
    displacement: np.ndarray
    log_weight: float
    sup_deviation: float
    jumps: int
    times: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None


@dataclass
class TubeEstimate:
    method: str
    n: int
    reps: int
    hits: int
    p_hat: float
    standard_error: float
    q_hat: float
    log_p_hat: float
    zero_hits: bool = False

    def interval(self, width: float = 3.0) -> Tuple[float, float]:
        """p_hat -/+ width * SE, clipped to [0, 1]."""
        return (max(0.0, self.p_hat - width * self.standard_error),
                min(1.0, self.p_hat + width * self.standard_error))

    def to_dict(self) -> dict:
        low, high = self.interval()
        return {
            "method": self.method, "n": self.n, "reps": self.reps, "hits": self.hits,
            "p_hat": self.p_hat, "standard_error": self.standard_error,
            "interval": [low, high], "q_hat": self.q_hat, "log_p_hat": self.log_p_hat,
            "zero_hits": self.zero_hits,
        }


class _RateTables:
    """Per-facet original and tilted rates in the layout the event loop needs."""

    def __init__(self, model: LocalModel, control: Optional[Mapping[Direction, float]]):
        r = model.table
        if control is None:
            c = np.ones(len(model.directions))
        else:
            c = tilt_array(model, control)
            if np.any(c <= 0):
                raise SimulationError("Importance-sampling control must be strictly positive on every direction")
        u = r * c
        self.totals = u.sum(axis=1).tolist()
        self.gap = (u - r).sum(axis=1).tolist()
        with np.errstate(invalid="ignore", divide="ignore"):
            cum = np.cumsum(u, axis=1) / u.sum(axis=1, keepdims=True)
        self.cumulative = [row.tolist() for row in np.nan_to_num(cum)]
        self.log_c = np.log(c).tolist()
        self.moves = [tuple(int(x) for x in v) for v in model.directions]


def _generator(seed: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(rep,))))


def _initial_state(model: LocalModel, cfg: SimConfig) -> List[int]:
    x0 = [OFFSET_FACTOR * cfg.n] * model.N
    for k in model.K:
        x0[k] = 0 if cfg.start is None else int(round(cfg.start[k] * cfg.n))
    return x0


def simulate_path(model: LocalModel, cfg: SimConfig, rep: int,
                  control: Optional[Mapping[Direction, float]] = None,
                  record: bool = False, tables: Optional[_RateTables] = None) -> TrajectorySample:
    """
    One replication of the scaled local-model process on [0, 1].

    Coordinates outside K start at OFFSET_FACTOR * n and must never reach 0.

    Raises:
        SimulationError: If an offset coordinate hits zero
    """
    if len(cfg.beta) != model.N:
        raise ModelError(f"beta has {len(cfg.beta)} entries, model has N={model.N}")
    tables = tables or _RateTables(model, control)
    rng = _generator(cfg.seed, rep)
    n = cfg.n
    K = model.K
    outside = [i for i in range(model.N) if i not in K]
    beta = cfg.beta

    x0 = _initial_state(model, cfg)
    x = list(x0)
    mask = sum(1 << b for b, k in enumerate(K) if x[k] == 0)
    occupation = [0.0] * model.n_facets
    log_weight = 0.0
    sup_dev = 0.0
    t = 0.0
    jumps = 0
    times, states = ([0.0], [list(x)]) if record else (None, None)

    draws = rng.random(2 * DRAW_BLOCK)
    cursor = 0

    def deviation(at):
        return math.sqrt(sum(((x[i] - x0[i]) / n - beta[i] * at) ** 2 for i in range(len(x))))

    while True:
        if cursor == len(draws):
            draws = rng.random(2 * DRAW_BLOCK)
            cursor = 0
        u_time, u_pick = draws[cursor], draws[cursor + 1]
        cursor += 2

        total = n * tables.totals[mask]
        t_next = t - math.log1p(-u_time) / total if total > 0 else math.inf
        end = min(t_next, 1.0)
        occupation[mask] += end - t
        log_weight += n * tables.gap[mask] * (end - t)
        sup_dev = max(sup_dev, deviation(t), deviation(end))
        if t_next >= 1.0:
            break

        cum = tables.cumulative[mask]
        idx = min(bisect.bisect_right(cum, u_pick), len(cum) - 1)
        move = tables.moves[idx]
        for i, step in enumerate(move):
            if step:
                x[i] += step
        log_weight -= tables.log_c[idx]
        for i in outside:
            if x[i] <= 0:
                raise SimulationError(f"Offset coordinate {i + 1} reached zero in replication {rep}")
        mask = sum(1 << b for b, k in enumerate(K) if x[k] == 0)
        t = t_next
        jumps += 1
        if record:
            times.append(t)
            states.append(list(x))

    return TrajectorySample(
        occupation=np.array(occupation),
        displacement=(np.array(x, dtype=float) - np.array(x0, dtype=float)) / n,
        log_weight=log_weight,
        sup_deviation=sup_dev,
        jumps=jumps,
        times=np.array(times) if record else None,
        states=np.array(states, dtype=np.int64) if record else None,
    )


def run_replications(model: LocalModel, cfg: SimConfig,
                     control: Optional[Mapping[Direction, float]] = None,
                     threads: int = 1) -> List[TrajectorySample]:
    """
    All replications of cfg, in replication order regardless of thread count.

    Each replication draws from its own Philox stream keyed by (seed, rep), so
    threads never change the results. The event loop is pure Python and holds
    the GIL, so extra threads give little wall-clock speedup.
    """
    tables = _RateTables(model, control)

    def one(rep):
        return simulate_path(model, cfg, rep, control, tables=tables)

    if threads <= 1:
        return [one(rep) for rep in range(cfg.reps)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(cfg.reps)))


def _q_hat(log_p: float, n: int) -> float:
    return -log_p / n if np.isfinite(log_p) else math.inf


def estimate_tube_prob(model: LocalModel, cfg: SimConfig,
                       control: Optional[Mapping[Direction, float]] = None,
                       threads: int = 1) -> TubeEstimate:
    """
    Naive estimate of P(sup_t |X^n(t) - X^n(0) - beta t| < epsilon) under the original rates.

    Raises:
        ValueError: If a control is passed (use is_estimate)
    """
    if control is not None:
        raise ValueError("Naive estimation runs under the original rates; use is_estimate for a control")
    samples = run_replications(model, cfg, threads=threads)
    hits = np.array([s.sup_deviation < cfg.epsilon for s in samples])
    count = int(hits.sum())
    p_hat = count / cfg.reps
    se = math.sqrt(p_hat * (1.0 - p_hat) / cfg.reps)
    log_p = math.log(p_hat) if count else -math.inf
    if not count:
        logger.warning("Naive estimate saw no tube hits in %d replications (n=%d)", cfg.reps, cfg.n)
    return TubeEstimate("naive", cfg.n, cfg.reps, count, p_hat, se, _q_hat(log_p, cfg.n), log_p,
                        zero_hits=count == 0)


def is_estimate(model: LocalModel, cfg: SimConfig, control: Mapping[Direction, float],
                threads: int = 1) -> TubeEstimate:
    """
    Importance-sampling estimate of the tube probability with tilted rates c_v r_{I,v}.

    Likelihood ratios are accumulated in log space and averaged with a
    max-shift so probabilities far below the float range of exp stay exact.
    """
    samples = run_replications(model, cfg, control, threads)
    hits = np.array([s.sup_deviation < cfg.epsilon for s in samples])
    count = int(hits.sum())
    if not count:
        logger.warning("Importance sampling saw no tube hits in %d replications (n=%d)", cfg.reps, cfg.n)
        return TubeEstimate("importance", cfg.n, cfg.reps, 0, 0.0, 0.0, math.inf, -math.inf, zero_hits=True)

    log_w = np.array([s.log_weight for s in samples])[hits]
    log_p = float(logsumexp(log_w) - math.log(cfg.reps))
    shift = float(log_w.max())
    scaled = np.zeros(cfg.reps)
    scaled[:count] = np.exp(log_w - shift)
    variance = float(np.var(scaled, ddof=1))
    se = math.exp(shift) * math.sqrt(variance / cfg.reps)
    return TubeEstimate("importance", cfg.n, cfg.reps, count, math.exp(log_p), se,
                        _q_hat(log_p, cfg.n), log_p)


def empirical_occupancy(samples: Sequence[TrajectorySample]) -> np.ndarray:
    """Average fraction of [0, 1] spent on each facet, indexed by facet mask."""
    if not samples:
        raise ModelError("No samples to average")
    return np.mean([s.occupation for s in samples], axis=0)


# --- LAW OF LARGE NUMBERS ---

@dataclass
class LLNRow:
    n: int
    exit_prob: float
    exit_se: float
    terminal_mean: np.ndarray
    terminal_se: np.ndarray
    terminal_ok: bool


@dataclass
class LLNReport:
    rows: List[LLNRow] = field(default_factory=list)
    monotone: bool = True
    passed: bool = True


def lln_check(model: LocalModel, c: Mapping[Direction, float], beta: Sequence[float],
              n_list: Sequence[int], reps: int, seed: int, epsilon: float = 0.25,
              bias_allowance: float = DEFAULT_BIAS_ALLOWANCE, threads: int = 1) -> LLNReport:
    """
    Simulate the tilted local model and check that it concentrates on the line beta t.

    For each n records the tube-exit probability and the terminal
    displacement. Passes when the exit probability is nonincreasing in n
    (within 2 SE) and each terminal mean is within 3 SE + bias_allowance / n
    of beta; queue lengths are nonnegative, so the scaled terminal mean
    carries an O(1/n) boundary bias.
    """
    beta = tuple(float(b) for b in beta)
    report = LLNReport()
    for n in sorted(n_list):
        cfg = SimConfig(n=n, reps=reps, seed=seed, epsilon=epsilon, beta=beta)
        samples = run_replications(model, cfg, c, threads)
        exits = np.array([s.sup_deviation >= epsilon for s in samples], dtype=float)
        disp = np.array([s.displacement for s in samples])
        p = float(exits.mean())
        se = math.sqrt(p * (1.0 - p) / reps)
        mean = disp.mean(axis=0)
        mean_se = disp.std(axis=0, ddof=1) / math.sqrt(reps)
        ok = bool(np.all(np.abs(mean - np.asarray(beta)) <= 3.0 * mean_se + bias_allowance / n))
        report.rows.append(LLNRow(n, p, se, mean, mean_se, ok))
        logger.info("LLN n=%d: exit %.4f +- %.4f, terminal mean %s", n, p, se, mean)

    for prev, cur in zip(report.rows[:-1], report.rows[1:]):
        slack = 2.0 * math.sqrt(prev.exit_se ** 2 + cur.exit_se ** 2)
        if cur.exit_prob > prev.exit_prob + slack:
            report.monotone = False
    report.passed = report.monotone and all(r.terminal_ok for r in report.rows)
    return report
