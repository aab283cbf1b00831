"""
Environment states, i.i.d. environment laws and the standing-assumption checks.

An environment state is a distribution over finite weight vectors. Three
kinds exist:

* ``FiniteDiscreteState``: finitely many outcomes, each a weight vector.
* ``ThetaTiltedState``: the weights e^(−θ z_i)/m(θ) induced by a branching
  random walk displacement state.
* ``BurstState``: N copies of weight 1/2 with P(N = 2^k) = c·2^(−k)/k².
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from smoothing_lab.displacement import DisplacementState, m_theta, sample_displacements
from smoothing_lab.utils import (
    CapExceeded,
    ContinuousState,
    MalformedLaw,
    OutOfRange,
    PreconditionError,
    batch_means,
    logger,
)

PROB_TOL = 1e-12
MEAN_TOL = 1e-9
SAMPLED_MEAN_SIGMAS = 5.0
SAMPLED_MEAN_BATCHES = 10

BURST_C = 12.0 / math.pi**2
BURST_P0 = 6.0 * math.log(2.0) ** 2 / math.pi**2
BURST_K_MAX = 60
BURST_WEIGHT = 0.5
DEFAULT_CHILD_CAP = 1 << 20


class StateKind(str, Enum):
    FINITE = "finite"
    TILTED = "tilted"
    BURST = "burst"


@dataclass(frozen=True)
class WeightVector:
    """The realized (y_1, y_2, ...) of one generation, trailing zeros stripped."""

    weights: Tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(w) for w in self.weights)
        for w in values:
            if not math.isfinite(w) or w < 0:
                raise MalformedLaw(f"weights must be finite and non-negative, got {w!r}")
        end = len(values)
        while end and values[end - 1] == 0.0:
            end -= 1
        object.__setattr__(self, "weights", values[:end])

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def positive_count(self) -> int:
        return sum(1 for w in self.weights if w > 0)

    @property
    def total(self) -> float:
        return math.fsum(self.weights)


@dataclass(frozen=True)
class OutcomeTable:
    """
    Tabulated weight-vector outcomes: row r occurs with probability probs[r]
    and holds counts[r, j] copies of weight weights[r, j]. Zero weights and
    zero counts mark padding.
    """

    probs: np.ndarray
    weights: np.ndarray
    counts: np.ndarray

    @property
    def totals(self) -> np.ndarray:
        return (self.counts * self.weights).sum(axis=1)

    @classmethod
    def from_vectors(cls, probs: Sequence[float], vectors: Sequence[Sequence[float]]) -> "OutcomeTable":
        width = max([len(v) for v in vectors] + [1])
        weights = np.zeros((len(vectors), width))
        counts = np.zeros((len(vectors), width))
        for r, v in enumerate(vectors):
            weights[r, : len(v)] = v
            counts[r, : len(v)] = 1.0
        counts[weights == 0.0] = 0.0
        return cls(np.asarray(probs, dtype=np.float64), weights, counts)


class EnvState:
    """Common interface of the three environment-state kinds."""

    id: str
    kind: StateKind

    @property
    def is_exact(self) -> bool:
        """Whether the outcome distribution can be tabulated exactly."""
        return True

    def quenched_mean(self) -> float:
        raise NotImplementedError

    def expected_positive_count(self) -> float:
        raise NotImplementedError

    def probability_total(self) -> float:
        raise NotImplementedError

    def outcome_table(self) -> OutcomeTable:
        raise NotImplementedError

    def sample_table(self, rng: np.random.Generator, size: int) -> OutcomeTable:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> WeightVector:
        table = self.sample_table(rng, 1)
        return WeightVector(tuple(np.repeat(table.weights[0], table.counts[0].astype(np.int64))))


@dataclass(frozen=True)
class FiniteDiscreteState(EnvState):
    id: str
    outcomes: Tuple[Tuple[float, WeightVector], ...]
    kind: StateKind = field(default=StateKind.FINITE, init=False)

    def __post_init__(self):
        outcomes = tuple(
            (float(p), v if isinstance(v, WeightVector) else WeightVector(tuple(v))) for p, v in self.outcomes
        )
        if not outcomes:
            raise MalformedLaw(f"state {self.id!r} has no outcomes")
        if any(not math.isfinite(p) or p < 0 for p, _ in outcomes):
            raise MalformedLaw(f"state {self.id!r} has a negative outcome probability")
        object.__setattr__(self, "outcomes", outcomes)

    def quenched_mean(self) -> float:
        return math.fsum(p * w for p, v in self.outcomes for w in v.weights)

    def expected_positive_count(self) -> float:
        return math.fsum(p * v.positive_count for p, v in self.outcomes)

    def probability_total(self) -> float:
        return math.fsum(p for p, _ in self.outcomes)

    def outcome_table(self) -> OutcomeTable:
        return OutcomeTable.from_vectors([p for p, _ in self.outcomes], [v.weights for _, v in self.outcomes])

    def sample_table(self, rng: np.random.Generator, size: int) -> OutcomeTable:
        table = self.outcome_table()
        cum = np.cumsum(table.probs)
        picks = np.minimum(np.searchsorted(cum, rng.random(size) * cum[-1], side="right"), len(cum) - 1)
        return OutcomeTable(np.full(size, 1.0 / size), table.weights[picks], table.counts[picks])

    def sample(self, rng: np.random.Generator) -> WeightVector:
        cum = np.cumsum([p for p, _ in self.outcomes])
        k = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(cum) - 1)
        return self.outcomes[k][1]


@dataclass(frozen=True)
class ThetaTiltedState(EnvState):
    """Weights e^(−θ z_i)/m(θ) of a displacement state; quenched mean one by construction."""

    id: str
    displacement: DisplacementState
    theta: float
    kind: StateKind = field(default=StateKind.TILTED, init=False)
    m: float = field(default=float("nan"), init=False)

    def __post_init__(self):
        object.__setattr__(self, "m", m_theta(self.displacement, self.theta))

    @property
    def is_exact(self) -> bool:
        return self.displacement.atoms_only

    def quenched_mean(self) -> float:
        return 1.0

    def expected_positive_count(self) -> float:
        return self.displacement.expected_children()

    def probability_total(self) -> float:
        return math.fsum(q for q, _ in self.displacement.outcomes)

    def outcome_table(self) -> OutcomeTable:
        if not self.is_exact:
            raise ContinuousState(f"state {self.id!r} has continuous displacements; sample it instead")
        vectors = [
            [math.exp(-self.theta * child.z) / self.m for child in children]
            for _, children in self.displacement.outcomes
        ]
        return OutcomeTable.from_vectors([q for q, _ in self.displacement.outcomes], vectors)

    def sample_table(self, rng: np.random.Generator, size: int) -> OutcomeTable:
        z, present = sample_displacements(self.displacement, rng, size)
        weights = np.where(present, np.exp(-self.theta * z) / self.m, 0.0)
        return OutcomeTable(np.full(size, 1.0 / size), weights, present.astype(np.float64))


def burst_probability(k: int) -> float:
    """P(N = 2^k) for k >= 1."""
    return BURST_C * 2.0 ** (-k) / (k * k)


@dataclass(frozen=True)
class BurstState(EnvState):
    """
    N children of weight 1/2, P(N = 2^k) = c·2^(−k)/k² (k >= 1), P(N = 0) = 6(ln 2)²/π².

    E N = c·π²/6 = 2, so the quenched mean is exactly one while
    E[(Σy)|log Σy|] diverges.
    """

    id: str
    child_cap: int = DEFAULT_CHILD_CAP
    kind: StateKind = field(default=StateKind.BURST, init=False)

    def quenched_mean(self) -> float:
        return BURST_WEIGHT * self.mean_count()

    def mean_count(self) -> float:
        return BURST_C * math.pi**2 / 6.0

    def expected_positive_count(self) -> float:
        return self.mean_count()

    def probability_total(self) -> float:
        # Σ_{k>=1} 2^(−k)/k² = π²/12 − (ln 2)²/2
        return BURST_P0 + BURST_C * (math.pi**2 / 12.0 - math.log(2.0) ** 2 / 2.0)

    def outcome_table(self) -> OutcomeTable:
        ks = np.arange(1, BURST_K_MAX + 1)
        probs = np.concatenate([[BURST_P0], BURST_C * 2.0 ** (-ks) / ks**2])
        counts = np.concatenate([[0.0], 2.0**ks])[:, None]
        weights = np.full_like(counts, BURST_WEIGHT)
        return OutcomeTable(probs, weights, counts)

    def sample_counts(self, rng: np.random.Generator, size: int) -> np.ndarray:
        table_probs = self.outcome_table().probs
        cum = np.cumsum(table_probs)
        u = rng.random(size)
        k = np.searchsorted(cum, u, side="right")
        counts = np.where(k == 0, 0.0, 2.0 ** np.minimum(k, BURST_K_MAX).astype(np.float64))
        for idx in np.flatnonzero(k > BURST_K_MAX):
            # the tail past the table is ~1e-22 in mass; walk it term by term
            acc, j = cum[-1], BURST_K_MAX
            while acc < u[idx] and j < 1024:
                j += 1
                acc += burst_probability(j)
            counts[idx] = 2.0**j
        if counts.size and counts.max() > self.child_cap:
            raise CapExceeded(f"burst sample has {counts.max():.0f} children, cap is {self.child_cap}")
        return counts

    def sample_table(self, rng: np.random.Generator, size: int) -> OutcomeTable:
        counts = self.sample_counts(rng, size)[:, None]
        return OutcomeTable(np.full(size, 1.0 / size), np.full_like(counts, BURST_WEIGHT), counts)


@dataclass(frozen=True)
class EnvironmentLaw:
    """The common law (π_s, state_s) of every coordinate of the i.i.d. environment."""

    states: Tuple[Tuple[float, Any], ...]

    def __post_init__(self):
        states = tuple((float(p), s) for p, s in self.states)
        if not states:
            raise MalformedLaw("environment law has no states")
        if any(not math.isfinite(p) or p < 0 for p, _ in states):
            raise MalformedLaw("environment law has a negative state probability")
        ids = [s.id for _, s in states]
        if len(set(ids)) != len(ids):
            raise MalformedLaw(f"duplicate state ids in {ids}")
        object.__setattr__(self, "states", states)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p for p, _ in self.states])

    @property
    def members(self) -> List[Any]:
        return [s for _, s in self.states]

    def __iter__(self) -> Iterator[Tuple[float, Any]]:
        return iter(self.states)

    def state(self, state_id: str) -> Any:
        for _, s in self.states:
            if s.id == state_id:
                return s
        raise MalformedLaw(f"no state with id {state_id!r}")

    @property
    def is_exact(self) -> bool:
        return all(s.is_exact for s in self.members)


@dataclass(frozen=True)
class EnvSequence:
    """A realized environment prefix (ξ_offset, ..., ξ_{offset+n−1})."""

    states: Tuple[Any, ...]
    seed: Optional[int] = None
    offset: int = 0

    @property
    def state_ids(self) -> Tuple[str, ...]:
        return tuple(s.id for s in self.states)

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, k: int) -> Any:
        return self.states[k]

    def prefix(self, n: int) -> "EnvSequence":
        if not 0 <= n <= len(self.states):
            raise OutOfRange(f"prefix length {n} outside 0..{len(self.states)}")
        return EnvSequence(self.states[:n], self.seed, self.offset)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    scope: str = "law"
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: Tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed]

    def value(self, name: str, scope: str = "law") -> float:
        for c in self.checks:
            if c.name == name and c.scope == scope:
                return c.value
        raise KeyError((name, scope))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "checks": [
                {"name": c.name, "scope": c.scope, "passed": c.passed, "value": c.value, "detail": c.detail}
                for c in self.checks
            ],
        }


def validate_law(law: EnvironmentLaw, tol: float = MEAN_TOL) -> ValidationReport:
    """Check the standing assumptions: quenched mean one, finite offspring, supercriticality."""
    if not isinstance(law, EnvironmentLaw):
        raise MalformedLaw(f"expected an EnvironmentLaw, got {type(law).__name__}")
    checks: List[CheckResult] = []
    log_terms = []
    for pi, state in law:
        total = state.probability_total()
        checks.append(
            CheckResult("probabilities", abs(total - 1.0) <= PROB_TOL, total, state.id)
        )
        mean = state.quenched_mean()
        checks.append(
            CheckResult("quenched_mean", abs(mean - 1.0) <= tol, mean, state.id, f"tol={tol!r}")
        )
        count = state.expected_positive_count()
        checks.append(CheckResult("positive_count", math.isfinite(count), count, state.id))
        log_terms.append(pi * math.log(count) if count > 0 else -math.inf)

    pi_total = math.fsum(law.probabilities)
    checks.append(CheckResult("probabilities", abs(pi_total - 1.0) <= PROB_TOL, pi_total))
    supercritical = -math.inf if any(t == -math.inf for t in log_terms) else math.fsum(log_terms)
    checks.append(CheckResult("supercriticality", supercritical > 0, supercritical))

    report = ValidationReport(tuple(checks))
    logger.info("law validated", extra={"passed": report.passed, "failed": report.failed()})
    return report


def sample_env(law, n: int, seed: int) -> EnvSequence:
    """
    Draw ξ_0..ξ_{n−1} i.i.d. from the law's state probabilities.

    One uniform per coordinate, in order, so a longer draw with the same seed
    extends a shorter one.
    """
    if n < 0:
        raise PreconditionError(f"sequence length must be >= 0, got {n}")
    probs = np.array([p for p, _ in law.states])
    members = [s for _, s in law.states]
    cum = np.cumsum(probs)
    if not len(cum) or cum[-1] <= 0:
        raise MalformedLaw("environment law has no probability mass")
    u = np.random.default_rng(seed).random(n) * cum[-1]
    picks = np.minimum(np.searchsorted(cum, u, side="right"), len(members) - 1)
    return EnvSequence(tuple(members[i] for i in picks), seed)


def shift(seq: EnvSequence, k: int) -> EnvSequence:
    """T^k: drop the first k coordinates."""
    if k < 0 or k > len(seq):
        raise OutOfRange(f"cannot shift a length-{len(seq)} sequence by {k}")
    return EnvSequence(seq.states[k:], seq.seed, seq.offset + k)


def sample_weights(state: EnvState, seed: int) -> WeightVector:
    return state.sample(np.random.default_rng(seed))


def sampled_mean_check(state: EnvState, seeds: Sequence[int]) -> CheckResult:
    """
    Monte-Carlo cross-check of the quenched mean: one weight vector per seed,
    passing when the sample mean of Σ y sits within SAMPLED_MEAN_SIGMAS
    batch-means standard errors of one.
    """
    if isinstance(state, BurstState):
        raise PreconditionError(f"burst state {state.id!r} has no finite second moment to sample against")
    totals = [sample_weights(state, s).total for s in seeds]
    mean, se = batch_means(totals, SAMPLED_MEAN_BATCHES)
    passed = abs(mean - 1.0) <= SAMPLED_MEAN_SIGMAS * se + MEAN_TOL
    return CheckResult("sampled_mean", passed, mean, state.id, f"se={se!r} draws={len(totals)}")
