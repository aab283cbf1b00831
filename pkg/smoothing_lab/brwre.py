"""
Branching random walks in an i.i.d. random environment.

Each environment state is a DisplacementState. At tilt θ the additive
martingale is

    Wₙ(θ) = Σ_{|x|=n} e^(−θ·position(x)) / ∏_{j<n} m_{ξⱼ}(θ)

and the induced weights e^(−θ z)/m(θ) turn a BRW law into an environment law
of the smoothing transform.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from smoothing_lab.displacement import DisplacementState, m_prime, m_theta, sample_displacements
from smoothing_lab.env_model import (
    PROB_TOL,
    CheckResult,
    EnvironmentLaw,
    EnvSequence,
    ThetaTiltedState,
    ValidationReport,
)
from smoothing_lab.moments import DEFAULT_BUDGET, MomentValue, moment_report
from smoothing_lab.utils import (
    CapExceeded,
    EllipticityViolation,
    InvalidDelta,
    MalformedLaw,
    PreconditionError,
    derive_seed,
    fmt_real,
    json_real,
    logger,
    tracer,
)

__all__ = [
    "BRWEnvironmentLaw",
    "Trajectory",
    "m_theta",
    "m_prime",
    "theta_domain_check",
    "induce_weight_state",
    "induce_weight_law",
    "kappa_brw",
    "w1_xlogx_moment",
    "simulate",
    "simulate_replicas",
    "empirical_transform",
    "verdict_brw",
    "theta_sweep",
    "critical_theta",
    "validate_brw_law",
]

DEFAULT_DELTA = 1e-6
DEFAULT_CAP = 10**6
THETA_STEP = 0.05

TRAJECTORY_HEADER = ("replica", "generation", "W", "population")
SWEEP_HEADER = ("theta", "kappa", "verdict")


@dataclass(frozen=True)
class BRWEnvironmentLaw:
    """The law ν of the environment: (π_s, DisplacementState) pairs."""

    states: Tuple[Tuple[float, DisplacementState], ...]

    def __post_init__(self):
        states = tuple((float(p), s) for p, s in self.states)
        if not states:
            raise MalformedLaw("BRW environment law has no states")
        if any(not math.isfinite(p) or p < 0 for p, _ in states):
            raise MalformedLaw("BRW environment law has a negative state probability")
        ids = [s.id for _, s in states]
        if len(set(ids)) != len(ids):
            raise MalformedLaw(f"duplicate displacement state ids in {ids}")
        total = math.fsum(p for p, _ in states)
        if abs(total - 1.0) > PROB_TOL:
            raise MalformedLaw(f"state probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "states", states)

    def __iter__(self):
        return iter(self.states)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p for p, _ in self.states])

    @property
    def members(self) -> List[DisplacementState]:
        return [s for _, s in self.states]

    def state(self, state_id: str) -> DisplacementState:
        for _, s in self.states:
            if s.id == state_id:
                return s
        raise MalformedLaw(f"no displacement state with id {state_id!r}")

    def supercriticality(self) -> float:
        """𝔼 log E_ξ[#children]."""
        terms = []
        for pi, s in self.states:
            mean = s.expected_children()
            if pi > 0 and mean == 0:
                return -math.inf
            if pi > 0:
                terms.append(pi * math.log(mean))
        return math.fsum(terms)


def validate_brw_law(law: BRWEnvironmentLaw) -> ValidationReport:
    checks = [
        CheckResult("probabilities", True, math.fsum(law.probabilities)),
        CheckResult("supercriticality", law.supercriticality() > 0, law.supercriticality()),
    ]
    for _, s in law:
        checks.append(CheckResult("expected_children", True, s.expected_children(), s.id))
    return ValidationReport(tuple(checks))


def theta_domain_check(law: BRWEnvironmentLaw, theta: float, delta: float = DEFAULT_DELTA) -> bool:
    """𝔼 m(θ) < ∞ and m_s(θ) > δ for every state (uniform ellipticity)."""
    if not (math.isfinite(delta) and delta > 0):
        raise InvalidDelta(f"ellipticity bound must be > 0, got {delta}")
    for _, s in law:
        m = m_theta(s, theta)
        if not math.isfinite(m) or m <= delta:
            return False
    return True


def _require_domain(law: BRWEnvironmentLaw, theta: float, delta: float) -> None:
    if not theta_domain_check(law, theta, delta):
        raise EllipticityViolation(f"theta={theta} violates m(θ) > {delta} for some state")


def induce_weight_state(state: DisplacementState, theta: float, delta: float = DEFAULT_DELTA) -> ThetaTiltedState:
    m = m_theta(state, theta)
    if not (math.isfinite(m) and m > delta):
        raise EllipticityViolation(f"state {state.id!r}: m({theta}) = {m!r} is not above {delta}")
    return ThetaTiltedState(state.id, state, theta)


def induce_weight_law(law: BRWEnvironmentLaw, theta: float, delta: float = DEFAULT_DELTA) -> EnvironmentLaw:
    return EnvironmentLaw(tuple((pi, induce_weight_state(s, theta, delta)) for pi, s in law))


def kappa_brw(law: BRWEnvironmentLaw, theta: float, delta: float = DEFAULT_DELTA) -> float:
    """∫ [−θ m′/m + log m] ν(dω)."""
    _require_domain(law, theta, delta)
    return math.fsum(
        pi * (-theta * m_prime(s, theta) / m_theta(s, theta) + math.log(m_theta(s, theta))) for pi, s in law
    )


def w1_xlogx_moment(
    law: BRWEnvironmentLaw,
    theta: float,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    delta: float = DEFAULT_DELTA,
    threads: int = 1,
) -> MomentValue:
    """𝔼[W₁|log W₁|]; W₁ is the total induced weight, so this is c2 of the induced law."""
    _require_domain(law, theta, delta)
    return moment_report(induce_weight_law(law, theta, delta), budget, seed, threads=threads).c2


@dataclass(frozen=True, eq=False)
class Trajectory:
    W: np.ndarray
    population: np.ndarray
    normalizer: np.ndarray
    state_ids: Tuple[str, ...]
    seed: int
    replica: int = 0

    @property
    def generations(self) -> int:
        return self.W.size - 1

    def rows(self):
        for k, (w, n) in enumerate(zip(self.W, self.population)):
            yield self.replica, k, float(w), int(n)


@tracer.capture_method(capture_response=False)
def simulate(
    law: BRWEnvironmentLaw,
    theta: float,
    seq: EnvSequence,
    generations: int,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
    delta: float = DEFAULT_DELTA,
    replica: int = 0,
) -> Trajectory:
    """
    Exact particle simulation along the environment ``seq``.

    No pruning or resampling: a population above ``cap`` raises CapExceeded
    and the run must be discarded.
    """
    _require_domain(law, theta, delta)
    if generations < 0 or generations > len(seq):
        raise PreconditionError(f"generations must lie in 0..{len(seq)}, got {generations}")
    rng = np.random.default_rng(seed)
    positions = np.zeros(1)
    norm = 1.0
    W, population, normalizer = [1.0], [1], [1.0]
    for k in range(generations):
        state = seq[k]
        norm *= m_theta(state, theta)
        if positions.size:
            z, present = sample_displacements(state, rng, positions.size)
            born = int(present.sum())
            if born > cap:
                raise CapExceeded(f"generation {k + 1} has {born} particles, cap is {cap}")
            positions = (positions[:, None] + z)[present]
        W.append(float(np.exp(-theta * positions).sum() / norm) if positions.size else 0.0)
        population.append(positions.size)
        normalizer.append(norm)
    return Trajectory(
        np.array(W), np.array(population), np.array(normalizer), tuple(s.id for s in seq.states), seed, replica
    )


def simulate_replicas(
    law: BRWEnvironmentLaw,
    theta: float,
    seq: EnvSequence,
    generations: int,
    replicas: int,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
    threads: int = 1,
    delta: float = DEFAULT_DELTA,
) -> List[Trajectory]:
    """Independent replicas on one environment; replica r uses derive_seed(seed, ["replica", r])."""

    def one(r: int) -> Trajectory:
        return simulate(law, theta, seq, generations, cap, derive_seed(seed, ["replica", r]), delta, replica=r)

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        out = list(pool.map(one, range(replicas)))
    logger.info(
        "replicas simulated",
        extra={"replicas": replicas, "generations": generations, "theta": theta, "max_population": max(
            (int(t.population.max()) for t in out), default=0
        )},
    )
    return out


def empirical_transform(
    trajectories: Sequence[Trajectory], u: float, generation: Optional[int] = None
) -> Tuple[float, float]:
    """Monte Carlo E e^(−u Wₙ) and its standard error."""
    if not trajectories:
        raise PreconditionError("no trajectories")
    w = np.array([t.W[-1 if generation is None else generation] for t in trajectories])
    values = np.exp(-u * w)
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else math.inf
    return float(values.mean()), se


class BRWVerdictKind(str, Enum):
    MEAN_ONE = "MEAN_ONE"
    DEGENERATE = "DEGENERATE"
    INCONCLUSIVE = "INCONCLUSIVE"


@dataclass(frozen=True)
class BRWVerdict:
    kind: BRWVerdictKind
    theta: float
    kappa: float
    moment: MomentValue
    m_by_state: Dict[str, float] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        return {
            "verdict": self.kind.value,
            "theta": self.theta,
            "kappa": json_real(self.kappa),
            "w1_xlogx": json_real(self.moment.value),
            "method": self.moment.method_tag(),
            "flags": list(self.moment.flags),
            "m": {k: json_real(v) for k, v in self.m_by_state.items()},
        }


def verdict_brw(
    law: BRWEnvironmentLaw,
    theta: float,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    delta: float = DEFAULT_DELTA,
    threads: int = 1,
) -> BRWVerdict:
    """MEAN_ONE iff κ > 0 and 𝔼[W₁|log W₁|] is certified finite; DEGENERATE when either fails."""
    kappa = kappa_brw(law, theta, delta)
    moment = w1_xlogx_moment(law, theta, budget, seed, delta, threads)
    if kappa <= 0 or moment.value == math.inf:
        kind = BRWVerdictKind.DEGENERATE
    elif moment.finite_certified:
        kind = BRWVerdictKind.MEAN_ONE
    else:
        kind = BRWVerdictKind.INCONCLUSIVE
    m = {s.id: m_theta(s, theta) for _, s in law}
    logger.info("brw verdict", extra={"theta": theta, "kappa": fmt_real(kappa), "verdict": kind.value})
    return BRWVerdict(kind, theta, kappa, moment, m)


def _theta_values(lo: float, hi: float, step: float) -> List[float]:
    if not step > 0 or hi < lo:
        raise PreconditionError(f"bad sweep lo={lo} hi={hi} step={step}")
    count = int(math.floor((hi - lo) / step + 1e-9))
    return [round(lo + k * step, 12) for k in range(count + 1)]


def theta_sweep(
    law: BRWEnvironmentLaw,
    lo: float,
    hi: float,
    step: float = THETA_STEP,
    budget: int = 10**4,
    seed: int = 0,
    delta: float = DEFAULT_DELTA,
) -> List[Tuple[float, float, str]]:
    """(θ, κ(θ), verdict) rows across [lo, hi]."""
    rows = []
    for theta in _theta_values(lo, hi, step):
        v = verdict_brw(law, theta, budget, seed, delta)
        rows.append((theta, v.kappa, v.kind.value))
    return rows


def critical_theta(
    law: BRWEnvironmentLaw, lo: float, hi: float, step: float = THETA_STEP, delta: float = DEFAULT_DELTA
) -> Tuple[float, float]:
    """The first consecutive sweep pair (θ_a, θ_b) with κ(θ_a) > 0 ≥ κ(θ_b)."""
    thetas = _theta_values(lo, hi, step)
    kappas = [kappa_brw(law, t, delta) for t in thetas]
    for a, b, ka, kb in zip(thetas, thetas[1:], kappas, kappas[1:]):
        if ka > 0 >= kb:
            return a, b
    raise PreconditionError(f"kappa keeps its sign on [{lo}, {hi}]")
