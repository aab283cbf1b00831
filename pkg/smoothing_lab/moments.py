"""
Annealed moment functionals of an environment law and the regime verdict.

    c1     = 𝔼[Σ y (log⁺ y)²]
    c2     = 𝔼[(Σ y) |log Σ y|]
    kappa  = 𝔼[Σ y log y]            (0·log 0 := 0)

Finite-outcome states are summed exactly, Burst states through their series,
continuous tilted states by batch-means Monte Carlo.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from smoothing_lab.env_model import (
    BURST_C,
    BURST_K_MAX,
    BURST_WEIGHT,
    BurstState,
    EnvironmentLaw,
    EnvState,
    OutcomeTable,
)
from smoothing_lab.utils import batch_means, derive_seed, fmt_real, json_real, logger, tracer

DEFAULT_BUDGET = 10**6
DEFAULT_BATCHES = 100
DEFAULT_Z = 3.0

EXACT = "exact"
SERIES = "series"
MONTE_CARLO = "monte-carlo"

FUNCTIONALS = ("c1", "c2", "kappa_pos", "kappa_neg", "kappa")


@dataclass(frozen=True)
class MomentValue:
    """An extended real (finite, ±inf or nan for indeterminate) with its provenance."""

    value: float
    method: str = EXACT
    std_error: float = 0.0
    budget: Optional[int] = None
    certified_finite: bool = True
    flags: Tuple[str, ...] = ()
    error_bound: float = 0.0
    lower_bound: Optional[float] = None

    @property
    def exists(self) -> bool:
        return not math.isnan(self.value)

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.value)

    @property
    def finite_certified(self) -> bool:
        return self.is_finite and self.certified_finite

    def interval(self, z: float = DEFAULT_Z) -> Tuple[float, float]:
        half = z * self.std_error + self.error_bound
        return self.value - half, self.value + half

    def method_tag(self) -> str:
        if self.method == MONTE_CARLO:
            return f"{MONTE_CARLO}(budget={self.budget},se={fmt_real(self.std_error)})"
        return self.method


def _combine(parts: List[Tuple[float, MomentValue]]) -> MomentValue:
    parts = [(p, v) for p, v in parts if p > 0]
    values = [p * v.value for p, v in parts]
    if any(math.isnan(x) for x in values) or (math.inf in values and -math.inf in values):
        total = math.nan
    elif any(math.isinf(x) for x in values):
        total = next(x for x in values if math.isinf(x))
    else:
        total = math.fsum(values)
    methods = {v.method for _, v in parts}
    method = MONTE_CARLO if MONTE_CARLO in methods else SERIES if SERIES in methods else EXACT
    budgets = [v.budget for _, v in parts if v.budget]
    lowers = [p * (v.lower_bound if v.lower_bound is not None else v.value) for p, v in parts]
    return MomentValue(
        value=total,
        method=method,
        std_error=math.sqrt(math.fsum((p * v.std_error) ** 2 for p, v in parts)),
        budget=max(budgets) if budgets else None,
        certified_finite=all(v.certified_finite for _, v in parts),
        flags=tuple(sorted({f for _, v in parts for f in v.flags})),
        error_bound=math.fsum(p * v.error_bound for p, v in parts),
        lower_bound=math.fsum(lowers) if any(v.lower_bound is not None for _, v in parts) else None,
    )


def _functional_samples(table: OutcomeTable) -> Dict[str, np.ndarray]:
    """Per-row values of every functional for a tabulated (or sampled) set of weight vectors."""
    y, n = table.weights, table.counts
    positive = y > 0
    log_y = np.log(y, where=positive, out=np.zeros_like(y))
    mass = n * y
    s = table.totals
    log_s = np.log(s, where=s > 0, out=np.zeros_like(s))
    return {
        "c1": (mass * np.maximum(log_y, 0.0) ** 2).sum(axis=1),
        "c2": s * np.abs(log_s),
        "kappa_pos": (mass * np.maximum(log_y, 0.0)).sum(axis=1),
        "kappa_neg": (mass * np.maximum(-log_y, 0.0)).sum(axis=1),
        "kappa": (mass * log_y).sum(axis=1),
    }


def _exact_state(state: EnvState) -> Dict[str, MomentValue]:
    table = state.outcome_table()
    samples = _functional_samples(table)
    return {
        name: MomentValue(float(math.fsum(table.probs * values)), EXACT) for name, values in samples.items()
    }


def _burst_state(state: BurstState) -> Dict[str, MomentValue]:
    k = np.arange(1, BURST_K_MAX + 1, dtype=np.float64)
    K = float(BURST_K_MAX)
    # Σ_{k>K} 1/k² by Euler–Maclaurin; the rigorous bracket is [1/(K+1), 1/K]
    tail = 1.0 / K - 1.0 / (2.0 * K * K) + 1.0 / (6.0 * K**3)
    bracket = 1.0 / K - 1.0 / (K + 1.0)
    mean_count = BURST_C * (math.fsum(1.0 / k**2) + tail)
    ln2 = math.log(2.0)
    kappa_neg = BURST_WEIGHT * ln2 * mean_count
    kappa_bound = BURST_WEIGHT * ln2 * BURST_C * bracket
    # (Σy)|log Σy| = 2^(k−1)·(k−1)·ln 2 with probability c·2^(−k)/k²: terms ~ 1/k diverge
    c2_partial = 0.5 * BURST_C * ln2 * math.fsum((k - 1.0) / k**2)
    return {
        "c1": MomentValue(0.0, EXACT),
        "c2": MomentValue(
            math.inf, SERIES, certified_finite=False, flags=("divergent-series",), lower_bound=c2_partial
        ),
        "kappa_pos": MomentValue(0.0, EXACT),
        "kappa_neg": MomentValue(kappa_neg, SERIES, error_bound=kappa_bound),
        "kappa": MomentValue(-kappa_neg, SERIES, error_bound=kappa_bound),
    }


def _mc_batch(state: EnvState, size: int, seed: int, batch: int) -> Dict[str, float]:
    rng = np.random.default_rng(derive_seed(seed, ["moment", state.id, batch]))
    samples = _functional_samples(state.sample_table(rng, size))
    return {name: float(values.mean()) for name, values in samples.items()}


def _monte_carlo_state(state: EnvState, budget: int, seed: int, batches: int, threads: int) -> Dict[str, MomentValue]:
    size = max(budget // batches, 1)
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        per_batch = list(pool.map(lambda b: _mc_batch(state, size, seed, b), range(batches)))
    out = {}
    for name in FUNCTIONALS:
        mean, se = batch_means([row[name] for row in per_batch], batches)
        out[name] = MomentValue(
            mean,
            MONTE_CARLO,
            std_error=se,
            budget=size * batches,
            # Gaussian displacements have every exponential moment
            certified_finite=True,
            flags=("analytic-finite",),
        )
    logger.debug("monte carlo moments", extra={"state": state.id, "budget": size * batches})
    return out


@lru_cache(maxsize=256)
def _state_moments(state: EnvState, budget: int, seed: int, batches: int, threads: int) -> Dict[str, MomentValue]:
    if isinstance(state, BurstState):
        return _burst_state(state)
    if state.is_exact:
        return _exact_state(state)
    return _monte_carlo_state(state, budget, seed, batches, threads)


@dataclass(frozen=True)
class MomentReport:
    c1: MomentValue
    c2: MomentValue
    kappa: MomentValue
    kappa_pos: MomentValue
    kappa_neg: MomentValue

    @property
    def consistent(self) -> bool:
        """c1, c2 ≥ 0 and kappa ≤ 𝔼[Σ y log⁺ y] whenever both are finite."""
        ok = self.c1.value >= 0 and self.c2.value >= 0
        if self.kappa.is_finite and self.kappa_pos.is_finite:
            slack = DEFAULT_Z * (self.kappa.std_error + self.kappa_pos.std_error) + 1e-12
            ok = ok and self.kappa.value <= self.kappa_pos.value + slack
        return ok


def moment_report(
    law: EnvironmentLaw,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    batches: int = DEFAULT_BATCHES,
    threads: int = 1,
) -> MomentReport:
    per_state = [(pi, _state_moments(state, budget, seed, batches, threads)) for pi, state in law]
    combined = {name: _combine([(pi, m[name]) for pi, m in per_state]) for name in FUNCTIONALS}
    pos, neg = combined["kappa_pos"], combined["kappa_neg"]
    kappa = combined["kappa"]
    if math.isinf(pos.value) and math.isinf(neg.value):
        kappa = MomentValue(math.nan, kappa.method, flags=kappa.flags + ("indeterminate",))
    elif math.isinf(pos.value) or math.isinf(neg.value):
        kappa = MomentValue(pos.value - neg.value, kappa.method, certified_finite=False, flags=kappa.flags)
    return MomentReport(combined["c1"], combined["c2"], kappa, pos, neg)


def quenched_mean(state: EnvState) -> float:
    return state.quenched_mean()


def moment_c1(law: EnvironmentLaw, budget: int = DEFAULT_BUDGET, seed: int = 0) -> MomentValue:
    return moment_report(law, budget, seed).c1


def moment_c2(law: EnvironmentLaw, budget: int = DEFAULT_BUDGET, seed: int = 0) -> MomentValue:
    return moment_report(law, budget, seed).c2


def kappa_weights(law: EnvironmentLaw, budget: int = DEFAULT_BUDGET, seed: int = 0) -> MomentValue:
    return moment_report(law, budget, seed).kappa


class VerdictKind(str, Enum):
    UNIQUE_L1 = "UNIQUE_L1"
    NO_L1_DRIFT = "NO_L1_DRIFT"
    NO_L1_XLOGX = "NO_L1_XLOGX"
    INCONCLUSIVE = "INCONCLUSIVE"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    report: MomentReport
    flags: Tuple[str, ...] = ()
    kappa_interval: Optional[Tuple[float, float]] = None

    def to_record(self) -> Dict[str, Any]:
        r = self.report
        return {
            "verdict": self.kind.value,
            "c1": json_real(r.c1.value),
            "c2": json_real(r.c2.value),
            "kappa": json_real(r.kappa.value),
            "method": {"c1": r.c1.method_tag(), "c2": r.c2.method_tag(), "kappa": r.kappa.method_tag()},
            "flags": sorted(set(self.flags) | set(r.c2.flags) | set(r.kappa.flags)),
            "kappa_interval": None if self.kappa_interval is None else [json_real(x) for x in self.kappa_interval],
        }


CSV_HEADER = ("law", "verdict", "c1", "c2", "kappa", "kappa_se", "method")


def verdict_row(name: str, verdict: Verdict) -> Tuple[Any, ...]:
    r = verdict.report
    return (
        name,
        verdict.kind.value,
        fmt_real(r.c1.value),
        fmt_real(r.c2.value),
        fmt_real(r.kappa.value),
        fmt_real(r.kappa.std_error),
        r.kappa.method,
    )


@tracer.capture_method(capture_response=False)
def classify(
    law: EnvironmentLaw,
    budget: int = DEFAULT_BUDGET,
    seed: int = 0,
    z: float = DEFAULT_Z,
    threads: int = 1,
    batches: int = DEFAULT_BATCHES,
) -> Verdict:
    """
    Drift check first, then the unique-solution conditions, then the X log X failure.

    A Monte Carlo kappa whose z-interval contains zero gives INCONCLUSIVE.
    """
    report = moment_report(law, budget, seed, batches, threads)
    kappa, c1, c2 = report.kappa, report.c1, report.c2
    flags: List[str] = []
    interval = None

    if kappa.method == MONTE_CARLO and kappa.is_finite:
        interval = kappa.interval(z)
        if interval[0] <= 0.0 <= interval[1]:
            verdict = Verdict(VerdictKind.INCONCLUSIVE, report, ("kappa-straddles-zero",), interval)
            logger.info("law classified", extra={"verdict": verdict.kind.value})
            return verdict

    if kappa.exists and kappa.value >= 0:
        kind = VerdictKind.NO_L1_DRIFT
    elif c1.finite_certified and c2.finite_certified and kappa.exists and kappa.value < 0:
        kind = VerdictKind.UNIQUE_L1
        if kappa.value == -math.inf:
            flags.append("literal-(c3)")
    elif c1.finite_certified and c2.value == math.inf and kappa.is_finite and kappa.value < 0:
        kind = VerdictKind.NO_L1_XLOGX
    else:
        kind = VerdictKind.INCONCLUSIVE

    verdict = Verdict(kind, report, tuple(flags), interval)
    logger.info(
        "law classified",
        extra={"verdict": kind.value, "kappa": fmt_real(kappa.value), "c2": fmt_real(c2.value)},
    )
    return verdict
