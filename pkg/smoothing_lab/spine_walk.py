"""
The size-biased spine walk: step laws G_ξ, their annealed mixture, exact
convolutions of Sₙ and the tail sums Σ_{n≤N} P[Sₙ ≥ cn].
"""
import math
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from smoothing_lab.env_model import BURST_WEIGHT, BurstState, EnvironmentLaw, EnvState
from smoothing_lab.moments import kappa_weights
from smoothing_lab.utils import AtomExplosion, ContinuousState, PreconditionError, logger, tracer

DEFAULT_MERGE_RES = 1e-9
ATOM_CAP = 10**6
DEFAULT_N_MAX = 60

WALK_HEADER = ("n", "x", "mass")
TAIL_HEADER = ("N", "partial_sum", "increment")


def _merge(x: np.ndarray, mass: np.ndarray, res: float) -> Tuple[np.ndarray, np.ndarray]:
    """Sort atoms and fuse runs closer than res, keeping mass and the mass-weighted position."""
    keep = mass > 0
    x, mass = x[keep], mass[keep]
    order = np.argsort(x, kind="stable")
    x, mass = x[order], mass[order]
    if x.size < 2:
        return x, mass
    groups = np.concatenate([[0], np.cumsum(np.diff(x) > res)])
    merged_mass = np.bincount(groups, weights=mass)
    merged_x = np.bincount(groups, weights=mass * x) / merged_mass
    return merged_x, merged_mass


@dataclass(frozen=True, eq=False)
class StepLaw:
    """A finite atomic law on the real line: atoms at x with the given masses."""

    x: np.ndarray
    mass: np.ndarray

    @classmethod
    def build(cls, x, mass, merge_res: float = DEFAULT_MERGE_RES) -> "StepLaw":
        merged_x, merged_mass = _merge(np.asarray(x, dtype=np.float64), np.asarray(mass, dtype=np.float64), merge_res)
        return cls(merged_x, merged_mass)

    @classmethod
    def point_mass(cls, x: float = 0.0) -> "StepLaw":
        return cls(np.array([x]), np.array([1.0]))

    def __len__(self) -> int:
        return self.x.size

    def atoms(self) -> Iterator[Tuple[float, float]]:
        return zip(self.x.tolist(), self.mass.tolist())

    @property
    def total(self) -> float:
        return math.fsum(self.mass)

    @property
    def mean(self) -> float:
        return math.fsum(self.x * self.mass)

    def tail(self, threshold: float) -> float:
        return math.fsum(self.mass[self.x >= threshold])

    def convolve(self, other: "StepLaw", merge_res: float = DEFAULT_MERGE_RES, cap: int = ATOM_CAP) -> "StepLaw":
        size = len(self) * len(other)
        if size > cap:
            raise AtomExplosion(f"convolution needs {size} atoms, cap is {cap}")
        x = (self.x[:, None] + other.x[None, :]).ravel()
        mass = (self.mass[:, None] * other.mass[None, :]).ravel()
        return StepLaw.build(x, mass, merge_res)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.x, size=size, p=self.mass / self.mass.sum())

    def log_mgf(self, lam: float) -> float:
        return float(logsumexp(lam * self.x, b=self.mass))

    def rows(self, n: int):
        for x, m in self.atoms():
            yield n, x, m


def step_law(state: EnvState, merge_res: float = DEFAULT_MERGE_RES) -> StepLaw:
    """G_state: mass p_k·y_{k,i} at log y_{k,i} for every positive weight."""
    if isinstance(state, BurstState):
        return StepLaw.point_mass(math.log(BURST_WEIGHT))
    if not state.is_exact:
        raise ContinuousState(f"state {state.id!r} is continuous; use sample_size_biased")
    table = state.outcome_table()
    mass = table.probs[:, None] * table.counts * table.weights
    positive = mass > 0
    return StepLaw.build(np.log(table.weights[positive]), mass[positive], merge_res)


def annealed_step_law(law: EnvironmentLaw, merge_res: float = DEFAULT_MERGE_RES) -> StepLaw:
    """Σ_s π_s·G_s, the i.i.d. step law of the spine under the annealed measure."""
    xs, masses = [], []
    for pi, state in law:
        g = step_law(state, merge_res)
        xs.append(g.x)
        masses.append(pi * g.mass)
    return StepLaw.build(np.concatenate(xs), np.concatenate(masses), merge_res)


def drift(law: EnvironmentLaw) -> float:
    """E[X₀] of the annealed step law; continuous laws fall back to the moment estimate."""
    try:
        return annealed_step_law(law).mean
    except ContinuousState:
        return kappa_weights(law).value


@tracer.capture_method(capture_response=False)
def walk_convolve(
    law: EnvironmentLaw, n_max: int = DEFAULT_N_MAX, merge_res: float = DEFAULT_MERGE_RES, cap: int = ATOM_CAP
) -> List[StepLaw]:
    """Exact laws of S₀ = 0, S₁, …, S_{n_max} under the annealed measure."""
    if n_max < 0:
        raise PreconditionError(f"n_max must be >= 0, got {n_max}")
    step = annealed_step_law(law, merge_res)
    levels = [StepLaw.point_mass()]
    for _ in range(n_max):
        levels.append(levels[-1].convolve(step, merge_res, cap))
    logger.info("walk convolved", extra={"n_max": n_max, "atoms": len(levels[-1]), "step_atoms": len(step)})
    return levels


def quenched_convolve(states: Sequence[EnvState], merge_res: float = DEFAULT_MERGE_RES) -> List[StepLaw]:
    """Laws of S₀ … Sₙ under P_ξ for the fixed environment prefix ``states``."""
    levels = [StepLaw.point_mass()]
    for state in states:
        levels.append(levels[-1].convolve(step_law(state, merge_res), merge_res))
    return levels


@dataclass(frozen=True, eq=False)
class TailSums:
    c: float
    increments: np.ndarray

    @property
    def partial_sums(self) -> np.ndarray:
        return np.cumsum(self.increments)

    def rows(self):
        for N, (s, inc) in enumerate(zip(self.partial_sums, self.increments), start=1):
            yield N, float(s), float(inc)


def tail_sums(
    law: EnvironmentLaw, c: float, n_max: int = DEFAULT_N_MAX, merge_res: float = DEFAULT_MERGE_RES
) -> TailSums:
    """P[Sₙ ≥ cn] for n = 1 … n_max; atoms within merge_res·n of the line count as on it."""
    levels = walk_convolve(law, n_max, merge_res)
    increments = np.array([levels[n].tail(c * n - merge_res * n) for n in range(1, n_max + 1)])
    return TailSums(c, increments)


def rate_function(step: StepLaw, c: float, lam_max: float = 50.0) -> float:
    """Cramér rate sup_{λ≥0} (λc − log E e^{λX}), the exponent of the Chernoff bound for c above the mean."""
    res = minimize_scalar(lambda lam: step.log_mgf(lam) - lam * c, bounds=(0.0, lam_max), method="bounded")
    return max(float(-res.fun), 0.0)


def _continuous_spine_draws(state: EnvState, rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
    table = state.sample_table(rng, size)
    mass = table.counts * table.weights
    totals = mass.sum(axis=1)
    cum = np.cumsum(mass, axis=1)
    target = rng.random(size) * totals
    pick = np.minimum((cum <= target[:, None]).sum(axis=1), mass.shape[1] - 1)
    y = table.weights[np.arange(size), pick]
    x = np.log(y, where=y > 0, out=np.zeros(size))
    return x, totals


def sample_size_biased(law: EnvironmentLaw, size: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw (X, w) pairs: sample a state, then a spine step from it.

    Exact states give exact size-biased atoms with w = 1. Continuous states
    sample a weight vector, pick child i ∝ yᵢ and carry w = Σⱼ yⱼ, so
    estimators must self-normalize.
    """
    rng = np.random.default_rng(seed)
    probs = law.probabilities
    picks = np.minimum(np.searchsorted(np.cumsum(probs), rng.random(size) * probs.sum(), side="right"), len(probs) - 1)
    x = np.empty(size)
    w = np.ones(size)
    for k, state in enumerate(law.members):
        rows = np.flatnonzero(picks == k)
        if not rows.size:
            continue
        if state.is_exact:
            x[rows] = step_law(state).sample(rng, rows.size)
        else:
            x[rows], w[rows] = _continuous_spine_draws(state, rng, rows.size)
    return x, w
