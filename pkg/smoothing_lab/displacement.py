"""Point-process environments: offspring displacement laws and their exponential moments."""
import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from smoothing_lab.utils import MalformedLaw

PROB_TOL = 1e-12


@dataclass(frozen=True)
class Atom:
    """A child placed deterministically at offset z."""

    z: float

    def laplace(self, theta: float) -> float:
        return math.exp(-theta * self.z)

    def laplace_prime(self, theta: float) -> float:
        return -self.z * math.exp(-theta * self.z)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, self.z, dtype=np.float64)


@dataclass(frozen=True)
class Gaussian:
    """A child displaced by N(mu, sigma2)."""

    mu: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise MalformedLaw(f"Gaussian child needs sigma2 > 0, got {self.sigma2}")

    def laplace(self, theta: float) -> float:
        return math.exp(-theta * self.mu + 0.5 * theta * theta * self.sigma2)

    def laplace_prime(self, theta: float) -> float:
        return (-self.mu + theta * self.sigma2) * self.laplace(theta)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.mu + math.sqrt(self.sigma2) * rng.standard_normal(size)


Child = Union[Atom, Gaussian]


@dataclass(frozen=True)
class DisplacementState:
    """
    One environment state of a branching random walk.

    ``outcomes`` lists (q_k, children) pairs: with probability q_k the parent
    has ``len(children)`` children, child j displaced by ``children[j]``.
    """

    id: str
    outcomes: Tuple[Tuple[float, Tuple[Child, ...]], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "outcomes", tuple((float(q), tuple(children)) for q, children in self.outcomes)
        )
        if not self.outcomes:
            raise MalformedLaw(f"displacement state {self.id!r} has no outcomes")
        if any(q < 0 for q, _ in self.outcomes):
            raise MalformedLaw(f"displacement state {self.id!r} has a negative outcome probability")
        total = math.fsum(q for q, _ in self.outcomes)
        if abs(total - 1.0) > PROB_TOL:
            raise MalformedLaw(f"outcome probabilities of {self.id!r} sum to {total!r}, not 1")
        if not any(q > 0 and children for q, children in self.outcomes):
            raise MalformedLaw(f"displacement state {self.id!r} never has children")

    @property
    def atoms_only(self) -> bool:
        return all(isinstance(c, Atom) for _, children in self.outcomes for c in children)

    @property
    def max_children(self) -> int:
        return max(len(children) for _, children in self.outcomes)

    def expected_children(self) -> float:
        return math.fsum(q * len(children) for q, children in self.outcomes)


def m_theta(state: DisplacementState, theta: float) -> float:
    """m(θ) = E[Σ_children e^(−θ z)]."""
    return math.fsum(q * child.laplace(theta) for q, children in state.outcomes for child in children)


def m_prime(state: DisplacementState, theta: float) -> float:
    """dm/dθ from the per-family closed forms."""
    return math.fsum(q * child.laplace_prime(theta) for q, children in state.outcomes for child in children)


def sample_displacements(state: DisplacementState, rng: np.random.Generator, size: int):
    """
    Draw ``size`` independent offspring point processes.

    Returns (z, present): two (size, max_children) arrays; ``present`` marks
    the slots that hold a child for the drawn outcome.
    """
    probs = np.array([q for q, _ in state.outcomes])
    cum = np.cumsum(probs)
    picks = np.minimum(np.searchsorted(cum, rng.random(size), side="right"), len(probs) - 1)
    width = max(state.max_children, 1)
    z = np.zeros((size, width))
    present = np.zeros((size, width), dtype=bool)
    for k, (_, children) in enumerate(state.outcomes):
        rows = np.flatnonzero(picks == k)
        for j, child in enumerate(children):
            z[rows, j] = child.sample(rng, rows.size)
            present[rows, j] = True
    return z, present
