"""Named laws with known regimes, shared by the runner and the tests."""
import math
from typing import Callable, Dict

from smoothing_lab.brwre import BRWEnvironmentLaw
from smoothing_lab.displacement import Atom, DisplacementState, Gaussian
from smoothing_lab.env_model import BurstState, EnvironmentLaw, FiniteDiscreteState


def _finite(state_id: str, *outcomes) -> FiniteDiscreteState:
    return FiniteDiscreteState(state_id, tuple(outcomes))


def deterministic_split() -> EnvironmentLaw:
    """Two children of weight 1/2: e^(−u) is the fixed point."""
    return EnvironmentLaw(((1.0, _finite("split", (1.0, (0.5, 0.5)))),))


def unit_atom() -> EnvironmentLaw:
    return EnvironmentLaw(((1.0, _finite("unit", (1.0, (1.0,)))),))


def mean_two() -> EnvironmentLaw:
    return EnvironmentLaw(((1.0, _finite("double", (1.0, (2.0,)))),))


def drift_positive() -> EnvironmentLaw:
    """κ = 0.9 ln 1.8 − 0.1 ln 10 > 0: no mean-one solution."""
    return EnvironmentLaw(((1.0, _finite("lopsided", (0.5, (1.8,)), (0.5, (0.1, 0.1)))),))


def two_state_unique() -> EnvironmentLaw:
    """All weights ≤ 1, κ < 0, both moments finite."""
    a = _finite("A", (0.5, (0.6, 0.6)), (0.5, (0.4, 0.4)))
    b = _finite("B", (0.5, (0.5, 0.5, 0.5)), (0.5, (0.5,)))
    return EnvironmentLaw(((0.5, a), (0.5, b)))


def extinction_pair() -> EnvironmentLaw:
    """Extinct with probability 1/2, else one child of weight 2 (subcritical, used unvalidated)."""
    return EnvironmentLaw(((1.0, _finite("coin", (0.5, ()), (0.5, (2.0,)))),))


def burst() -> EnvironmentLaw:
    return EnvironmentLaw(((1.0, BurstState("burst")),))


def binary_gaussian() -> BRWEnvironmentLaw:
    """Two N(0,1) children: κ(θ) = log 2 − θ²/2."""
    return BRWEnvironmentLaw(((1.0, DisplacementState("gauss", ((1.0, (Gaussian(0.0, 1.0), Gaussian(0.0, 1.0))),))),))


def two_state_gaussian() -> BRWEnvironmentLaw:
    """σ² ∈ {1, 3} with equal probability: κ(θ) = log 2 − θ²."""
    states = []
    for sigma2 in (1.0, 3.0):
        child = Gaussian(0.0, sigma2)
        states.append((0.5, DisplacementState(f"gauss-{sigma2:g}", ((1.0, (child, child)),))))
    return BRWEnvironmentLaw(tuple(states))


def twin_atoms() -> BRWEnvironmentLaw:
    """Two children at the parent's position: m ≡ 2, W ≡ 1."""
    return BRWEnvironmentLaw(((1.0, DisplacementState("twins", ((1.0, (Atom(0.0), Atom(0.0))),))),))


def xlogx_atoms() -> BRWEnvironmentLaw:
    """At θ = 1, m = 10 and W₁ ∈ {1.8, 0.2}: the induced law is drift_positive."""
    state = DisplacementState(
        "xlogx", ((0.5, (Atom(-math.log(18.0)),)), (0.5, (Atom(0.0), Atom(0.0))))
    )
    return BRWEnvironmentLaw(((1.0, state),))


def atom_pair() -> BRWEnvironmentLaw:
    """A two-state atom law small enough for the exact oracle."""
    p = DisplacementState("P", ((0.5, (Atom(0.0), Atom(1.0))), (0.5, (Atom(0.5),))))
    q = DisplacementState("Q", ((1.0, (Atom(-0.2), Atom(0.7))),))
    return BRWEnvironmentLaw(((0.5, p), (0.5, q)))


ATOM_PAIR_THETA = 0.5
XLOGX_THETA = 1.0
GAUSSIAN_CRITICAL_THETA = math.sqrt(2.0 * math.log(2.0))

WEIGHT_LAWS: Dict[str, Callable[[], EnvironmentLaw]] = {
    "deterministic_split": deterministic_split,
    "unit_atom": unit_atom,
    "mean_two": mean_two,
    "drift_positive": drift_positive,
    "two_state_unique": two_state_unique,
    "extinction_pair": extinction_pair,
    "burst": burst,
}

BRW_LAWS: Dict[str, Callable[[], BRWEnvironmentLaw]] = {
    "binary_gaussian": binary_gaussian,
    "two_state_gaussian": two_state_gaussian,
    "twin_atoms": twin_atoms,
    "xlogx_atoms": xlogx_atoms,
    "atom_pair": atom_pair,
}
