"""Shared laws, hypothesis strategies and Monte Carlo scales for the unit tests."""
import math

import hypothesis.strategies as st
import numpy as np

from smoothing_lab.env_model import EnvironmentLaw, FiniteDiscreteState

# Monte Carlo acceptance scales (fixed seeds, explicit standard-error bounds)
MARTINGALE_THETA = 0.8
MARTINGALE_GENERATIONS = 10
MARTINGALE_REPLICAS = 2000
# E[W_n^p] <= (m(pθ)/m(θ)^p)^n gives P(W_14 >= 0.05) < 1% at θ = 2.5, p = 0.61
DEGENERACY_THETA = 2.5
DEGENERACY_GENERATIONS = 14
DEGENERACY_REPLICAS = 200
DEGENERACY_MEDIAN = 0.05
# e^(−uW) lies in [0, 1], so one replica has variance <= 1/4 and 3 SE <= 1.5/sqrt(R):
# 0.015 for the pipeline check, 0.011 against the exact oracle
PIPELINE_REPLICAS = 10_000
ORACLE_SIM_REPLICAS = 20_000
# the grid curve is itself only this close to the exact transform (see the oracle comparisons)
GRID_ERROR = 1e-4
MASTER_SEED = 20240611


def plus_minus_walk() -> EnvironmentLaw:
    """Annealed spine steps ±1 with mass 1/2 each (not supercritical; walk tests only)."""
    up = FiniteDiscreteState("up", ((1.0 / math.e, (math.e,)), (1.0 - 1.0 / math.e, ())))
    down = FiniteDiscreteState("down", ((math.e / 3.0, (1.0 / math.e,) * 3), (1.0 - math.e / 3.0, ())))
    return EnvironmentLaw(((0.5, up), (0.5, down)))


@st.composite
def finite_states(draw, state_id: str = "s"):
    """A finite state with quenched mean one, at least two children per outcome and |log y| < 4."""
    k = draw(st.integers(min_value=1, max_value=3))
    raw_p = [draw(st.floats(min_value=0.1, max_value=1.0)) for _ in range(k)]
    vectors = [
        [draw(st.floats(min_value=0.1, max_value=1.0)) for _ in range(draw(st.integers(min_value=2, max_value=3)))]
        for _ in range(k)
    ]
    probs = [p / math.fsum(raw_p) for p in raw_p]
    mean = math.fsum(p * math.fsum(v) for p, v in zip(probs, vectors))
    return FiniteDiscreteState(state_id, tuple((p, tuple(w / mean for w in v)) for p, v in zip(probs, vectors)))


@st.composite
def finite_laws(draw):
    n = draw(st.integers(min_value=1, max_value=2))
    states = [draw(finite_states(f"s{i}")) for i in range(n)]
    raw = [draw(st.floats(min_value=0.2, max_value=1.0)) for _ in range(n)]
    return EnvironmentLaw(tuple((r / math.fsum(raw), s) for r, s in zip(raw, states)))


def sup_error(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def block_maxima(values, block: int = 10) -> np.ndarray:
    """Maxima of consecutive length-``block`` runs; a ragged tail is dropped."""
    values = np.asarray(values, dtype=np.float64)
    usable = (values.size // block) * block
    return values[:usable].reshape(-1, block).max(axis=1)
