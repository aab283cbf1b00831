"""Exact small-instance ground truth: full enumeration in 50-digit arithmetic."""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import mpmath
import numpy as np

from smoothing_lab.env_model import EnvSequence, FiniteDiscreteState, ThetaTiltedState
from smoothing_lab.smoothing import CURVE_HEADER, read_curve_csv
from smoothing_lab.utils import ContinuousState, PreconditionError, TooLarge, logger, write_csv

ORACLE_DPS = 50
MAX_DEPTH = 4
MAX_OUTCOMES = 4
MAX_CHILDREN = 3
FIXTURE_TOL = 1e-12

Outcomes = List[Tuple[mpmath.mpf, List[mpmath.mpf]]]


def _exact_outcomes(state) -> Outcomes:
    """(p, [y₁, …]) in working precision; tilted atom states are re-weighted at full precision."""
    if isinstance(state, FiniteDiscreteState):
        outcomes = [(mpmath.mpf(p), [mpmath.mpf(w) for w in v.weights if w > 0]) for p, v in state.outcomes]
    elif isinstance(state, ThetaTiltedState) and state.displacement.atoms_only:
        theta = mpmath.mpf(state.theta)
        raw = [
            (mpmath.mpf(q), [mpmath.exp(-theta * mpmath.mpf(c.z)) for c in children])
            for q, children in state.displacement.outcomes
        ]
        m = mpmath.fsum(q * y for q, ys in raw for y in ys)
        outcomes = [(q, [y / m for y in ys]) for q, ys in raw]
    elif isinstance(state, ThetaTiltedState):
        raise ContinuousState(f"state {state.id!r} has continuous displacements")
    else:
        raise TooLarge(f"state {state.id!r} ({state.kind.value}) is outside the oracle's reach")
    if len(outcomes) > MAX_OUTCOMES:
        raise TooLarge(f"state {state.id!r} has {len(outcomes)} outcomes, oracle limit is {MAX_OUTCOMES}")
    if any(len(ys) > MAX_CHILDREN for _, ys in outcomes):
        raise TooLarge(f"state {state.id!r} has more than {MAX_CHILDREN} children in an outcome")
    return [(p, ys) for p, ys in outcomes if p > 0]


def _levels(seq: EnvSequence, n: Optional[int]) -> Tuple[int, List[Outcomes]]:
    n = len(seq) if n is None else n
    if n < 0 or n > len(seq):
        raise PreconditionError(f"depth must lie in 0..{len(seq)}, got {n}")
    if n > MAX_DEPTH:
        raise TooLarge(f"oracle depth is limited to {MAX_DEPTH}, got {n}")
    return n, [_exact_outcomes(seq[k]) for k in range(n)]


@dataclass(frozen=True)
class ExactTransform:
    u_points: Tuple[float, ...]
    values: Tuple[float, ...]
    depth: int
    state_ids: Tuple[str, ...]
    digits: Tuple[str, ...] = ()
    L: Tuple[float, ...] = ()

    def rows(self):
        return zip(self.u_points, self.values, self.L)

    def to_csv(self, path: Path) -> Path:
        """(u, phi, L) rows, the layout read back by read_curve_csv for committed fixtures."""
        return write_csv(path, CURVE_HEADER, self.rows())


def exact_wn_transform(seq: EnvSequence, u_points: Sequence[float], n: Optional[int] = None) -> ExactTransform:
    """
    φₙ(ξ,u) by the backward recursion φ_k(u) = Σ_outcomes p·∏ᵢ φ_{k+1}(u·yᵢ), φₙ = e^(−u),
    evaluated at the exact products u·y.
    """
    n, levels = _levels(seq, n)

    def rec(k: int, u):
        if k == n:
            return mpmath.exp(-u)
        return mpmath.fsum(p * mpmath.fprod(rec(k + 1, u * y) for y in ys) for p, ys in levels[k])

    with mpmath.workdps(ORACLE_DPS):
        exact = [rec(0, mpmath.mpf(u)) for u in u_points]
        digits = tuple(mpmath.nstr(v, 30) for v in exact)
        values = tuple(float(v) for v in exact)
        L = tuple(float(-mpmath.log(v)) for v in exact)
    logger.debug("oracle transform", extra={"depth": n, "points": len(values)})
    return ExactTransform(tuple(float(u) for u in u_points), values, n, tuple(seq.state_ids[:n]), digits, L)


def exact_wn_mean(seq: EnvSequence, n: Optional[int] = None) -> float:
    """E_ξ Wₙ summed over every lineage (outcome and child choice at each level)."""
    n, levels = _levels(seq, n)

    def lineages(k: int):
        if k == n:
            return mpmath.mpf(1)
        return mpmath.fsum(p * y * lineages(k + 1) for p, ys in levels[k] for y in ys)

    with mpmath.workdps(ORACLE_DPS):
        return float(lineages(0))


def compare_with_iterate(seq: EnvSequence, u_points: Sequence[float], curve) -> float:
    """sup over u_points of |oracle − grid curve|."""
    exact = exact_wn_transform(seq, u_points)
    approx = np.array([curve.eval(u) for u in u_points])
    return float(np.max(np.abs(np.array(exact.values) - approx)))


def compare_with_fixture(seq: EnvSequence, path: Path) -> Tuple[ExactTransform, float]:
    """Recompute a committed (u, phi, L) fixture for seq; returns the fresh transform and the sup |Δφ|."""
    fixture = read_curve_csv(path)
    fresh = exact_wn_transform(seq, fixture.grid.points.tolist())
    error = float(np.max(np.abs(np.array(fresh.values) - fixture.phi)))
    logger.debug("oracle fixture", extra={"path": str(path), "sup_error": error})
    return fresh, error
