"""
Quenched Laplace curves on a u-grid, the smoothing operator H and the
fixed-point iteration with its diagnostics.

A curve stores L(u) = −log φ(u) on the grid. Off the grid:

* between grid points: monotone cubic (PCHIP) interpolation of log L against
  log u, falling back to linear L in log u when some stored L vanish;
* below the grid: L(u₁)·u/u₁ (L is linear near 0 with slope the mean);
* above the grid: L(u_G), and the evaluation is flagged as clamped.
"""
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import PchipInterpolator
from scipy.special import logsumexp

from smoothing_lab.env_model import (
    EnvironmentLaw,
    EnvSequence,
    EnvState,
    FiniteDiscreteState,
    OutcomeTable,
    ThetaTiltedState,
)
from smoothing_lab.displacement import Atom, Gaussian
from smoothing_lab.spine_walk import quenched_convolve
from smoothing_lab.utils import (
    ContinuousState,
    GridMismatch,
    InvalidCurve,
    NegativeArgument,
    NonpositiveU,
    PreconditionError,
    StrategyMismatch,
    TooDeep,
    derive_seed,
    fmt_real,
    logger,
    read_csv,
    tracer,
    write_csv,
)

DEFAULT_U_MIN = 1e-8
DEFAULT_U_MAX = 1e8
DEFAULT_POINTS = 401

SHAPE_SLACK = 1e-10
SHAPE_RTOL = 1e-6
G_METRIC_U_MAX = 10.0
CONVERGENCE_TOL = 1e-6
CONVERGENCE_WINDOW = 5
MAX_TELESCOPE_DEPTH = 5
ROW_BLOCK = 4096
MAX_QUADRATURE_ROWS = 10**6

CURVE_HEADER = ("u", "phi", "L")
ITERATION_HEADER = ("n", "g_n", "mean", "clamp_flag")


@dataclass(frozen=True, eq=False)
class UGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size < 3:
            raise PreconditionError(f"a u-grid needs at least 3 points, got {pts.size}")
        if not np.all(np.isfinite(pts)) or pts[0] <= 0:
            raise PreconditionError("u-grid points must be finite and positive")
        if np.any(np.diff(pts) <= 0):
            raise PreconditionError("u-grid points must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def geometric(cls, lo: float = DEFAULT_U_MIN, hi: float = DEFAULT_U_MAX, size: int = DEFAULT_POINTS) -> "UGrid":
        if not 0 < lo < hi:
            raise PreconditionError(f"need 0 < lo < hi, got {lo}, {hi}")
        return cls(np.geomspace(lo, hi, size))

    @classmethod
    def default(cls) -> "UGrid":
        return cls.geometric()

    def __len__(self) -> int:
        return self.points.size

    @cached_property
    def log_points(self) -> np.ndarray:
        return np.log(self.points)

    def same_as(self, other: "UGrid") -> bool:
        return self is other or np.array_equal(self.points, other.points)


@dataclass(frozen=True, eq=False)
class LaplaceCurve:
    """φ(u) = exp(−L(u)) sampled on a grid."""

    grid: UGrid
    L: np.ndarray
    clamp_flag: bool = False

    def __post_init__(self):
        L = np.array(self.L, dtype=np.float64)
        if L.shape != self.grid.points.shape:
            raise InvalidCurve(f"curve has {L.size} values for a {len(self.grid)}-point grid")
        if not np.all(np.isfinite(L)) or np.any(L < -SHAPE_SLACK):
            raise InvalidCurve("L = −log φ must be finite and non-negative (φ in (0, 1])")
        L = np.maximum(L, 0.0)
        L.setflags(write=False)
        object.__setattr__(self, "L", L)

    @classmethod
    def exponential(cls, grid: UGrid) -> "LaplaceCurve":
        """e^(−u), the transform of the unit point mass."""
        return cls(grid, grid.points.copy())

    @classmethod
    def constant_one(cls, grid: UGrid) -> "LaplaceCurve":
        return cls(grid, np.zeros(len(grid)))

    @classmethod
    def from_phi(cls, grid: UGrid, phi: Sequence[float], clamp_flag: bool = False) -> "LaplaceCurve":
        phi = np.asarray(phi, dtype=np.float64)
        if np.any(phi <= 0) or np.any(phi > 1):
            raise InvalidCurve("φ values must lie in (0, 1]")
        return cls(grid, -np.log(phi), clamp_flag)

    @property
    def phi(self) -> np.ndarray:
        return np.exp(-self.L)

    @cached_property
    def _pchip(self) -> Optional[PchipInterpolator]:
        if np.all(self.L > 0):
            return PchipInterpolator(self.grid.log_points, np.log(self.L))
        return None

    def _interpolate(self, log_u: np.ndarray) -> np.ndarray:
        if self._pchip is not None:
            return np.exp(self._pchip(log_u))
        return np.interp(log_u, self.grid.log_points, self.L)

    def L_at(self, u) -> Tuple[np.ndarray, bool]:
        """L at arbitrary u ≥ 0 (any shape); the flag reports evaluation above the grid."""
        u = np.asarray(u, dtype=np.float64)
        flat = u.ravel()
        if np.any(np.isnan(flat)) or np.any(flat < 0):
            raise NegativeArgument("Laplace curves are evaluated at u >= 0 only")
        pts, L = self.grid.points, self.L
        out = np.zeros_like(flat)
        below = (flat > 0) & (flat < pts[0])
        out[below] = L[0] * flat[below] / pts[0]
        above = flat > pts[-1]
        out[above] = L[-1]
        inside = (flat >= pts[0]) & ~above
        if inside.any():
            x = flat[inside]
            idx = np.minimum(np.searchsorted(pts, x), pts.size - 1)
            out[inside] = np.where(pts[idx] == x, L[idx], self._interpolate(np.log(x)))
        return out.reshape(u.shape), bool(above.any())

    def eval(self, u: float) -> float:
        if u < 0:
            raise NegativeArgument(f"u must be >= 0, got {u}")
        L, _ = self.L_at(u)
        return float(np.exp(-L))

    def violations(self, slack: float = SHAPE_SLACK, rtol: float = SHAPE_RTOL) -> List[str]:
        """Shape defects: L must be nondecreasing and concave, φ convex."""
        du = np.diff(self.grid.points)
        dL = np.diff(self.L)
        found = []
        if np.any(dL < -slack):
            found.append("phi-increasing")
        slopes = dL / du
        if np.any(np.diff(slopes) > slack + rtol * np.abs(slopes[:-1])):
            found.append("L-not-concave")
        dphi = -np.exp(-self.L[:-1]) * -np.expm1(-dL) / du
        if np.any(np.diff(dphi) < -(slack + rtol * np.abs(dphi[:-1]))):
            found.append("phi-not-convex")
        return found

    def validate(self) -> "LaplaceCurve":
        found = self.violations()
        if found:
            raise InvalidCurve(f"curve violates {found}")
        return self

    def rows(self):
        for u, phi, L in zip(self.grid.points, self.phi, self.L):
            yield float(u), float(phi), float(L)


def write_curve_csv(curve: LaplaceCurve, path: Path) -> Path:
    return write_csv(path, CURVE_HEADER, curve.rows())


def read_curve_csv(path: Path) -> LaplaceCurve:
    """Re-import a curve; L is the authoritative column."""
    try:
        rows = read_csv(path)
        u = np.array([float(r["u"]) for r in rows])
        L = np.array([float(r["L"]) for r in rows])
    except (OSError, KeyError, ValueError) as e:
        raise InvalidCurve(f"cannot read curve {path}: {e}") from e
    return LaplaceCurve(UGrid(u), L)


class ExpectationStrategy:
    """How E_state[·] is realized: an outcome table that H sums over."""

    def table(self, state: EnvState, step: int = 0) -> OutcomeTable:
        raise NotImplementedError


@dataclass(frozen=True)
class Exact(ExpectationStrategy):
    def table(self, state: EnvState, step: int = 0) -> OutcomeTable:
        if not state.is_exact:
            raise StrategyMismatch(f"state {state.id!r} is continuous; use MonteCarlo or GaussQuadrature")
        return state.outcome_table()


@dataclass(frozen=True)
class MonteCarlo(ExpectationStrategy):
    """
    One sample of ``budget`` weight vectors per (step, state), shared by all
    grid points of that application.
    """

    budget: int
    seed: int = 0
    label: str = "apply_H"

    def table(self, state: EnvState, step: int = 0) -> OutcomeTable:
        if self.budget <= 0:
            raise StrategyMismatch("MonteCarlo needs a positive budget")
        if isinstance(state, FiniteDiscreteState):
            raise StrategyMismatch(f"finite state {state.id!r} must use Exact")
        rng = np.random.default_rng(derive_seed(self.seed, [self.label, step, state.id]))
        return state.sample_table(rng, self.budget)


@dataclass(frozen=True)
class GaussQuadrature(ExpectationStrategy):
    """Tensor-product Gauss–Hermite rule over the Gaussian children of a tilted state."""

    nodes: int = 20

    def table(self, state: EnvState, step: int = 0) -> OutcomeTable:
        if not isinstance(state, ThetaTiltedState):
            raise StrategyMismatch(f"GaussQuadrature applies to tilted states, not {state.kind.value}")
        if self.nodes < 1:
            raise StrategyMismatch("GaussQuadrature needs at least one node")
        x, w = hermegauss(self.nodes)
        w = w / math.sqrt(2.0 * math.pi)
        probs: List[np.ndarray] = []
        weights: List[np.ndarray] = []
        for q, children in state.displacement.outcomes:
            if q == 0:
                continue
            gaussian = [j for j, c in enumerate(children) if isinstance(c, Gaussian)]
            rows = self.nodes ** len(gaussian)
            if rows > MAX_QUADRATURE_ROWS:
                raise StrategyMismatch(f"{rows} quadrature rows for one outcome; use MonteCarlo")
            grids = np.meshgrid(*[np.arange(self.nodes)] * len(gaussian), indexing="ij")
            picks = [g.ravel() for g in grids] if gaussian else []
            z = np.zeros((rows, max(len(children), 1)))
            p = np.full(rows, q)
            for j, child in enumerate(children):
                if isinstance(child, Atom):
                    z[:, j] = child.z
            for pick, j in zip(picks, gaussian):
                child = children[j]
                z[:, j] = child.mu + math.sqrt(child.sigma2) * x[pick]
                p = p * w[pick]
            y = np.exp(-state.theta * z) / state.m
            y[:, len(children):] = 0.0
            probs.append(p)
            weights.append(y)
        width = max(y.shape[1] for y in weights)
        weights = [np.pad(y, ((0, 0), (0, width - y.shape[1]))) for y in weights]
        table_weights = np.vstack(weights)
        counts = (table_weights > 0).astype(np.float64)
        return OutcomeTable(np.concatenate(probs), table_weights, counts)


@dataclass(frozen=True)
class Auto(ExpectationStrategy):
    """Exact wherever a state can be tabulated, ``fallback`` for the rest."""

    fallback: Optional[ExpectationStrategy] = None

    def table(self, state: EnvState, step: int = 0) -> OutcomeTable:
        if state.is_exact or self.fallback is None:
            return Exact().table(state, step)
        return self.fallback.table(state, step)


def _log_laplace(probs: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """−log Σ_r p_r e^(−Λ_r) per column; log1p for small results, logsumexp otherwise."""
    with np.errstate(divide="ignore", invalid="ignore"):
        small = -np.log1p(probs @ np.expm1(-lam))
        large = -logsumexp(-lam, b=probs[:, None], axis=0)
    return np.where(np.isfinite(small) & (small < 1.0), small, large)


def _row_exponents(curve: LaplaceCurve, table: OutcomeTable, u: np.ndarray):
    """Λ[r, g] = Σ_j counts[r, j]·L(u_g·y[r, j]) in row blocks."""
    lam = np.empty((table.weights.shape[0], u.size))
    clamped = False
    for start in range(0, lam.shape[0], ROW_BLOCK):
        w = table.weights[start : start + ROW_BLOCK]
        n = table.counts[start : start + ROW_BLOCK]
        args = w[:, :, None] * u[None, None, :]
        L, _ = curve.L_at(args)
        lam[start : start + ROW_BLOCK] = np.einsum("rj,rjg->rg", n, L)
        clamped = clamped or bool(np.any((n[:, :, None] > 0) & (args > curve.grid.points[-1])))
    return lam, clamped


def apply_H(
    state: EnvState, curve: LaplaceCurve, strat: ExpectationStrategy = Exact(), step: int = 0
) -> LaplaceCurve:
    """(Hφ)(u) = E_state[∏ᵢ φ(u·yᵢ)] on the curve's grid; extinct outcomes contribute 1."""
    table = strat.table(state, step)
    u = curve.grid.points
    lam, clamped = _row_exponents(curve, table, u)
    L = _log_laplace(table.probs, lam)
    return LaplaceCurve(curve.grid, L, curve.clamp_flag or clamped)


@tracer.capture_method(capture_response=False)
def iterate(seq: EnvSequence, grid: UGrid, strat: ExpectationStrategy = Exact()) -> LaplaceCurve:
    """φₙ(ξ,·) by the backward recursion φ ← H_{ξ_k} φ, k = n−1, …, 0, from e^(−u)."""
    curve = LaplaceCurve.exponential(grid)
    for k in reversed(range(len(seq))):
        curve = apply_H(seq[k], curve, strat, step=seq.offset + k)
    logger.debug("iterated", extra={"depth": len(seq), "clamped": curve.clamp_flag})
    return curve


def g_profile(a: LaplaceCurve, b: LaplaceCurve) -> np.ndarray:
    """u⁻¹|φ_a(u) − φ_b(u)| at every grid point."""
    if not a.grid.same_as(b.grid):
        raise GridMismatch("curves live on different grids")
    lo = np.minimum(a.L, b.L)
    return np.exp(-lo) * -np.expm1(-np.abs(a.L - b.L)) / a.grid.points


def successive_diff(a: LaplaceCurve, b: LaplaceCurve, u_max: float = G_METRIC_U_MAX) -> float:
    profile = g_profile(a, b)
    mask = a.grid.points <= u_max
    if not mask.any():
        raise GridMismatch(f"no grid point at or below u = {u_max}")
    return float(profile[mask].max())


def mean_at_zero(curve: LaplaceCurve) -> float:
    return float(-np.expm1(-curve.L[0]) / curve.grid.points[0])


def phistar(curve: LaplaceCurve, u: float) -> float:
    """φ*(u) = (1 − φ(u))/u."""
    if not u > 0:
        raise NonpositiveU(f"u must be > 0, got {u}")
    L, _ = curve.L_at(u)
    return float(-np.expm1(-L) / u)


def psi_of_state(state: EnvState, grid: UGrid, strat: ExpectationStrategy = Exact()) -> np.ndarray:
    """ψ(u) = (φ₁(u) − 1 + u)/u with φ₁ = H e^(−u)."""
    first = apply_H(state, LaplaceCurve.exponential(grid), strat)
    return 1.0 + np.expm1(-first.L) / grid.points


def a_discrepancy(
    state: EnvState, next_curve: LaplaceCurve, u: float, strat: ExpectationStrategy = Exact()
) -> float:
    """u⁻¹·E[Σᵢ(1 − φ(u yᵢ)) − (1 − ∏ᵢ φ(u yᵢ))], non-negative term by term."""
    if not u > 0:
        raise NonpositiveU(f"u must be > 0, got {u}")
    table = strat.table(state)
    L, _ = next_curve.L_at(u * table.weights)
    singles = (table.counts * -np.expm1(-L)).sum(axis=1)
    joint = -np.expm1(-(table.counts * L).sum(axis=1))
    return float(table.probs @ (singles - joint) / u)


def telescoping_residual(
    law: EnvironmentLaw,
    fixed_curve_by_state: Mapping[str, LaplaceCurve],
    u: float,
    n: int,
    merge_res: float = 1e-9,
) -> float:
    """
    |φ*(ξ,u) + Σ_{k<n} E_ξ A(T^kξ, u e^{S_k}) − E_ξ φ*(T^nξ, u e^{S_n})|,
    averaged over all environment prefixes ξ₀…ξₙ with their probabilities.
    """
    if not u > 0:
        raise NonpositiveU(f"u must be > 0, got {u}")
    if n < 0:
        raise PreconditionError(f"depth must be >= 0, got {n}")
    if n > MAX_TELESCOPE_DEPTH:
        raise TooDeep(f"telescoping enumeration is limited to n <= {MAX_TELESCOPE_DEPTH}, got {n}")
    for _, state in law:
        if not isinstance(state, FiniteDiscreteState):
            raise ContinuousState(f"state {state.id!r} is not finite-discrete")

    members = [(pi, s) for pi, s in law if pi > 0]
    total, weight = 0.0, 0.0
    for path in np.ndindex(*([len(members)] * (n + 1))):
        states = [members[i][1] for i in path]
        prob = math.prod(members[i][0] for i in path)
        curves = [fixed_curve_by_state[s.id] for s in states]
        levels = quenched_convolve(states[:n], merge_res)
        lhs = phistar(curves[0], u)
        for k in range(n):
            lhs += sum(
                mass * a_discrepancy(states[k], curves[k + 1], u * math.exp(x)) for x, mass in levels[k].atoms()
            )
        rhs = sum(mass * phistar(curves[n], u * math.exp(x)) for x, mass in levels[n].atoms())
        total += prob * abs(lhs - rhs)
        weight += prob
    return total / weight


def rescale_mean(curve: LaplaceCurve, c: float) -> LaplaceCurve:
    """The transform of Z/c: u ↦ φ(u/c). Turns a mean-c solution into a mean-one solution."""
    if not c > 0 or not math.isfinite(c):
        raise PreconditionError(f"rescaling needs a finite c > 0, got {c}")
    L, clamped = curve.L_at(curve.grid.points / c)
    return LaplaceCurve(curve.grid, L, curve.clamp_flag or clamped)


def normalize_mean(curve: LaplaceCurve) -> LaplaceCurve:
    return rescale_mean(curve, mean_at_zero(curve))


@dataclass(frozen=True)
class IterationRecord:
    n: int
    g_n: float
    mean: float
    clamp_flag: bool

    def row(self) -> Tuple[Any, ...]:
        return (self.n, fmt_real(self.g_n), fmt_real(self.mean), int(self.clamp_flag))


@dataclass(frozen=True, eq=False)
class IterationLog:
    records: Tuple[IterationRecord, ...]
    curve: LaplaceCurve
    converged_at: Optional[int] = None

    def rows(self):
        return [r.row() for r in self.records]


def convergence_depth(
    g_values: Sequence[float], tol: float = CONVERGENCE_TOL, window: int = CONVERGENCE_WINDOW
) -> Optional[int]:
    """
    First depth n (1-based) from which every remaining gₖ stays below tol,
    provided that tail holds at least ``window`` steps; None otherwise.

    A single small gₙ proves nothing: a state whose weights sum to one almost
    surely maps e^(−u) to itself, so gₙ = 0 whenever it is drawn innermost.
    """
    if window < 1:
        raise PreconditionError(f"convergence window must be >= 1, got {window}")
    start = len(g_values)
    while start > 0 and g_values[start - 1] < tol:
        start -= 1
    if len(g_values) - start < window:
        return None
    return start + 1


@tracer.capture_method(capture_response=False)
def iteration_log(
    seq: EnvSequence,
    grid: UGrid,
    strat: ExpectationStrategy = Exact(),
    n_max: Optional[int] = None,
    tol: Optional[float] = None,
    window: int = CONVERGENCE_WINDOW,
) -> IterationLog:
    """
    φₙ along prefixes of one environment, n = 1 … n_max, with gₙ between
    consecutive depths. With a tolerance the log reports ``converged_at``
    (see convergence_depth); the whole horizon is always computed.
    """
    n_max = len(seq) if n_max is None else n_max
    if n_max > len(seq):
        raise PreconditionError(f"n_max {n_max} exceeds the environment length {len(seq)}")
    previous = LaplaceCurve.exponential(grid)
    records: List[IterationRecord] = []
    for n in range(1, n_max + 1):
        current = iterate(seq.prefix(n), grid, strat)
        g = successive_diff(current, previous)
        records.append(IterationRecord(n, g, mean_at_zero(current), current.clamp_flag))
        previous = current
    converged = None if tol is None else convergence_depth([r.g_n for r in records], tol, window)
    logger.info(
        "iteration finished",
        extra={"steps": len(records), "converged_at": converged, "g_last": records[-1].g_n if records else None},
    )
    return IterationLog(tuple(records), previous, converged)
