import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from smoothing_lab import reference
from smoothing_lab.brwre import BRWEnvironmentLaw
from smoothing_lab.displacement import Atom, DisplacementState, Gaussian
from smoothing_lab.env_model import BurstState, EnvironmentLaw, FiniteDiscreteState, ThetaTiltedState
from smoothing_lab.smoothing import Auto, ExpectationStrategy, GaussQuadrature, MonteCarlo, UGrid
from smoothing_lab.utils import ConfigError, MalformedLaw


class _Doc(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- weight-space law documents ---------------------------------------------- #
class OutcomeDoc(_Doc):
    p: float = Field(ge=0)
    weights: List[float] = []


class StateDoc(_Doc):
    """
    One environment state. ``finite`` needs ``outcomes``; ``tilted`` needs
    ``displacement_ref`` (a displacement state id from ``brw_laws``) and
    ``theta``; ``burst`` takes neither and alone may set ``child_cap``.
    """

    id: str
    kind: Literal["finite", "tilted", "burst"]
    prob: float = Field(ge=0)
    outcomes: Optional[List[OutcomeDoc]] = None
    displacement_ref: Optional[str] = None
    theta: Optional[float] = None
    child_cap: Optional[int] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _payload_matches_kind(self):
        if self.kind == "finite" and not self.outcomes:
            raise ValueError(f"finite state {self.id!r} needs outcomes")
        if self.kind == "tilted" and (self.displacement_ref is None or self.theta is None):
            raise ValueError(f"tilted state {self.id!r} needs displacement_ref and theta")
        if self.kind != "finite" and self.outcomes is not None:
            raise ValueError(f"{self.kind} state {self.id!r} takes no outcomes")
        if self.kind != "tilted" and (self.displacement_ref is not None or self.theta is not None):
            raise ValueError(f"{self.kind} state {self.id!r} takes no displacement_ref or theta")
        if self.kind != "burst" and self.child_cap is not None:
            raise ValueError(f"{self.kind} state {self.id!r} takes no child_cap")
        return self


class LawDoc(_Doc):
    states: List[StateDoc] = Field(min_length=1)


# --- point-process law documents --------------------------------------------- #
class GaussianDoc(_Doc):
    mu: float = 0.0
    sigma2: float = Field(gt=0)


class ChildDoc(_Doc):
    atom: Optional[float] = None
    gaussian: Optional[GaussianDoc] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.atom is None) == (self.gaussian is None):
            raise ValueError("a child is either an atom or a gaussian")
        return self

    def build(self):
        if self.atom is not None:
            return Atom(self.atom)
        return Gaussian(self.gaussian.mu, self.gaussian.sigma2)


class DisplacementOutcomeDoc(_Doc):
    q: float = Field(ge=0)
    children: List[ChildDoc] = []


class DisplacementStateDoc(_Doc):
    id: str
    prob: float = Field(default=1.0, ge=0)
    outcomes: List[DisplacementOutcomeDoc] = Field(min_length=1)

    def build(self) -> DisplacementState:
        return DisplacementState(
            self.id, tuple((o.q, tuple(c.build() for c in o.children)) for o in self.outcomes)
        )


class BRWLawDoc(_Doc):
    states: List[DisplacementStateDoc] = Field(min_length=1)


# --- run settings ------------------------------------------------------------- #
class GridSpec(_Doc):
    lo: float = Field(default=1e-8, gt=0)
    hi: float = 1e8
    points: int = Field(default=401, ge=3)


class OracleFixtureSpec(_Doc):
    """
    A committed (u, phi, L) table for a short environment sequence. ``law``
    names a weight law, or a BRW law when ``theta`` is given; ``states`` lists
    the state ids from the root down.
    """

    law: str
    theta: Optional[float] = None
    states: List[str] = Field(min_length=1, max_length=4)
    path: str


class StrategySpec(_Doc):
    """Used for states that cannot be tabulated; finite states are always summed exactly."""

    kind: Literal["exact", "monte-carlo", "gauss"] = "exact"
    budget: int = Field(default=10_000, ge=0)
    nodes: int = Field(default=20, ge=1)


class ExperimentConfig(_Doc):
    seed: int = Field(ge=0)
    laws: Dict[str, Union[LawDoc, str]] = {}
    brw_laws: Dict[str, BRWLawDoc] = {}
    references: List[str] = []
    thetas: List[float] = []
    grid: GridSpec = GridSpec()
    strategy: StrategySpec = StrategySpec()
    depths: List[int] = [50]
    convergence_tol: float = Field(default=1e-6, gt=0)
    normalize_curves: bool = False
    replicas: int = Field(default=1000, ge=1)
    generations: int = Field(default=10, ge=0)
    population_cap: int = Field(default=10**6, ge=1)
    delta: float = Field(default=1e-6, gt=0)
    theta_range: Tuple[float, float] = (0.05, 3.0)
    theta_step: float = Field(default=0.05, gt=0)
    moment_budget: int = Field(default=10**6, ge=1)
    moment_batches: int = Field(default=100, ge=2)
    sample_draws: int = Field(default=2000, ge=10)
    walk_n_max: int = Field(default=60, ge=0)
    merge_res: float = Field(default=1e-9, gt=0)
    tail_c: List[float] = []
    oracle_depth: int = Field(default=3, ge=0, le=4)
    oracle_u: List[float] = Field(default_factory=lambda: np.geomspace(1e-3, 10.0, 21).tolist())
    oracle_tol: float = Field(default=1e-4, gt=0)
    oracle_fixtures: List[OracleFixtureSpec] = []
    transform_u: List[float] = [0.5, 1.0, 2.0]
    out: str = "out"

    @model_validator(mode="after")
    def _references_resolve(self):
        known = set(reference.WEIGHT_LAWS) | set(reference.BRW_LAWS)
        unknown = [name for name in self.references if name not in known]
        if unknown:
            raise ValueError(f"unknown reference laws {unknown}")
        displacement_ids = {s.id for law in self.brw_laws.values() for s in law.states}
        for name, law in self.laws.items():
            if isinstance(law, str):
                continue
            for state in law.states:
                if state.kind == "tilted" and state.displacement_ref not in displacement_ids:
                    raise ValueError(f"law {name!r}: displacement_ref {state.displacement_ref!r} does not resolve")
        return self

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def displacement_states(self) -> Dict[str, DisplacementState]:
        return {s.id: s.build() for law in self.brw_laws.values() for s in law.states}

    def weight_laws(self) -> Dict[str, EnvironmentLaw]:
        displacements = self.displacement_states()
        laws = {}
        for name, doc in self.laws.items():
            if isinstance(doc, str):
                laws[name] = load_law(Path(doc), displacements)
            else:
                laws[name] = build_weight_law(doc, displacements)
        for name in self.references:
            if name in reference.WEIGHT_LAWS:
                laws[name] = reference.WEIGHT_LAWS[name]()
        return laws

    def brw_law_map(self) -> Dict[str, BRWEnvironmentLaw]:
        laws = {name: build_brw_law(doc) for name, doc in self.brw_laws.items()}
        for name in self.references:
            if name in reference.BRW_LAWS:
                laws[name] = reference.BRW_LAWS[name]()
        return laws

    def build_grid(self) -> UGrid:
        return UGrid.geometric(self.grid.lo, self.grid.hi, self.grid.points)

    def build_strategy(self) -> ExpectationStrategy:
        spec = self.strategy
        if spec.kind == "monte-carlo":
            return Auto(MonteCarlo(spec.budget, self.seed))
        if spec.kind == "gauss":
            return Auto(GaussQuadrature(spec.nodes))
        return Auto()


def build_weight_law(doc: LawDoc, displacements: Dict[str, DisplacementState]) -> EnvironmentLaw:
    states = []
    for s in doc.states:
        if s.kind == "finite":
            state = FiniteDiscreteState(s.id, tuple((o.p, tuple(o.weights)) for o in s.outcomes))
        elif s.kind == "tilted":
            if s.displacement_ref not in displacements:
                raise MalformedLaw(f"displacement_ref {s.displacement_ref!r} does not resolve")
            state = ThetaTiltedState(s.id, displacements[s.displacement_ref], s.theta)
        else:
            state = BurstState(s.id) if s.child_cap is None else BurstState(s.id, s.child_cap)
        states.append((s.prob, state))
    return EnvironmentLaw(tuple(states))


def build_brw_law(doc: BRWLawDoc) -> BRWEnvironmentLaw:
    return BRWEnvironmentLaw(tuple((s.prob, s.build()) for s in doc.states))


def _read_json(path: Path, error: type):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise error(f"cannot read {path}: {e}") from e


def load_config(path: Path) -> ExperimentConfig:
    raw = _read_json(path, ConfigError)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config {path}: {e}") from e


def load_law(path: Path, displacements: Optional[Dict[str, DisplacementState]] = None) -> EnvironmentLaw:
    """A standalone law document ({"states": [...]}); unknown fields are rejected."""
    raw = _read_json(path, MalformedLaw)
    try:
        doc = LawDoc.model_validate(raw)
    except ValidationError as e:
        raise MalformedLaw(f"invalid law document {path}: {e}") from e
    return build_weight_law(doc, displacements or {})


def apply_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Command-line values win over the document; None leaves a field alone."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    if not updates:
        return config
    try:
        return ExperimentConfig.model_validate({**config.model_dump(), **updates})
    except ValidationError as e:
        raise ConfigError(f"invalid override {sorted(updates)}: {e}") from e
