import itertools
import math
from pathlib import Path

import numpy as np
import pytest

from smoothing_lab import reference
from smoothing_lab.brwre import induce_weight_law
from smoothing_lab.env_model import BurstState, EnvSequence, FiniteDiscreteState
from smoothing_lab.oracle import (
    FIXTURE_TOL,
    ExactTransform,
    compare_with_fixture,
    compare_with_iterate,
    exact_wn_mean,
    exact_wn_transform,
)
from smoothing_lab.smoothing import iterate, read_curve_csv
from smoothing_lab.utils import ContinuousState, PreconditionError, TooLarge, read_csv
from tests.unit.support import GRID_ERROR

SPLIT = reference.deterministic_split().members[0]
COIN = reference.extinction_pair().members[0]
U_POINTS = np.geomspace(1e-3, 10.0, 21).tolist()
FIXTURES = Path(__file__).parent / "fixtures"


def _seq(*states) -> EnvSequence:
    return EnvSequence(tuple(states))


@pytest.mark.parametrize("n", [0, 1, 3, 4])
def test_split_keeps_exponential(n):
    exact = exact_wn_transform(_seq(*[SPLIT] * n), [1.0])
    assert exact.values[0] == pytest.approx(math.exp(-1.0), rel=1e-15)
    assert exact.depth == n


def test_extinction_pair_values():
    assert exact_wn_transform(_seq(COIN), [1.0]).values[0] == pytest.approx(0.5 + 0.5 * math.exp(-2.0), rel=1e-15)
    two = exact_wn_transform(_seq(COIN, COIN), [1.0]).values[0]
    assert two == pytest.approx(0.75 + 0.25 * math.exp(-4.0), rel=1e-15)
    assert two == pytest.approx(0.754579, abs=1e-6)


def test_digits_carry_more_precision_than_floats():
    exact = exact_wn_transform(_seq(COIN, COIN), [1.0])
    assert len(exact.digits[0].replace("0.", "", 1)) >= 25
    assert float(exact.digits[0]) == pytest.approx(exact.values[0], rel=1e-15)


def test_values_decrease_in_u():
    law = induce_weight_law(reference.atom_pair(), reference.ATOM_PAIR_THETA)
    exact = exact_wn_transform(_seq(law.state("P"), law.state("Q"), law.state("P")), U_POINTS)
    assert np.all(np.diff(exact.values) < 0)
    assert exact.state_ids == ("P", "Q", "P")


@pytest.mark.parametrize("n", [1, 2, 3])
def test_mean_is_one_for_every_atom_environment(n):
    law = induce_weight_law(reference.atom_pair(), reference.ATOM_PAIR_THETA)
    for ids in itertools.product("PQ", repeat=n):
        seq = _seq(*[law.state(i) for i in ids])
        assert exact_wn_mean(seq) == pytest.approx(1.0, abs=1e-12)


def test_mean_follows_quenched_means():
    shrinking = FiniteDiscreteState("shrink", ((1.0, (0.45, 0.45)),))
    assert exact_wn_mean(_seq(*[shrinking] * 3)) == pytest.approx(0.9**3, rel=1e-14)
    assert exact_wn_mean(_seq()) == 1.0


def test_oracle_limits():
    with pytest.raises(TooLarge):
        exact_wn_transform(_seq(*[SPLIT] * 5), [1.0])
    wide = FiniteDiscreteState("wide", tuple((0.2, (1.0,)) for _ in range(5)))
    with pytest.raises(TooLarge):
        exact_wn_transform(_seq(wide), [1.0])
    crowded = FiniteDiscreteState("crowded", ((1.0, (0.25, 0.25, 0.25, 0.25)),))
    with pytest.raises(TooLarge):
        exact_wn_transform(_seq(crowded), [1.0])
    with pytest.raises(TooLarge):
        exact_wn_mean(_seq(BurstState("b")))
    gaussian = induce_weight_law(reference.binary_gaussian(), 0.8).members[0]
    with pytest.raises(ContinuousState):
        exact_wn_transform(_seq(gaussian), [1.0])
    with pytest.raises(PreconditionError):
        exact_wn_transform(_seq(SPLIT), [1.0], n=2)


def test_grid_iteration_matches_oracle(grid):
    law = induce_weight_law(reference.atom_pair(), reference.ATOM_PAIR_THETA)
    seq = _seq(law.state("P"), law.state("Q"), law.state("Q"))
    assert compare_with_iterate(seq, U_POINTS, iterate(seq, grid)) <= GRID_ERROR


def test_grid_iteration_matches_oracle_for_finite_law(grid):
    law = reference.two_state_unique()
    seq = _seq(law.state("A"), law.state("B"), law.state("A"), law.state("B"))
    assert compare_with_iterate(seq, U_POINTS, iterate(seq, grid)) <= GRID_ERROR


def test_transform_csv_export(tmp_path):
    exact = exact_wn_transform(_seq(COIN), [0.5, 1.0])
    assert isinstance(exact, ExactTransform)
    rows = read_csv(exact.to_csv(tmp_path / "oracle.csv"))
    assert [float(r["u"]) for r in rows] == [0.5, 1.0]
    assert float(rows[1]["phi"]) == exact.values[1]
    assert float(rows[1]["L"]) == pytest.approx(math.log(2.0) - math.log1p(math.exp(-2.0)), rel=1e-12)


def test_transform_reads_back_as_a_curve(tmp_path):
    law = reference.two_state_unique()
    exact = exact_wn_transform(_seq(law.state("B"), law.state("A")), U_POINTS)
    curve = read_curve_csv(exact.to_csv(tmp_path / "oracle.csv"))
    assert tuple(curve.grid.points.tolist()) == exact.u_points
    assert curve.phi == pytest.approx(exact.values, rel=1e-14)


def _fixture_cases():
    unique = reference.two_state_unique()
    tilted = induce_weight_law(reference.atom_pair(), reference.ATOM_PAIR_THETA)
    return [
        ("oracle_two_state_unique_ABA.csv", _seq(unique.state("A"), unique.state("B"), unique.state("A"))),
        ("oracle_atom_pair_QPP.csv", _seq(tilted.state("Q"), tilted.state("P"), tilted.state("P"))),
    ]


@pytest.mark.parametrize("name, seq", _fixture_cases())
def test_committed_fixtures_match_a_fresh_oracle(name, seq):
    fresh, error = compare_with_fixture(seq, FIXTURES / name)
    assert error <= FIXTURE_TOL
    assert fresh.depth == 3
    assert fresh.u_points == tuple(read_curve_csv(FIXTURES / name).grid.points.tolist())


@pytest.mark.parametrize("name, seq", _fixture_cases())
def test_grid_iteration_matches_committed_fixtures(grid, name, seq):
    fixture = read_curve_csv(FIXTURES / name)
    curve = iterate(seq, grid)
    approx = np.array([curve.eval(float(u)) for u in fixture.grid.points])
    assert float(np.max(np.abs(approx - fixture.phi))) <= GRID_ERROR


def test_fixture_detects_a_wrong_environment():
    law = reference.two_state_unique()
    seq = _seq(law.state("B"), law.state("B"), law.state("A"))
    _, error = compare_with_fixture(seq, FIXTURES / "oracle_two_state_unique_ABA.csv")
    assert error > 1e-3
