import json

import pytest

from smoothing_lab.env_model import BurstState, FiniteDiscreteState, ThetaTiltedState, validate_law
from smoothing_lab.models import ExperimentConfig, apply_overrides, load_config, load_law
from smoothing_lab.smoothing import Auto, GaussQuadrature, MonteCarlo
from smoothing_lab.utils import ConfigError, MalformedLaw

COIN_FLIP = {
    "states": [
        {
            "id": "heads",
            "kind": "finite",
            "prob": 0.5,
            "outcomes": [{"p": 0.5, "weights": [0.7, 0.3]}, {"p": 0.5, "weights": [0.5, 0.5]}],
        },
        {"id": "tails", "kind": "finite", "prob": 0.5, "outcomes": [{"p": 1.0, "weights": [0.25] * 4}]},
    ]
}

SPREAD = {
    "states": [
        {
            "id": "spread",
            "outcomes": [
                {"q": 0.5, "children": [{"atom": 0.0}, {"atom": 1.0}]},
                {"q": 0.5, "children": [{"gaussian": {"mu": 0.0, "sigma2": 0.5}}, {"atom": 0.3}]},
            ],
        }
    ]
}


def _write(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def test_load_law_builds_finite_states(tmp_path):
    law = load_law(_write(tmp_path, COIN_FLIP, "law.json"))
    assert [s.id for s in law.members] == ["heads", "tails"]
    assert isinstance(law.members[0], FiniteDiscreteState)
    assert validate_law(law).passed


def test_load_law_rejects_unknown_fields(tmp_path):
    bad = {"states": [{**COIN_FLIP["states"][0], "colour": "red"}]}
    with pytest.raises(MalformedLaw):
        load_law(_write(tmp_path, bad, "law.json"))


def test_load_law_rejects_mismatched_payloads(tmp_path):
    burst_with_outcomes = {"states": [{"id": "b", "kind": "burst", "prob": 1.0, "outcomes": [{"p": 1.0}]}]}
    with pytest.raises(MalformedLaw):
        load_law(_write(tmp_path, burst_with_outcomes, "law.json"))
    with pytest.raises(MalformedLaw):
        load_law(_write(tmp_path, {"states": [{"id": "t", "kind": "tilted", "prob": 1.0}]}, "law.json"))


@pytest.mark.parametrize(
    "state",
    [
        {"id": "b", "kind": "burst", "prob": 1.0, "theta": 0.5},
        {"id": "b", "kind": "burst", "prob": 1.0, "displacement_ref": "spread"},
        {**COIN_FLIP["states"][1], "theta": 0.5},
        {**COIN_FLIP["states"][1], "child_cap": 16},
        {"id": "t", "kind": "tilted", "prob": 1.0, "displacement_ref": "spread", "theta": 0.6, "child_cap": 16},
    ],
)
def test_load_law_rejects_foreign_payload_fields(tmp_path, state):
    with pytest.raises(MalformedLaw):
        load_law(_write(tmp_path, {"states": [state]}, "law.json"))


def test_load_law_unreadable(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(MalformedLaw):
        load_law(path)


def test_config_builds_every_state_kind(tmp_path):
    payload = {
        "seed": 1,
        "laws": {
            "coin_flip": COIN_FLIP,
            "tilted": {
                "states": [{"id": "t", "kind": "tilted", "prob": 1.0, "displacement_ref": "spread", "theta": 0.6}]
            },
            "bursty": {"states": [{"id": "b", "kind": "burst", "prob": 1.0, "child_cap": 64}]},
        },
        "brw_laws": {"spread_law": SPREAD},
        "references": ["deterministic_split", "atom_pair"],
    }
    config = load_config(_write(tmp_path, payload))
    laws = config.weight_laws()
    assert sorted(laws) == ["bursty", "coin_flip", "deterministic_split", "tilted"]
    assert isinstance(laws["tilted"].members[0], ThetaTiltedState)
    assert not laws["tilted"].is_exact
    assert laws["bursty"].members[0] == BurstState("b", 64)
    assert sorted(config.brw_law_map()) == ["atom_pair", "spread_law"]


def test_config_loads_laws_by_path(tmp_path):
    law_path = _write(tmp_path, COIN_FLIP, "coin.json")
    config = ExperimentConfig(seed=1, laws={"coin": str(law_path)})
    law = config.weight_laws()["coin"]
    assert [s.id for s in law.members] == ["heads", "tails"]
    missing = ExperimentConfig(seed=1, laws={"coin": str(tmp_path / "absent.json")})
    with pytest.raises(MalformedLaw):
        missing.weight_laws()


def test_oracle_fixture_specs_are_checked(tmp_path):
    spec = {"law": "two_state_unique", "states": ["A", "B"], "path": "f.csv"}
    config = ExperimentConfig(seed=1, oracle_fixtures=[spec])
    assert config.oracle_fixtures[0].theta is None
    for states in ([], ["A"] * 5):
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, {"seed": 1, "oracle_fixtures": [{**spec, "states": states}]}))


def test_config_rejects_unknown_fields_and_references(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, {"seed": 1, "verbose": True}))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, {"seed": 1, "references": ["no_such_law"]}))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, {"references": ["burst"]}))
    dangling = {
        "seed": 1,
        "laws": {"t": {"states": [{"id": "t", "kind": "tilted", "prob": 1.0, "displacement_ref": "x", "theta": 1.0}]}},
    }
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, dangling))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_config_hash_tracks_content():
    a = ExperimentConfig(seed=1, references=["burst"])
    b = ExperimentConfig(seed=1, references=["burst"])
    c = ExperimentConfig(seed=2, references=["burst"])
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_overrides_win_over_document():
    config = ExperimentConfig(seed=1, out="a")
    updated = apply_overrides(config, seed=5, out=None)
    assert updated.seed == 5 and updated.out == "a"
    assert apply_overrides(config) is config
    with pytest.raises(ConfigError):
        apply_overrides(config, seed=-3)


def test_build_strategy():
    assert ExperimentConfig(seed=1).build_strategy() == Auto()
    gauss = ExperimentConfig(seed=1, strategy={"kind": "gauss", "nodes": 12}).build_strategy()
    assert gauss == Auto(GaussQuadrature(12))
    mc = ExperimentConfig(seed=4, strategy={"kind": "monte-carlo", "budget": 500}).build_strategy()
    assert mc == Auto(MonteCarlo(500, 4))


def test_build_grid_defaults():
    grid = ExperimentConfig(seed=1).build_grid()
    assert len(grid) == 401
    assert grid.points[0] == pytest.approx(1e-8) and grid.points[-1] == pytest.approx(1e8)
