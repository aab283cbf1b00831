import json
import math
from pathlib import Path

import pytest

import app
from smoothing_lab.handler import EXIT_CHECK_FAILED, EXIT_LAB_ERROR, EXIT_OK, run
from smoothing_lab.models import ExperimentConfig
from smoothing_lab.oracle import FIXTURE_TOL
from smoothing_lab.smoothing import convergence_depth, mean_at_zero, read_curve_csv
from smoothing_lab.utils import read_csv

FIXTURES = Path(__file__).parent / "fixtures"
UNIQUE_FIXTURE = {
    "law": "two_state_unique",
    "states": ["A", "B", "A"],
    "path": str(FIXTURES / "oracle_two_state_unique_ABA.csv"),
}
ATOM_FIXTURE = {
    "law": "atom_pair",
    "theta": 0.5,
    "states": ["Q", "P", "P"],
    "path": str(FIXTURES / "oracle_atom_pair_QPP.csv"),
}

FAR_ATOMS = {
    "states": [{"id": "far", "outcomes": [{"q": 1.0, "children": [{"atom": -10.0}, {"atom": -10.0}]}]}]
}


def _config(**fields) -> ExperimentConfig:
    return ExperimentConfig.model_validate({"seed": 11, **fields})


def _manifest(payload):
    with open(payload["manifest"], encoding="utf-8") as fh:
        return json.load(fh)


def test_validate_passes_reference_laws(tmp_path):
    status, payload = run("validate", _config(references=["deterministic_split", "twin_atoms"]), tmp_path)
    assert status == EXIT_OK
    assert payload["action"] == "validate"
    assert payload["passed"]
    assert (tmp_path / "validate.csv").exists()


def test_validate_adds_sampled_means(tmp_path):
    status, _ = run("validate", _config(references=["two_state_unique", "burst"], sample_draws=500), tmp_path)
    assert status == EXIT_OK
    rows = [r for r in read_csv(tmp_path / "validate.csv") if r["check"] == "sampled_mean"]
    assert sorted((r["law"], r["scope"]) for r in rows) == [("two_state_unique", "A"), ("two_state_unique", "B")]
    assert all(r["passed"] == "1" for r in rows)


def test_validate_reads_law_files(tmp_path):
    law = {"states": [{"id": "s", "kind": "finite", "prob": 1.0, "outcomes": [{"p": 1.0, "weights": [0.5, 0.5]}]}]}
    path = tmp_path / "law.json"
    path.write_text(json.dumps(law), encoding="utf-8")
    status, payload = run("validate", _config(laws={"from_file": str(path)}), tmp_path / "out")
    assert status == EXIT_OK and payload["passed"]


def test_validate_reports_failed_checks(tmp_path):
    status, payload = run("validate", _config(references=["mean_two"]), tmp_path)
    assert status == EXIT_CHECK_FAILED
    assert "quenched_mean" in payload["failed"]["mean_two"]


def test_classify_writes_verdicts(tmp_path):
    status, payload = run("classify", _config(references=["deterministic_split", "burst"]), tmp_path)
    assert status == EXIT_OK
    assert payload["verdicts"] == {"deterministic_split": "UNIQUE_L1", "burst": "NO_L1_XLOGX"}
    rows = {r["law"]: r for r in read_csv(tmp_path / "verdicts.csv")}
    assert rows["burst"]["c2"] == "inf"
    records = json.loads((tmp_path / "verdict_records.json").read_text(encoding="utf-8"))
    assert records["burst"]["c2"] == "inf"


def test_classify_covers_induced_brw_laws(tmp_path):
    config = _config(references=["atom_pair"], thetas=[0.5])
    status, payload = run("classify", config, tmp_path)
    assert status == EXIT_OK
    assert "atom_pair@0.5" in payload["verdicts"]


def test_json_format_tables(tmp_path):
    status, _ = run("classify", _config(references=["deterministic_split"]), tmp_path, fmt="json")
    assert status == EXIT_OK
    table = json.loads((tmp_path / "verdicts.json").read_text(encoding="utf-8"))
    assert table[0]["law"] == "deterministic_split"


def test_iterate_outputs_are_reproducible(tmp_path):
    config = _config(references=["two_state_unique"], depths=[3, 6])
    first = run("iterate", config, tmp_path / "a")
    second = run("iterate", config, tmp_path / "b", threads=4)
    assert first[0] == second[0] == EXIT_OK
    a, b = _manifest(first[1]), _manifest(second[1])
    assert a["outputs"] == b["outputs"]
    assert set(a["outputs"]) == {
        "iterate_two_state_unique.csv",
        "curve_two_state_unique_n3.csv",
        "curve_two_state_unique_n6.csv",
    }
    assert a["config_sha256"] == config.config_hash()


def test_iterate_reports_convergence_over_the_tail(tmp_path):
    config = _config(references=["atom_pair"], thetas=[0.8], depths=[50])
    status, payload = run("iterate", config, tmp_path)
    assert status == EXIT_OK
    g = [float(r["g_n"]) for r in read_csv(tmp_path / "iterate_atom_pair.8.csv")]
    assert len(g) == 50
    reported = payload["iterate"]["atom_pair.8"]["converged_at"]
    assert reported == convergence_depth(g, config.convergence_tol)
    if reported is not None:
        assert all(x < config.convergence_tol for x in g[reported - 1 :])


def test_iterate_can_normalize_curves(tmp_path):
    config = _config(references=["mean_two"], depths=[3], normalize_curves=True)
    status, _ = run("iterate", config, tmp_path)
    assert status == EXIT_OK
    curve = read_curve_csv(tmp_path / "curve_mean_two_n3.csv")
    assert mean_at_zero(curve) == pytest.approx(1.0, abs=1e-6)
    assert curve.eval(1.0) == pytest.approx(math.exp(-1.0), rel=1e-6)


def test_seed_changes_outputs(tmp_path):
    base = run("iterate", _config(references=["two_state_unique"], depths=[20]), tmp_path / "a")
    other = run("iterate", _config(references=["two_state_unique"], depths=[20], seed=12), tmp_path / "b")
    assert _manifest(base[1])["outputs"] != _manifest(other[1])["outputs"]


def test_walk_writes_levels_and_tails(tmp_path):
    status, payload = run("walk", _config(references=["deterministic_split"], walk_n_max=10), tmp_path)
    assert status == EXIT_OK
    assert payload["walk"]["deterministic_split"]["atoms"] == 1
    assert (tmp_path / "tails_deterministic_split.csv").exists()


def test_walk_tails_sit_under_the_chernoff_bound(tmp_path):
    status, payload = run("walk", _config(references=["two_state_unique"], walk_n_max=20), tmp_path)
    assert status == EXIT_OK
    assert payload["walk"]["two_state_unique"]["rate"][0] > 0
    rows = read_csv(tmp_path / "tails_two_state_unique.csv")
    assert len(rows) == 20
    assert all(float(r["increment"]) <= float(r["chernoff"]) + 1e-12 for r in rows)


def test_walk_skips_continuous_laws(tmp_path):
    status, payload = run("walk", _config(references=["binary_gaussian"], thetas=[0.8], walk_n_max=5), tmp_path)
    assert status == EXIT_OK
    assert payload["walk"]["binary_gaussian@0.8"] == {"skipped": "continuous"}


def test_brw_sim_twins(tmp_path):
    config = _config(references=["twin_atoms"], thetas=[1.0], generations=5, replicas=3)
    status, payload = run("brw-sim", config, tmp_path)
    assert status == EXIT_OK
    summary = payload["brw-sim"]["twin_atoms@1.0"]
    assert summary["mean_W"] == pytest.approx(1.0)
    assert summary["extinct"] == 0
    assert len(read_csv(tmp_path / "trajectories_twin_atoms@1.0.csv")) == 3 * 6


def test_brw_verdict_and_critical_theta(tmp_path):
    config = _config(references=["binary_gaussian"], thetas=[0.8, 1.5], moment_budget=10**4)
    status, payload = run("brw-verdict", config, tmp_path)
    assert status == EXIT_OK
    assert payload["brw-verdict"] == {"binary_gaussian@0.8": "MEAN_ONE", "binary_gaussian@1.5": "DEGENERATE"}
    assert payload["critical_theta"]["binary_gaussian"] == pytest.approx([1.15, 1.2])


def test_oracle_check(tmp_path):
    config = _config(references=["deterministic_split", "two_state_unique", "burst"])
    status, payload = run("oracle-check", config, tmp_path)
    assert status == EXIT_OK
    assert payload["oracle-check"]["burst"] == {"skipped": "too_large"}
    assert payload["oracle-check"]["two_state_unique"]["passed"]


def test_oracle_check_recomputes_fixtures(tmp_path):
    config = _config(references=["two_state_unique", "atom_pair"], oracle_fixtures=[UNIQUE_FIXTURE, ATOM_FIXTURE])
    status, payload = run("oracle-check", config, tmp_path)
    assert status == EXIT_OK
    for stem in ("oracle_two_state_unique_ABA", "oracle_atom_pair_QPP"):
        result = payload["oracle-check"][f"fixture:{stem}"]
        assert result["passed"] and result["sup_error"] <= FIXTURE_TOL
        exported = read_curve_csv(tmp_path / f"fixture_{stem}.csv")
        committed = read_curve_csv(FIXTURES / f"{stem}.csv")
        assert exported.phi == pytest.approx(committed.phi, abs=FIXTURE_TOL)
    assert "fixture_oracle_atom_pair_QPP.csv" in _manifest(payload)["outputs"]


def test_oracle_check_flags_a_stale_fixture(tmp_path):
    stale = {**UNIQUE_FIXTURE, "states": ["B", "B", "A"]}
    status, payload = run("oracle-check", _config(references=["two_state_unique"], oracle_fixtures=[stale]), tmp_path)
    assert status == EXIT_CHECK_FAILED
    assert payload["failed"] == ["fixture:oracle_two_state_unique_ABA"]


def test_oracle_check_rejects_unknown_fixture_laws(tmp_path):
    status, payload = run("oracle-check", _config(oracle_fixtures=[{**ATOM_FIXTURE, "law": "nowhere"}]), tmp_path)
    assert status == EXIT_LAB_ERROR
    assert payload["error"] == "config"


def test_report(tmp_path):
    status, payload = run("report", _config(references=["deterministic_split"]), tmp_path)
    assert status == EXIT_OK
    rows = read_csv(tmp_path / "report.csv")
    assert rows == [{"space": "weight", "law": "deterministic_split", "theta": "", "verdict": "UNIQUE_L1"}]


def test_lab_errors_become_records(tmp_path):
    config = _config(brw_laws={"far": FAR_ATOMS}, thetas=[10.0])
    status, payload = run("classify", config, tmp_path)
    assert status == EXIT_LAB_ERROR
    assert payload["error"] == "ellipticity_violation"
    assert payload["action"] == "classify"


def test_unsupported_subcommand(tmp_path):
    status, payload = run("bake", _config(), tmp_path)
    assert status == EXIT_LAB_ERROR
    assert payload["error"] == "config"


def test_cli_main(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 3, "references": ["deterministic_split"]}), encoding="utf-8")
    out = tmp_path / "out"
    assert app.main(["validate", "--config", str(path), "--out", str(out)]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["status"] == EXIT_OK
    assert (out / "manifest.json").exists()


def test_cli_rejects_bad_config(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 3, "mystery": 1}), encoding="utf-8")
    assert app.main(["classify", "--config", str(path)]) == EXIT_LAB_ERROR
    assert json.loads(capsys.readouterr().out)["error"] == "config"
