"""
Experiment runner: one entry point routing subcommands to the lab modules,
writing tables and a manifest, and mapping failures to exit statuses.

    0  success
    1  the run completed but some check failed (validate, oracle-check)
    2  a LabError: unusable input or a refused computation
    3  unexpected internal error
"""
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from smoothing_lab import __version__
from smoothing_lab.brwre import (
    SWEEP_HEADER,
    TRAJECTORY_HEADER,
    critical_theta,
    empirical_transform,
    induce_weight_law,
    simulate_replicas,
    theta_sweep,
    validate_brw_law,
    verdict_brw,
)
from smoothing_lab.env_model import (
    BurstState,
    EnvironmentLaw,
    EnvSequence,
    sample_env,
    sampled_mean_check,
    validate_law,
)
from smoothing_lab.models import ExperimentConfig
from smoothing_lab.moments import CSV_HEADER as VERDICT_HEADER
from smoothing_lab.moments import classify, verdict_row
from smoothing_lab.oracle import (
    FIXTURE_TOL,
    compare_with_fixture,
    compare_with_iterate,
    exact_wn_mean,
    exact_wn_transform,
)
from smoothing_lab.smoothing import (
    CURVE_HEADER,
    ITERATION_HEADER,
    LaplaceCurve,
    iterate,
    iteration_log,
    normalize_mean,
    write_curve_csv,
)
from smoothing_lab.spine_walk import (
    TAIL_HEADER,
    WALK_HEADER,
    annealed_step_law,
    drift,
    rate_function,
    tail_sums,
    walk_convolve,
)
from smoothing_lab.utils import (
    ConfigError,
    ContinuousState,
    LabError,
    TooLarge,
    derive_seed,
    fmt_real,
    json_real,
    logger,
    sha256_file,
    tracer,
    write_csv,
    write_json,
)

SUBCOMMANDS = ("validate", "classify", "iterate", "walk", "brw-sim", "brw-verdict", "oracle-check", "report")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_LAB_ERROR = 2
EXIT_INTERNAL = 3

MEAN_SLACK = 1e-12
SWEEP_BUDGET = 10**4


@dataclass
class RunContext:
    config: ExperimentConfig
    out_dir: Path
    fmt: str = "csv"
    threads: int = 1
    outputs: List[Path] = field(default_factory=list)

    def table(self, stem: str, header: Sequence[str], rows) -> Path:
        """Write a table as CSV or as a JSON list of row objects, by the run format."""
        rows = [tuple(r) for r in rows]
        if self.fmt == "json":
            records = [
                {k: json_real(v) if isinstance(v, float) else v for k, v in zip(header, r)} for r in rows
            ]
            path = write_json(self.out_dir / f"{stem}.json", records)
        else:
            path = write_csv(self.out_dir / f"{stem}.csv", header, rows)
        return self.register(path)

    def curve(self, stem: str, curve: LaplaceCurve) -> Path:
        if self.fmt == "json":
            return self.table(stem, CURVE_HEADER, curve.rows())
        return self.register(write_curve_csv(curve, self.out_dir / f"{stem}.csv"))

    def register(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def record(self, stem: str, payload: Any) -> Path:
        return self.register(write_json(self.out_dir / f"{stem}.json", payload))

    def seed(self, *labels) -> int:
        return derive_seed(self.config.seed, list(labels))

    def weight_targets(self) -> Dict[str, EnvironmentLaw]:
        """Configured weight laws plus the induced law of every BRW law at every theta."""
        targets = dict(self.config.weight_laws())
        for name, law in self.config.brw_law_map().items():
            for theta in self.config.thetas:
                targets[f"{name}@{fmt_real(theta)}"] = induce_weight_law(law, theta, self.config.delta)
        return targets


def _validate(ctx: RunContext) -> Tuple[int, Dict[str, Any]]:
    rows, reports = [], {}
    cfg = ctx.config
    for name, law in cfg.weight_laws().items():
        report = validate_law(law).to_dict()
        for _, state in law:
            if isinstance(state, BurstState):
                continue
            seeds = [ctx.seed("sample", name, state.id, i) for i in range(cfg.sample_draws)]
            c = sampled_mean_check(state, seeds)
            report["checks"].append(
                {"name": c.name, "scope": c.scope, "passed": c.passed, "value": c.value, "detail": c.detail}
            )
            report["passed"] = report["passed"] and c.passed
        reports[name] = report
    for name, law in cfg.brw_law_map().items():
        reports[name] = validate_brw_law(law).to_dict()
    for name, rep in reports.items():
        for c in rep["checks"]:
            rows.append((name, c["scope"], c["name"], int(c["passed"]), float(c["value"])))
    ctx.table("validate", ("law", "scope", "check", "passed", "value"), rows)
    for rep in reports.values():
        for c in rep["checks"]:
            c["value"] = json_real(c["value"])
    ctx.record("validate_report", reports)
    failed = {name: [c["name"] for c in rep["checks"] if not c["passed"]] for name, rep in reports.items()}
    failed = {k: v for k, v in failed.items() if v}
    status = EXIT_CHECK_FAILED if failed else EXIT_OK
    return status, {"passed": not failed, "failed": failed}


def _classify(ctx: RunContext) -> Tuple[int, Dict[str, Any]]:
    cfg = ctx.config
    verdicts = {}
    for name, law in ctx.weight_targets().items():
        verdicts[name] = classify(
            law, cfg.moment_budget, ctx.seed("classify", name), threads=ctx.threads, batches=cfg.moment_batches
        )
    ctx.table("verdicts", VERDICT_HEADER, (verdict_row(n, v) for n, v in verdicts.items()))
    records = {n: v.to_record() for n, v in verdicts.items()}
    ctx.record("verdict_records", records)
    return EXIT_OK, {"verdicts": {n: r["verdict"] for n, r in records.items()}}


def _iterate(ctx: RunContext) -> Tuple[int, Dict[str, Any]]:
    cfg = ctx.config
    grid, strat = cfg.build_grid(), cfg.build_strategy()
    depth = max(cfg.depths) if cfg.depths else 0
    summary = {}
    for name, law in ctx.weight_targets().items():
        seq = sample_env(law, depth, ctx.seed("env", name))
        log = iteration_log(seq, grid, strat, n_max=depth, tol=cfg.convergence_tol)
        ctx.table(f"iterate_{name}", ITERATION_HEADER, log.rows())
        for d in sorted(set(cfg.depths)):
            curve = log.curve if d == depth else iterate(seq.prefix(d), grid, strat)
            ctx.curve(f"curve_{name}_n{d}", normalize_mean(curve) if cfg.normalize_curves else curve)
        summary[name] = {
            "depth": depth,
            "g_last": json_real(log.records[-1].g_n) if log.records else None,
            "mean_last": json_real(log.records[-1].mean) if log.records else None,
            "converged_at": log.converged_at,
            "clamped": log.curve.clamp_flag,
        }
    return EXIT_OK, {"iterate": summary}


def _walk(ctx: RunContext) -> Tuple[int, Dict[str, Any]]:
    cfg = ctx.config
    summary = {}
    for name, law in ctx.weight_targets().items():
        if not law.is_exact:
            logger.warning("skipping continuous law for exact convolution", extra={"law": name})
            summary[name] = {"skipped": "continuous"}
            continue
        levels = walk_convolve(law, cfg.walk_n_max, cfg.merge_res)
        ctx.table(f"walk_{name}", WALK_HEADER, (row for n, lvl in enumerate(levels) for row in lvl.rows(n)))
        mu = drift(law)
        step = annealed_step_law(law, cfg.merge_res)
        cs = cfg.tail_c or [mu + 0.5]
        rows, rates = [], []
        for c in cs:
            rate = rate_function(step, c)
            rates.append(rate)
            tails = tail_sums(law, c, cfg.walk_n_max, cfg.merge_res)
            rows.extend((c, *row, math.exp(-row[0] * rate)) for row in tails.rows())
        ctx.table(f"tails_{name}", ("c",) + TAIL_HEADER + ("chernoff",), rows)
        summary[name] = {
            "drift": json_real(mu),
            "atoms": len(levels[-1]),
            "c": [json_real(c) for c in cs],
            "rate": [json_real(r) for r in rates],
        }
    return EXIT_OK, {"walk": summary}


def _brw_sim(ctx: RunContext) -> Tuple[int, Dict[str, Any]]:
    cfg = ctx.config
    summary = {}
    for name, law in cfg.brw_law_map().items():
        seq = sample_env(law, cfg.generations, ctx.seed("env", name))
        for theta in cfg.thetas:
            tag = f"{name}@{fmt_real(theta)}"
            runs = simulate_replicas(
                law, theta, seq, cfg.generations, cfg.replicas, cfg.population_cap,
                ctx.seed("brw-sim", name, fmt_real(theta)), ctx.threads, cfg.delta,
            )
            ctx.table(f"trajectories_{tag}", TRAJECTORY_HEADER, (row for t in runs for row in t.rows()))
            final = np.array([t.W[-1] for t in runs])
            summary[tag] = {
                "mean_W": json_real(float(final.mean())),
                "se_W": json_real(float(final.std(ddof=1) / math.sqrt(final.size)) if final.size > 1 else math.inf),
                "median_W": json_real(float(np.median(final))),
                "extinct": int(np.sum(final == 0.0)),
                "transform": {
                    fmt_real(u): [json_real(x) for x in empirical_transform(runs, u)] for u in cfg.transform_u
                },
            }
    return EXIT_OK, {"brw-sim": summary}


def _brw_verdict(ctx: RunContext) -> Tuple[int, Dict[str, Any]]:
    cfg = ctx.config
    records, sweeps = {}, {}
    for name, law in cfg.brw_law_map().items():
        for theta in cfg.thetas:
            v = verdict_brw(law, theta, cfg.moment_budget, ctx.seed("brw-verdict", name, fmt_real(theta)), cfg.delta, ctx.threads)
            records[f"{name}@{fmt_real(theta)}"] = v.to_record()
        lo, hi = cfg.theta_range
        try:
            sweeps[name] = list(critical_theta(law, lo, hi, cfg.theta_step, cfg.delta))
        except LabError as e:
            sweeps[name] = {"error": e.code, "message": str(e)}
        rows = theta_sweep(law, lo, hi, cfg.theta_step, budget=SWEEP_BUDGET, seed=ctx.seed("sweep", name), delta=cfg.delta)
        ctx.table(f"sweep_{name}", SWEEP_HEADER, rows)
    ctx.record("brw_verdicts", {"verdicts": records, "critical_theta": sweeps})
    return EXIT_OK, {"brw-verdict": {k: r["verdict"] for k, r in records.items()}, "critical_theta": sweeps}


def _oracle_check(ctx: RunContext) -> Tuple[int, Dict[str, Any]]:
    cfg = ctx.config
    grid, strat = cfg.build_grid(), cfg.build_strategy()
    results, failed = {}, []
    for name, law in ctx.weight_targets().items():
        seq = sample_env(law, cfg.oracle_depth, ctx.seed("oracle", name))
        try:
            exact = exact_wn_transform(seq, cfg.oracle_u)
            mean = exact_wn_mean(seq)
        except (TooLarge, ContinuousState) as e:
            results[name] = {"skipped": e.code}
            continue
        curve = iterate(seq, grid, strat)
        approx = np.array([curve.eval(u) for u in cfg.oracle_u])
        error = float(np.max(np.abs(np.array(exact.values) - approx)))
        ctx.table(f"oracle_{name}", ("u", "exact", "grid"), zip(exact.u_points, exact.values, approx.tolist()))
        quenched_means = [s.quenched_mean() for s in seq.states]
        expected_mean = math.prod(quenched_means)
        passed = error <= cfg.oracle_tol and abs(mean - expected_mean) <= MEAN_SLACK
        results[name] = {"sup_error": error, "exact_mean": mean, "passed": passed}
        if not passed:
            failed.append(name)
    for spec in cfg.oracle_fixtures:
        stem = Path(spec.path).stem
        seq = _fixture_sequence(ctx, spec.law, spec.theta, spec.states)
        fresh, error = compare_with_fixture(seq, Path(spec.path))
        grid_error = compare_with_iterate(seq, fresh.u_points, iterate(seq, grid, strat))
        ctx.register(fresh.to_csv(ctx.out_dir / f"fixture_{stem}.csv"))
        passed = error <= FIXTURE_TOL and grid_error <= cfg.oracle_tol
        results[f"fixture:{stem}"] = {"sup_error": error, "grid_error": grid_error, "passed": passed}
        if not passed:
            failed.append(f"fixture:{stem}")
    ctx.record("oracle_check", results)
    return (EXIT_CHECK_FAILED if failed else EXIT_OK), {"oracle-check": results, "failed": failed}


def _fixture_sequence(ctx: RunContext, law_name: str, theta: Optional[float], states: Sequence[str]) -> EnvSequence:
    cfg = ctx.config
    if theta is None:
        laws = cfg.weight_laws()
        if law_name not in laws:
            raise ConfigError(f"oracle fixture names unknown weight law {law_name!r}")
        law = laws[law_name]
    else:
        brw = cfg.brw_law_map()
        if law_name not in brw:
            raise ConfigError(f"oracle fixture names unknown BRW law {law_name!r}")
        law = induce_weight_law(brw[law_name], theta, cfg.delta)
    return EnvSequence(tuple(law.state(i) for i in states))


def _report(ctx: RunContext) -> Tuple[int, Dict[str, Any]]:
    status_v, validated = _validate(ctx)
    _, classified = _classify(ctx)
    _, brw = _brw_verdict(ctx)
    rows = [("weight", n, "", v) for n, v in classified["verdicts"].items()]
    for tag, v in brw["brw-verdict"].items():
        name, _, theta = tag.partition("@")
        rows.append(("brw", name, theta, v))
    ctx.table("report", ("space", "law", "theta", "verdict"), rows)
    return status_v, {"validation": validated, **classified, **brw}


ACTIONS: Dict[str, Callable[[RunContext], Tuple[int, Dict[str, Any]]]] = {
    "validate": _validate,
    "classify": _classify,
    "iterate": _iterate,
    "walk": _walk,
    "brw-sim": _brw_sim,
    "brw-verdict": _brw_verdict,
    "oracle-check": _oracle_check,
    "report": _report,
}


def _manifest(ctx: RunContext, subcommand: str, seconds: float) -> Path:
    return write_json(
        ctx.out_dir / "manifest.json",
        {
            "tool": "smoothing-lab",
            "version": __version__,
            "subcommand": subcommand,
            "config_sha256": ctx.config.config_hash(),
            "outputs": {p.name: sha256_file(p) for p in ctx.outputs},
            "timing": {"seconds": round(seconds, 3)},
        },
    )


@tracer.capture_method(capture_response=False)
def run(
    subcommand: str,
    config: ExperimentConfig,
    out_dir: Optional[Path] = None,
    fmt: str = "csv",
    threads: int = 1,
) -> Tuple[int, Dict[str, Any]]:
    """
    Route a subcommand and return (exit status, payload). LabErrors become
    {"error", "message", "action"} records, never tracebacks.
    """

    def _response(status: int, payload: Dict[str, Any]) -> Tuple[int, Dict[str, Any]]:
        return status, {"action": subcommand, "status": status, **payload}

    action = ACTIONS.get(subcommand)
    if action is None:
        msg = f"Unsupported subcommand: {subcommand}"
        logger.error(msg)
        return _response(EXIT_LAB_ERROR, {"error": "config", "message": msg})

    ctx = RunContext(config, Path(out_dir or config.out), fmt, threads)
    started = time.perf_counter()
    try:
        status, payload = action(ctx)
        manifest = _manifest(ctx, subcommand, time.perf_counter() - started)
        logger.info("run finished", extra={"action": subcommand, "status": status, "outputs": len(ctx.outputs)})
        return _response(status, {**payload, "manifest": str(manifest)})
    except LabError as err:
        logger.exception("Handled LabError")
        return _response(EXIT_LAB_ERROR, err.to_record())
    except Exception:
        logger.exception("Unexpected error in run")
        return _response(EXIT_INTERNAL, {"error": "internal", "message": "Internal error"})
