"""Batch front end: ``mfcontrol {validate,solve,gradcheck,oracle} --config run.json``.

Exit codes: 0 success, 1 check or solver failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, plotting
from .coefficients import (check_convexity_B3, check_monotonicity,
                           validate_measure_derivative, validate_pointwise_derivatives)
from .config import SCHEMA_VERSION, RunConfig, load_config
from .errors import ConfigError, MFCError
from .forward import (STREAM_VALIDATORS, ControlField, TimeGrid, draw_noise,
                      moment_diagnostics, stream_rng)
from .lq_oracle import solve_lq_mfc, solve_lq_mfg
from .optimizer import gradient_check, solve

log = logging.getLogger("mfcontrol")

STREAM_GRADCHECK_CONTROL = 4


def _base_report(cfg: RunConfig, command: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "status": "ok",
            "problem": cfg.problem.name, "config": cfg.raw, "seed": cfg.seed,
            "fault": cfg.raw["problem"].get("fault"), "error": None, "artifacts": []}


def _error(report, exc):
    report["status"] = "error"
    report["error"] = {"name": type(exc).__name__, "message": str(exc)}
    return report


def _outdir(cfg: RunConfig, override):
    out = Path(override or cfg.outputs["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_checks(cfg: RunConfig, spec_checks: dict, defaults: bool) -> dict:
    """Run configured validators (and the standard set when ``defaults``)."""
    p = cfg.problem
    seeds = stream_rng(cfg.seed, STREAM_VALIDATORS).integers(0, 2**31, size=16)
    out = {}
    if defaults or "pointwise" in spec_checks:
        kw = spec_checks.get("pointwise", {})
        out["pointwise"] = validate_pointwise_derivatives(
            p, samples=kw.get("samples", 32), h=kw.get("h", 1e-5),
            tol=kw.get("tol", 1e-6), seed=int(seeds[0]), strict=False)
    if defaults or "measure" in spec_checks:
        kw = spec_checks.get("measure", {})
        tags = {"f": p.f_xi, "sigma": p.sigma_xi, "g": p.g_xi or p.g_nu,
                "g_T": p.gT_xi or p.gT_nu}
        for j, (tag, kern) in enumerate(tags.items()):
            if kern is None:
                continue
            out[f"measure_{tag}"] = validate_measure_derivative(
                p, tag, samples=kw.get("samples", 16), eps=kw.get("eps", 1e-4),
                tol=kw.get("tol", 1e-5), seed=int(seeds[1 + j]), strict=False)
    if defaults or "convexity" in spec_checks:
        kw = spec_checks.get("convexity", {})
        lam = kw.get("lam")
        if lam is None:
            lam = cfg.lq.check_convexity() if cfg.lq is not None else 0.1
        out["convexity"] = check_convexity_B3(
            p, mode=kw.get("mode", "control-only"), samples=kw.get("samples", 200),
            lam=lam, seed=int(seeds[6]), strict=False)
    if "monotonicity" in spec_checks:
        kw = spec_checks["monotonicity"]
        for j, mode in enumerate(kw.get("modes", ["displacement", "lasry-lions"])):
            out[f"monotonicity_{mode}"] = check_monotonicity(
                p, mode=mode, samples=kw.get("samples", 100), seed=int(seeds[8 + j]),
                strict=False)
    return out


def cmd_validate(cfg: RunConfig, out_dir=None) -> tuple:
    report = _base_report(cfg, "validate")
    out = _outdir(cfg, out_dir)
    try:
        checks = run_checks(cfg, cfg.checks, defaults=True)
    except MFCError as exc:
        _error(report, exc)
        io.write_json(out / "report.json", report)
        return 1, report
    report["checks"] = checks
    failed = sorted(k for k, c in checks.items() if not c["pass"])
    report["failed"] = failed
    report["status"] = "failed" if failed else "ok"
    report["artifacts"] = ["report.json"]
    io.write_json(out / "report.json", report)
    return (1 if failed else 0), report


def _oracle_for(cfg, mode, ens, grid):
    if cfg.lq is None:
        return None, None
    x0 = ens.states[0]
    cov = np.atleast_2d(np.cov(x0.T, bias=True))
    solver = solve_lq_mfg if mode == "mfg" else solve_lq_mfc
    sol = solver(cfg.lq, K=grid.K, substeps=10, initial_mean=x0.mean(axis=0),
                 initial_cov=cov)
    return sol, {"kind": sol.kind, "value": sol.value,
                 "evaluated_at": "empirical initial mean and covariance",
                 "mean": sol.mean.tolist()}


def cmd_solve(cfg: RunConfig, out_dir=None) -> tuple:
    report = _base_report(cfg, "solve")
    out = _outdir(cfg, out_dir)
    p = cfg.problem
    grid = TimeGrid(p.t0, p.T, cfg.K)
    if cfg.checks:
        checks = run_checks(cfg, cfg.checks, defaults=False)
        report["checks"] = checks
        failed = sorted(k for k, c in checks.items() if not c["pass"])
        if failed:
            report["status"] = "failed"
            report["failed"] = failed
            report["artifacts"] = ["report.json"]
            io.write_json(out / "report.json", report)
            return 1, report
    try:
        rep = solve(p, grid, cfg.solve)
    except MFCError as exc:
        _error(report, exc)
        state = getattr(exc, "state", None) or getattr(exc, "history", None)
        if state is not None:
            report["partial"] = state.summary() if hasattr(state, "summary") else state
        report["artifacts"] = ["report.json"]
        io.write_json(out / "report.json", report)
        return 1, report
    report["solve"] = rep.summary()
    diag = moment_diagnostics(rep.ensemble)
    report["moments"] = {"max_norm": diag["max"], "argmax": diag["argmax"]}
    report["ensemble_summary"] = io.ensemble_summary(p, grid, rep.ensemble, rep.control)
    if rep.adjoint.diagnostics:
        report["regression"] = {
            "max_condition": max(d["condition"] for d in rep.adjoint.diagnostics),
            "max_residual_rms": max(d["residual_rms"] for d in rep.adjoint.diagnostics)}
    sol, oracle = _oracle_for(cfg, rep.mode, rep.ensemble, grid)
    if oracle is not None:
        oracle["relative_error"] = abs(rep.final_cost - sol.value) / abs(sol.value)
        mean = rep.ensemble.states.mean(axis=1)
        oracle["mean_sup_relative_error"] = float(
            np.max(np.abs(mean - sol.mean)) / max(np.max(np.abs(sol.mean)), 1e-12))
    report["oracle"] = oracle
    if not rep.converged:
        report["status"] = "failed"

    arts = []
    mp = cfg.outputs.get("max_particles")
    tables = {"convergence": lambda: io.convergence_rows(rep),
              "control": lambda: io.control_rows(rep.control, grid, mp),
              "trajectory": lambda: io.trajectory_rows(rep.ensemble, grid, mp),
              "adjoint": lambda: io.adjoint_rows(rep.adjoint, grid, mp),
              "gains": (lambda: io.gains_rows(sol)) if sol is not None else None}
    for name in cfg.outputs.get("csv", []):
        if tables.get(name) is None:
            continue
        header, rows = tables[name]()
        io.write_csv(out / f"{name}.csv", header, rows)
        arts.append(f"{name}.csv")
    if cfg.outputs.get("figures", True):
        plotting.plot_convergence(rep, out / "convergence.png")
        plotting.plot_paths(grid, rep.ensemble, out / "paths.png", sol)
        plotting.plot_control(grid, rep.ensemble, rep.control, out / "control.png", sol)
        arts += ["control.png", "convergence.png", "paths.png"]
    report["artifacts"] = sorted(arts + ["report.json"])
    io.write_json(out / "report.json", report)
    return (0 if rep.converged else 1), report


def cmd_gradcheck(cfg: RunConfig, out_dir=None) -> tuple:
    report = _base_report(cfg, "gradcheck")
    out = _outdir(cfg, out_dir)
    p = cfg.problem
    grid = TimeGrid(p.t0, p.T, cfg.K)
    kw = cfg.checks.get("gradcheck", {})
    tol = kw.get("tol", 1e-4 if p.sigma is None else 1e-2)
    try:
        noise = draw_noise(p, grid, cfg.N, cfg.seed)
        rng = stream_rng(cfg.seed, STREAM_GRADCHECK_CONTROL)
        ctrl = ControlField(0.3 * rng.standard_normal((grid.K, cfg.N, p.d)))
        res = gradient_check(p, grid, ctrl, noise, directions=kw.get("directions", 5),
                             eps=kw.get("eps", 1e-4), tol=tol, seed=cfg.seed,
                             crn=kw.get("crn", True), basis=cfg.solve.basis)
    except MFCError as exc:
        _error(report, exc)
        io.write_json(out / "report.json", report)
        return 1, report
    report["gradcheck"] = res
    report["status"] = "ok" if res["pass"] else "failed"
    arts = ["report.json"]
    if cfg.outputs.get("figures", True):
        plotting.plot_gradcheck(res, out / "gradcheck.png")
        arts.append("gradcheck.png")
    report["artifacts"] = sorted(arts)
    io.write_json(out / "report.json", report)
    return (0 if res["pass"] else 1), report


def cmd_oracle(cfg: RunConfig, out_dir=None) -> tuple:
    if cfg.lq is None:
        raise ConfigError("the oracle command needs a linear-quadratic problem")
    report = _base_report(cfg, "oracle")
    out = _outdir(cfg, out_dir)
    try:
        sols = [solve_lq_mfc(cfg.lq, K=cfg.K), solve_lq_mfg(cfg.lq, K=cfg.K)]
    except MFCError as exc:
        _error(report, exc)
        io.write_json(out / "report.json", report)
        return 1, report
    arts = ["report.json"]
    report["oracle"] = {}
    for sol in sols:
        header, rows = io.gains_rows(sol)
        io.write_csv(out / f"gains_{sol.kind}.csv", header, rows)
        arts.append(f"gains_{sol.kind}.csv")
        report["oracle"][sol.kind] = {"value": sol.value, "value_formula": sol.value_formula,
                                      "initial_gain": sol.K_gain[0].tolist()}
    if cfg.outputs.get("figures", True):
        plotting.plot_gains(sols, out / "gains.png")
        arts.append("gains.png")
    report["artifacts"] = sorted(arts)
    io.write_json(out / "report.json", report)
    return 0, report


COMMANDS = {"validate": cmd_validate, "solve": cmd_solve, "gradcheck": cmd_gradcheck,
            "oracle": cmd_oracle}


def build_parser():
    ap = argparse.ArgumentParser(prog="mfcontrol",
                                 description="Particle solver for mean-field control problems.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="run configuration (JSON)")
    ap.add_argument("--out", help="output directory (overrides outputs.directory)")
    ap.add_argument("--seed", type=int, help="override grid.seed")
    ap.add_argument("--quiet", action="store_true", help="print nothing on success")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.seed)
        code, report = COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        line = f"{args.command}: {report['status']}"
        if report.get("error"):
            line += f" ({report['error']['name']}: {report['error']['message']})"
        if report.get("failed"):
            line += f" failed checks: {', '.join(report['failed'])}"
        if "solve" in report:
            line += f" J={report['solve']['final_cost']:.6g}"
        if report.get("oracle") and "relative_error" in report["oracle"]:
            line += f" oracle={report['oracle']['value']:.6g}"
        print(line)
    return code


if __name__ == "__main__":
    sys.exit(main())
