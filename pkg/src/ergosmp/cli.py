"""Batch command-line front end.

Subcommands: simulate, cost, adjoint, duality-check, smp-check, sufficiency,
optimize, verify.  Exit codes: 0 on success or verdict-pass, 2 on
verdict-fail, 1 on error.  All randomness flows from the mandatory --seed;
identical invocations produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .adjoint import AdjointError, RegressionBasis, adjoint_coefficients_dict, adjoint_to_csv, extend_to_infinite
from .config import ConfigError, load_model_config, parse_control_law
from .duality import build_gamma, build_rho, verify_duality_finite, verify_duality_infinite
from .ergodic_cost import estimate_ergodic_cost
from .forward import (
    SimulationError,
    TimeGrid,
    ensemble_to_binary,
    ensemble_to_csv,
    estimate_moment,
    simulate_state,
)
from .model import ModelError
from .smp import candidate_battery, check_sufficiency, evaluate_variational_inequality, optimize_control
from .verify import run_suite

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERDICT_FAIL = 2


def _write_json(path: str, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _parse_x0(model, text):
    if text is None:
        return np.zeros(model.n)
    vals = [float(v) for v in text.split(",")]
    if len(vals) != model.n:
        raise ConfigError(f"--x0 needs {model.n} comma-separated values")
    return np.asarray(vals)


def _add_common(sub, dt_default=0.01, m_default=4096):
    sub.add_argument("--model", required=True, help="problem config (JSON)")
    sub.add_argument("--seed", required=True, type=int, help="RNG seed (mandatory)")
    sub.add_argument("--dt", type=float, default=dt_default)
    sub.add_argument("--M", type=int, default=m_default, help="number of paths")
    sub.add_argument("--control", default=None, help="control law as JSON (default: zero)")
    sub.add_argument("--x0", default=None, help="initial state, comma-separated")
    sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--out-dir", default=".")


def _positive(args, names):
    for name in names:
        value = getattr(args, name.replace("-", "_"))
        if value is not None and value <= 0:
            raise ConfigError(f"--{name} must be positive, got {value}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ergosmp", description=__doc__)
    sp = ap.add_subparsers(dest="command", required=True)

    s = sp.add_parser("simulate", help="simulate the state equation and export the ensemble")
    _add_common(s)
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--formats", default="csv", help="comma list from {csv,bin}")

    s = sp.add_parser("cost", help="ergodic-cost checkpoint ladder")
    _add_common(s)
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--window", type=float, default=0.25)

    s = sp.add_parser("adjoint", help="solve the costate equation by backward regression")
    _add_common(s)
    s.add_argument("--T", type=float, required=True, help="reporting horizon")
    s.add_argument("--buffer", type=float, default=4.0, help="discarded terminal buffer")
    s.add_argument("--degree", type=int, default=3)
    s.add_argument("--ridge", type=float, default=1e-8)

    s = sp.add_parser("duality-check", help="verify the costate/dual pairing identity")
    _add_common(s)
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--t", type=float, default=0.0)
    s.add_argument("--eta", default="zero", choices=["zero", "one", "state"])
    s.add_argument("--gamma-const", type=float, default=None, help="constant drift forcing value")
    s.add_argument("--gamma-start", type=float, default=0.0)
    s.add_argument("--gamma-end", type=float, default=None)
    s.add_argument("--rho-channel", type=int, default=None)
    s.add_argument("--rho-value", type=float, default=1.0)
    s.add_argument("--rho-start", type=float, default=0.0)
    s.add_argument("--rho-end", type=float, default=None)
    s.add_argument("--threshold", type=float, default=0.05, help="max relative residual")
    s.add_argument("--infinite", action="store_true", help="use the infinite-horizon form")
    s.add_argument("--buffer", type=float, default=4.0)
    s.add_argument("--degree", type=int, default=3)
    s.add_argument("--ridge", type=float, default=1e-8)

    s = sp.add_parser("smp-check", help="necessary-condition variational inequality")
    _add_common(s)
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--buffer", type=float, default=3.0)
    s.add_argument("--window", type=float, default=0.25)
    s.add_argument("--degree", type=int, default=3)
    s.add_argument("--ridge", type=float, default=1e-8)

    s = sp.add_parser("sufficiency", help="convexity + minimality sufficiency check")
    _add_common(s)
    s.add_argument("--T", type=float, required=True)
    s.add_argument("--buffer", type=float, default=3.0)
    s.add_argument("--window", type=float, default=0.25)
    s.add_argument("--probes", type=int, default=200)
    s.add_argument("--degree", type=int, default=3)
    s.add_argument("--ridge", type=float, default=1e-8)

    s = sp.add_parser("optimize", help="projected adjoint-gradient control optimization")
    _add_common(s)
    s.add_argument("--T", type=float, default=20.0)
    s.add_argument("--iters", type=int, required=True)
    s.add_argument("--gamma", type=float, default=0.5, help="gradient step size")
    s.add_argument("--buffer", type=float, default=2.0)
    s.add_argument("--init", default=None, help="initial law as JSON (default: zero affine)")
    s.add_argument("--degree", type=int, default=3)
    s.add_argument("--ridge", type=float, default=1e-8)

    s = sp.add_parser("verify", help="run a built-in verification suite")
    s.add_argument("--model", required=True)
    s.add_argument("--suite", default="all", choices=["trivial", "invariants", "all"])
    s.add_argument("--out-dir", default=".")
    return ap


def _cmd_simulate(args, model) -> int:
    _positive(args, ["T", "dt", "M"])
    law = parse_control_law(args.control, model.control_set)
    grid = TimeGrid.from_horizon(args.T, args.dt)
    ens = simulate_state(model, law, _parse_x0(model, args.x0), grid, args.M, args.seed,
                         workers=args.workers)
    formats = {f.strip() for f in args.formats.split(",") if f.strip()}
    unknown = formats - {"csv", "bin"}
    if unknown:
        raise ConfigError(f"--formats: unknown entries {sorted(unknown)}")
    if "csv" in formats:
        ensemble_to_csv(ens, _out(args, "ensemble.csv"))
    if "bin" in formats:
        ensemble_to_binary(ens, _out(args, "ensemble.bin"))
    est, half = estimate_moment(ens, 2, args.T)
    _write_json(_out(args, "simulate_summary.json"), {
        "schema_version": 1,
        "M": args.M, "T": args.T, "dt": args.dt, "seed": args.seed,
        "control_id": ens.control_id,
        "second_moment_at_T": est, "second_moment_ci": half,
    })
    return EXIT_OK


def _cmd_cost(args, model) -> int:
    _positive(args, ["T", "dt", "M"])
    law = parse_control_law(args.control, model.control_set)
    report = estimate_ergodic_cost(model, law, _parse_x0(model, args.x0), args.T,
                                   args.M, args.seed, window=args.window, dt=args.dt,
                                   workers=args.workers)
    _write_json(_out(args, "cost_report.json"), report.to_dict())
    print(f"tail_min={report.tail_min:.6f} tail_max={report.tail_max:.6f} ci={report.ci:.2e}")
    return EXIT_OK


def _cmd_adjoint(args, model) -> int:
    _positive(args, ["T", "dt", "M", "buffer"])
    law = parse_control_law(args.control, model.control_set)
    basis = RegressionBasis(degree=args.degree, ridge=args.ridge)
    sol = extend_to_infinite(model, law, _parse_x0(model, args.x0), args.T, args.buffer,
                             args.dt, args.M, args.seed, basis=basis, workers=args.workers)
    _write_json(_out(args, "adjoint_coefficients.json"), adjoint_coefficients_dict(sol))
    adjoint_to_csv(sol, _out(args, "adjoint_paths.csv"))
    print(f"sup_t E|p_t|^2 = {sol.sup_p_sq:.6f}")
    return EXIT_OK


def _cmd_duality(args, model) -> int:
    _positive(args, ["T", "dt", "M"])
    law = parse_control_law(args.control, model.control_set)
    basis = RegressionBasis(degree=args.degree, ridge=args.ridge)
    x0 = _parse_x0(model, args.x0) if args.x0 is not None else None
    if args.infinite:
        grid = TimeGrid.from_horizon(args.T + args.buffer, args.dt)
    else:
        grid = TimeGrid.from_horizon(args.T, args.dt)
    # Forcing arrays are built on a probe ensemble-sized grid lazily below.
    if args.infinite:
        rho = None
        if args.rho_channel is not None:
            probe = simulate_state(model, law, x0 if x0 is not None else np.ones(model.n),
                                   grid, args.M, args.seed, workers=args.workers)
            rho = build_rho(probe, model.n, model.d,
                            {args.rho_channel: np.full(model.n, args.rho_value)},
                            t_start=args.rho_start,
                            t_end=args.rho_end if args.rho_end is not None else args.T)
        report = verify_duality_infinite(
            model, law, args.t,
            T_support=args.rho_end if args.rho_end is not None else args.T,
            eta=args.eta, rho=rho, T_report=args.T, T_buffer=args.buffer,
            M=args.M, seed=args.seed, dt=args.dt, basis=basis, x0=x0,
            workers=args.workers,
        )
    else:
        base = simulate_state(model, law, x0 if x0 is not None else np.ones(model.n),
                              grid, args.M, args.seed, workers=args.workers)
        gamma = None
        if args.gamma_const is not None:
            gamma = build_gamma(base, model.n, value=np.full(model.n, args.gamma_const),
                                t_start=args.gamma_start, t_end=args.gamma_end)
        rho = None
        if args.rho_channel is not None:
            rho = build_rho(base, model.n, model.d,
                            {args.rho_channel: np.full(model.n, args.rho_value)},
                            t_start=args.rho_start, t_end=args.rho_end)
        report = verify_duality_finite(
            model, law, args.t, args.T, eta=args.eta, gamma=gamma, rho=rho,
            nu=None, M=args.M, seed=args.seed, dt=args.dt, basis=basis, base=base,
        )
    _write_json(_out(args, "duality_report.json"), report.to_dict())
    print(f"lhs={report.lhs:.6f} rhs={report.rhs:.6f} rel_residual={report.rel_residual:.4f}")
    return EXIT_OK if report.rel_residual < args.threshold else EXIT_VERDICT_FAIL


def _cmd_smp_check(args, model) -> int:
    _positive(args, ["T", "dt", "M", "buffer"])
    law = parse_control_law(args.control, model.control_set)
    basis = RegressionBasis(degree=args.degree, ridge=args.ridge)
    battery = candidate_battery(model, law, seed=args.seed)
    reports = evaluate_variational_inequality(
        model, law, battery, args.T, args.M, args.seed, window=args.window,
        dt=args.dt, buffer=args.buffer, basis=basis,
        x0=_parse_x0(model, args.x0), workers=args.workers,
    )
    _write_json(_out(args, "smp_report.json"),
                {"schema_version": 1, "reports": [r.to_dict() for r in reports]})
    worst = min(reports, key=lambda r: r.tail_min)
    print(f"worst direction {worst.direction_id}: tail_min={worst.tail_min:.4f} "
          f"tolerance={worst.tolerance:.4f} verdict={worst.verdict}")
    return EXIT_OK if all(r.verdict == "consistent" for r in reports) else EXIT_VERDICT_FAIL


def _cmd_sufficiency(args, model) -> int:
    _positive(args, ["T", "dt", "M", "buffer", "probes"])
    law = parse_control_law(args.control, model.control_set)
    basis = RegressionBasis(degree=args.degree, ridge=args.ridge)
    report = check_sufficiency(
        model, law, args.T, args.M, args.seed, probes=args.probes, window=args.window,
        dt=args.dt, buffer=args.buffer, basis=basis, x0=_parse_x0(model, args.x0),
        workers=args.workers,
    )
    _write_json(_out(args, "sufficiency_report.json"), report.to_dict())
    print(f"convexity_min_eigen={report.convexity_min_eigen:.4f} "
          f"minimality_tail={report.minimality_tail:.4f} verdict={report.verdict}")
    return EXIT_OK if report.verdict == "certified" else EXIT_VERDICT_FAIL


def _cmd_optimize(args, model) -> int:
    _positive(args, ["T", "dt", "M", "iters", "gamma", "buffer"])
    if args.init is None:
        init = parse_control_law(
            {"kind": "affine_feedback",
             "gain": [[0.0] * model.n for _ in range(model.l)],
             "offset": [0.0] * model.l},
            model.control_set,
        )
    else:
        init = parse_control_law(args.init, model.control_set)
    basis = RegressionBasis(degree=args.degree, ridge=args.ridge)
    result = optimize_control(
        model, init, args.gamma, args.iters, args.T, args.M, args.seed,
        dt=args.dt, buffer=args.buffer, basis=basis, x0=_parse_x0(model, args.x0),
        workers=args.workers,
    )
    trace_path = _out(args, "optimize_trace.csv")
    keys = sorted({k for row in result.trace for k in row})
    with open(trace_path, "w", newline="\n") as fh:
        fh.write(",".join(keys) + "\n")
        for row in result.trace:
            fh.write(",".join(json.dumps(row.get(k, "")) for k in keys) + "\n")
    _write_json(_out(args, "optimize_result.json"), result.to_dict())
    print(f"status={result.status} best={result.best.describe()}")
    return EXIT_OK


def _cmd_verify(args, model) -> int:
    checks = run_suite(model, args.suite)
    for chk in checks:
        print(f"{'PASS' if chk.passed else 'FAIL'} {chk.name}: {chk.detail}")
    _write_json(_out(args, "verify_report.json"),
                {"schema_version": 1, "suite": args.suite,
                 "checks": [c.to_dict() for c in checks]})
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERDICT_FAIL


_COMMANDS = {
    "simulate": _cmd_simulate,
    "cost": _cmd_cost,
    "adjoint": _cmd_adjoint,
    "duality-check": _cmd_duality,
    "smp-check": _cmd_smp_check,
    "sufficiency": _cmd_sufficiency,
    "optimize": _cmd_optimize,
    "verify": _cmd_verify,
}


def run_command(argv) -> int:
    """Parse argv and dispatch; returns the process exit code."""
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code not in (0, None) else EXIT_OK
    try:
        model = load_model_config(args.model)
        if getattr(args, "seed", None) is not None and args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        return _COMMANDS[args.command](args, model)
    except (ConfigError, ModelError, SimulationError, AdjointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
