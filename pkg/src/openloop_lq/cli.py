"""Command-line interface: spec file in, CSV files and a JSON run report out.

Exit status: 0 ok, 1 verification checks failed, 2 usage error, 3 invalid spec,
4 positivity gate failed (problem not uniquely solvable), 5 size cap exceeded,
6 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import det_riccati as det
from . import random_riccati as rr
from .errors import DivergenceError, PositivityError, SizeError, SpecError
from .filtration_tree import PATH_CAP, build_path_ensemble
from .moment_cost import evaluate_cost
from .oracles import (
    QP_MAX_VARS,
    adjoint_solve,
    completion_of_squares_audit,
    ensemble_cost,
    monte_carlo_cost,
    qp_solve,
    stationarity_residual,
)
from .problem_model import ControlTrajectory, ProblemSpec, load_spec, validate

EXIT_OK, EXIT_CHECKS, EXIT_USAGE, EXIT_SPEC, EXIT_GATE, EXIT_SIZE, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5, 6


def tol_cs(N: int) -> float:
    """Completion-of-squares tolerance for the moment route: 1e-4 at N=200, O(dt^2)."""
    return 1e-4 * (200.0 / N) ** 2


def _decreasing(values, floor: float = 1e-12) -> bool:
    vals = [v for v in values if v is not None]
    return all(b < a or b <= floor for a, b in zip(vals, vals[1:]))


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class Run:
    def __init__(self, mode: str, out: Path):
        self.mode = mode
        self.out = out
        self.report = {"mode": mode, "status": "ok", "results": {}, "checks": [], "files": []}

    def write_csv(self, name: str, header: list[str], rows) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(header)
            for row in rows:
                wr.writerow([format(float(v), ".17g") for v in row])
        self.report["files"].append(str(path))

    def check(self, name: str, value, tolerance, passed: bool) -> None:
        self.report["checks"].append({"name": name, "value": value, "tolerance": tolerance,
                                      "passed": bool(passed)})

    def finish(self, code: int) -> int:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "report.json"
        self.report["files"].append(str(path))
        with open(path, "w") as fh:
            json.dump(_finite(self.report), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return code


def _mat_header(prefix: str, r: int, c: int) -> list[str]:
    return [f"{prefix}_{i + 1}_{j + 1}" for i in range(r) for j in range(c)]


def _u_header(m: int) -> list[str]:
    return [f"u_{i + 1}" for i in range(m)]


def read_control_csv(path, spec: ProblemSpec) -> ControlTrajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = [i for i, h in enumerate(header) if h.strip().startswith("u")]
    if len(cols) != spec.m:
        raise SpecError(f"control file has {len(cols)} u-columns, spec has m={spec.m}")
    vals = np.array([[float(r[i]) for i in cols] for r in body])
    return ControlTrajectory(spec.grid, vals)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_solve_det(spec: ProblemSpec, args, run: Run) -> int:
    validate(spec, "det").raise_if_invalid()
    sol = det.solve_det(spec)
    u, mean = det.synthesize_control_det(spec, sol)
    t = spec.grid.nodes
    n, m = spec.n, spec.m
    run.write_csv("control.csv", ["t"] + _u_header(m) + _mat_header("K", m, n) + [f"Ex_{i + 1}" for i in range(n)],
                  (np.concatenate([[t[k]], u.values[k], sol.K[k].ravel(), mean[k]]) for k in range(spec.N)))
    run.write_csv("riccati.csv", ["t"] + _mat_header("P1", n, n) + _mat_header("P2", n, n) + _mat_header("Ups", m, m),
                  (np.concatenate([[t[k]], sol.P1[k].ravel(), sol.P2[k].ravel(), sol.Ups[k].ravel()])
                   for k in range(spec.N + 1)))
    run.report["results"].update(cost=det.optimal_cost_det(spec, sol), gate="ok", steps=spec.N)
    return EXIT_OK


def cmd_solve_random(spec: ProblemSpec, args, run: Run) -> int:
    sol = rr.solve_random(spec)
    res = run.report["results"]
    res.update(cost=rr.optimal_cost_random(spec, sol), gate="ok", steps=spec.N)
    t = spec.grid.nodes
    m = spec.m
    if spec.N <= args.path_cap:
        u, _ = rr.synthesize_control_random(spec, sol, args.path_cap)
        run.write_csv("control.csv", ["t"] + _u_header(m) + _mat_header("Ups", m, m),
                      (np.concatenate([[t[k]], u.values[k], sol.Ups[k].ravel()]) for k in range(spec.N)))
    else:
        res["control"] = f"skipped: N={spec.N} exceeds path cap {args.path_cap}"
    run.write_csv("upsilon.csv", ["t"] + _mat_header("Ups", m, m),
                  (np.concatenate([[t[k]], sol.Ups[k].ravel()]) for k in range(spec.N + 1)))
    return EXIT_OK


def cmd_evaluate(spec: ProblemSpec, args, run: Run) -> int:
    if not args.control:
        raise SpecError("evaluate needs --control <csv>")
    u = read_control_csv(args.control, spec)
    res = run.report["results"]
    if spec.is_deterministic:
        res["moment_cost"] = evaluate_cost(spec, u)
    if spec.N <= args.path_cap:
        res["ensemble_cost"] = ensemble_cost(spec, u, path_cap=args.path_cap)
    elif not spec.is_deterministic:
        raise SizeError(f"random-coefficient evaluation needs N <= path cap {args.path_cap}")
    return EXIT_OK


def cmd_oracle_qp(spec: ProblemSpec, args, run: Run) -> int:
    small = spec.N <= args.path_cap
    qp = qp_solve(spec, args.path_cap, engine="paths" if small else "lattice")
    t = spec.grid.nodes
    run.write_csv("qp_control.csv", ["t"] + _u_header(spec.m),
                  (np.concatenate([[t[k]], qp.u.values[k]]) for k in range(spec.N)))
    res = run.report["results"]
    res.update(qp_cost=qp.cost, hessian_min_eig=qp.hessian_min_eig, qp_residual=qp.residual,
               qp_engine="paths" if small else "lattice")
    sol = rr.solve_random(spec)
    res["riccati_cost"] = rr.optimal_cost_random(spec, sol)
    res["cost_diff"] = abs(res["riccati_cost"] - qp.cost)
    if small:
        u, _ = rr.synthesize_control_random(spec, sol, args.path_cap)
        res["riccati_control_ensemble_cost"] = ensemble_cost(spec, u, path_cap=args.path_cap)
        res["max_abs_u_diff"] = float(np.max(np.abs(u.values - qp.u.values)))
    return EXIT_OK


def _convergence_row(spec: ProblemSpec, N: int, path_cap: int) -> dict:
    sN = spec.with_steps(N)
    sol = rr.solve_random(sN)
    row = {"N": N, "lattice_cost": rr.optimal_cost_random(sN, sol)}
    if sN.is_deterministic:
        d = det.solve_det(sN)
        row["P_root_err"] = float(np.max(np.abs(sol.P[0][0] - d.P1[0])))
        row["Ups_err"] = float(np.max(np.abs(sol.Ups - d.Ups)))
        row["cost_err"] = abs(row["lattice_cost"] - det.optimal_cost_det(sN, d))
    if N > path_cap:
        return row
    u, ens = rr.synthesize_control_random(sN, sol, path_cap)
    if sN.is_deterministic:
        ud, _ = det.synthesize_control_det(sN, d)
        row["u_err_vs_det"] = float(np.max(np.abs(u.values - ud.values)))
    row["euler_bsde_residual"] = stationarity_residual(ens, u, adjoint_solve(sN, ens, "euler-bsde"))[1]
    u0 = ControlTrajectory.zeros(sN.grid, sN.m)
    row["lattice_squares_residual"] = abs(completion_of_squares_audit(sN, u0, "lattice", sol, path_cap).residual)
    if N * sN.m <= QP_MAX_VARS:
        qp = qp_solve(sN, path_cap)
        ens_qp = build_path_ensemble(sN, qp.u, path_cap)
        row["u_err_vs_qp"] = float(np.max(np.abs(u.values - qp.u.values)))
        row["cost_err_vs_qp"] = abs(row["lattice_cost"] - qp.cost)
        row["qp_minimal"] = bool(qp.cost <= ensemble_cost(sN, u, ens))
        row["qp_stationarity"] = stationarity_residual(ens_qp, qp.u, adjoint_solve(sN, ens_qp, "discrete-exact"))[1]
    return row


def cmd_verify(spec: ProblemSpec, args, run: Run) -> int:
    res = run.report["results"]
    if spec.is_deterministic:
        validate(spec, "det").raise_if_invalid()
        sol = det.solve_det(spec)
        red = det.remark2_reduce(spec, sol)
        run.check("reduction_P_plus_F_vs_P2", red.max_deviation, 1e-6, red.max_deviation <= 1e-6)
        audit = completion_of_squares_audit(spec, ControlTrajectory.zeros(spec.grid, spec.m), "moments", sol)
        tol = tol_cs(spec.N)
        run.check("squares_identity_moments_u0", abs(audit.residual), tol, abs(audit.residual) <= tol)
        u, _ = det.synthesize_control_det(spec, sol)
        gap = abs(evaluate_cost(spec, u) - det.optimal_cost_det(spec, sol))
        run.check("optimal_control_cost_vs_formula", gap, tol, gap <= tol)

    if np.any(spec.x0_cov != 0.0):
        res["convergence"] = "skipped: the lattice engine needs a deterministic initial state"
        table = []
    else:
        table = [_convergence_row(spec, N, args.path_cap) for N in args.grid_list]
        res["convergence"] = table
    cols = ["P_root_err", "Ups_err", "cost_err", "u_err_vs_det", "euler_bsde_residual",
            "lattice_squares_residual", "u_err_vs_qp", "cost_err_vs_qp"]
    for col in cols:
        vals = [r.get(col) for r in table]
        if sum(v is not None for v in vals) >= 2:
            run.check(f"decreasing_{col}", vals, "strictly decreasing over N", _decreasing(vals))
    for r in table:
        if "qp_stationarity" in r:
            run.check(f"qp_stationarity_N{r['N']}", r["qp_stationarity"], 1e-8, r["qp_stationarity"] <= 1e-8)
            run.check(f"qp_minimal_N{r['N']}", r["qp_minimal"], True, r["qp_minimal"])
    ok = all(c["passed"] for c in run.report["checks"])
    res["all_passed"] = ok
    if not ok:
        run.report["status"] = "checks-failed"
    return EXIT_OK if ok else EXIT_CHECKS


def cmd_simulate(spec: ProblemSpec, args, run: Run) -> int:
    res = run.report["results"]
    if spec.is_deterministic:
        sol = det.solve_det(spec)
        u, _ = det.synthesize_control_det(spec, sol)
        res["analytic_cost"] = evaluate_cost(spec, u)
        res["optimal_cost"] = det.optimal_cost_det(spec, sol)
    else:
        sol = rr.solve_random(spec)
        u, ens = rr.synthesize_control_random(spec, sol, args.path_cap)
        res["analytic_cost"] = ensemble_cost(spec, u, ens)
        res["optimal_cost"] = rr.optimal_cost_random(spec, sol)
    mc = monte_carlo_cost(spec, u, args.paths, args.seed, args.threads)
    res.update(mc_estimate=mc.estimate, mc_stderr=mc.stderr, paths=mc.num_paths, seed=args.seed)
    gap = mc.estimate - res["analytic_cost"]
    res["gap"] = gap
    # a noiseless problem has a round-off-sized stderr; a z-score would be meaningless there
    meaningful = mc.stderr > 1e-12 * max(1.0, abs(res["analytic_cost"]))
    res["z_score"] = gap / mc.stderr if meaningful else None
    return EXIT_OK


def cmd_reduce_check(spec: ProblemSpec, args, run: Run) -> int:
    validate(spec, "det").raise_if_invalid()
    red = det.remark2_reduce(spec)
    n, m = spec.n, spec.m
    t = spec.grid.nodes
    run.write_csv("reduction.csv",
                  ["t"] + _mat_header("P", n, n) + _mat_header("F", n, n) + _mat_header("M0", m, n)
                  + _mat_header("P2", n, n),
                  (np.concatenate([[t[k]], red.P[k].ravel(), red.F[k].ravel(), red.M0[k].ravel(), red.P2[k].ravel()])
                   for k in range(spec.N + 1)))
    run.report["results"]["max_deviation"] = red.max_deviation
    return EXIT_OK


COMMANDS = {
    "solve-det": cmd_solve_det,
    "solve-random": cmd_solve_random,
    "evaluate": cmd_evaluate,
    "oracle-qp": cmd_oracle_qp,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "reduce-check": cmd_reduce_check,
}


def _grid_list(s: str) -> list[int]:
    try:
        vals = [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid list {s!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("grid list needs positive integers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="openloop-lq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--spec", required=True, help="problem spec JSON file")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--steps", type=int, default=None, help="override the spec's number of steps")
        p.add_argument("--grid-list", type=_grid_list, default=[4, 8, 16])
        p.add_argument("--paths", type=int, default=100_000, help="Monte Carlo paths")
        p.add_argument("--threads", type=int, default=1, help="Monte Carlo worker threads")
        p.add_argument("--path-cap", type=int, default=PATH_CAP)
        p.add_argument("--control", default=None, help="control CSV for evaluate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run = Run(args.command, Path(args.out))
    try:
        spec = load_spec(args.spec)
        if args.steps is not None:
            spec = spec.with_steps(args.steps)
        validate(spec).raise_if_invalid()
        return run.finish(COMMANDS[args.command](spec, args, run))
    except SpecError as e:
        run.report.update(status="invalid-spec", error={"message": str(e)})
        code = EXIT_SPEC
    except PositivityError as e:
        run.report.update(status="unsolvable",
                          error={"message": str(e), "earliest_t": e.t, "min_eig": e.min_eig})
        code = EXIT_GATE
    except SizeError as e:
        run.report.update(status="size-exceeded", error={"message": str(e)})
        code = EXIT_SIZE
    except DivergenceError as e:
        run.report.update(status="diverged", error={"message": str(e)})
        code = EXIT_DIVERGED
    print(run.report["error"]["message"], file=sys.stderr)
    return run.finish(code)


if __name__ == "__main__":
    sys.exit(main())
