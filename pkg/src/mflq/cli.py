"""Command-line front end: solve, simulate, verify, report.

Exit codes: 0 success, 2 solver error (Riccati monitor/blow-up), 3
verification failure, 4 I/O or parse error.  All artifacts are written with
repr-exact floats and no timestamps, so two runs with the same configuration
produce byte-identical files; MFLQ_THREADS changes worker count only.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import errors as err
from .follower import solve_eta1, solve_follower_riccati, follower_value
from .leader import solve_leader
from .problem import load_spec, refine_problem, validate
from .simulate import simulate_paths
from .verify import RESIDUAL_TOL, run_verification

EXIT_OK = 0
EXIT_SOLVER = 2
EXIT_VERIFY = 3
EXIT_IO = 4

_SOLVER_ERRORS = (err.SolvabilityError, err.InvertibilityError,
                  err.NonFiniteState, err.BadGrid, err.DimensionMismatch,
                  err.AsymmetricWeight, err.BadCovariance)


def bundled_example() -> Path:
    return Path(__file__).parent / "data" / "scalar.json"


def _fmt(x) -> str:
    return repr(float(x))


def write_csv(path: Path, times, columns):
    """One row per grid node; columns is [(name, array (K+1, ...)), ...]."""
    headers = ["t"]
    flat = []
    for name, arr in columns:
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim == 2:
            idx = [(i,) for i in range(arr.shape[1])]
        else:
            idx = [(i, j) for i in range(arr.shape[1])
                   for j in range(arr.shape[2])]
        for ind in idx:
            headers.append(name + "".join(f"[{i}]" for i in ind))
        flat.append(arr.reshape(arr.shape[0], -1))
    data = np.concatenate(flat, axis=1)
    lines = [",".join(headers)]
    for k, t in enumerate(times):
        lines.append(",".join([_fmt(t)] + [_fmt(v) for v in data[k]]))
    path.write_text("\n".join(lines) + "\n")


def _json_ready(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    return obj


def write_summary(outdir: Path, summary: dict):
    (outdir / "summary.json").write_text(
        json.dumps(_json_ready(summary), indent=1, sort_keys=True))


def _solve_pipeline(prob, args):
    if args.refine and args.refine > 1:
        prob = refine_problem(prob, args.refine)
    fsol = solve_follower_riccati(prob, eps_pd=args.eps_pd)
    aug, lsol = solve_leader(prob, fsol, eps_pd=args.eps_pd,
                             kappa_max=args.kappa_max)
    # follower value under the leader's deterministic mean control path
    from .leader import equilibrium_field
    from .simulate import propagate_mean
    field = equilibrium_field(aug, lsol)
    X0 = np.concatenate([prob.xi_mean, np.zeros(prob.n)])
    EX = propagate_mean(field, X0)
    u2_star = np.einsum("kij,kj->ki", lsol.Theta_mean, EX) + lsol.V2_mean
    adj = solve_eta1(prob, fsol, u2_star)
    V1 = follower_value(prob, fsol, adj, u2_star)
    return prob, fsol, aug, lsol, adj, u2_star, V1


def _write_solve_outputs(outdir, prob, fsol, lsol, adj, V1):
    times = prob.grid.times()
    write_csv(outdir / "gains.csv", times, [
        ("Theta1", fsol.Theta1), ("Theta1_hat", fsol.Theta1_hat),
        ("Theta", lsol.Theta_dev), ("Theta_hat", lsol.Theta_mean)])
    diag = lambda P: np.einsum("kii->ki", P)
    write_csv(outdir / "riccati.csv", times, [
        ("P1_diag", diag(fsol.P1)), ("Pi1_diag", diag(fsol.Pi1)),
        ("P2_diag", diag(lsol.P2)), ("Pi2_diag", diag(lsol.Pi2))])
    write_csv(outdir / "eta.csv", times, [
        ("eta1", adj.eta1), ("vbar1", adj.vbar1), ("eta2", lsol.eta2),
        ("V2_offset", lsol.V2_mean)])
    return {
        "V1": V1, "V2": lsol.value, "L": lsol.L_const,
        "P1_t0": fsol.P1[0], "Pi1_t0": fsol.Pi1[0],
        "P2_t0": lsol.P2[0], "Pi2_t0": lsol.Pi2[0],
        "grid": {"t0": prob.grid.t0, "T": prob.grid.T,
                 "n_steps": prob.grid.n_steps},
    }


def cmd_solve(args):
    prob = load_spec(args.input)
    validate(prob)
    prob, fsol, aug, lsol, adj, u2_star, V1 = _solve_pipeline(prob, args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    summary = {"command": "solve",
               **_write_solve_outputs(outdir, prob, fsol, lsol, adj, V1)}
    write_summary(outdir, summary)
    print(f"solved: V1={V1!r} V2={lsol.value!r}")
    return EXIT_OK


def cmd_simulate(args):
    prob = load_spec(args.input)
    validate(prob)
    prob, fsol, aug, lsol, adj, u2_star, V1 = _solve_pipeline(prob, args)
    batch = simulate_paths(prob, aug, fsol, lsol, args.paths, args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    summary = {"command": "simulate",
               **_write_solve_outputs(outdir, prob, fsol, lsol, adj, V1),
               "mc": {"n_paths": args.paths, "seed": args.seed,
                      "J1_mean": batch.J1_mean, "J1_se": batch.J1_se,
                      "J2_mean": batch.J2_mean, "J2_se": batch.J2_se}}
    write_summary(outdir, summary)
    print(f"simulate: J1={batch.J1_mean!r}+-{batch.J1_se!r} "
          f"J2={batch.J2_mean!r}+-{batch.J2_se!r} (V2={lsol.value!r})")
    return EXIT_OK


def cmd_verify(args):
    prob = load_spec(args.input)
    validate(prob)
    if args.refine and args.refine > 1:
        prob = refine_problem(prob, args.refine)
    checks = tuple(args.checks.split(",")) if args.checks else None
    kwargs = {"n_paths": args.paths, "seed": args.seed,
              "residual_tol": args.tol_residual}
    if checks:
        kwargs["checks"] = checks
    report = run_verification(prob, **kwargs)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(
        json.dumps(report.as_dict(), indent=1, sort_keys=True))
    for c in report.checks:
        status = "pass" if c.passed else "FAIL"
        print(f"{status}  {c.name}: value={c.value:.3e} "
              f"tol={c.tolerance:.3e} ({c.seconds:.2f}s)")
    if not report.passed:
        print("verification FAILED")
        return EXIT_VERIFY
    print("verification passed")
    return EXIT_OK


def cmd_report(args):
    outdir = Path(args.out)
    wrote = False
    for name in ("summary.json", "report.json"):
        p = outdir / name
        if not p.exists():
            continue
        wrote = True
        doc = json.loads(p.read_text())
        print(f"== {name} ==")
        if name == "report.json":
            print(f"{'check':<28}{'value':>14}{'tolerance':>14}  status")
            for c in doc.get("checks", []):
                print(f"{c['name']:<28}{c['value']:>14.4e}"
                      f"{c['tolerance']:>14.4e}  "
                      f"{'pass' if c['passed'] else 'FAIL'}")
            print(f"overall: {'pass' if doc.get('passed') else 'FAIL'}")
        else:
            for key in sorted(doc):
                if key in ("P1_t0", "Pi1_t0", "P2_t0", "Pi2_t0"):
                    continue
                print(f"{key:<10} {doc[key]}")
    if not wrote:
        raise err.ParseError(f"no summary.json or report.json under {outdir}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(
        prog="mflq",
        description="Closed-loop Stackelberg equilibria for mean-field LQ "
                    "leader-follower games: solve, Monte Carlo simulate, "
                    "and verify.",
        epilog="MFLQ_THREADS caps simulation worker threads without "
               "affecting results.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in (("solve", cmd_solve), ("simulate", cmd_simulate),
                     ("verify", cmd_verify), ("report", cmd_report)):
        p = sub.add_parser(name)
        p.set_defaults(func=fn)
        p.add_argument("--input", default=str(bundled_example()),
                       help="problem file (default: bundled scalar example)")
        p.add_argument("--out", default="mflq_out", help="output directory")
        p.add_argument("--paths", type=int, default=10000)
        p.add_argument("--seed", type=int, default=42)
        p.add_argument("--refine", type=int, default=1,
                       help="solve at K-times grid resolution")
        p.add_argument("--checks", default="",
                       help="comma list: stationarity,convexity,value,"
                            "reduction,dp")
        p.add_argument("--eps-pd", type=float, default=1e-8)
        p.add_argument("--kappa-max", type=float, default=1e10)
        p.add_argument("--tol-residual", type=float, default=RESIDUAL_TOL)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command != "report" and not Path(args.input).exists():
            raise err.ParseError(f"input file not found: {args.input}")
        return args.func(args)
    except (err.ParseError, err.MissingField, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _SOLVER_ERRORS as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
