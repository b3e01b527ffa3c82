"""Command-line runner: bound computation, simulations, sweeps, verification.

Reports are JSON (deterministic: sorted keys, no timestamps), trajectories
are CSV. Runtime diagnostics go to stderr so that identical configurations
produce byte-identical output files. Exit codes: 0 success, 1 property
violation in a verify suite, 2 malformed input, 3 diverging simulation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import dynamics, formation, graphs, spectra, verify

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_BAD_INPUT = 2
EXIT_NONFINITE = 3


def _parse_poles(text: str):
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ValueError(f"could not parse poles {text!r}") from exc
    if not values:
        raise ValueError("need at least one pole")
    return spectra.poles_to_coefficients(values)


def _apply_overrides(doc: dict, pairs) -> dict:
    """Apply --set key=value overrides; dotted keys descend into sub-objects,
    values are parsed as JSON with a plain-string fallback."""
    out = json.loads(json.dumps(doc))
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _load_scenario_doc(path: str, overrides) -> dict:
    with open(Path(path), encoding="utf-8") as fh:
        doc = json.load(fh)
    return _apply_overrides(doc, overrides)


def _write_report(out_dir: str | None, report: dict, name: str = "report.json") -> None:
    if out_dir is None:
        return
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / name, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _emit(lines) -> None:
    for line in lines:
        print(line)


def cmd_bound(args) -> int:
    ps = _parse_poles(args.poles)
    diag = spectra.vandermonde_diagonalization(ps)
    raw = spectra.condition_of(diag.S, diag.S_inv)
    result = spectra.optimal_condition(diag)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "bound",
        "poles": list(ps.poles),
        "coefficients": list(ps.coefficients),
        "raw_condition": raw,
        **result.to_dict(),
    }
    _emit([
        f"poles: {', '.join(f'{p:g}' for p in ps.poles)}",
        f"raw condition (Vandermonde S): {raw:.12g}",
        f"optimal condition:             {result.optimal_bound:.12g}",
        f"scaling diagonal K: {np.array2string(result.scaling, precision=8)}",
        f"S_opt:\n{np.array2string(result.S_opt, precision=8)}",
    ])
    _write_report(args.out, report)
    return EXIT_OK


def _positions_csv(path, result, stride: int = 1) -> None:
    times = result.trajectory.times
    blocks = [("x", result.positions), ("v", result.velocities)]
    if result.integral_states is not None:
        blocks.append(("z", result.integral_states))
    header = ["t"] + [f"{tag}_{i}" for tag, arr in blocks for i in range(arr.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(0, times.size, stride):
            row = [times[k]]
            for _, arr in blocks:
                row.extend(arr[k])
            writer.writerow([f"{v:.17g}" for v in row])


def cmd_formation(args) -> int:
    doc = _load_scenario_doc(args.scenario, args.set)
    scenario, options = formation.scenario_from_json(doc)
    horizon = options["horizon"] if options["horizon"] is not None \
        else scenario.default_horizon()
    step = options["step"]

    t0 = time.perf_counter()
    result = formation.simulate_formation(scenario, horizon=horizon, step=step,
                                          record_stride=args.record_stride)
    elapsed = time.perf_counter() - t0

    bound = dynamics.theorem1_bound(scenario.pole_set, use_optimal=True)
    ratio = dynamics.scalable_performance_ratio(result.trajectory)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "formation",
        "scenario": doc,
        "horizon": horizon,
        "step": step,
        "bounds": {
            "transient_raw": bound.raw,
            "transient_optimal": bound.optimal,
        },
        "sup_ratios": {
            "scalable_performance": ratio.ratio,
            "degenerate": ratio.degenerate,
        },
    }
    lines = [
        f"controller: {scenario.controller}, N={scenario.n_agents}, "
        f"T={horizon:g}, dt={step:g}",
        f"transient bound (raw/optimal): {bound.raw:.6g} / {bound.optimal:.6g}",
        f"scalable performance ratio: {ratio.ratio:.6g}"
        + (" (degenerate: zero initial error)" if ratio.degenerate else ""),
    ]

    if not result.trajectory.forced:
        transient = dynamics.verify_transient(result.trajectory, bound)
        report["sup_ratios"]["xi_ratio"] = transient.max_ratio
        report["sup_ratios"]["xi_bound_holds"] = transient.holds
        lines.append(f"state sup ratio: {transient.max_ratio:.6g} "
                     f"(bound {transient.bound:.6g}, holds: {transient.holds})")

    if scenario.controller == "pi":
        constants = formation.theorem2_constants(scenario.pole_set, use_optimal=True)
        report["bounds"]["alpha_xi"] = constants.alpha_xi
        report["bounds"]["alpha_w"] = constants.alpha_w
        if result.trajectory.forced and result.w0 is not None:
            check = formation.theorem2_transient_bound_check(
                result.trajectory, constants, result.w0)
            report["forced_bound"] = {
                "lhs_sup": check.lhs_sup, "rhs": check.rhs, "holds": check.holds,
            }
            lines.append(f"forced transient: sup={check.lhs_sup:.6g} <= "
                         f"{check.rhs:.6g}: {check.holds}")

    rejection = formation.check_disturbance_rejection(result, tol=args.tol)
    report["rejection"] = {
        "epos_final": rejection.epos_final,
        "lvel_final": rejection.lvel_final,
        "rejected": rejection.rejected,
        "has_spanning_tree": rejection.has_spanning_tree,
        "tol": rejection.tol,
    }
    lines.append(
        f"final errors: |L(x-d)|={rejection.epos_final:.6g}, "
        f"|L xdot|={rejection.lvel_final:.6g}, rejected: {rejection.rejected}"
    )

    if args.out is not None:
        directory = Path(args.out)
        directory.mkdir(parents=True, exist_ok=True)
        result.trajectory.write_csv(directory / "trajectory.csv", stride=args.csv_stride)
        _positions_csv(directory / "positions.csv", result, stride=args.csv_stride)
        report["files"] = {"trajectory": "trajectory.csv", "positions": "positions.csv"}
    _write_report(args.out, report)
    _emit(lines)
    print(f"runtime: {elapsed:.2f}s", file=sys.stderr)
    return EXIT_OK


def _initial_state_from_doc(doc: dict, system) -> np.ndarray:
    if "xi0" in doc:
        xi0 = np.asarray(doc["xi0"], dtype=float)
        if xi0.shape != (system.dim,):
            raise ValueError(f"xi0 must have length {system.dim}")
        return xi0
    n_agents = system.n_agents
    x0 = np.asarray(doc.get("x0", np.zeros(n_agents)), dtype=float)
    derivs = []
    if "v0" in doc:
        derivs.append(np.asarray(doc["v0"], dtype=float))
    return dynamics.xi_from_x(system, x0, derivs).vector


def cmd_simulate(args) -> int:
    doc = _load_scenario_doc(args.scenario, args.set)
    ps = spectra.poles_to_coefficients([float(p) for p in doc["poles"]])
    topology = doc.get("topology")
    if topology is not None:
        lap = graphs.laplacian_from_graph(graphs.graph_from_json(topology))
    else:
        lap = graphs.path_ahead_laplacian(int(doc["n_agents"]))
    system = dynamics.assemble(ps, lap)

    xi0 = _initial_state_from_doc(doc, system)
    dist_doc = doc.get("disturbance") or {"type": "none"}
    kind = dist_doc.get("type", "none")
    if kind == "none":
        disturbance = None
    elif kind == "lw0":
        disturbance = system.structured_disturbance(
            np.asarray(dist_doc["w0"], dtype=float))
    elif kind == "constant":
        disturbance = np.asarray(dist_doc["values"], dtype=float)
    else:
        raise ValueError(f"unsupported disturbance type {kind!r} for simulate")

    horizon = float(doc.get("T", 20.0 / min(ps.poles)))
    step = float(doc.get("dt", 1e-3))
    t0 = time.perf_counter()
    traj = dynamics.simulate(system, xi0, disturbance, horizon=horizon, step=step)
    elapsed = time.perf_counter() - t0

    bound = dynamics.theorem1_bound(ps, use_optimal=True)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "simulate",
        "scenario": doc,
        "horizon": horizon,
        "step": step,
        "bounds": {"transient_raw": bound.raw, "transient_optimal": bound.optimal},
        "sup_inf_norm": traj.sup_inf_norm,
    }
    lines = [
        f"order {system.order}, N={system.n_agents}, T={horizon:g}, dt={step:g}",
        f"sup ||xi||_inf = {traj.sup_inf_norm:.6g}",
    ]
    if not traj.forced:
        transient = dynamics.verify_transient(traj, bound)
        report["transient"] = {
            "max_ratio": transient.max_ratio,
            "bound": transient.bound,
            "holds": transient.holds,
            "degenerate": transient.degenerate,
        }
        lines.append(f"transient ratio {transient.max_ratio:.6g} vs bound "
                     f"{transient.bound:.6g}: holds={transient.holds}")
    if args.out is not None:
        directory = Path(args.out)
        directory.mkdir(parents=True, exist_ok=True)
        traj.write_csv(directory / "trajectory.csv", stride=args.csv_stride)
        report["files"] = {"trajectory": "trajectory.csv"}
    _write_report(args.out, report)
    _emit(lines)
    print(f"runtime: {elapsed:.2f}s", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    key, _, raw_values = args.param.partition("=")
    if not raw_values:
        raise ValueError("--param must be of the form key=v1,v2,...")
    values = raw_values.split(",")
    runs = []
    for value in values:
        run_args = argparse.Namespace(
            scenario=args.scenario,
            set=list(args.set or []) + [f"{key}={value}"],
            out=None if args.out is None else str(Path(args.out) / f"{key}_{value}"),
            csv_stride=args.csv_stride,
            record_stride=args.record_stride,
            tol=args.tol,
        )
        code = cmd_formation(run_args)
        if code != EXIT_OK:
            return code
        runs.append({"value": value, "out": f"{key}_{value}"})
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "sweep",
        "parameter": key,
        "runs": runs,
    }
    _write_report(args.out, report, name="sweep.json")
    return EXIT_OK


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    report = verify.run_suite(args.suite, seed=args.seed)
    elapsed = time.perf_counter() - t0
    doc = {"schema_version": SCHEMA_VERSION, "command": "verify",
           "seed": args.seed, **report.to_dict()}
    _emit([
        f"suite {report.name}: {'PASS' if report.passed else 'FAIL'} "
        f"({report.cases} cases, worst margin {report.worst_margin:.3g})",
    ])
    _write_report(args.out, doc)
    print(f"runtime: {elapsed:.2f}s", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serial-consensus",
        description="Serial-consensus bounds, simulations, and verification suites.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_bound = sub.add_parser("bound", help="condition-number bounds for a pole set")
    p_bound.add_argument("--poles", required=True,
                         help="comma-separated positive distinct poles")
    p_bound.add_argument("--out", default=None, help="directory for report.json")
    p_bound.set_defaults(func=cmd_bound)

    def add_run_options(p):
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scenario entry (dotted keys allowed)")
        p.add_argument("--csv-stride", type=int, default=10, dest="csv_stride",
                       help="write every k-th sample to CSV (default 10)")

    p_form = sub.add_parser("formation", help="run a vehicle-formation scenario")
    add_run_options(p_form)
    p_form.add_argument("--record-stride", type=int, default=1, dest="record_stride",
                        help="store every k-th integrator sample (default 1)")
    p_form.add_argument("--tol", type=float, default=formation.DEFAULT_REJECTION_TOL,
                        help="disturbance-rejection tolerance")
    p_form.set_defaults(func=cmd_formation)

    p_sim = sub.add_parser("simulate", help="integrate a serial-consensus system")
    add_run_options(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_sweep = sub.add_parser("sweep", help="run a formation scenario over a parameter")
    add_run_options(p_sweep)
    p_sweep.add_argument("--param", required=True, metavar="KEY=V1,V2,...",
                         help="scenario key and comma-separated values")
    p_sweep.add_argument("--record-stride", type=int, default=1, dest="record_stride")
    p_sweep.add_argument("--tol", type=float, default=formation.DEFAULT_REJECTION_TOL)
    p_sweep.set_defaults(func=cmd_sweep)

    p_verify = sub.add_parser("verify", help="run a randomized property suite")
    p_verify.add_argument("suite", choices=verify.SUITE_NAMES)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--out", default=None)
    p_verify.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except dynamics.NonFiniteStateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
