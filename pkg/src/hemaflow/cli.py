"""Command-line entry point.

Five subcommands: simulate (finite-N replicates, per-replicate series plus a
compartment-mean matrix), diagnose (drift and residual panel for one test
function), limit (deterministic solver output), compare (finite-N vs limit
convergence table with a BL witness), flow-test (characteristic-flow property
checks).  Every command writes CSV files atomically into --out and finishes
with a run manifest listing each output with its SHA-256.

Exit codes: 0 success, 2 configuration or usage trouble, 3 numerical failure,
4 filesystem trouble.  Output determinism: given the same config and seed the
CSV bytes are identical run to run, whatever HEMAFLOW_WORKERS says.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .config import ConfigBundle, load_config
from .empirical import (drift_terms, empirical_measure, parse_test_function,
                        pathwise_identity_residual)
from .errors import ConfigError, NumericalError
from .flow import (FlowField, ZTrajectory, flow, inverse_space,
                   inverse_time_kappa, stability_gap, tau)
from .limit import _as_panel, limit_mass_balance, solve_mild, solve_upwind
from .metrics import bl_distance, convergence_study
from .rates import (ModelConfig, affine_rate, constant_rate, make_model,
                    stem_only_counts)
from .ssa import simulate


def _atomic_write_text(path: str, write_body) -> None:
    """Write via a sibling temp file and rename into place."""
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            write_body(fh)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class _Outputs:
    """Collects written files for the manifest."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.records = []

    def write_csv(self, name: str, header, rows) -> str:
        path = os.path.join(self.out_dir, name)

        def body(fh):
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])

        _atomic_write_text(path, body)
        digest = hashlib.sha256()
        with open(path, "rb") as fh:
            digest.update(fh.read())
        self.records.append({
            "name": name,
            "path": path,
            "sha256": digest.hexdigest(),
            "bytes": os.path.getsize(path),
        })
        return path

    def write_manifest(self, command: str, config: dict | None, seed,
                       timings: dict) -> str:
        manifest = {
            "command": command,
            "config": config,
            "seed": seed,
            "version": __version__,
            "outputs": self.records,
            "timings": {k: round(v, 6) for k, v in timings.items()},
            "created_utc": datetime.now(timezone.utc).isoformat(),
        }
        path = os.path.join(self.out_dir, "manifest.json")
        _atomic_write_text(path, lambda fh: json.dump(manifest, fh, indent=2))
        return path


def _prepare(args) -> tuple[ConfigBundle, _Outputs]:
    bundle = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        bundle = dataclasses.replace(
            bundle, run=dataclasses.replace(bundle.run, seed=args.seed))
    os.makedirs(args.out, exist_ok=True)
    return bundle, _Outputs(args.out)


def _matrix_rows(times, matrix):
    for k, t in enumerate(times):
        yield [t, *matrix[k]]


def _cmd_simulate(args) -> int:
    bundle, out = _prepare(args)
    run = bundle.run
    n = run.n_compartments
    timings = {}
    t0 = time.perf_counter()
    mean_counts = np.zeros((run.out_times.size, n))
    width = max(3, len(str(max(args.replicates - 1, 0))))
    for k in range(args.replicates):
        traj = simulate(run, stream=k)
        immature = traj.x1 + traj.belt.sum(axis=1) / n
        out.write_csv(
            f"replicate_{k:0{width}d}.csv",
            ["time", "x1_scaled", "xn_scaled", "immature_mass"],
            zip(traj.out_times, traj.x1, traj.xn, immature))
        mean_counts[:, 0] += traj.x1 * n
        mean_counts[:, 1:n - 1] += traj.belt
        mean_counts[:, n - 1] += traj.xn * n
    mean_counts /= max(args.replicates, 1)
    timings["simulate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    out.write_csv("compartment_means.csv",
                  ["time"] + [f"c{i:04d}" for i in range(1, n + 1)],
                  _matrix_rows(run.out_times, mean_counts))
    timings["write"] = time.perf_counter() - t0
    out.write_manifest("simulate", bundle.resolved(), run.seed, timings)
    return 0


def _cmd_diagnose(args) -> int:
    bundle, out = _prepare(args)
    run = bundle.run
    fn = parse_test_function(args.testfn)
    timings = {}
    t0 = time.perf_counter()
    traj = simulate(run, test_functions=(fn,), stream=args.stream)
    panel = drift_terms(traj, fn.name)
    pathwise = pathwise_identity_residual(traj)
    timings["simulate"] = time.perf_counter() - t0

    qv = panel.qv
    header = ["time", "a1", "af", "an", "m1", "mf", "mn",
              "qv_m1", "qv_mN", "qv_f", "qv_m1_mN", "qv_m1_f",
              "qv_f_mN_printed", "pathwise_residual"]
    rows = zip(traj.out_times, panel.a1, panel.af, panel.an,
               panel.m1, panel.mf, panel.mn,
               qv["m1"], qv["mN"], qv["f"], qv["m1_mN"], qv["m1_f"],
               qv["f_mN_printed"], pathwise)
    t0 = time.perf_counter()
    out.write_csv("diagnostics.csv", header, rows)
    timings["write"] = time.perf_counter() - t0
    out.write_manifest("diagnose", bundle.resolved(), run.seed, timings)
    return 0


def _cmd_limit(args) -> int:
    bundle, out = _prepare(args)
    lim = bundle.limit
    timings = {}
    t0 = time.perf_counter()
    if args.solver == "upwind":
        grid = solve_upwind(bundle.model, n_cells=lim.grid_cells,
                            horizon=bundle.run.horizon, a0=lim.a0, z0=lim.z0,
                            dt=lim.dt)
        source = grid
        extra_header = ["ledger_residual", "clipped_cells"]
        extra = [(grid.ledger[k], grid.n_clipped)
                 for k in range(grid.times.size)]
    else:
        traj = solve_mild(bundle.model, horizon=bundle.run.horizon,
                          n_steps=lim.mild_steps, a0=lim.a0, z0=lim.z0)
        source = traj
        extra_header = []
        extra = [() for _ in traj.times]
    times, x_nodes, density, a_series, z_series, _ = _as_panel(
        source, lim.grid_cells)
    balance = limit_mass_balance(source)
    timings["solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    out.write_csv("series.csv",
                  ["time", "a", "z"] + extra_header,
                  ([t, a_series[k], z_series[k], *extra[k]]
                   for k, t in enumerate(times)))
    out.write_csv("density.csv",
                  ["time"] + [repr(float(x)) for x in x_nodes],
                  _matrix_rows(times, density))
    out.write_csv("mass_balance.csv",
                  ["time", "residual"],
                  zip(balance["times"], balance["residual"]))
    timings["write"] = time.perf_counter() - t0
    out.write_manifest("limit", bundle.resolved(), bundle.run.seed, timings)
    return 0


def _cmd_compare(args) -> int:
    bundle, out = _prepare(args)
    try:
        n_list = [int(tok) for tok in args.n_list.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --n-list {args.n_list!r}") from exc
    if not n_list:
        raise ConfigError("--n-list is empty")
    lim = bundle.limit
    timings = {}
    t0 = time.perf_counter()
    reference = solve_upwind(bundle.model, n_cells=lim.grid_cells,
                             horizon=bundle.run.horizon, a0=lim.a0, z0=lim.z0,
                             dt=lim.dt)
    report = convergence_study(
        bundle.model, n_list, horizon=bundle.run.horizon,
        n_reps=args.replicates, a0=lim.a0, z0=lim.z0, reference=reference,
        bl_cells=args.bl_cells, base_seed=bundle.run.seed)
    timings["study"] = time.perf_counter() - t0

    # witness for the largest size: replicate-0 final state vs the limit
    t0 = time.perf_counter()
    n_big = max(n_list)
    config = ModelConfig(n_compartments=n_big, horizon=bundle.run.horizon,
                         initial_counts=stem_only_counts(n_big, n_big),
                         model=bundle.model,
                         out_times=np.array([0.0, bundle.run.horizon]),
                         seed=bundle.run.seed + len(n_list) - 1)
    traj = simulate(config, stream=0)
    _, witness = bl_distance(empirical_measure(traj.final_counts),
                             reference.measure(-1), n_cells=args.bl_cells,
                             return_witness=True)
    timings["witness"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    out.write_csv("convergence.csv",
                  ["n", "bl_distance", "batch_sem", "stem_error",
                   "mature_error"],
                  zip(report.n_values, report.distances, report.sems,
                      report.stem_errors, report.mature_errors))
    out.write_csv("witness.csv", ["x", "g"], zip(witness.nodes, witness.g))
    timings["write"] = time.perf_counter() - t0
    out.write_manifest("compare", bundle.resolved(), bundle.run.seed, timings)
    return 0


def _default_flow_field() -> FlowField:
    model = make_model(constant_rate(0.0),
                       affine_rate(0.02, 0.0, 0.005, 0.1), 0.0)
    z = ZTrajectory(np.array([0.0, 5.0, 10.0]), np.array([0.0, 1.0, 0.5]))
    return FlowField.from_model(model, z)


def _cmd_flow_test(args) -> int:
    if args.config is not None:
        bundle = load_config(args.config)
        z = ZTrajectory(np.array([0.0, bundle.run.horizon]),
                        np.array([bundle.limit.z0, bundle.limit.z0]))
        field = FlowField.from_model(bundle.model, z)
        horizon = float(bundle.run.horizon)
        resolved = bundle.resolved()
    else:
        field = _default_flow_field()
        horizon = 10.0
        resolved = None
    os.makedirs(args.out, exist_ok=True)
    out = _Outputs(args.out)
    rng = np.random.default_rng(args.seed)
    n = args.samples
    timings = {}
    t0 = time.perf_counter()

    rows = []

    def record(name, count, residual, tol):
        rows.append([name, count, residual, tol,
                     "pass" if residual <= tol else "fail"])

    worst = 0.0
    for _ in range(n):
        t1, t2, t3 = np.sort(rng.uniform(0.0, horizon, 3))
        x = rng.uniform(0.0, 0.5)
        direct = flow(field, t3, t1, x)
        via = flow(field, t3, t2, flow(field, t2, t1, x))
        worst = max(worst, abs(direct - via))
    record("composition", n, worst, 1e-8)

    worst = 0.0
    for _ in range(n):
        s, t = rng.uniform(0.0, horizon, 2)
        x = rng.uniform(0.0, 0.5)
        y = flow(field, s, t, x)
        worst = max(worst, abs(inverse_space(field, s, t, y) - x))
    record("space_inverse", n, worst, 1e-8)

    worst = 0.0
    for _ in range(n):
        u0, t = np.sort(rng.uniform(0.0, horizon, 2))
        x = rng.uniform(0.0, 0.5)
        y = flow(field, t, u0, x)
        u_hat = inverse_time_kappa(field, t, y, x)
        worst = max(worst, abs(flow(field, t, u_hat, x) - y))
    record("time_inverse", n, worst, 1e-8)

    worst = 0.0
    for _ in range(n):
        u0, t = np.sort(rng.uniform(0.0, horizon, 2))
        y = flow(field, t, u0, 0.0)
        worst = max(worst, abs(flow(field, t, tau(field, t, y), 0.0) - y))
    record("tau_roundtrip", n, worst, 1e-8)

    h = 1e-4
    kinks = np.asarray(field.z.times)
    worst = 0.0
    count = 0
    while count < n:
        s = rng.uniform(0.0, horizon)
        u = rng.uniform(h, horizon - h)
        if np.min(np.abs(kinks - u)) < 2 * h or abs(s - u) < 2 * h:
            continue
        x = rng.uniform(0.0, 0.5)
        du = (flow(field, s, u + h, x) - flow(field, s, u - h, x)) / (2 * h)
        dx = (flow(field, s, u, x + h) - flow(field, s, u, x - h)) / (2 * h)
        worst = max(worst, abs(du + field.m_at(x, field.z(u)) * dx))
        count += 1
    record("transport_pde", n, worst, 1e-5)

    worst = 0.0
    for _ in range(n):
        bump = rng.uniform(-0.5, 0.5, field.z.values.size)
        other = FlowField(field.m, ZTrajectory(field.z.times,
                                               field.z.values + bump),
                          field.m_hat, field.m_min, field.lip_m)
        s, t = rng.uniform(0.0, horizon, 2)
        x = rng.uniform(0.0, 0.5)
        gap, bound = stability_gap(field, other, s, t, x)
        worst = max(worst, gap - bound)
    record("stability_bound", n, worst, 1e-12)

    timings["checks"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    out.write_csv("flow_properties.csv",
                  ["check", "samples", "max_residual", "tolerance", "status"],
                  rows)
    timings["write"] = time.perf_counter() - t0
    out.write_manifest("flow-test", resolved, args.seed, timings)
    if any(row[-1] == "fail" for row in rows):
        print("flow-test: property check failed", file=sys.stderr)
        return 3
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hemaflow",
        description="Stochastic compartment simulator with deterministic "
                    "limit solvers and convergence diagnostics.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="INI run file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("simulate", help="finite-N replicate trajectories")
    common(p)
    p.add_argument("--replicates", type=int, default=1)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("diagnose",
                       help="drift, residual, and variance panel")
    common(p)
    p.add_argument("--testfn", required=True,
                   help="identity | square | constant | hat:<eps>")
    p.add_argument("--stream", type=int, default=0,
                   help="replicate stream to diagnose")
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("limit", help="deterministic limit profiles")
    common(p)
    p.add_argument("--solver", choices=("upwind", "mild"), default="upwind")
    p.set_defaults(func=_cmd_limit)

    p = sub.add_parser("compare", help="finite-N vs limit convergence study")
    common(p)
    p.add_argument("--n-list", default="50,100,200,400",
                   help="comma-separated system sizes")
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--bl-cells", type=int, default=512)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("flow-test", help="characteristic flow property checks")
    p.add_argument("--config", default=None, help="optional INI run file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=100)
    p.set_defaults(func=_cmd_flow_test)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"hemaflow: config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"hemaflow: numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"hemaflow: i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
