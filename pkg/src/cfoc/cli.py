"""Command-line front end.

Subcommands:
  solve        one factual through the full pipeline
  batch        sampled factuals, pair table, plot data and figures
  export-sdpa  write the assembled relaxation in SDPA sparse format
  simulate     closed-loop replay of a feedback law from a JSON file

Every run writes into its own directory (under --out, the CFOC_OUT_ROOT
environment variable, or ./runs): a config snapshot, result JSON, pair CSV,
plot-data CSV, solver trace and rendered figures.

Exit codes: 0 optimal, 1 usage or I/O error, 2 infeasible, 3 iteration
limit reached.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import extraction, models, momentlp, ocp, oracle, pipeline, report, sdpsolve
from .extraction import CounterfactualPair
from .polyalg import StructuralError, parse_polynomial

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_MAXITER = 3

_STATUS_EXIT = {"optimal": EXIT_OK, "infeasible": EXIT_INFEASIBLE,
                "max-iterations": EXIT_MAXITER, "breakdown": EXIT_MAXITER}


def _out_root(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get("CFOC_OUT_ROOT")
    return Path(env) if env else Path("runs")


def _run_dir(args, name: str) -> Path:
    root = _out_root(args.out)
    run = root / name
    run.mkdir(parents=True, exist_ok=True)
    return run


def _state_names(spec) -> list[str]:
    return [spec.space.variables[i].name for i in spec.space.state_indices]


def _parse_factual(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise StructuralError(f"cannot parse factual {text!r}; expected a,b,c")


def _config_from_args(args) -> pipeline.RunConfig:
    return pipeline.RunConfig(
        model=args.model,
        order=args.order,
        mode=args.mode,
        factual=_parse_factual(args.factual) if args.factual else None,
        batch=getattr(args, "batch", None),
        seed=args.seed,
        out_dir=args.out,
        method=args.method,
        tol_feas=args.tol_feas,
        tol_gap=args.tol_gap,
        max_iters=args.max_iters,
        workers=getattr(args, "workers", 1),
        with_oracle=getattr(args, "with_oracle", False),
    )


def _write_config(run_dir: Path, config: pipeline.RunConfig) -> None:
    snap = dict(vars(config))
    snap["factual"] = list(snap["factual"]) if snap["factual"] else None
    (run_dir / "config.json").write_text(json.dumps(snap, indent=2) + "\n")


def _write_trace(run_dir: Path, record: pipeline.SolveRecord) -> None:
    lines = []
    if record.result is not None:
        for t in record.result.trace:
            lines.append(
                f"{t['iter']} rp={t['rp']:.3e} rd={t['rd']:.3e} eq={t['eq']:.3e} "
                f"gap={t['gap']:.3e} obj={t['obj']:.9e} rho={t['rho']:.3e}"
            )
    (run_dir / "trace.txt").write_text("\n".join(lines) + "\n")


def _pairs_csv(run_dir: Path, prep: pipeline.Prepared,
               records: list[pipeline.SolveRecord]) -> None:
    names = _state_names(prep.original)
    pnames = [n for n, _, _ in prep.original.parameter_box] if prep.mode == "uncertain" else []
    header = ["index", "status"] + CounterfactualPair.csv_header(names, pnames)
    with open(run_dir / "pairs.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            if not rec.pairs:
                writer.writerow([rec.index, rec.status] + [""] * (len(header) - 2))
            for pair in rec.pairs:
                writer.writerow([rec.index, rec.status] + pair.csv_row())


def _plot_data_csv(run_dir: Path, records: list[pipeline.SolveRecord]) -> list[CounterfactualPair]:
    pairs = [rec.pairs[0] for rec in records if rec.pairs]
    with open(run_dir / "plot_data.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["G_f", "I_f", "G_cf", "I_cf"])
        for p in pairs:
            writer.writerow([repr(p.factual[0]), repr(p.factual[-1]),
                             repr(p.counterfactual[0]), repr(p.counterfactual[-1])])
    return pairs


def _trajectory_csv(path: Path, traj: extraction.SimTrajectory, names: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + names + ["u"])
        for k in range(len(traj.times_seconds)):
            row = [repr(float(traj.times_seconds[k]))]
            row += [repr(float(v)) for v in traj.states[k]]
            row.append(repr(float(traj.controls[k][0]
                                  if traj.controls.ndim > 1 else traj.controls[k])))
            writer.writerow(row)


# ---------------------------------------------------------------------- #
# subcommands


def cmd_solve(args) -> int:
    config = _config_from_args(args)
    spec = pipeline.load_spec(config.model, config.mode)
    prep = pipeline.prepare(spec, config.mode, config.order)
    factual = config.factual or spec.factual
    run_dir = _run_dir(args, f"solve-{spec.name}-d{config.order}-{config.mode}")
    _write_config(run_dir, config)

    if args.export_sdpa:
        x_f_scaled = prep.scaling.to_scaled(prep.scaled.space.state_indices, factual)
        conic = momentlp.to_conic(prep.relaxed, tuple(x_f_scaled))
        Path(args.export_sdpa).write_text(sdpsolve.export_sdpa(conic))

    record = pipeline.solve_one(prep, factual, config)
    _write_trace(run_dir, record)
    _pairs_csv(run_dir, prep, [record])

    payload = {
        "model": spec.name,
        "order": config.order,
        "mode": config.mode,
        "status": record.status,
        "objective": record.result.objective if record.result else None,
        "dual_objective": record.result.dual_objective if record.result else None,
        "residuals": record.result.residuals if record.result else None,
        "iterations": record.result.iterations if record.result else None,
        "wall_time": record.result.wall_time if record.result else None,
        "pairs": [p.to_json_dict() for p in record.pairs],
        "error": record.error,
    }

    if config.with_oracle:
        direct = oracle.solve_direct(prep.scaled, seed=config.seed)
        payload["oracle"] = direct.to_json_dict()
        payload["oracle"]["bound_ok"] = (
            oracle.verify_bound(record.result.objective, direct.achieved_cost)
            if record.result else None
        )

    (run_dir / "result.json").write_text(json.dumps(payload, indent=2) + "\n")

    if record.pairs:
        report.phase_plane_figure(record.pairs, run_dir / "phase_plane.png",
                                  axis_names=_phase_axes(prep),
                                  boundaries=_phase_boundaries(prep))
    if record.trajectory is not None:
        _trajectory_csv(run_dir / "trajectory.csv", record.trajectory,
                        _state_names(prep.original))
        report.trajectory_figure(record.trajectory, run_dir / "trajectory.png",
                                 tuple(_state_names(prep.original)))
    print(f"{record.status}: results in {run_dir}")
    return _STATUS_EXIT.get(record.status, EXIT_MAXITER)


def _phase_axes(prep) -> tuple[str, str]:
    names = _state_names(prep.original)
    return (names[0], names[-1])


def _phase_boundaries(prep) -> tuple[float, ...]:
    # terminal-set interval of the first state, for the dashed boundary
    box = models.initial_box(prep.original)
    ineqs = prep.original.terminal_set.inequalities
    spec = prep.original
    i0 = spec.space.state_indices[0]
    for w in ineqs:
        involved = {j for mono in w.terms for j, e in enumerate(mono) if e > 0}
        if involved == {i0} and w.degree_in(i0) == 2:
            coeffs = np.zeros(3)
            for mono, cc in w.terms.items():
                coeffs[2 - mono[i0]] += cc
            roots = sorted(np.roots(coeffs).real)
            return (float(roots[0]), float(roots[1]))
    return ()


def cmd_batch(args) -> int:
    config = _config_from_args(args)
    if not config.batch:
        print("batch requires --batch <n>", file=sys.stderr)
        return EXIT_USAGE
    spec = pipeline.load_spec(config.model, config.mode)
    prep = pipeline.prepare(spec, config.mode, config.order)
    factuals = pipeline.sample_batch_factuals(spec, config.batch, config.seed)
    run_dir = _run_dir(args, f"batch-{spec.name}-d{config.order}-{config.mode}-n{config.batch}")
    _write_config(run_dir, config)

    records = pipeline.run_batch(prep, factuals, config)
    _pairs_csv(run_dir, prep, records)
    pairs = _plot_data_csv(run_dir, records)

    converged = [r for r in records if r.status == "optimal"]
    i_values = [p.counterfactual[-1] for p in pairs]
    edges = np.linspace(0.0, _i_axis_max(prep), 21)
    hist, _ = np.histogram(i_values, bins=edges) if i_values else (np.zeros(20, int), edges)
    summary = {
        "model": spec.name,
        "order": config.order,
        "mode": config.mode,
        "batch": config.batch,
        "seed": config.seed,
        "converged": len(converged),
        "failed": len(records) - len(converged),
        "statuses": {r.index: r.status for r in records if r.status != "optimal"},
        "counterfactual_I_histogram": {
            "bin_edges": [float(e) for e in edges],
            "counts": [int(h) for h in hist],
        },
        "counterfactual_I_quartiles": (
            [float(q) for q in np.percentile(i_values, [25, 50, 75])] if i_values else None
        ),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if pairs:
        report.phase_plane_figure(pairs, run_dir / "phase_plane.png",
                                  axis_names=_phase_axes(prep),
                                  boundaries=_phase_boundaries(prep),
                                  title=f"{spec.name} d={config.order} {config.mode}")
    print(f"{len(converged)}/{len(records)} converged: results in {run_dir}")
    return EXIT_OK if converged else EXIT_MAXITER


def _i_axis_max(prep) -> float:
    spec = prep.original
    last = spec.space.state_indices[-1]
    return spec.space.variables[last].bounds[1]


def cmd_export_sdpa(args) -> int:
    config = _config_from_args(args)
    spec = pipeline.load_spec(config.model, config.mode)
    prep = pipeline.prepare(spec, config.mode, config.order)
    factual = config.factual or spec.factual
    x_f_scaled = prep.scaling.to_scaled(prep.scaled.space.state_indices, factual)
    conic = momentlp.to_conic(prep.relaxed, tuple(x_f_scaled))
    out = Path(args.file)
    out.write_text(sdpsolve.export_sdpa(conic))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _config_from_args(args)
    spec = pipeline.load_spec(config.model, config.mode)
    prep = pipeline.prepare(spec, config.mode, config.order)
    factual = config.factual or spec.factual

    with open(args.law, encoding="utf-8") as fh:
        law_spec = json.load(fh)
    space = prep.scaled.space
    if "value_function" in law_spec:
        v = parse_polynomial(law_spec["value_function"], space)
        law = extraction.recover_control_law(v, prep.scaled,
                                             law_spec.get("bound", 0.0))
    elif "control" in law_spec:
        comps = law_spec["control"]
        if isinstance(comps, str):
            comps = [comps]
        law = extraction.ControlLaw(
            components=tuple(parse_polynomial(c, space) for c in comps),
            value_function=parse_polynomial(law_spec.get("v", "0"), space),
            bound=law_spec.get("bound", 0.0),
        )
    else:
        print("law file needs a 'value_function' or 'control' entry", file=sys.stderr)
        return EXIT_USAGE

    tau_seconds = float(law_spec.get(
        "tau_seconds", prep.scaling.horizon_seconds
    ))
    traj, pair = extraction.simulate_closed_loop(
        prep.scaled, law, factual, tau_seconds, prep.scaling
    )
    run_dir = _run_dir(args, f"simulate-{spec.name}")
    _write_config(run_dir, config)
    _trajectory_csv(run_dir / "trajectory.csv", traj, _state_names(prep.original))
    report.trajectory_figure(traj, run_dir / "trajectory.png",
                             tuple(_state_names(prep.original)))
    (run_dir / "result.json").write_text(
        json.dumps({"pair": pair.to_json_dict(),
                    "achieved_cost_scaled": traj.achieved_cost_scaled,
                    "saturated_fraction": traj.saturated_fraction,
                    "exited_path_set": traj.exited_path_set}, indent=2) + "\n"
    )
    print(f"simulated: results in {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------- #


def _add_common(p: argparse.ArgumentParser, batch: bool = False):
    p.add_argument("--model", default="bergman-known",
                   help="preset name or JSON model file path")
    p.add_argument("--order", type=int, default=4, help="relaxation order d")
    p.add_argument("--mode", choices=("known", "uncertain"), default="known")
    p.add_argument("--factual", default=None, help="comma-separated state, e.g. 250,0,0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output root (default $CFOC_OUT_ROOT or ./runs)")
    p.add_argument("--method", choices=("moment", "trajectory", "both"), default="moment")
    p.add_argument("--tol-feas", type=float, default=1e-7, dest="tol_feas")
    p.add_argument("--tol-gap", type=float, default=1e-6, dest="tol_gap")
    p.add_argument("--max-iters", type=int, default=200000, dest="max_iters")
    if batch:
        p.add_argument("--batch", type=int, required=True, help="number of sampled factuals")
        p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfoc",
        description="Counterfactual generation for polynomial control systems "
                    "via moment-space relaxations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one factual end to end")
    _add_common(p)
    p.add_argument("--export-sdpa", default=None, dest="export_sdpa",
                   help="also write the assembled problem to this SDPA file")
    p.add_argument("--with-oracle", action="store_true", dest="with_oracle",
                   help="run the direct-method baseline beside the relaxation")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("batch", help="sampled factuals, pair table and plot data")
    _add_common(p, batch=True)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("export-sdpa", help="write the relaxation in SDPA sparse format")
    _add_common(p)
    p.add_argument("file", help="output path")
    p.set_defaults(func=cmd_export_sdpa)

    p = sub.add_parser("simulate", help="closed-loop replay of a feedback law")
    _add_common(p)
    p.add_argument("law", help="JSON file with a value_function or control entry")
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (StructuralError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
