"""Command-line surface.

Subcommands: fit, phase-diagram, kl-matrix, classify, bound-check, synth,
bench. Each run takes an optional JSON config file plus flag overrides
(flags win), writes its outputs plus a resolved-config copy into --out, and
exits 0 on success, 2 when a solver finished with warnings, 1 on any error.
Unknown config keys are rejected. MAXENTMIL_THREADS mirrors --threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .basis import domain_from_data, make_auto_grid, make_basis
from .maxent import BasisGrid, NewtonConfig, densities_from_columns, suff_stats
from .mil import CitationKnnConfig, PipelineConfig, evaluate_split, sym_kl_matrix
from .modelio import (
    load_model,
    model_to_dict,
    read_bags,
    write_bags_jsonl,
    write_json,
    write_matrix_csv,
    write_predictions_jsonl,
    write_stats_jsonl,
)
from .experiments import (
    PHASE_SOLVERS,
    PhaseDiagramSpec,
    markov_bound_trial,
    run_phase_diagram,
    runtime_benchmark,
    synth_bags_from_matrix,
    synth_box_grid,
    synth_lowrank_lambda,
    synth_two_class_bags,
)
from .solvers import (
    CmenaConfig,
    FitReport,
    fit_cmen,
    fit_columns_relaxed,
    fit_rmde,
    rmde_continuation,
    rmde_cross_validate,
)

FIT_SOLVERS = ("mde", "rmde", "rmde-continuation", "rmde-cv", "cmen")

_CONFIG_KEYS = {
    "fit": {"seed", "m", "solver", "eta", "etas", "a", "margin", "grid_points",
            "mc_nodes", "cv_split_seed", "newton", "cmena"},
    "phase-diagram": {"seed", "n_bags", "m_values", "t_values", "n_per_bag",
                      "reps", "solver", "d", "domain_halfwidth", "grid_points",
                      "threads", "newton", "cmena"},
    "kl-matrix": set(),
    "classify": {"seed", "distance", "m", "pca_dims", "k", "k_prime", "margin",
                 "grid_points", "mc_nodes", "newton", "cmena"},
    "bound-check": {"seed", "n_bags", "m", "n_per_bag", "trials", "a_values",
                    "grid_points"},
    "synth": {"seed", "mode", "m", "n_bags", "t", "n_per_bag", "d",
              "separation", "within", "grid_points"},
    "bench": {"n_linear", "n_quadratic", "m", "repeats", "seed"},
}

_NEWTON_KEYS = {"max_iters", "grad_tol", "armijo_c", "backtrack_rho", "hessian_ridge"}
_CMENA_KEYS = {"a", "max_outer", "max_inner", "obj_tol", "cons_tol", "ls_alpha",
               "tau_floor", "z_lo", "z_hi_init"}


def _check_keys(rec: dict, allowed: set, context: str):
    unknown = sorted(set(rec) - allowed)
    if unknown:
        raise ValueError(f"unknown config keys in {context}: {', '.join(unknown)}")


def _load_config(path, command: str) -> dict:
    if path is None:
        return {}
    rec = json.loads(Path(path).read_text())
    if not isinstance(rec, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    _check_keys(rec, _CONFIG_KEYS[command], f"{path} ({command})")
    if "newton" in rec:
        _check_keys(rec["newton"], _NEWTON_KEYS, f"{path} (newton)")
    if "cmena" in rec:
        _check_keys(rec["cmena"], _CMENA_KEYS, f"{path} (cmena)")
    return rec


def _merge(config: dict, flags: dict, defaults: dict) -> dict:
    """Precedence: explicit flag > config file > default."""
    out = dict(defaults)
    out.update({k: v for k, v in config.items() if k in defaults})
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _newton_from(config: dict) -> NewtonConfig:
    return NewtonConfig(**config.get("newton", {}))


def _cmena_from(config: dict, a=None) -> CmenaConfig:
    rec = dict(config.get("cmena", {}))
    if a is not None:
        rec["a"] = a
    return CmenaConfig(**rec)


def _prepare_out(out_dir, command: str, resolved: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(
        out / "resolved_config.json",
        {"version": __version__, "command": command, "params": resolved},
    )
    return out


def _int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v != ""]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v != ""]


def _default_threads() -> int:
    env = os.environ.get("MAXENTMIL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def cmd_fit(args) -> int:
    config = _load_config(args.config, "fit")
    params = _merge(
        config,
        {
            "seed": args.seed,
            "m": args.m,
            "solver": args.solver,
            "eta": args.eta,
            "a": args.a,
            "margin": args.margin,
            "grid_points": args.grid_points,
        },
        {
            "seed": 0,
            "m": 20,
            "solver": "cmen",
            "eta": 1.0,
            "etas": [10.0**k for k in range(-4, 5)],
            "a": 1.0,
            "margin": 0.1,
            "grid_points": 64,
            "mc_nodes": 20_000,
            "cv_split_seed": 0,
        },
    )
    if params["solver"] not in FIT_SOLVERS:
        raise ValueError(f"solver must be one of {FIT_SOLVERS}")
    params["newton"] = config.get("newton", {})
    params["cmena"] = config.get("cmena", {})
    dataset = read_bags(args.dataset)
    out = _prepare_out(args.out, "fit", params)
    newton = _newton_from(config)
    cmena = _cmena_from(config, a=params["a"])
    spec = make_basis(dataset.d, params["m"], params["seed"])
    domain = domain_from_data(dataset.pooled_instances(), params["margin"])
    grid = make_auto_grid(domain, params["grid_points"], params["mc_nodes"], params["seed"])
    engine = BasisGrid(spec, grid)
    stats = [suff_stats(b.instances, spec, b.bag_id) for b in dataset.bags]
    start = time.perf_counter()
    name = params["solver"]
    hat, fit_notes = fit_columns_relaxed(stats, spec, grid, newton, engine=engine)
    if name == "mde":
        matrix = hat
        report = FitReport(solver="mde", wall_time=time.perf_counter() - start)
    elif name == "rmde":
        matrix, report = fit_rmde(
            stats, spec, grid, params["eta"], cmena, newton, engine=engine, init=hat
        )
    elif name == "rmde-continuation":
        matrix, report = rmde_continuation(
            stats, spec, grid, cmena, newton, engine=engine, lambda_hat=hat
        )
    elif name == "rmde-cv":
        best_eta, matrix = rmde_cross_validate(
            stats, spec, grid, list(params["etas"]), params["cv_split_seed"],
            cmena, newton, engine=engine,
        )
        report = FitReport(
            solver="rmde-cv", etas=[best_eta], wall_time=time.perf_counter() - start
        )
    else:
        matrix, report = fit_cmen(
            stats, spec, grid, cmena, newton, engine=engine, lambda_hat=hat
        )
    report.warnings.extend(fit_notes)
    densities = densities_from_columns(matrix.data, matrix.bag_ids, spec, grid, engine)
    write_json(
        out / "model.json",
        model_to_dict(spec, domain, grid, densities, [s.n for s in stats], name),
    )
    write_json(out / "report.json", report.to_dict())
    write_stats_jsonl(stats, out / "stats.jsonl")
    return 2 if report.warnings else 0


def cmd_kl_matrix(args) -> int:
    spec, _domain, _grid, densities, _ns, _raw = load_model(args.model)
    out = _prepare_out(
        args.out, "kl-matrix", {"model": str(args.model), "gamma": args.gamma}
    )
    matrix = sym_kl_matrix(densities)
    ids = [d.bag_id for d in densities]
    write_matrix_csv(matrix, ids, out / "kl_matrix.csv")
    if args.gamma is not None:
        if args.gamma <= 0:
            raise ValueError("gamma must be positive")
        write_matrix_csv(np.exp(-args.gamma * matrix), ids, out / "kernel_matrix.csv")
    return 0


def cmd_classify(args) -> int:
    config = _load_config(args.config, "classify")
    params = _merge(
        config,
        {
            "seed": args.seed,
            "distance": args.distance,
            "m": args.m,
            "pca_dims": args.pca_dims,
            "k": args.k,
            "k_prime": args.k_prime,
            "margin": args.margin,
            "grid_points": args.grid_points,
        },
        {
            "seed": 0,
            "distance": "kl-cmen",
            "m": 16,
            "pca_dims": None,
            "k": 5,
            "k_prime": 5,
            "margin": 0.1,
            "grid_points": 64,
            "mc_nodes": 20_000,
        },
    )
    params["newton"] = config.get("newton", {})
    params["cmena"] = config.get("cmena", {})
    train = read_bags(args.train)
    test = read_bags(args.test)
    out = _prepare_out(args.out, "classify", params)
    pipe = PipelineConfig(
        distance=params["distance"],
        m=params["m"],
        basis_seed=params["seed"],
        pca_dims=params["pca_dims"],
        margin=params["margin"],
        grid_points=params["grid_points"],
        mc_nodes=params["mc_nodes"],
        knn=CitationKnnConfig(k=params["k"], k_prime=params["k_prime"]),
        cmena=_cmena_from(config),
        newton=_newton_from(config),
    )
    records = evaluate_split(train, test, pipe)
    write_predictions_jsonl(records, out / "predictions.jsonl")
    labeled = [r for r in records if r["true"] is not None]
    accuracy = (
        float(np.mean([r["predicted"] == r["true"] for r in labeled]))
        if labeled
        else None
    )
    write_json(out / "accuracy.json", {"accuracy": accuracy, "n_test": len(records)})
    return 0


def _phase_cell_path(out: Path, solver: str, m: int, t: int) -> Path:
    return out / "cells" / f"{solver}_m{m}_T{t}.json"


def _run_phase_for_solver(pd: PhaseDiagramSpec, out: Path, solver: str) -> list[dict]:
    pd = PhaseDiagramSpec(
        n_bags=pd.n_bags, m_values=pd.m_values, t_values=pd.t_values,
        n_per_bag=pd.n_per_bag, reps=pd.reps, base_seed=pd.base_seed,
        solver=solver, threads=pd.threads, d=pd.d,
        domain_halfwidth=pd.domain_halfwidth, grid_points=pd.grid_points,
        cv_etas=pd.cv_etas, cmena=pd.cmena, newton=pd.newton,
    )
    (out / "cells").mkdir(exist_ok=True)
    done: set[tuple[int, int]] = set()
    rows: dict[tuple[int, int], dict] = {}
    for m in pd.m_values:
        for t in pd.t_values:
            path = _phase_cell_path(out, solver, m, t)
            if path.exists():
                rows[(m, t)] = json.loads(path.read_text())
                done.add((m, t))
    for cell in run_phase_diagram(pd, skip_cells=done):
        rec = {
            "m": cell.m,
            "T": cell.t,
            "recovery_probability": cell.recovery_probability,
            "ranks": list(cell.ranks),
            "threshold": cell.threshold,
            "warnings": list(cell.warnings),
        }
        write_json(_phase_cell_path(out, solver, cell.m, cell.t), rec)
        rows[(cell.m, cell.t)] = rec
    ordered = [rows[(m, t)] for m in pd.m_values for t in pd.t_values]
    write_json(out / f"grid_{solver}.json", ordered)
    with open(out / f"grid_{solver}.csv", "w") as fh:
        fh.write("m,T,recovery_probability,ranks\n")
        for rec in ordered:
            ranks = ";".join(str(r) for r in rec["ranks"])
            fh.write(f"{rec['m']},{rec['T']},{rec['recovery_probability']},{ranks}\n")
    return ordered


def cmd_phase_diagram(args) -> int:
    config = _load_config(args.config, "phase-diagram")
    params = _merge(
        config,
        {
            "seed": args.seed,
            "n_bags": args.n_bags,
            "m_values": _int_list(args.m_values) if args.m_values else None,
            "t_values": _int_list(args.t_values) if args.t_values else None,
            "n_per_bag": args.n_per_bag,
            "reps": args.reps,
            "solver": args.solver,
            "threads": args.threads,
        },
        {
            "seed": 0,
            "n_bags": 20,
            "m_values": [20, 30, 40],
            "t_values": [2, 5, 10],
            "n_per_bag": 1000,
            "reps": 10,
            "solver": "cmen",
            "threads": _default_threads(),
            "d": 2,
            "domain_halfwidth": 3.0,
            "grid_points": 64,
        },
    )
    if params["solver"] == "both":
        solvers = ["cmen", "rmde-continuation"]
    else:
        solvers = [params["solver"]]
    params["newton"] = config.get("newton", {})
    params["cmena"] = config.get("cmena", {})
    out = _prepare_out(args.out, "phase-diagram", params)
    pd = PhaseDiagramSpec(
        n_bags=params["n_bags"],
        m_values=tuple(params["m_values"]),
        t_values=tuple(params["t_values"]),
        n_per_bag=params["n_per_bag"],
        reps=params["reps"],
        base_seed=params["seed"],
        solver=solvers[0],
        threads=params["threads"],
        d=params["d"],
        domain_halfwidth=params["domain_halfwidth"],
        grid_points=params["grid_points"],
        cmena=_cmena_from(config),
        newton=_newton_from(config),
    )
    warned = False
    for solver in solvers:
        rows = _run_phase_for_solver(pd, out, solver)
        warned = warned or any(rec["warnings"] for rec in rows)
    return 2 if warned else 0


def cmd_bound_check(args) -> int:
    config = _load_config(args.config, "bound-check")
    params = _merge(
        config,
        {
            "seed": args.seed,
            "n_bags": args.n_bags,
            "m": args.m,
            "n_per_bag": args.n_per_bag,
            "trials": args.trials,
            "a_values": _float_list(args.a_values) if args.a_values else None,
        },
        {
            "seed": 0,
            "n_bags": 5,
            "m": 10,
            "n_per_bag": 200,
            "trials": 200,
            "a_values": [2.0, 5.0],
            "grid_points": 64,
        },
    )
    out = _prepare_out(args.out, "bound-check", params)
    fractions, sums = markov_bound_trial(
        params["n_bags"], params["m"], params["n_per_bag"], params["trials"],
        params["a_values"], params["seed"], grid_points=params["grid_points"],
    )
    table = [
        {
            "a": a,
            "epsilon": a * params["n_bags"] * params["m"] / 2.0,
            "exceedance_fraction": frac,
            "markov_ceiling": 1.0 / a,
        }
        for a, frac in sorted(fractions.items())
    ]
    write_json(out / "exceedance.json", {"table": table, "sums": sums.tolist()})
    with open(out / "exceedance.csv", "w") as fh:
        fh.write("a,epsilon,exceedance_fraction,markov_ceiling\n")
        for row in table:
            fh.write(
                f"{row['a']},{row['epsilon']},{row['exceedance_fraction']},"
                f"{row['markov_ceiling']}\n"
            )
    return 0


def cmd_synth(args) -> int:
    config = _load_config(args.config, "synth")
    params = _merge(
        config,
        {
            "seed": args.seed,
            "mode": args.mode,
            "m": args.m,
            "n_bags": args.n_bags,
            "t": args.t,
            "n_per_bag": args.n_per_bag,
            "d": args.d,
        },
        {
            "seed": 0,
            "mode": "lowrank",
            "m": 20,
            "n_bags": 20,
            "t": 2,
            "n_per_bag": 1000,
            "d": 2,
            "separation": 1.5,
            "within": 0.2,
            "grid_points": 64,
        },
    )
    out = _prepare_out(args.out, "synth", params)
    if params["mode"] == "two-class":
        dataset, truth = synth_two_class_bags(
            params["n_bags"], params["n_per_bag"], params["m"], params["seed"],
            d=params["d"], separation=params["separation"], within=params["within"],
            grid_points=params["grid_points"],
        )
    elif params["mode"] == "lowrank":
        matrix = synth_lowrank_lambda(
            params["m"], params["n_bags"], params["t"], params["seed"]
        )
        spec = make_basis(params["d"], params["m"], params["seed"])
        grid = synth_box_grid(3.0, params["d"], params["grid_points"])
        dataset = synth_bags_from_matrix(
            matrix, spec, grid, params["n_per_bag"], params["seed"]
        )
        truth = {
            "m": params["m"],
            "t": params["t"],
            "seed": params["seed"],
            "lambda_columns": {
                bid: matrix.data[:, i].tolist()
                for i, bid in enumerate(matrix.bag_ids)
            },
        }
    else:
        raise ValueError("mode must be 'lowrank' or 'two-class'")
    write_bags_jsonl(dataset, out / "dataset.jsonl")
    write_json(out / "truth.json", truth)
    return 0


def cmd_bench(args) -> int:
    config = _load_config(args.config, "bench")
    params = _merge(
        config,
        {"seed": args.seed},
        {
            "seed": 0,
            "n_linear": [20_000, 40_000],
            "n_quadratic": [600, 1_200],
            "m": 20,
            "repeats": 5,
        },
    )
    out = _prepare_out(args.out, "bench", params)
    rows = runtime_benchmark(
        n_linear=tuple(params["n_linear"]),
        n_quadratic=tuple(params["n_quadratic"]),
        m=params["m"],
        seed=params["seed"],
        repeats=params["repeats"],
    )
    write_json(out / "bench.json", rows)
    with open(out / "bench.csv", "w") as fh:
        fh.write("op,n,seconds\n")
        for row in rows:
            fh.write(f"{row['op']},{row['n']},{row['seconds']}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maxentmil",
        description="Max-entropy bag densities, low-rank joint estimation, "
        "and multi-instance classification.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit bag densities and write a model file")
    p.add_argument("dataset", help="bags file (.jsonl or .csv)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--solver", choices=FIT_SOLVERS)
    p.add_argument("--m", type=int, help="feature count (even)")
    p.add_argument("--seed", type=int)
    p.add_argument("--eta", type=float, help="penalty weight for solver=rmde")
    p.add_argument("--a", type=float, help="confidence multiplier for solver=cmen")
    p.add_argument("--margin", type=float, help="domain margin fraction")
    p.add_argument("--grid-points", type=int, dest="grid_points")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("phase-diagram", help="rank-recovery sweep over (m, T)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--solver", choices=(*PHASE_SOLVERS, "both"))
    p.add_argument("--n-bags", type=int, dest="n_bags")
    p.add_argument("--m-values", dest="m_values", help="comma list, e.g. 20,30,40")
    p.add_argument("--t-values", dest="t_values", help="comma list, e.g. 2,5,10")
    p.add_argument("--n-per-bag", type=int, dest="n_per_bag")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(handler=cmd_phase_diagram)

    p = sub.add_parser("kl-matrix", help="pairwise symmetric KL of a fitted model")
    p.add_argument("model", help="model.json from fit")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--gamma", type=float,
        help="also export the kernel exp(-gamma * distance) for external use",
    )
    p.set_defaults(handler=cmd_kl_matrix)

    p = sub.add_parser("classify", help="train on one bag file, predict another")
    p.add_argument("train")
    p.add_argument("test")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument(
        "--distance", choices=("kl-cmen", "kl-rmde", "kl-mde", "kl-kde", "hausdorff")
    )
    p.add_argument("--m", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pca-dims", type=int, dest="pca_dims")
    p.add_argument("--k", type=int)
    p.add_argument("--k-prime", type=int, dest="k_prime")
    p.add_argument("--margin", type=float)
    p.add_argument("--grid-points", type=int, dest="grid_points")
    p.set_defaults(handler=cmd_classify)

    p = sub.add_parser("bound-check", help="Monte Carlo check of the KL radius")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-bags", type=int, dest="n_bags")
    p.add_argument("--m", type=int)
    p.add_argument("--n-per-bag", type=int, dest="n_per_bag")
    p.add_argument("--trials", type=int)
    p.add_argument("--a-values", dest="a_values", help="comma list, e.g. 2,5")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_bound_check)

    p = sub.add_parser("synth", help="generate synthetic bag datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=("lowrank", "two-class"))
    p.add_argument("--m", type=int)
    p.add_argument("--n-bags", type=int, dest="n_bags")
    p.add_argument("--t", type=int)
    p.add_argument("--n-per-bag", type=int, dest="n_per_bag")
    p.add_argument("--d", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("bench", help="runtime scaling probes")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # solver/runtime failures also map to exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
