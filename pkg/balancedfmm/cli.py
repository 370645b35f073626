import asyncio
import json
import logging
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from balancedfmm.config import read_roster
from balancedfmm.core import ConnectionCounts, FmmConfig, FmmEngine, connection_factors, count_connections
from balancedfmm.datasets import GeneratorSpec, generate, generate_targets, load_points
from balancedfmm.direct import brute_force, write_potentials, write_potentials_csv
from balancedfmm.errors import FmmError
from balancedfmm.harmonics.precision import order_and_cap, truncation_bound
from balancedfmm.parse_args import parse_args
from balancedfmm.stage_objects import STAGES, SweepPoint
from balancedfmm.transport.launcher import RankLauncher

logger = logging.getLogger(__name__)

SWEEP_VALUES = {
    "theta": [0.2, 0.3, 0.4, 0.45, 0.5, 0.6, 0.7, 0.8],
    "levels": [1, 2, 3, 4],
    "eta": [0.0, 0.25, 0.5, 0.75, 1.0],
}
CONVERGE_SLACK = 10.0


def _csv(text: str, cast=float) -> List:
    return [cast(v) for v in text.split(",") if v.strip()]


def _spec(args, n: Optional[int] = None, seed: Optional[int] = None) -> GeneratorSpec:
    return GeneratorSpec(
        kind=args.dist,
        n=args.n if n is None else n,
        seed=args.seed if seed is None else seed,
        galaxy_depth=args.galaxy_depth,
    )


def load_problem(args, n: Optional[int] = None):
    if args.points_file:
        sources = load_points(args.points_file)
    else:
        sources = generate(_spec(args, n))
    targets = None
    if args.targets_file:
        targets = load_points(args.targets_file, id_offset=int(sources.ids.max()) + 1).as_targets()
    elif args.n_targets:
        targets = generate_targets(_spec(args, args.n_targets, args.seed + 1), after=sources)
    return sources, targets


def make_engine(args, **overrides) -> FmmEngine:
    params = {
        "theta": args.theta,
        "eta": args.eta,
        "levels": args.levels,
        "tol": args.tol,
        "order": args.order,
        "bound_constant": args.bound_constant,
        "ranks": args.ranks,
        "partition": args.partition,
        "halo_wait": args.halo_wait,
        "m2l": args.m2l,
        "watchdog_timeout": args.watchdog_timeout,
        "leaf_target": args.leaf_target,
        "backend": args.backend,
        "rank": args.rank,
        "roster": args.roster,
        "warmup": not args.no_warmup,
    }
    params.update(overrides)
    return FmmEngine(**params)


def emit(args, payload: dict):
    text = json.dumps(payload, indent=2)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(text)
        logger.info(f"report written to {args.report}")
    else:
        print(text)


def cmd_eval(args, argv: List[str]) -> int:
    if args.backend == "tcp" and args.spawn:
        rank_argv = [a for a in argv if a != "--spawn"]
        asyncio.run(RankLauncher(args.ranks, rank_argv, roster_path=args.roster).run())
        return 0

    if args.backend == "tcp" and args.roster:
        engine = make_engine(args, roster=read_roster(args.roster))
    else:
        engine = make_engine(args)
    sources, targets = load_problem(args)
    run = engine.evaluate(sources, targets)
    if run is None:
        return 0
    if args.check_oracle:
        run.error = run.potentials.relative_error(brute_force(sources, targets))
        logger.info(f"max relative error vs direct sum: {run.error:.3e}")
    if args.out:
        if args.out.lower().endswith(".csv"):
            write_potentials_csv(args.out, run.potentials)
        else:
            write_potentials(args.out, run.potentials)
        logger.info(f"potentials written to {args.out}")
    logger.info(f"total {run.total:.3f}s, " + ", ".join(f"{s}={run.stage_max(s):.3f}" for s in STAGES))
    emit(args, run.to_dict())
    return 0


def converge_rows(args, sources, targets, reference) -> List[dict]:
    rows = []
    for k in tqdm(range(1, args.k_max + 1), desc="converge"):
        tol = 10.0 ** -k
        order, capped = order_and_cap(tol, args.theta, args.bound_constant)
        run = make_engine(args, tol=tol, order=None).evaluate(sources, targets)
        error = run.potentials.relative_error(reference)
        rows.append({
            "k": k,
            "tol": tol,
            "order": order,
            "error": error,
            "bound": truncation_bound(args.theta, order, CONVERGE_SLACK),
            "flag": "cap" if capped else "",
        })
    envelope = np.maximum.accumulate([r["error"] for r in rows][::-1])[::-1]
    for row, value in zip(rows, envelope):
        row["envelope"] = float(value)
        row["within_bound"] = bool(row["error"] <= row["bound"])
    return rows


def cmd_converge(args, argv: List[str]) -> int:
    sources, targets = load_problem(args)
    reference = brute_force(sources, targets)
    rows = converge_rows(args, sources, targets, reference)
    for row in rows:
        logger.info(f"k={row['k']:2d} Q={row['order']:2d} error={row['error']:.3e} bound={row['bound']:.3e} {row['flag']}")
    emit(args, {"command": "converge", "theta": args.theta, "n": len(sources), "rows": rows})
    return 0


def _reference_counts(args, config: FmmConfig):
    """Single-rank counts on N/P points: the weak-scaling baseline of C_near and C_far."""
    n = max(args.n // config.ranks, 1)
    sources = generate(_spec(args, n))
    return asyncio.run(count_connections(sources, replace(config, ranks=1)))


def sweep_points(args, sources, targets, reference=None) -> List[SweepPoint]:
    values = _csv(args.values, int if args.param == "levels" else float) if args.values else SWEEP_VALUES[args.param]
    points = []
    for value in tqdm(values, desc=f"sweep {args.param}"):
        engine = make_engine(args, **{args.param: value})
        totals, variances, stages, error, counts = [], [], {s: [] for s in STAGES}, None, None
        for _ in range(max(args.repeats, 1)):
            run = engine.evaluate(sources, targets)
            totals.append(run.total)
            variances.append(run.p2p_variance.value)
            for s in STAGES:
                stages[s].append(run.stage_max(s))
            if reference is not None:
                error = run.potentials.relative_error(reference)
            counts = (run.n_near, run.n_far)
        c_near = c_far = 1.0
        if engine.config.ranks > 1:
            baseline = _reference_counts(args, engine.config.resolved(len(sources)))
            c_near, c_far = connection_factors(ConnectionCounts(engine.config.ranks, *counts), baseline)
        points.append(SweepPoint(
            parameter=args.param,
            value=value,
            totals=totals,
            stage_means={s: float(np.mean(v)) for s, v in stages.items()},
            error=error,
            c_near=c_near,
            c_far=c_far,
            p2p_variance=float(np.mean(variances)),
        ))
    return points


def cmd_sweep(args, argv: List[str]) -> int:
    sources, targets = load_problem(args)
    reference = brute_force(sources, targets) if args.check_oracle else None
    points = sweep_points(args, sources, targets, reference)
    best = min(points, key=lambda p: p.mean)
    floor = best.mean if best.mean > 0 else 1.0
    rows = []
    for p in points:
        row = p.to_dict()
        row["normalized"] = {"mean": p.mean / floor, "min": p.min / floor, "max": p.max / floor}
        rows.append(row)
        logger.info(f"{p.parameter}={p.value}: mean {p.mean:.3f}s [{p.min:.3f}, {p.max:.3f}]")
    logger.info(f"optimum {best.parameter}={best.value}")
    emit(args, {"command": "sweep", "parameter": args.param, "optimum": best.value, "rows": rows})
    return 0


def connectivity_rows(args) -> List[dict]:
    ranks_list = _csv(args.ranks_list, int)
    per_rank = args.n_per_rank or max(args.n // max(ranks_list), 1)
    base = FmmConfig(theta=args.theta, eta=args.eta, levels=args.levels, tol=args.tol, order=args.order,
                     partition=args.partition, halo_wait=args.halo_wait, watchdog_timeout=args.watchdog_timeout)
    reference = asyncio.run(count_connections(generate(_spec(args, per_rank)), base))
    rows = []
    for ranks in tqdm(ranks_list, desc="connectivity"):
        counts = reference if ranks == 1 else asyncio.run(
            count_connections(generate(_spec(args, per_rank * ranks)), replace(base, ranks=ranks))
        )
        c_near, c_far = connection_factors(counts, reference)
        rows.append({"ranks": ranks, "n": per_rank * ranks, "n_near": counts.n_near, "n_far": counts.n_far,
                     "c_near": c_near, "c_far": c_far})
    return rows


def cmd_connectivity(args, argv: List[str]) -> int:
    rows = connectivity_rows(args)
    for row in rows:
        logger.info(f"P={row['ranks']:3d} C_near={row['c_near']:.3f} C_far={row['c_far']:.3f}")
    emit(args, {"command": "connectivity", "theta": args.theta, "eta": args.eta, "levels": args.levels, "rows": rows})
    return 0


def cmd_galaxy_eta(args, argv: List[str]) -> int:
    sources, targets = load_problem(args)
    rows = []
    for eta in tqdm(_csv(args.etas), desc="galaxy eta"):
        engine = make_engine(args, eta=eta)
        totals, variances = [], []
        for _ in range(max(args.repeats, 1)):
            run = engine.evaluate(sources, targets)
            totals.append(run.total)
            variances.append(run.p2p_variance.value)
        rows.append({"eta": eta, "total": float(np.mean(totals)), "totals": totals,
                     "p2p_variance": float(np.mean(variances))})
        logger.info(f"eta={eta}: total {rows[-1]['total']:.3f}s, P2P variance {rows[-1]['p2p_variance']:.3f}")
    best = min(rows, key=lambda r: r["total"])
    at_zero = next((r for r in rows if r["eta"] == 0.0), None)
    emit(args, {
        "command": "galaxy-eta",
        "n": len(sources),
        "rows": rows,
        "eta_optimum": best["eta"],
        "variance_not_worse_than_eta0": None if at_zero is None else best["p2p_variance"] <= at_zero["p2p_variance"],
    })
    return 0


def scaling_rows(args) -> List[dict]:
    rows, baseline = [], None
    for ranks in tqdm(_csv(args.ranks_list, int), desc=f"{args.mode} scaling"):
        n = args.n * ranks if args.mode == "weak" else args.n
        sources, targets = load_problem(args, n)
        run = make_engine(args, ranks=ranks, backend="memory").evaluate(sources, targets)
        stage_max = {s: run.stage_max(s) for s in STAGES}
        m2l = stage_max["M2L"] + stage_max["M2Lh"]
        row = {"ranks": ranks, "n": n, "stages": stage_max, "total": run.total,
               "n_near": run.n_near, "n_far": run.n_far}
        if baseline is None:
            baseline = row
        ideal = baseline["total"] if args.mode == "weak" else baseline["total"] * baseline["ranks"] / ranks
        row["efficiency"] = ideal / run.total if run.total else float("nan")
        scale = ranks / baseline["ranks"]
        c_near = run.n_near / (scale * baseline["n_near"]) if baseline["n_near"] else 1.0
        c_far = run.n_far / (scale * baseline["n_far"]) if baseline["n_far"] else 1.0
        adjusted = run.total - m2l - stage_max["P2P"] + m2l / c_far + stage_max["P2P"] / c_near
        row.update(c_near=c_near, c_far=c_far, adjusted_efficiency=ideal / adjusted if adjusted else float("nan"))
        rows.append(row)
    return rows


def cmd_scaling(args, argv: List[str]) -> int:
    rows = scaling_rows(args)
    for row in rows:
        logger.info(f"P={row['ranks']}: total {row['total']:.3f}s, efficiency {row['efficiency']:.2%}, "
                    f"adjusted {row['adjusted_efficiency']:.2%}")
    emit(args, {"command": "scaling", "mode": args.mode, "rows": rows})
    return 0


COMMANDS = {
    "eval": cmd_eval,
    "converge": cmd_converge,
    "sweep": cmd_sweep,
    "connectivity": cmd_connectivity,
    "galaxy-eta": cmd_galaxy_eta,
    "scaling": cmd_scaling,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s - %(levelname)s - %(message)s")
    logging.getLogger().setLevel(args.log_level)
    try:
        return COMMANDS[args.command](args, argv)
    except FmmError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
