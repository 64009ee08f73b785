"""Command-line harness: run, sweep, bounds, control, validate.

``run`` executes one experiment config for every seed and writes per-seed
metrics/events CSVs plus a JSON manifest. ``sweep`` repeats a run over a
list of values for one config field and emits a tidy long-format summary.
``bounds`` and ``control`` expose the closed-form constant set and the
interval/combiner solver on parameter files. ``validate`` runs the named
invariant suite and fails on any violated check.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .analysis import compute_constants, feasibility_limits, theorem_bound
from .control import ControlConfig, run_adaptive, solve_p
from .engine import METRIC_COLUMNS, RunResult, run_training
from .errors import ConfigError, DFLError
from .fleet import HeterogeneityParams
from .netcost import CostSnapshot
from .validate import SUITES, run_suite


def _write_metrics_csv(path: Path, result: RunResult) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRIC_COLUMNS)
        columns = [result.metrics[name] for name in METRIC_COLUMNS]
        for row in zip(*columns):
            writer.writerow([int(v) if name in ("t", "k") else repr(float(v))
                             for name, v in zip(METRIC_COLUMNS, row)])


def _write_events_csv(path: Path, result: RunResult) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t", "kind", "subnet", "energy_j", "delay_s"])
        for ev in result.events:
            writer.writerow([ev.t, ev.kind, ev.subnet,
                             repr(float(ev.energy_j)), repr(float(ev.delay_s))])


def read_metrics_csv(path) -> dict:
    """Lossless reload of a metrics CSV into column arrays."""
    with Path(path).open(newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    table = np.asarray(rows)
    return {name: table[:, i] for i, name in enumerate(header)}


def _summarize(result: RunResult) -> dict:
    out = {
        "final_loss": float(result.metrics["loss"][-1]),
        "final_gap": float(result.metrics["gap"][-1]),
        "cum_energy": float(result.metrics["cum_energy"][-1]),
        "cum_delay": float(result.metrics["cum_delay"][-1]),
        "steps": int(result.metrics["t"][-1]),
    }
    if result.decisions:
        alphas = [d.alpha_next for d in result.decisions if not d.fallback]
        taus = [d.tau_next for d in result.decisions if not d.fallback]
        out["mean_alpha"] = float(np.mean(alphas)) if alphas else float("nan")
        out["mean_tau"] = float(np.mean(taus)) if taus else float("nan")
        out["fallbacks"] = sum(d.fallback for d in result.decisions)
    return out


def execute_single(effective: dict, seed: int) -> tuple:
    """One full run of an effective config for one seed (worker-safe)."""
    cfg = cfgmod.ExperimentConfig(raw=effective, effective=effective)
    dataset = cfgmod.build_dataset(cfg)
    model = cfgmod.build_model(cfg, dataset)
    topology = cfgmod.build_fleet(cfg, dataset, model)
    cost_model = cfgmod.build_cost_model(cfg, model, topology)
    sched_cfg = cfg.effective["schedule"]
    w_star = "auto" if sched_cfg["track_optimality"] else None
    if cfg.mode == "fixed":
        schedule = cfgmod.build_schedule(cfg, topology.num_subnets)
        result = run_training(
            topology, model, schedule, seed=seed, batch_size=cfg.batch_size,
            cost_model=cost_model, w_star=w_star,
            allow_alpha_one=bool(sched_cfg["alpha_ablation"]),
            track_noise_free=bool(sched_cfg["track_noise_free"]),
            metrics_every=int(sched_cfg["metrics_every"]),
        )
    else:
        control = cfgmod.build_control(cfg)
        result = run_adaptive(
            topology, model, control, seed=seed, batch_size=cfg.batch_size,
            delay=int(sched_cfg["delay"]), up_delay=sched_cfg["up_delay"],
            cost_model=cost_model, w_star=w_star,
            track_noise_free=bool(sched_cfg["track_noise_free"]),
            metrics_every=int(sched_cfg["metrics_every"]),
        )
    from .fleet import partition_manifest

    return result, _summarize(result), partition_manifest(topology)


def _run_config(cfg: cfgmod.ExperimentConfig, seeds: list[int], out_dir: Path,
                workers: int, tag: str = "run") -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {seed: pool.submit(execute_single, cfg.effective, seed)
                       for seed in seeds}
            for seed, fut in futures.items():
                results[seed] = fut.result()
    else:
        for seed in seeds:
            results[seed] = execute_single(cfg.effective, seed)

    manifest = {
        "config_hash": cfg.config_hash(),
        "effective_config": cfg.effective,
        "seeds": seeds,
        "partition": next(iter(results.values()))[2],
        "outputs": {},
        "summary": {},
    }
    for seed, (result, summary, _) in results.items():
        base = f"{tag}_seed{seed}"
        metrics_path = out_dir / f"{base}_metrics.csv"
        events_path = out_dir / f"{base}_events.csv"
        _write_metrics_csv(metrics_path, result)
        _write_events_csv(events_path, result)
        manifest["outputs"][str(seed)] = {
            "metrics": metrics_path.name, "events": events_path.name,
        }
        manifest["summary"][str(seed)] = summary
        if result.decisions:
            manifest.setdefault("decisions", {})[str(seed)] = [
                asdict(d) for d in result.decisions
            ]
        if len(result.sync_times):
            manifest.setdefault("sync_times", {})[str(seed)] = [
                int(t) for t in result.sync_times
            ]
    (out_dir / f"{tag}_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _set_path(raw: dict, dotted: str, value) -> dict:
    out = json.loads(json.dumps(raw))
    node = out
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def cmd_run(args) -> int:
    cfg = cfgmod.load_config(args.config)
    seeds = [s + args.seed_offset for s in cfg.seeds]
    out_dir = Path(args.output or cfg.output_dir)
    manifest = _run_config(cfg, seeds, out_dir, args.workers)
    print(f"wrote {len(seeds)} run(s) to {out_dir} (config {manifest['config_hash'][:12]})")
    return 0


def cmd_sweep(args) -> int:
    cfg = cfgmod.load_config(args.config)
    values = json.loads(f"[{args.values}]")
    if not values:
        raise ConfigError("sweep: empty values list")
    seeds = [s + args.seed_offset for s in cfg.seeds]
    out_root = Path(args.output or cfg.output_dir)
    axis_slug = args.axis.replace(".", "_")
    rows = []
    for value in values:
        sub = cfgmod.parse_config(_set_path(cfg.effective, args.axis, value))
        sub_dir = out_root / f"sweep_{axis_slug}_{value}"
        manifest = _run_config(sub, seeds, sub_dir, args.workers,
                               tag=f"{axis_slug}_{value}")
        for seed_key, summary in manifest["summary"].items():
            for metric, metric_value in summary.items():
                rows.append((args.axis, value, int(seed_key), metric, metric_value))
    table_path = out_root / f"sweep_{axis_slug}.csv"
    out_root.mkdir(parents=True, exist_ok=True)
    with table_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["axis", "value", "seed", "metric", "metric_value"])
        writer.writerows(rows)
    print(f"wrote sweep table {table_path}")
    return 0


def _params_from_json(blob: dict) -> HeterogeneityParams:
    zeta = blob.get("zeta")
    if zeta is None:
        zeta = 2.0 * blob["beta"] * blob.get("omega", 0.0)
    return HeterogeneityParams(
        mu=blob["mu"], beta=blob["beta"], inter_delta=blob.get("delta", 0.0),
        inter_zeta=zeta,
        intra_delta=np.asarray(blob.get("delta_c", [0.0]), dtype=np.float64),
        intra_zeta=np.asarray(blob.get("zeta_c", [0.0]), dtype=np.float64),
        sgd_noise=blob.get("sigma", 0.0),
        subnet_noise_budget=blob.get("phi", 0.0),
    )


def cmd_bounds(args) -> int:
    blob = json.loads(Path(args.params).read_text())
    params = _params_from_json(blob)
    tau, delay = int(blob["tau"]), int(blob["delay"])
    eta_max, gamma = blob.get("eta_max"), blob.get("gamma")
    if eta_max is None or gamma is None:
        from .control import select_step_size

        eta_max, gamma = select_step_size(params, tau, delay,
                                          blob.get("safety", 0.9))
    consts = compute_constants(params, tau, delay, float(blob.get("alpha", 0.0)),
                               float(eta_max), float(gamma),
                               e3_init=float(blob.get("e3_init", 0.0)))
    limits = feasibility_limits(params, tau, delay, float(eta_max), float(gamma))
    out = {
        "lambda_plus": consts.eigen.eig_plus,
        "lambda_minus": consts.eigen.eig_minus,
        "g": [consts.eigen.g1, consts.eigen.g2, consts.eigen.g3,
              consts.eigen.g4, consts.eigen.g5, consts.eigen.g6],
        "C1": consts.c1, "C2": consts.c2, "C3": consts.c3,
        "K1": consts.k1, "K2": consts.k2,
        "Y1": consts.y1, "Y2": consts.y2, "Y3": consts.y3,
        "alpha_star": consts.alpha_star,
        "eta_max": consts.eta_max, "gamma": consts.gamma,
        "eta_max_limit": limits.eta_max_limit, "gamma_limit": limits.gamma_limit,
        "nu_0": theorem_bound(consts, 0),
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_control(args) -> int:
    blob = json.loads(Path(args.snapshot).read_text())
    params = _params_from_json(blob["params"])
    cost = CostSnapshot(
        global_energy=blob["cost"]["global_energy"],
        global_delay=blob["cost"]["global_delay"],
        local_energy=np.asarray(blob["cost"]["local_energy"], dtype=np.float64),
        local_delay=np.asarray(blob["cost"]["local_delay"], dtype=np.float64),
    )
    control = ControlConfig(**blob.get("control", {}))
    weights = np.asarray(blob["subnet_weights"], dtype=np.float64)
    decision = solve_p(cost, params, control, weights, int(blob.get("t_now", 0)),
                       int(blob["delay"]), float(blob.get("e3_init", 0.0)),
                       np.asarray(blob["gap_estimates"], dtype=np.float64))
    print(json.dumps(asdict(decision), indent=2, sort_keys=True))
    return 0


def cmd_validate(args) -> int:
    checks = run_suite(args.suite, quick=args.quick)
    for check in checks:
        print(check.line())
    return 0 if all(c.passed for c in checks) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dflsim")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a config for every seed")
    p_run.add_argument("config")
    p_run.add_argument("--seed-offset", type=int, default=0)
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--output", default=None)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="repeat runs over one config axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, help="dotted path, e.g. schedule.delay")
    p_sweep.add_argument("--values", required=True, help="comma-separated JSON scalars")
    p_sweep.add_argument("--seed-offset", type=int, default=0)
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.add_argument("--output", default=None)
    p_sweep.set_defaults(func=cmd_sweep)

    p_bounds = sub.add_parser("bounds", help="print the constant set for a parameter file")
    p_bounds.add_argument("params")
    p_bounds.set_defaults(func=cmd_bounds)

    p_control = sub.add_parser("control", help="solve the interval/combiner problem once")
    p_control.add_argument("snapshot")
    p_control.set_defaults(func=cmd_control)

    p_val = sub.add_parser("validate", help="run an invariant suite")
    p_val.add_argument("suite", choices=sorted(SUITES))
    p_val.add_argument("--quick", action="store_true")
    p_val.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DFLError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
