#!/usr/bin/env python3
"""Adaptive-controller sweeps: chosen combiner weight vs delay and vs skew.

Runs the full adaptive loop (estimation, trigger, grid solver) over a range
of round-trip delays at a pinned interval length, then over a range of
label-skew severities, reporting the mean chosen combiner weight per point.
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from dflsim.control import ControlConfig, run_adaptive
from dflsim.data import make_blobs
from dflsim.fleet import build_topology, partition_label_skew
from dflsim.losses import RIDGE, LossModel
from dflsim.netcost import stream


def build_fleet(labels_per_device):
    gen = stream(7, 7)
    blob = make_blobs(10, 120, 6, 0.6, gen)
    parts = partition_label_skew(blob, 20, labels_per_device, stream(11, 7, 1))
    topo = build_topology(parts, [5] * 4)
    model = LossModel(RIDGE, feature_dim=6, regularization=4.0)
    return topo, model


def sweep_point(topo, model, delay, seeds, tau=30, horizon=240):
    config = ControlConfig(energy_weight=1e-3, delay_weight=1e-2,
                           bound_weight=1.0, phi=2.0, tau_max=tau, tau_min=tau,
                           alpha_step=0.01, horizon=horizon, initial_tau=tau,
                           probe_scale=0.5)
    alphas, taus = [], []
    for seed in seeds:
        res = run_adaptive(topo, model, config, seed=seed, batch_size=10,
                           delay=delay, w_star=None, metrics_every=tau)
        for d in res.decisions:
            if not d.fallback:
                alphas.append(d.alpha_next)
                taus.append(d.tau_next)
    return float(np.mean(alphas)), float(np.mean(taus))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--output", default="runs/controller_sweeps")
    args = parser.parse_args()
    seeds = range(args.seeds)

    rows = []
    topo, model = build_fleet(labels_per_device=3)
    for delay in (5, 10, 15, 20, 25):
        mean_alpha, mean_tau = sweep_point(topo, model, delay, seeds)
        print(f"delay={delay:2d}: mean alpha {mean_alpha:.4f}, mean tau {mean_tau:.1f}")
        rows.append(("delay", delay, mean_alpha, mean_tau))

    for labels in (5, 3, 2, 1):
        topo, model = build_fleet(labels_per_device=labels)
        mean_alpha, mean_tau = sweep_point(topo, model, 10, seeds)
        print(f"labels/device={labels}: mean alpha {mean_alpha:.4f}, mean tau {mean_tau:.1f}")
        rows.append(("labels_per_device", labels, mean_alpha, mean_tau))

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "controller_sweeps.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["axis", "value", "mean_alpha", "mean_tau"])
        writer.writerows(rows)
    print(f"wrote {out / 'controller_sweeps.csv'}")


if __name__ == "__main__":
    main()
