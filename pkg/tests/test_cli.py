"""CLI harness: run/sweep/bounds/control/validate, manifests, round trips."""

import json
from pathlib import Path

import pytest

from dflsim import cli
from dflsim.config import parse_config, load_config

MINIMAL = {
    "dataset": {"kind": "ridge-cloud", "num_points": 60, "feature_dim": 3,
                "noise": 0.2, "seed": 7},
    "model": {"kind": "ridge", "regularization": 0.1},
    "topology": {"num_devices": 4, "num_subnets": 2},
    "schedule": {"mode": "fixed", "num_intervals": 4, "tau": 6, "alpha": 0.3,
                 "eta": 0.05, "delay": 2, "local_agg_period": 3},
    "seeds": [0],
    "batch_size": 5,
    "output_dir": "runs/test",
}


def write_config(tmp_path, overrides=None, **top):
    blob = json.loads(json.dumps(MINIMAL))
    for key, val in (overrides or {}).items():
        section, field = key.split(".")
        blob[section][field] = val
    blob.update(top)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(blob))
    return path


def test_run_smoke_and_row_count(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["run", str(path), "--output", str(out)]) == 0
    metrics = (out / "run_seed0_metrics.csv").read_text().splitlines()
    assert metrics[0] == "t,k,loss,gap,e1,e2,e3,cum_energy,cum_delay"
    assert len(metrics) == 1 + 24 + 1  # header + T steps + initial state row
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["seeds"] == [0]
    assert "final_loss" in manifest["summary"]["0"]


def test_run_byte_identical(tmp_path):
    path = write_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    cli.main(["run", str(path), "--output", str(out1)])
    cli.main(["run", str(path), "--output", str(out2)])
    assert (out1 / "run_seed0_metrics.csv").read_bytes() \
        == (out2 / "run_seed0_metrics.csv").read_bytes()
    assert (out1 / "run_seed0_events.csv").read_bytes() \
        == (out2 / "run_seed0_events.csv").read_bytes()


def test_run_missing_field_exit_code(tmp_path, capsys):
    blob = json.loads(json.dumps(MINIMAL))
    del blob["schedule"]["tau"]
    blob["schedule"]["mode"] = "fixed"
    blob["schedule"]["num_intervals"] = 0  # invalid on purpose
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(blob))
    assert cli.main(["run", str(path)]) == 2
    assert "num_intervals" in capsys.readouterr().err


def test_run_invalid_json_exit_code(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert cli.main(["run", str(path)]) == 2


def test_unknown_field_named(tmp_path, capsys):
    path = write_config(tmp_path, overrides={"schedule.bogus": 1})
    assert cli.main(["run", str(path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_config_hash_changes_iff_effective_changes(tmp_path):
    a = parse_config(json.loads(json.dumps(MINIMAL)))
    b = parse_config(json.loads(json.dumps(MINIMAL)))
    assert a.config_hash() == b.config_hash()
    blob = json.loads(json.dumps(MINIMAL))
    blob["schedule"]["tau"] = 7
    c = parse_config(blob)
    assert c.config_hash() != a.config_hash()
    # defaults are echoed: explicitly writing a default value changes nothing
    blob2 = json.loads(json.dumps(MINIMAL))
    blob2["schedule"]["metrics_every"] = 1
    d = parse_config(blob2)
    assert d.config_hash() == a.config_hash()


def test_metrics_csv_round_trip(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "rt"
    cli.main(["run", str(path), "--output", str(out)])
    table = cli.read_metrics_csv(out / "run_seed0_metrics.csv")
    again = out / "again.csv"
    # rewrite from the parsed columns and compare byte-for-byte
    import csv

    with again.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(table))
        for row in zip(*table.values()):
            writer.writerow([int(v) if name in ("t", "k") else repr(float(v))
                             for name, v in zip(table, row)])
    assert again.read_bytes() == (out / "run_seed0_metrics.csv").read_bytes()


def test_seed_offset(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "off"
    cli.main(["run", str(path), "--seed-offset", "5", "--output", str(out)])
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["seeds"] == [5]


def test_sweep_axis_and_empty_values(tmp_path, capsys):
    path = write_config(tmp_path)
    out = tmp_path / "sw"
    assert cli.main(["sweep", str(path), "--axis", "schedule.alpha",
                     "--values", "0.0,0.5", "--output", str(out)]) == 0
    table = (out / "sweep_schedule_alpha.csv").read_text().splitlines()
    assert table[0] == "axis,value,seed,metric,metric_value"
    values = {line.split(",")[1] for line in table[1:]}
    assert values == {"0.0", "0.5"}
    assert cli.main(["sweep", str(path), "--axis", "schedule.alpha",
                     "--values", "", "--output", str(out)]) == 2


def test_sweep_workers_match_serial(tmp_path):
    path = write_config(tmp_path)
    out1, out2 = tmp_path / "w1", tmp_path / "w2"
    cli.main(["run", str(path), "--output", str(out1)])
    cli.main(["run", str(path), "--workers", "2", "--output", str(out2)])
    assert (out1 / "run_seed0_metrics.csv").read_bytes() \
        == (out2 / "run_seed0_metrics.csv").read_bytes()


def test_bounds_subcommand(tmp_path, capsys):
    params = {"mu": 0.5, "beta": 2.0, "omega": 0.1, "delta": 0.3,
              "sigma": 0.5, "phi": 0.2, "tau": 8, "delay": 2, "alpha": 0.0,
              "e3_init": 1.0}
    path = tmp_path / "params.json"
    path.write_text(json.dumps(params))
    assert cli.main(["bounds", str(path)]) == 0
    blob = json.loads(capsys.readouterr().out)
    for key in ("C1", "C2", "C3", "K1", "K2", "Y1", "Y2", "Y3",
                "alpha_star", "eta_max_limit", "gamma_limit", "nu_0"):
        assert key in blob
    assert blob["lambda_plus"] > 0 > blob["lambda_minus"]


def test_control_subcommand(tmp_path, capsys):
    snapshot = {
        "params": {"mu": 0.5, "beta": 2.0, "omega": 0.0, "delta": 0.1,
                   "sigma": 0.5, "phi": 0.2, "delta_c": [0.1, 0.1],
                   "zeta_c": [0.0, 0.0]},
        "cost": {"global_energy": 0.5, "global_delay": 0.2,
                 "local_energy": [0.01, 0.02], "local_delay": [0.001, 0.002]},
        "control": {"tau_max": 8, "alpha_step": 0.25, "horizon": 80,
                    "phi": 0.2},
        "subnet_weights": [0.5, 0.5],
        "gap_estimates": [1.0, 0.5],
        "delay": 2,
        "t_now": 0,
        "e3_init": 1.0,
    }
    path = tmp_path / "snap.json"
    path.write_text(json.dumps(snapshot))
    assert cli.main(["control", str(path)]) == 0
    decision = json.loads(capsys.readouterr().out)
    assert 2 <= decision["tau_next"] <= 8
    assert 0.0 <= decision["alpha_next"] < 1.0


def test_validate_unknown_suite():
    with pytest.raises(SystemExit):
        cli.main(["validate", "nonsense"])


def test_validate_quick_suite_passes(capsys):
    assert cli.main(["validate", "facts", "--quick"]) == 0
    assert "[PASS]" in capsys.readouterr().out


def test_checked_in_minimal_config_runs(tmp_path):
    repo_cfg = Path(__file__).resolve().parents[1] / "configs" / "minimal_ridge.json"
    cfg = load_config(repo_cfg)
    out = tmp_path / "repo"
    assert cli.main(["run", str(repo_cfg), "--output", str(out)]) == 0
    steps = cfg.effective["schedule"]["num_intervals"] * cfg.effective["schedule"]["tau"]
    rows = (out / "run_seed0_metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + steps + 1


def test_sweep_alpha_with_ablation_value(tmp_path):
    path = write_config(tmp_path, overrides={"schedule.alpha_ablation": True})
    out = tmp_path / "abl"
    assert cli.main(["sweep", str(path), "--axis", "schedule.alpha",
                     "--values", "0.0,0.5,1.0", "--output", str(out)]) == 0
    for value in ("0.0", "0.5", "1.0"):
        sub = out / f"sweep_schedule_alpha_{value}"
        assert (sub / f"schedule_alpha_{value}_seed0_metrics.csv").exists()


def test_adaptive_delay_sweep_emits_mean_alpha(tmp_path):
    blob = {
        "dataset": {"kind": "blobs", "num_classes": 4, "points_per_class": 40,
                    "feature_dim": 4, "spread": 0.5, "seed": 3},
        "model": {"kind": "ridge", "regularization": 2.0},
        "topology": {"num_devices": 4, "num_subnets": 2, "labels_per_device": 2,
                     "partition_seed": 5},
        "schedule": {"mode": "adaptive", "delay": 2, "track_noise_free": False,
                     "track_optimality": False, "metrics_every": 10},
        "control": {"phi": 1.0, "tau_max": 8, "horizon": 32, "initial_tau": 8,
                    "probe_scale": 0.5},
        "seeds": [0],
        "batch_size": 5,
    }
    path = tmp_path / "adaptive.json"
    path.write_text(json.dumps(blob))
    out = tmp_path / "swd"
    assert cli.main(["sweep", str(path), "--axis", "schedule.delay",
                     "--values", "1,3", "--output", str(out)]) == 0
    rows = (out / "sweep_schedule_delay.csv").read_text().splitlines()
    metrics = {line.split(",")[3] for line in rows[1:]}
    assert "mean_alpha" in metrics and "mean_tau" in metrics


def test_idx_dataset_end_to_end(tmp_path):
    import struct

    import numpy as np

    gen = np.random.default_rng(0)
    count, rows, cols = 80, 3, 3
    pixels = gen.integers(0, 256, size=(count, rows, cols), dtype=np.uint8)
    labels = (np.arange(count) % 4).astype(np.uint8)
    img = tmp_path / "imgs.ubyte"
    lab = tmp_path / "labs.ubyte"
    img.write_bytes(struct.pack(">IIII", 0x803, count, rows, cols) + pixels.tobytes())
    lab.write_bytes(struct.pack(">II", 0x801, count) + labels.tobytes())
    blob = {
        "dataset": {"kind": "idx", "path": str(img), "labels_path": str(lab)},
        "model": {"kind": "svm", "regularization": 0.1, "num_classes": 4},
        "topology": {"num_devices": 4, "num_subnets": 2, "labels_per_device": 2,
                     "partition_seed": 2},
        "schedule": {"mode": "fixed", "num_intervals": 2, "tau": 4, "alpha": 0.2,
                     "eta": 0.02, "delay": 1, "track_noise_free": False,
                     "track_optimality": False},
        "seeds": [0],
        "batch_size": 4,
    }
    path = tmp_path / "idx.json"
    path.write_text(json.dumps(blob))
    out = tmp_path / "idx_out"
    assert cli.main(["run", str(path), "--output", str(out)]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    supports = [len(d["labels"]) for d in manifest["partition"]["devices"]]
    assert supports == [2, 2, 2, 2]
