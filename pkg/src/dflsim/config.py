"""Experiment configuration: JSON schema, defaults and assembly helpers.

A config document is a JSON object with sections ``dataset``, ``model``,
``topology``, ``schedule``, optional ``radio`` and ``control``, plus
``seeds``, ``batch_size`` and ``output_dir``. Every defaulted field is
echoed back into the effective config that lands in the run manifest, so
the manifest hash changes exactly when an effective value changes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .control import ControlConfig
from .data import Dataset, load_csv, load_idx, make_blobs, make_ridge_cloud
from .engine import TrainingSchedule
from .errors import ConfigError
from .fleet import FleetTopology, build_topology, partition_label_skew
from .losses import RIDGE, SVM, LossModel
from .netcost import RadioConfig, RadioCostModel, stream

TAG_DATA = 7


def _need(section: dict, field: str, kind, where: str):
    if field not in section:
        raise ConfigError(f"{where}.{field}: required field missing")
    value = section[field]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{where}.{field}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _opt(section: dict, field: str, default):
    value = section.get(field, default)
    if default is not None and value is not None and not isinstance(value, type(default)):
        if isinstance(default, float) and isinstance(value, int):
            return float(value)
        raise ConfigError(f"{field}: expected {type(default).__name__}")
    return value


@dataclass
class ExperimentConfig:
    raw: dict
    effective: dict

    @property
    def seeds(self) -> list[int]:
        return list(self.effective["seeds"])

    @property
    def batch_size(self) -> int:
        return self.effective["batch_size"]

    @property
    def output_dir(self) -> str:
        return self.effective["output_dir"]

    @property
    def mode(self) -> str:
        return self.effective["schedule"]["mode"]

    def config_hash(self) -> str:
        blob = json.dumps(self.effective, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


DATASET_DEFAULTS = {
    "kind": "blobs", "num_classes": 10, "points_per_class": 300,
    "feature_dim": 8, "spread": 0.6, "center_scale": 1.0,
    "orthogonal_centers": False, "seed": 7,
    "noise": 0.1, "num_points": 400, "path": None, "labels_path": None,
    "limit": None,
}
MODEL_DEFAULTS = {"kind": SVM, "regularization": 1e-2, "num_classes": 10}
TOPOLOGY_DEFAULTS = {
    "num_devices": 50, "subnet_sizes": None, "num_subnets": 10,
    "labels_per_device": 3, "partition_seed": 11,
}
SCHEDULE_DEFAULTS = {
    "mode": "fixed", "num_intervals": 10, "tau": 20, "alpha": 0.0,
    "eta": 0.01, "delay": 0, "up_delay": None, "local_agg_period": None,
    "alpha_ablation": False, "metrics_every": 1, "track_noise_free": True,
    "track_optimality": True,
}
CONTROL_DEFAULTS = {
    "energy_weight": 0.0, "delay_weight": 0.0, "bound_weight": 1.0,
    "phi": 0.0, "tau_max": 30, "tau_min": 1, "alpha_step": 0.01,
    "horizon": 200, "safety": 0.9, "gamma_safety": None, "zeta_fraction": 0.1,
    "zeta_c_fraction": 0.1, "initial_tau": 10, "probe_count": 32,
    "probe_scale": 1.0,
}
RADIO_DEFAULTS = {
    "device_tx_power_w": 0.25, "edge_tx_power_w": 6.3, "bandwidth_hz": 1e6,
    "noise_density_dbm_hz": -173.0, "pathloss_ref_db": -30.0,
    "ref_distance_m": 1.0, "pathloss_exponent": 3.75, "bits_per_parameter": 32,
    "edge_cloud_rate_bps": 100e6, "edge_cloud_latency_s": 0.050,
    "processing_rate_hz": 200.0, "field_size_m": 30.0, "placement_seed": 3,
}


def _merge(section: dict | None, defaults: dict, where: str) -> dict:
    section = dict(section or {})
    unknown = set(section) - set(defaults)
    if unknown:
        raise ConfigError(f"{where}.{sorted(unknown)[0]}: unknown field")
    merged = dict(defaults)
    merged.update(section)
    return merged


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a JSON object")
    effective = {
        "dataset": _merge(raw.get("dataset"), DATASET_DEFAULTS, "dataset"),
        "model": _merge(raw.get("model"), MODEL_DEFAULTS, "model"),
        "topology": _merge(raw.get("topology"), TOPOLOGY_DEFAULTS, "topology"),
        "schedule": _merge(raw.get("schedule"), SCHEDULE_DEFAULTS, "schedule"),
        "control": _merge(raw.get("control"), CONTROL_DEFAULTS, "control")
        if (raw.get("control") is not None or
            (raw.get("schedule") or {}).get("mode") == "adaptive") else None,
        "radio": _merge(raw.get("radio"), RADIO_DEFAULTS, "radio")
        if raw.get("radio") is not None else None,
        "seeds": raw.get("seeds", [0]),
        "batch_size": raw.get("batch_size", 10),
        "output_dir": raw.get("output_dir", "runs"),
    }
    if not isinstance(effective["seeds"], list) or not effective["seeds"] \
            or not all(isinstance(s, int) for s in effective["seeds"]):
        raise ConfigError("seeds: expected a nonempty list of integers")
    if not isinstance(effective["batch_size"], int) or effective["batch_size"] < 1:
        raise ConfigError("batch_size: expected a positive integer")

    sched = effective["schedule"]
    if sched["mode"] not in ("fixed", "adaptive"):
        raise ConfigError(f"schedule.mode: expected 'fixed' or 'adaptive', got {sched['mode']!r}")
    if sched["mode"] == "fixed":
        for fld in ("tau", "num_intervals"):
            if not isinstance(sched[fld], int) or sched[fld] < 1:
                raise ConfigError(f"schedule.{fld}: expected a positive integer")
        if not isinstance(sched["delay"], int) or not 0 <= sched["delay"] <= sched["tau"] - 1:
            raise ConfigError("schedule.delay: expected an integer in [0, tau-1]")
        if not 0.0 <= float(sched["alpha"]) <= 1.0:
            raise ConfigError("schedule.alpha: expected a value in [0, 1]")
        if float(sched["alpha"]) == 1.0 and not sched["alpha_ablation"]:
            raise ConfigError("schedule.alpha: 1.0 requires schedule.alpha_ablation=true")
        if float(sched["eta"]) <= 0:
            raise ConfigError("schedule.eta: expected a positive step size")
    else:
        if effective["control"] is None:
            raise ConfigError("control: required when schedule.mode='adaptive'")
        if not isinstance(sched["delay"], int) or sched["delay"] < 0:
            raise ConfigError("schedule.delay: expected a nonnegative integer")

    ds = effective["dataset"]
    if ds["kind"] not in ("blobs", "ridge-cloud", "csv", "idx"):
        raise ConfigError(f"dataset.kind: unknown kind {ds['kind']!r}")
    if ds["kind"] in ("csv", "idx") and not ds["path"]:
        raise ConfigError("dataset.path: required for file-backed datasets")
    if ds["kind"] == "idx" and not ds["labels_path"]:
        raise ConfigError("dataset.labels_path: required for idx datasets")

    mdl = effective["model"]
    if mdl["kind"] not in (RIDGE, SVM):
        raise ConfigError(f"model.kind: expected 'ridge' or 'svm', got {mdl['kind']!r}")
    if float(mdl["regularization"]) < 0:
        raise ConfigError("model.regularization: must be nonnegative")

    topo = effective["topology"]
    if topo["subnet_sizes"] is not None:
        if not isinstance(topo["subnet_sizes"], list) \
                or sum(topo["subnet_sizes"]) != topo["num_devices"]:
            raise ConfigError("topology.subnet_sizes: must sum to num_devices")
    elif topo["num_devices"] % topo["num_subnets"]:
        raise ConfigError("topology.num_devices: must divide evenly into num_subnets")

    return ExperimentConfig(raw=raw, effective=effective)


# ---------------------------------------------------------------------------
# assembly


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.effective["dataset"]
    rng = stream(ds["seed"], TAG_DATA)
    if ds["kind"] == "blobs":
        return make_blobs(ds["num_classes"], ds["points_per_class"],
                          ds["feature_dim"], ds["spread"], rng,
                          center_scale=ds["center_scale"],
                          orthogonal_centers=bool(ds["orthogonal_centers"]))
    if ds["kind"] == "ridge-cloud":
        return make_ridge_cloud(ds["num_points"], ds["feature_dim"], ds["noise"], rng)
    if ds["kind"] == "csv":
        return load_csv(ds["path"])
    return load_idx(ds["path"], ds["labels_path"], limit=ds["limit"])


def build_model(cfg: ExperimentConfig, dataset: Dataset) -> LossModel:
    mdl = cfg.effective["model"]
    return LossModel(
        kind=mdl["kind"], feature_dim=dataset.feature_dim,
        regularization=float(mdl["regularization"]),
        num_classes=int(mdl["num_classes"]) if mdl["kind"] == SVM else 1,
    )


def build_fleet(cfg: ExperimentConfig, dataset: Dataset, model: LossModel) -> FleetTopology:
    topo = cfg.effective["topology"]
    sizes = topo["subnet_sizes"] or \
        [topo["num_devices"] // topo["num_subnets"]] * topo["num_subnets"]
    rng = stream(topo["partition_seed"], TAG_DATA, 1)
    if model.kind == SVM:
        parts = partition_label_skew(dataset, topo["num_devices"],
                                     topo["labels_per_device"], rng)
    else:
        idx = rng.permutation(dataset.n)
        parts = [dataset.subset(chunk) for chunk in np.array_split(idx, topo["num_devices"])]
    return build_topology(parts, sizes)


def build_schedule(cfg: ExperimentConfig, num_subnets: int) -> TrainingSchedule:
    s = cfg.effective["schedule"]
    return TrainingSchedule.uniform(
        num_intervals=s["num_intervals"], tau=s["tau"], alpha=float(s["alpha"]),
        eta=float(s["eta"]), delay=s["delay"], up_delay=s["up_delay"],
        local_agg_period=s["local_agg_period"], num_subnets=num_subnets,
    )


def build_control(cfg: ExperimentConfig) -> ControlConfig:
    c = dict(cfg.effective["control"])
    return ControlConfig(
        energy_weight=float(c["energy_weight"]), delay_weight=float(c["delay_weight"]),
        bound_weight=float(c["bound_weight"]), phi=float(c["phi"]),
        tau_max=int(c["tau_max"]), tau_min=int(c["tau_min"]),
        alpha_step=float(c["alpha_step"]), horizon=int(c["horizon"]),
        safety=float(c["safety"]),
        gamma_safety=None if c["gamma_safety"] is None else float(c["gamma_safety"]),
        zeta_fraction=float(c["zeta_fraction"]),
        zeta_c_fraction=float(c["zeta_c_fraction"]), initial_tau=int(c["initial_tau"]),
        probe_count=int(c["probe_count"]), probe_scale=float(c["probe_scale"]),
    )


def build_cost_model(cfg: ExperimentConfig, model: LossModel,
                     topology: FleetTopology) -> RadioCostModel | None:
    r = cfg.effective["radio"]
    if r is None:
        return None
    r = dict(r)
    placement_seed = r.pop("placement_seed")
    radio = RadioConfig(**r)
    return RadioCostModel(radio, model.model_dim, topology.num_devices,
                          topology.subnets, placement_seed)
