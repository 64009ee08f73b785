"""Hierarchical fleet: topology, non-i.i.d. partitioning, heterogeneity.

A fleet is a two-tier hierarchy: devices grouped into disjoint subnets,
one edge aggregator per subnet, one cloud aggregator on top. Device
weights within a subnet and subnet weights within the fleet are
proportional to data volume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import (
    EstimationError,
    PartitionError,
    TopologyError,
)
from .losses import LossModel, full_gradient, stochastic_gradient

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class FleetTopology:
    """Subnet membership, per-device datasets and aggregation weights.

    device_weights[i] is the weight of device i inside its own subnet
    (rho), subnet_weights[c] the weight of subnet c in the fleet
    (varrho); both families sum to one.
    """

    subnets: tuple[tuple[int, ...], ...]
    datasets: tuple[Dataset, ...]
    device_weights: np.ndarray
    subnet_weights: np.ndarray
    subnet_of: np.ndarray = field(init=False)

    def __post_init__(self):
        seen = set()
        for members in self.subnets:
            if seen & set(members):
                raise TopologyError("subnets must be disjoint")
            seen |= set(members)
        if seen != set(range(len(self.datasets))):
            raise TopologyError("subnets must cover exactly the device ids")
        subnet_of = np.empty(len(self.datasets), dtype=np.int64)
        for c, members in enumerate(self.subnets):
            for i in members:
                subnet_of[i] = c
            s = self.device_weights[list(members)].sum()
            if abs(s - 1.0) > 1e-9:
                raise TopologyError(f"device weights of subnet {c} sum to {s}")
        if abs(self.subnet_weights.sum() - 1.0) > 1e-9:
            raise TopologyError("subnet weights must sum to 1")
        object.__setattr__(self, "subnet_of", subnet_of)

    @property
    def num_devices(self) -> int:
        return len(self.datasets)

    @property
    def num_subnets(self) -> int:
        return len(self.subnets)

    def global_weight(self, device: int) -> float:
        """varrho_c * rho_{i,c}: weight of the device in the global objective."""
        return float(self.subnet_weights[self.subnet_of[device]]
                     * self.device_weights[device])

    def global_weights(self) -> np.ndarray:
        return np.array([self.global_weight(i) for i in range(self.num_devices)])

    def global_dataset(self) -> Dataset:
        return Dataset.concat(self.datasets)

    def device_gradient(self, model: LossModel, device: int, w: np.ndarray) -> np.ndarray:
        return full_gradient(model, self.datasets[device], w)

    def subnet_gradient(self, model: LossModel, c: int, w: np.ndarray) -> np.ndarray:
        out = np.zeros(model.model_dim)
        for i in self.subnets[c]:
            out += self.device_weights[i] * full_gradient(model, self.datasets[i], w)
        return out

    def global_gradient(self, model: LossModel, w: np.ndarray) -> np.ndarray:
        out = np.zeros(model.model_dim)
        for c in range(self.num_subnets):
            out += self.subnet_weights[c] * self.subnet_gradient(model, c, w)
        return out

    def global_loss(self, model: LossModel, w: np.ndarray) -> float:
        from .losses import loss  # local import to keep module load light

        total = 0.0
        for c in range(self.num_subnets):
            for i in self.subnets[c]:
                total += self.subnet_weights[c] * self.device_weights[i] \
                    * loss(model, self.datasets[i], w)
        return total

    def optimum(self, model: LossModel) -> np.ndarray:
        from .losses import solve_optimum

        return solve_optimum(model, list(self.datasets), self.global_weights())


@dataclass(frozen=True)
class HeterogeneityParams:
    """Loss-landscape and data-heterogeneity constants.

    mu/beta are the strong-convexity and smoothness constants; the
    (inter_delta, inter_zeta) pair bounds subnet-vs-global gradient
    mismatch by delta + zeta*||w - w*||, and (intra_delta, intra_zeta)
    does the same per device inside each subnet. omega = zeta/(2 beta)
    must not exceed one.
    """

    mu: float
    beta: float
    inter_delta: float
    inter_zeta: float
    intra_delta: np.ndarray
    intra_zeta: np.ndarray
    sgd_noise: float
    subnet_noise_budget: float

    def __post_init__(self):
        object.__setattr__(self, "intra_delta",
                           np.atleast_1d(np.asarray(self.intra_delta, dtype=np.float64)))
        object.__setattr__(self, "intra_zeta",
                           np.atleast_1d(np.asarray(self.intra_zeta, dtype=np.float64)))
        if not 0 < self.mu < self.beta:
            raise ValueError(f"need 0 < mu < beta, got mu={self.mu}, beta={self.beta}")
        for name in ("inter_delta", "inter_zeta", "sgd_noise", "subnet_noise_budget"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if (self.intra_delta < 0).any() or (self.intra_zeta < 0).any():
            raise ValueError("intra-subnet constants must be nonnegative")
        if self.omega > 1.0 + 1e-12:
            raise ValueError(f"omega = zeta/(2 beta) = {self.omega} exceeds 1")
        if (self.omega_c > 1.0 + 1e-12).any():
            raise ValueError("omega_c = zeta_c/(2 beta) exceeds 1")

    @property
    def omega(self) -> float:
        return self.inter_zeta / (2.0 * self.beta)

    @property
    def omega_c(self) -> np.ndarray:
        return self.intra_zeta / (2.0 * self.beta)


# ---------------------------------------------------------------------------
# partitioning and assembly


def partition_label_skew(dataset: Dataset, num_devices: int, labels_per_device: int,
                         rng: np.random.Generator) -> list[Dataset]:
    """Split a labeled dataset so each device sees exactly k distinct labels.

    Devices are assigned label subsets cyclically over a permuted label
    alphabet, then each label's (shuffled) points are dealt out to the
    devices holding that label. Every point lands on exactly one device.
    """
    labels = np.unique(dataset.labels)
    if labels_per_device < 1 or labels_per_device > labels.size:
        raise PartitionError(
            f"labels_per_device {labels_per_device} outside [1, {labels.size}]"
        )
    alphabet = labels[rng.permutation(labels.size)]
    device_order = rng.permutation(num_devices)

    holders: dict[float, list[int]] = {lab: [] for lab in labels}
    for slot, dev in enumerate(device_order):
        for j in range(labels_per_device):
            lab = alphabet[(slot * labels_per_device + j) % labels.size]
            holders[lab].append(int(dev))

    per_device_idx: list[list[int]] = [[] for _ in range(num_devices)]
    for lab in labels:
        devs = holders[lab]
        if not devs:
            raise PartitionError(
                f"label {lab} has no holder; need num_devices*labels_per_device >= num_labels"
            )
        idx = np.flatnonzero(dataset.labels == lab)
        idx = idx[rng.permutation(idx.size)]
        if idx.size < len(devs):
            raise PartitionError(
                f"label {lab}: {idx.size} points for {len(devs)} holders"
            )
        chunks = np.array_split(idx, len(devs))
        for dev, chunk in zip(devs, chunks):
            per_device_idx[dev].extend(int(i) for i in chunk)

    out = []
    for dev in range(num_devices):
        idx = np.array(sorted(per_device_idx[dev]), dtype=np.int64)
        if np.unique(dataset.labels[idx]).size != min(labels_per_device, labels.size):
            raise PartitionError(f"device {dev} ended with wrong label support")
        out.append(dataset.subset(idx))
    return out


def build_topology(assignments: Sequence[Dataset], subnet_sizes: Sequence[int]) -> FleetTopology:
    """Group consecutively-numbered devices into subnets and compute weights."""
    if sum(subnet_sizes) != len(assignments):
        raise TopologyError(
            f"subnet sizes sum to {sum(subnet_sizes)}, have {len(assignments)} devices"
        )
    if any(s <= 0 for s in subnet_sizes):
        raise TopologyError("subnet sizes must be positive")
    sizes = np.array([ds.n for ds in assignments], dtype=np.float64)
    subnets, offset = [], 0
    device_weights = np.zeros(len(assignments))
    subnet_weights = np.zeros(len(subnet_sizes))
    for c, s in enumerate(subnet_sizes):
        members = tuple(range(offset, offset + s))
        subnet_total = sizes[list(members)].sum()
        device_weights[list(members)] = sizes[list(members)] / subnet_total
        subnet_weights[c] = subnet_total / sizes.sum()
        subnets.append(members)
        offset += s
    return FleetTopology(tuple(subnets), tuple(assignments), device_weights, subnet_weights)


# ---------------------------------------------------------------------------
# heterogeneity measurement


def measure_diversity(topology: FleetTopology, model: LossModel,
                      probe_points: Sequence[np.ndarray], zeta: float,
                      zeta_c: float, w_star: np.ndarray,
                      distances: Sequence[float] | None = None):
    """Smallest (delta, delta_c) satisfying the diversity bounds on the probes.

    delta = max over probes w and subnets c of
    [ ||grad Fbar_c(w) - grad F(w)|| - zeta*||w - w*|| ]_+, and delta_c
    analogously per device inside subnet c. ``distances`` overrides the
    exact ||w - w*|| factors (used by the online estimator, which only
    has the gradient-norm surrogate).
    """
    if len(probe_points) == 0:
        raise EstimationError("measure_diversity needs at least one probe point")
    if distances is None:
        distances = [float(np.linalg.norm(np.asarray(w) - w_star)) for w in probe_points]
    delta = 0.0
    delta_c = np.zeros(topology.num_subnets)
    for w, dist in zip(probe_points, distances):
        g_global = topology.global_gradient(model, w)
        for c in range(topology.num_subnets):
            g_sub = topology.subnet_gradient(model, c, w)
            gap = np.linalg.norm(g_sub - g_global) - zeta * dist
            delta = max(delta, gap)
            for i in topology.subnets[c]:
                g_dev = topology.device_gradient(model, i, w)
                gap_c = np.linalg.norm(g_dev - g_sub) - zeta_c * dist
                delta_c[c] = max(delta_c[c], gap_c)
    return max(delta, 0.0), np.maximum(delta_c, 0.0)


def measure_smoothness_convexity(topology: FleetTopology, model: LossModel,
                                 probe_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                                 min_separation: float = 1e-12):
    """Secant estimates (mu_hat, beta_hat) of the global loss landscape.

    beta_hat is the largest, mu_hat the smallest gradient-difference /
    point-difference ratio over the pairs; coincident pairs are skipped.
    """
    ratios = []
    for w1, w2 in probe_pairs:
        sep = np.linalg.norm(np.asarray(w1) - np.asarray(w2))
        if sep <= min_separation:
            continue
        g1 = topology.global_gradient(model, np.asarray(w1, dtype=np.float64))
        g2 = topology.global_gradient(model, np.asarray(w2, dtype=np.float64))
        ratios.append(float(np.linalg.norm(g1 - g2) / sep))
    if not ratios:
        raise EstimationError("all probe pairs coincident; secant undefined")
    return min(ratios), max(ratios)


def measure_sgd_noise(topology: FleetTopology, model: LossModel,
                      probe_points: Sequence[np.ndarray], batch_size: int,
                      rng: np.random.Generator, repeats: int = 8) -> float:
    """Conservative sigma estimate: max ||ghat - grad F_i|| over sampled draws."""
    worst = 0.0
    for w in probe_points:
        for i in range(topology.num_devices):
            ds = topology.datasets[i]
            exact = full_gradient(model, ds, np.asarray(w, dtype=np.float64))
            b = min(batch_size, ds.n)
            for _ in range(repeats):
                ghat = stochastic_gradient(model, ds, np.asarray(w, dtype=np.float64), b, rng)
                worst = max(worst, float(np.linalg.norm(ghat - exact)))
    return worst


def flatten_topology(topology: FleetTopology) -> FleetTopology:
    """Collapse all subnets into one (device-to-cloud baseline layout)."""
    return build_topology(list(topology.datasets), [topology.num_devices])


def partition_manifest(topology: FleetTopology) -> dict:
    """JSON-ready audit record of the partition and weights."""
    devices = []
    for i in range(topology.num_devices):
        ds = topology.datasets[i]
        devices.append({
            "device": i,
            "subnet": int(topology.subnet_of[i]),
            "points": ds.n,
            "labels": sorted(set(float(v) for v in np.unique(ds.labels))),
            "weight_in_subnet": float(topology.device_weights[i]),
        })
    return {
        "num_subnets": topology.num_subnets,
        "subnet_sizes": [len(m) for m in topology.subnets],
        "subnet_weights": [float(w) for w in topology.subnet_weights],
        "devices": devices,
    }
