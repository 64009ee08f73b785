"""Wireless/wired communication cost model.

Device-to-edge links use Shannon rates over Rayleigh-faded pathloss
channels, redrawn per transmission event from a seeded stream keyed by
(event time, device id). Edge-to-cloud links are wired with a fixed rate
and latency. Energy is additive across transmitters; delay composes as a
max over parallel device uplinks within a subnet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CostModelError

# stream tags keep channel, placement and SGD draws on disjoint substreams
TAG_SGD = 1
TAG_CHANNEL = 2
TAG_PLACEMENT = 3
TAG_PROBE = 4


def stream(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for one (seed, tag, ...) event key."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


@dataclass(frozen=True)
class RadioConfig:
    device_tx_power_w: float = 0.25
    edge_tx_power_w: float = 6.3
    bandwidth_hz: float = 1e6
    noise_density_dbm_hz: float = -173.0
    pathloss_ref_db: float = -30.0
    ref_distance_m: float = 1.0
    pathloss_exponent: float = 3.75
    bits_per_parameter: int = 32
    edge_cloud_rate_bps: float = 100e6
    edge_cloud_latency_s: float = 0.050
    processing_rate_hz: float = 200.0
    field_size_m: float = 30.0

    def __post_init__(self):
        for name in ("device_tx_power_w", "edge_tx_power_w", "bandwidth_hz",
                     "ref_distance_m", "pathloss_exponent", "edge_cloud_rate_bps",
                     "processing_rate_hz", "field_size_m"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.bits_per_parameter < 1 or self.bits_per_parameter != int(self.bits_per_parameter):
            raise ValueError("bits_per_parameter must be a positive integer")
        if self.edge_cloud_latency_s < 0:
            raise ValueError("edge_cloud_latency_s must be nonnegative")

    @property
    def noise_power_w(self) -> float:
        return dbm_per_hz_to_w_per_hz(self.noise_density_dbm_hz) * self.bandwidth_hz


def dbm_per_hz_to_w_per_hz(density_dbm_hz: float) -> float:
    return 10.0 ** ((density_dbm_hz - 30.0) / 10.0)


@dataclass(frozen=True)
class ChannelRealization:
    coefficient: complex
    distance_m: float

    @property
    def gain(self) -> float:
        return abs(self.coefficient) ** 2


def pathloss_gain(radio: RadioConfig, distance_m: float) -> float:
    """Linear large-scale gain: ref gain minus 10*exponent*log10(d/d0) in dB."""
    loss_db = radio.pathloss_ref_db - 10.0 * radio.pathloss_exponent \
        * math.log10(distance_m / radio.ref_distance_m)
    return 10.0 ** (loss_db / 10.0)


def draw_channel(radio: RadioConfig, distance_m: float,
                 rng: np.random.Generator) -> ChannelRealization:
    """Rayleigh-faded channel: sqrt(pathloss) times a unit complex normal."""
    u = complex(rng.normal(0.0, math.sqrt(0.5)), rng.normal(0.0, math.sqrt(0.5)))
    return ChannelRealization(math.sqrt(pathloss_gain(radio, distance_m)) * u, distance_m)


def shannon_rate(radio: RadioConfig, channel_gain: float, tx_power_w: float) -> float:
    """Achievable bit/s for one device uplink."""
    snr = tx_power_w * channel_gain / radio.noise_power_w
    return radio.bandwidth_hz * math.log2(1.0 + snr)


def aggregation_energy(radio: RadioConfig, model_bits: int, rates: np.ndarray,
                       tx_powers: np.ndarray) -> float:
    """Joules for one aggregation: sum of bits * power / rate over transmitters."""
    rates = np.asarray(rates, dtype=np.float64)
    if (rates <= 0).any():
        raise CostModelError("aggregation energy needs positive rates")
    return float(np.sum(model_bits * np.asarray(tx_powers, dtype=np.float64) / rates))


def aggregation_delay(radio: RadioConfig, model_bits: int, rates: np.ndarray) -> float:
    """Seconds for one parallel multi-access aggregation: slowest uplink wins."""
    rates = np.asarray(rates, dtype=np.float64)
    if (rates <= 0).any():
        raise CostModelError("aggregation delay needs positive rates")
    return float(np.max(model_bits / rates))


def global_aggregation_cost(radio: RadioConfig, model_bits: int,
                            num_subnets: int) -> tuple[float, float]:
    """(energy, delay) of the wired edge-to-cloud hop for one global round."""
    energy = num_subnets * model_bits * radio.edge_tx_power_w / radio.edge_cloud_rate_bps
    delay = model_bits / radio.edge_cloud_rate_bps + radio.edge_cloud_latency_s
    return energy, delay


def wall_clock_to_iterations(delay_s: float, processing_rate_hz: float) -> int:
    """Smallest whole number of SGD slots covering a wall-clock delay."""
    if delay_s < 0 or processing_rate_hz <= 0:
        raise CostModelError("need delay >= 0 and positive processing rate")
    return int(math.ceil(delay_s * processing_rate_hz))


def place_devices(radio: RadioConfig, num_devices: int, seed: int) -> np.ndarray:
    """Uniform positions in the square field, distances to the centered base station."""
    rng = stream(seed, TAG_PLACEMENT)
    half = radio.field_size_m / 2.0
    xy = rng.uniform(-half, half, size=(num_devices, 2))
    return np.hypot(xy[:, 0], xy[:, 1])


class RadioCostModel:
    """Per-event cost source for a fleet with fixed device placements."""

    def __init__(self, radio: RadioConfig, model_dim: int, num_devices: int,
                 subnets, seed: int, distances: np.ndarray | None = None):
        self.radio = radio
        self.model_bits = int(model_dim) * int(radio.bits_per_parameter)
        self.subnets = [tuple(members) for members in subnets]
        self.seed = int(seed)
        if distances is None:
            distances = place_devices(radio, num_devices, seed)
        self.distances = np.asarray(distances, dtype=np.float64)

    def device_rates(self, t: int, members) -> np.ndarray:
        rates = np.empty(len(members))
        for pos, dev in enumerate(members):
            rng = stream(self.seed, TAG_CHANNEL, t, dev)
            chan = draw_channel(self.radio, float(self.distances[dev]), rng)
            rates[pos] = shannon_rate(self.radio, chan.gain, self.radio.device_tx_power_w)
        return rates

    def local_event(self, t: int, subnet: int) -> tuple[float, float]:
        members = self.subnets[subnet]
        rates = self.device_rates(t, members)
        powers = np.full(len(members), self.radio.device_tx_power_w)
        return (aggregation_energy(self.radio, self.model_bits, rates, powers),
                aggregation_delay(self.radio, self.model_bits, rates))

    def global_event(self, t: int) -> tuple[float, float]:
        return global_aggregation_cost(self.radio, self.model_bits, len(self.subnets))

    def snapshot(self, t: int):
        """Frozen per-subnet costs at time t (controller inputs)."""
        local = [self.local_event(t, c) for c in range(len(self.subnets))]
        glob = self.global_event(t)
        return CostSnapshot(
            global_energy=glob[0], global_delay=glob[1],
            local_energy=np.array([e for e, _ in local]),
            local_delay=np.array([d for _, d in local]),
        )


@dataclass(frozen=True)
class CostSnapshot:
    """Per-event costs frozen at a decision instant."""

    global_energy: float
    global_delay: float
    local_energy: np.ndarray
    local_delay: np.ndarray
