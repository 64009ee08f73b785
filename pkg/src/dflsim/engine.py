"""Discrete-time protocol engine: local SGD, aperiodic intra-subnet
aggregation, delayed global aggregation and combiner-based synchronization.

Clock discipline per interval k of length tau with round-trip delay D:
slots t_k+1 .. t_{k+1} each run one SGD step per device; the global
snapshot is captured from tentative models at t_{k+1} - D (devices keep
training during the delay); the cloud aggregate is formed at
t_{k+1} - D_down and applied at t_{k+1} through the convex combiner
(1-alpha)*stale global + alpha*fresh local. FedAvg and hierarchical
FedAvg are parameterizations of the same loop.

All randomness is drawn from streams keyed by (seed, tag, device, slot),
so two runs with equal seeds produce bit-identical logs and the sampling
stream of a device does not depend on the topology around it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .analysis import NoiseFreeState, error_terms, noise_free_step, noise_free_sync, weighted_mean
from .errors import InfeasibleError, ScheduleError, SnapshotError, WeightSumError
from .fleet import FleetTopology, flatten_topology
from .losses import LossModel, stochastic_gradient
from .netcost import TAG_SGD, RadioCostModel, stream

METRIC_COLUMNS = ("t", "k", "loss", "gap", "e1", "e2", "e3", "cum_energy", "cum_delay")


@dataclass(frozen=True)
class IntervalPlan:
    """Control parameters of one local training interval."""

    tau: int
    alpha: float
    eta: float
    delay: int = 0
    up_delay: int | None = None
    down_delay: int | None = None
    local_agg_offsets: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        if self.tau < 1:
            raise ScheduleError(f"tau must be >= 1, got {self.tau}")
        if not 0 <= self.delay <= self.tau - 1:
            raise ScheduleError(f"need 0 <= delay <= tau-1, got delay={self.delay}, tau={self.tau}")
        up = self.delay if self.up_delay is None else self.up_delay
        down = self.delay - up if self.down_delay is None else self.down_delay
        if up < 0 or down < 0 or up + down != self.delay:
            raise ScheduleError(
                f"delay split {up}+{down} != {self.delay}"
            )
        object.__setattr__(self, "up_delay", up)
        object.__setattr__(self, "down_delay", down)
        if not 0.0 <= self.alpha <= 1.0:
            raise ScheduleError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.eta <= 0:
            raise ScheduleError(f"eta must be positive, got {self.eta}")
        for c, offsets in enumerate(self.local_agg_offsets):
            for off in offsets:
                if not 1 <= off <= self.tau:
                    raise ScheduleError(
                        f"subnet {c}: aggregation offset {off} outside [1, {self.tau}]"
                    )

    def offsets_for(self, subnet: int) -> frozenset:
        if subnet < len(self.local_agg_offsets):
            return frozenset(self.local_agg_offsets[subnet])
        return frozenset()


def periodic_offsets(tau: int, period: int | None, num_subnets: int):
    """Every-``period`` aggregation offsets, identical across subnets."""
    if period is None or period < 1:
        return tuple(() for _ in range(num_subnets))
    offs = tuple(range(period, tau + 1, period))
    return tuple(offs for _ in range(num_subnets))


@dataclass(frozen=True)
class TrainingSchedule:
    intervals: tuple[IntervalPlan, ...]

    def __post_init__(self):
        if not self.intervals:
            raise ScheduleError("schedule needs at least one interval")

    @property
    def total_steps(self) -> int:
        return sum(p.tau for p in self.intervals)

    @property
    def sync_times(self) -> np.ndarray:
        return np.cumsum([p.tau for p in self.intervals])

    @staticmethod
    def uniform(num_intervals: int, tau: int, alpha: float, eta: float,
                delay: int = 0, up_delay: int | None = None,
                local_agg_period: int | None = None,
                num_subnets: int = 1) -> "TrainingSchedule":
        plan = IntervalPlan(
            tau=tau, alpha=alpha, eta=eta, delay=delay, up_delay=up_delay,
            local_agg_offsets=periodic_offsets(tau, local_agg_period, num_subnets),
        )
        return TrainingSchedule(tuple(plan for _ in range(num_intervals)))


@dataclass(frozen=True)
class CostEvent:
    t: int
    kind: str           # "local" or "global"
    subnet: int         # -1 for global events
    energy_j: float
    delay_s: float


@dataclass
class IntervalOutcome:
    """What the cloud sees at one global aggregation."""

    k: int
    capture_t: int
    snapshot: np.ndarray
    stale_models: np.ndarray
    stale_gradients: np.ndarray
    theta_counts: np.ndarray


@dataclass
class RunResult:
    metrics: dict
    events: list
    sync_times: np.ndarray
    final_models: np.ndarray
    final_global: np.ndarray
    w_star: np.ndarray | None
    decisions: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return self.metrics[name]

    def at_sync(self, name: str) -> np.ndarray:
        """Metric values at the synchronization instants t_1..t_K."""
        t = self.metrics["t"]
        idx = np.searchsorted(t, self.sync_times)
        present = (idx < t.size) & (t[np.minimum(idx, t.size - 1)] == self.sync_times)
        if not present.all():
            raise ValueError("sync instants missing from the metric log; "
                             "run with metrics_every=1")
        return self.metrics[name][idx]


ThetaPolicy = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


class Protocol:
    """Mutable protocol state advanced one interval at a time."""

    def __init__(self, topology: FleetTopology, model: LossModel, seed: int,
                 batch_size: int, w_init: np.ndarray | None = None,
                 cost_model: RadioCostModel | None = None,
                 w_star="auto",
                 allow_alpha_one: bool = False,
                 track_noise_free: bool = True,
                 metrics_every: int = 1):
        self.topology = topology
        self.model = model
        self.seed = int(seed)
        self.batch_size = int(batch_size)
        self.cost_model = cost_model
        self.allow_alpha_one = allow_alpha_one
        self.track_noise_free = track_noise_free
        self.metrics_every = max(1, int(metrics_every))

        dim = model.model_dim
        if w_init is None:
            w_init = np.zeros(dim)
        w_init = np.asarray(w_init, dtype=np.float64)
        # w_star: "auto" solves the global optimum; None skips optimality
        # metrics entirely (gap and companion errors become NaN)
        if isinstance(w_star, str) and w_star == "auto":
            w_star = topology.optimum(model)
        if w_star is None:
            self.track_noise_free = False
            track_noise_free = False
        self.w_star = None if w_star is None else np.asarray(w_star, dtype=np.float64)

        self.w = np.tile(w_init, (topology.num_devices, 1))
        self.noise_free = NoiseFreeState(np.tile(w_init, (topology.num_subnets, 1)))
        self.t = 0
        self.k = 0
        self.cum_energy = 0.0
        self.cum_delay = 0.0
        self.events: list[CostEvent] = []
        self._rows: dict[str, list] = {name: [] for name in METRIC_COLUMNS}
        self._pending_snapshot: np.ndarray | None = None
        self._log_row()

    # -- state helpers ------------------------------------------------

    def subnet_aggregate(self, values: np.ndarray, c: int) -> np.ndarray:
        members = list(self.topology.subnets[c])
        rho = self.topology.device_weights[members]
        if abs(rho.sum() - 1.0) > 1e-9:
            raise WeightSumError(f"subnet {c} weights sum to {rho.sum()}")
        return weighted_mean(values[members], rho)

    def global_average(self, values: np.ndarray) -> np.ndarray:
        aggs = np.stack([self.subnet_aggregate(values, c)
                         for c in range(self.topology.num_subnets)])
        return weighted_mean(aggs, self.topology.subnet_weights)

    def _charge(self, t: int, kind: str, subnet: int, energy: float, delay: float):
        self.events.append(CostEvent(t, kind, subnet, energy, delay))
        self.cum_energy += energy
        self.cum_delay += delay

    def _log_row(self):
        w_bar = self.global_average(self.w)
        if self.w_star is None:
            gap = float("nan")
        else:
            diff = w_bar - self.w_star
            gap = float(diff @ diff)
        row = {
            "t": self.t, "k": self.k,
            "loss": self.topology.global_loss(self.model, w_bar),
            "gap": gap,
            "cum_energy": self.cum_energy, "cum_delay": self.cum_delay,
        }
        if self.track_noise_free:
            e1, e2, e3 = error_terms(self.w, self.topology, self.noise_free, self.w_star)
        else:
            e1 = e2 = e3 = float("nan")
        row.update(e1=e1, e2=e2, e3=e3)
        for name in METRIC_COLUMNS:
            self._rows[name].append(row[name])

    # -- the protocol -------------------------------------------------

    def run_interval(self, plan: IntervalPlan,
                     theta_policy: ThetaPolicy | None = None) -> IntervalOutcome:
        if plan.alpha >= 1.0 and not self.allow_alpha_one:
            raise InfeasibleError(
                "alpha = 1 never synchronizes with the global model; "
                "enable allow_alpha_one for ablation runs"
            )
        topo = self.topology
        n_sub = topo.num_subnets
        t0 = self.t
        t_end = t0 + plan.tau
        capture_t = t_end - plan.delay
        snapshot = v_snapshot = None
        stale_models = stale_grads = None
        theta_counts = np.zeros(n_sub, dtype=np.int64)

        for step in range(1, plan.tau + 1):
            t = t0 + step
            grads = np.empty_like(self.w)
            for i in range(topo.num_devices):
                rng = stream(self.seed, TAG_SGD, i, t - 1)
                grads[i] = stochastic_gradient(
                    self.model, topo.datasets[i], self.w[i], self.batch_size, rng)
            tentative = self.w - plan.eta * grads
            aggregates = np.stack([self.subnet_aggregate(tentative, c)
                                   for c in range(n_sub)])
            if theta_policy is not None:
                theta = np.asarray(theta_policy(t, tentative, aggregates), dtype=bool)
            else:
                theta = np.array([step in plan.offsets_for(c) for c in range(n_sub)])

            if t == capture_t:
                if snapshot is not None or self._pending_snapshot is not None:
                    raise SnapshotError(f"duplicate snapshot capture at t={t}")
                snapshot = weighted_mean(aggregates, topo.subnet_weights)
                self._pending_snapshot = snapshot
                stale_models = self.w.copy()       # models the estimates pair with
                stale_grads = grads.copy()
                # uplink: one device-to-edge aggregation per subnet at capture
                if self.cost_model is not None:
                    for c in range(n_sub):
                        energy, delay_s = self.cost_model.local_event(t, c)
                        self._charge(t, "local", c, energy, delay_s)

            if t == t_end - plan.down_delay and self.cost_model is not None:
                # the cloud builds and broadcasts the global model here, one
                # downlink delay before synchronization
                energy, delay_s = self.cost_model.global_event(t)
                self._charge(t, "global", -1, energy, delay_s)

            v_tent = noise_free_step(self.noise_free, topo, self.model, plan.eta) \
                if self.track_noise_free else self.noise_free
            if t == capture_t and self.track_noise_free:
                v_snapshot = v_tent.global_model(topo)

            if t == t_end:
                if snapshot is None:
                    raise SnapshotError("synchronization without a captured snapshot")
                for c in range(n_sub):
                    members = list(topo.subnets[c])
                    local_part = aggregates[c] if theta[c] else tentative[members]
                    self.w[members] = (1.0 - plan.alpha) * snapshot + plan.alpha * local_part
                    if theta[c]:
                        theta_counts[c] += 1
                        if self.cost_model is not None and t != capture_t:
                            energy, delay_s = self.cost_model.local_event(t, c)
                            self._charge(t, "local", c, energy, delay_s)
                if self.track_noise_free:
                    self.noise_free = noise_free_sync(v_tent, plan.alpha, v_snapshot)
                self._pending_snapshot = None
            else:
                for c in range(n_sub):
                    members = list(topo.subnets[c])
                    if theta[c]:
                        self.w[members] = aggregates[c]
                        theta_counts[c] += 1
                        if self.cost_model is not None and t != capture_t:
                            energy, delay_s = self.cost_model.local_event(t, c)
                            self._charge(t, "local", c, energy, delay_s)
                    else:
                        self.w[members] = tentative[members]
                if self.track_noise_free:
                    self.noise_free = v_tent

            self.t = t
            if t == t_end or t == capture_t or t % self.metrics_every == 0:
                self._log_row()

        self.k += 1
        return IntervalOutcome(
            k=self.k - 1, capture_t=capture_t, snapshot=snapshot,
            stale_models=stale_models, stale_gradients=stale_grads,
            theta_counts=theta_counts,
        )

    def result(self, sync_times=None, decisions=None) -> RunResult:
        metrics = {name: np.asarray(vals) for name, vals in self._rows.items()}
        return RunResult(
            metrics=metrics,
            events=list(self.events),
            sync_times=np.asarray(sync_times if sync_times is not None else []),
            final_models=self.w.copy(),
            final_global=self.global_average(self.w),
            w_star=self.w_star,
            decisions=list(decisions) if decisions else [],
        )


def run_training(topology: FleetTopology, model: LossModel,
                 schedule: TrainingSchedule, seed: int, batch_size: int,
                 **kwargs) -> RunResult:
    """Execute a fixed schedule end to end."""
    proto = Protocol(topology, model, seed, batch_size, **kwargs)
    for plan in schedule.intervals:
        proto.run_interval(plan)
    return proto.result(sync_times=schedule.sync_times)


def run_baseline(kind: str, topology: FleetTopology, model: LossModel, *,
                 num_intervals: int, tau: int, eta: float, delay: int = 0,
                 up_delay: int | None = None, local_agg_period: int | None = None,
                 seed: int, batch_size: int, **kwargs) -> RunResult:
    """FedAvg / hierarchical-FedAvg wrappers around the same engine.

    ``fedavg`` flattens the hierarchy into one logical subnet and never
    aggregates locally; ``hier-fedavg`` keeps the hierarchy and local
    aggregations but pins the combiner weight to zero.
    """
    if kind == "fedavg":
        topo = flatten_topology(topology)
        period = None
    elif kind == "hier-fedavg":
        topo = topology
        period = local_agg_period
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    schedule = TrainingSchedule.uniform(
        num_intervals, tau, alpha=0.0, eta=eta, delay=delay, up_delay=up_delay,
        local_agg_period=period, num_subnets=topo.num_subnets,
    )
    return run_training(topo, model, schedule, seed, batch_size, **kwargs)
