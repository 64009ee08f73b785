"""Adaptive parameter control: step-size selection, online estimation,
aggregation triggering, and the exhaustive-search interval/combiner solver.

The controller runs at each global aggregation: it re-estimates the loss
landscape and heterogeneity constants from the uploaded stale models,
derives feasible step-size parameters, forecasts the local-aggregation
load, and picks the next interval length and combiner weight by grid
search over a weighted energy + delay + gap-bound objective.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .analysis import (
    alpha_limit,
    compute_constants,
    eta_max_limit,
    gamma_limit,
    theorem_bound,
)
from .engine import IntervalPlan, Protocol, RunResult
from .errors import EstimationError, InfeasibleError
from .fleet import (
    FleetTopology,
    HeterogeneityParams,
    measure_diversity,
    measure_sgd_noise,
    measure_smoothness_convexity,
)
from .losses import LossModel
from .netcost import TAG_PROBE, CostSnapshot, RadioCostModel, stream


@dataclass(frozen=True)
class ControlConfig:
    """Weights and limits of the controller objective."""

    energy_weight: float = 0.0
    delay_weight: float = 0.0
    bound_weight: float = 1.0
    phi: float = 0.0
    tau_max: int = 30
    tau_min: int = 1
    alpha_step: float = 0.01
    horizon: int = 200
    safety: float = 0.9
    gamma_safety: float | None = None
    zeta_fraction: float = 0.1
    zeta_c_fraction: float = 0.1
    initial_tau: int = 10
    probe_count: int = 32
    probe_scale: float = 1.0

    def __post_init__(self):
        if min(self.energy_weight, self.delay_weight, self.bound_weight) < 0 \
                or max(self.energy_weight, self.delay_weight, self.bound_weight) <= 0:
            raise ValueError("cost weights must be nonnegative with one positive")
        if not 0.0 < self.alpha_step < 1.0:
            raise ValueError("alpha_step must lie in (0, 1)")
        if self.tau_max < 2:
            raise ValueError("tau_max must be >= 2")
        if not 1 <= self.tau_min <= self.tau_max:
            raise ValueError("need 1 <= tau_min <= tau_max")
        if not 0.0 < self.safety < 1.0:
            raise ValueError("safety factor must lie in (0, 1)")
        if self.gamma_safety is not None and not 0.0 < self.gamma_safety < 1.0:
            raise ValueError("gamma_safety must lie in (0, 1)")
        if not 0.0 < self.zeta_fraction < 1.0 or not 0.0 < self.zeta_c_fraction < 1.0:
            raise ValueError("zeta fractions must lie in (0, 1) so zeta << 2*beta")
        if self.phi < 0:
            raise ValueError("phi must be nonnegative")


@dataclass(frozen=True)
class ControlDecision:
    tau_next: int
    alpha_next: float
    alpha_cap: float
    eta_max: float
    gamma: float
    theta_plan: tuple
    agg_counts: tuple
    energy_term: float
    delay_term: float
    bound_term: float
    objective: float
    fallback: bool = False


def select_step_size(params: HeterogeneityParams, tau: int, delay: int,
                     safety: float = 0.9,
                     gamma_safety: float | None = None) -> tuple[float, float]:
    """Strictly feasible (eta_max, gamma): a fixed fraction of each limit.

    ``gamma_safety`` defaults to ``safety``; the two margins can be split
    because a mild step size combined with a near-limit decay rate is the
    regime where the gap bound rewards a nonzero combiner weight.
    """
    em = safety * eta_max_limit(params, tau, delay)
    if gamma_safety is None:
        gamma_safety = safety
    return em, gamma_safety * gamma_limit(params, tau, delay, em)


def aggregation_indicators(contributions: np.ndarray, phi: float) -> np.ndarray:
    """Greedy subnet selection until the residual deviation fits the budget.

    Marks subnets in decreasing contribution order (ties by index) until
    the sum over unmarked subnets is at most phi^2.
    """
    contributions = np.asarray(contributions, dtype=np.float64)
    if (contributions < 0).any():
        raise ValueError("contributions must be nonnegative")
    theta = np.zeros(contributions.size, dtype=bool)
    budget = phi * phi
    order = np.lexsort((np.arange(contributions.size), -contributions))
    for idx in order:
        if contributions[~theta].sum() <= budget:
            break
        theta[idx] = True
    return theta


def subnet_contributions(gap_estimates: np.ndarray, subnet_weights: np.ndarray,
                         params: HeterogeneityParams) -> np.ndarray:
    """Per-subnet deviation-budget terms: varrho_c*(2*delta_c^2 + 4*omega_c^2*beta^2*gap_c^2)."""
    gaps = np.asarray(gap_estimates, dtype=np.float64)
    return np.asarray(subnet_weights, dtype=np.float64) * (
        2.0 * params.intra_delta ** 2
        + 4.0 * params.omega_c ** 2 * params.beta ** 2 * gaps ** 2
    )


def trigger_local_aggregation(subnet_aggregates: np.ndarray, topology: FleetTopology,
                              model: LossModel, params: HeterogeneityParams,
                              mu_hat: float, phi: float) -> np.ndarray:
    """Per-slot aggregation indicators enforcing the deviation budget.

    Subnet optimality gaps are monitored through strong convexity:
    ||grad F(w)|| >= mu*||w - w*||, so gap_c is estimated as
    ||grad F(aggregate_c)|| / mu_hat.
    """
    if mu_hat <= 0:
        raise InfeasibleError("trigger needs a positive strong-convexity estimate")
    gaps = np.array([
        np.linalg.norm(topology.global_gradient(model, subnet_aggregates[c])) / mu_hat
        for c in range(topology.num_subnets)
    ])
    return aggregation_indicators(
        subnet_contributions(gaps, topology.subnet_weights, params), phi)


def estimate_parameters(models: np.ndarray, gradients: np.ndarray | None,
                        topology: FleetTopology, model: LossModel,
                        zeta_fraction: float, zeta_c_fraction: float,
                        phi: float, w_star: np.ndarray | None = None,
                        sigma_floor: float = 0.0) -> HeterogeneityParams:
    """Heterogeneity estimates from one round of uploaded (model, gradient) pairs.

    Secant ratios over consecutive uploads give (mu_hat, beta_hat);
    diversity is measured at the uploads with zeta_hat = fraction*2*beta_hat.
    When w_star is unknown the ||w - w*|| factors are replaced by the
    strong-convexity surrogate ||grad F(w)|| / mu_hat. sigma_hat is the
    largest observed gap between an uploaded stochastic gradient and the
    device's exact gradient.
    """
    models = np.asarray(models, dtype=np.float64)
    if models.ndim != 2 or models.shape[0] < 2:
        raise EstimationError("need at least two uploaded models")
    pairs = [(models[i], models[i + 1]) for i in range(models.shape[0] - 1)]
    mu_hat, beta_hat = measure_smoothness_convexity(topology, model, pairs)
    # the analysis needs mu < beta strictly; nudge degenerate (isotropic) cases
    beta_hat = max(beta_hat, mu_hat * (1.0 + 1e-9))
    zeta_hat = zeta_fraction * 2.0 * beta_hat
    zeta_c_hat = zeta_c_fraction * 2.0 * beta_hat

    probes = [models[i] for i in range(models.shape[0])]
    distances = None
    if w_star is None:
        distances = [
            float(np.linalg.norm(topology.global_gradient(model, w)) / mu_hat)
            for w in probes
        ]
        w_star = np.zeros(models.shape[1])
    delta_hat, delta_c_hat = measure_diversity(
        topology, model, probes, zeta_hat, zeta_c_hat, w_star, distances=distances)

    sigma_hat = sigma_floor
    if gradients is not None:
        gradients = np.asarray(gradients, dtype=np.float64)
        for i in range(topology.num_devices):
            exact = topology.device_gradient(model, i, models[i])
            sigma_hat = max(sigma_hat, float(np.linalg.norm(gradients[i] - exact)))

    return HeterogeneityParams(
        mu=mu_hat, beta=beta_hat,
        inter_delta=delta_hat, inter_zeta=zeta_hat,
        intra_delta=delta_c_hat,
        intra_zeta=np.full(topology.num_subnets, zeta_c_hat),
        sgd_noise=sigma_hat, subnet_noise_budget=phi,
    )


def bootstrap_estimates(topology: FleetTopology, model: LossModel,
                        w_init: np.ndarray, seed: int, config: ControlConfig,
                        batch_size: int) -> HeterogeneityParams:
    """Initial estimates from random probes around the starting model."""
    rng = stream(seed, TAG_PROBE)
    probes = w_init[None, :] + config.probe_scale \
        * rng.standard_normal((config.probe_count, w_init.size))
    params = estimate_parameters(probes, None, topology, model,
                                 config.zeta_fraction, config.zeta_c_fraction,
                                 config.phi)
    sigma = measure_sgd_noise(topology, model, [w_init], batch_size, rng, repeats=4)
    return replace(params, sgd_noise=max(params.sgd_noise, sigma))


def solve_p(cost: CostSnapshot, params: HeterogeneityParams,
            config: ControlConfig, subnet_weights: np.ndarray, t_now: int,
            delay: int, e3_init: float, gap_estimates: np.ndarray) -> ControlDecision:
    """Exhaustive grid minimizer of the energy/delay/bound objective.

    Scans integer interval lengths tau in [max(delay, tau_min), min(tau_max,
    T - t_now)] and combiner weights on the alpha_step grid below the
    per-tau feasibility ceiling; the gap bound is evaluated at the end of
    the remaining horizon (K = floor((T - t_now)/tau) decay steps). Ties
    break toward smaller tau, then smaller alpha. Raises InfeasibleError
    when no grid point is feasible.
    """
    horizon_left = config.horizon - t_now
    tau_hi = min(config.tau_max, horizon_left)
    tau_lo = max(delay, config.tau_min, 1)
    contributions = subnet_contributions(gap_estimates, subnet_weights, params)
    theta = aggregation_indicators(contributions, config.phi)

    best = None
    for tau in range(tau_lo, tau_hi + 1):
        try:
            eta_max, gamma = select_step_size(params, tau, delay, config.safety,
                                              config.gamma_safety)
            alpha_cap = min(alpha_limit(params, tau, delay, eta_max, gamma), 1.0)
        except InfeasibleError:
            continue
        agg_counts = theta.astype(np.int64) * tau    # constant-gap forecast
        rounds = horizon_left / tau
        energy = rounds * (cost.global_energy
                           + float(np.sum(agg_counts * cost.local_energy)))
        delay_cost = rounds * (cost.global_delay
                               + float(np.sum(agg_counts * cost.local_delay)))
        k_end = horizon_left // tau
        j = 0
        while True:
            alpha = j * config.alpha_step
            if alpha >= alpha_cap:
                break
            consts = compute_constants(params, tau, delay, alpha, eta_max,
                                       gamma, e3_init)
            nu = theorem_bound(consts, k_end)
            objective = config.energy_weight * energy \
                + config.delay_weight * delay_cost + config.bound_weight * nu
            if best is None or objective < best.objective:
                best = ControlDecision(
                    tau_next=tau, alpha_next=alpha, alpha_cap=alpha_cap,
                    eta_max=eta_max, gamma=gamma,
                    theta_plan=tuple(bool(x) for x in theta),
                    agg_counts=tuple(int(x) for x in agg_counts),
                    energy_term=energy, delay_term=delay_cost, bound_term=nu,
                    objective=objective,
                )
            j += 1
    if best is None:
        raise InfeasibleError(
            f"no feasible (tau, alpha) grid point for t={t_now}, delay={delay}"
        )
    return best


def fallback_decision(delay: int, horizon_left: int) -> ControlDecision:
    """Protocol-valid decision used when the solver finds no feasible point."""
    tau = min(max(delay + 1, 1), max(horizon_left, 1))
    return ControlDecision(
        tau_next=tau, alpha_next=0.0, alpha_cap=float("nan"),
        eta_max=float("nan"), gamma=float("nan"),
        theta_plan=(), agg_counts=(), energy_term=0.0, delay_term=0.0,
        bound_term=float("nan"), objective=float("nan"), fallback=True,
    )


def run_adaptive(topology: FleetTopology, model: LossModel,
                 config: ControlConfig, seed: int, batch_size: int,
                 delay: int, up_delay: int | None = None,
                 cost_model: RadioCostModel | None = None,
                 w_init: np.ndarray | None = None,
                 w_star="auto",
                 eta_fallback: float = 1e-3,
                 **engine_kwargs) -> RunResult:
    """Full adaptive run: estimate, re-plan and train interval by interval."""
    if w_init is None:
        w_init = np.zeros(model.model_dim)
    proto = Protocol(topology, model, seed, batch_size, w_init=w_init,
                     cost_model=cost_model, w_star=w_star, **engine_kwargs)
    params_hat = bootstrap_estimates(topology, model, w_init, seed, config, batch_size)
    params_hat = replace(params_hat, subnet_noise_budget=config.phi)

    decisions: list[ControlDecision] = []
    sync_times: list[int] = []
    tau_next, alpha_next = config.initial_tau, 0.0
    k = 0
    while proto.t < config.horizon:
        remaining = config.horizon - proto.t
        tau = min(tau_next, remaining)
        delay_eff = min(delay, tau - 1)
        up_eff = None if up_delay is None else min(up_delay, delay_eff)
        try:
            eta_max, gamma = select_step_size(params_hat, tau, delay_eff,
                                              config.safety, config.gamma_safety)
            eta_k = eta_max / (1.0 + gamma * k)
        except InfeasibleError:
            eta_k = eta_fallback
        plan = IntervalPlan(tau=tau, alpha=alpha_next, eta=eta_k,
                            delay=delay_eff, up_delay=up_eff)

        def theta_policy(t, tentative, aggregates):
            return trigger_local_aggregation(
                aggregates, topology, model, params_hat, params_hat.mu, config.phi)

        outcome = proto.run_interval(plan, theta_policy=theta_policy)
        sync_times.append(proto.t)
        k += 1

        try:
            params_hat = estimate_parameters(
                outcome.stale_models, outcome.stale_gradients, topology, model,
                config.zeta_fraction, config.zeta_c_fraction, config.phi)
        except EstimationError:
            pass  # keep previous estimates when uploads are degenerate

        grad_norm = float(np.linalg.norm(
            topology.global_gradient(model, outcome.snapshot)))
        e3_init = grad_norm / params_hat.mu
        gap_estimates = np.array([
            np.linalg.norm(topology.global_gradient(
                model, proto.subnet_aggregate(outcome.stale_models, c))) / params_hat.mu
            for c in range(topology.num_subnets)
        ])
        cost = cost_model.snapshot(outcome.capture_t) if cost_model is not None \
            else CostSnapshot(0.0, 0.0, np.zeros(topology.num_subnets),
                              np.zeros(topology.num_subnets))
        try:
            decision = solve_p(cost, params_hat, config, topology.subnet_weights,
                               proto.t, delay, e3_init, gap_estimates)
        except InfeasibleError:
            decision = fallback_decision(delay, config.horizon - proto.t)
        decisions.append(decision)
        tau_next, alpha_next = decision.tau_next, decision.alpha_next

    return proto.result(sync_times=np.asarray(sync_times), decisions=decisions)
