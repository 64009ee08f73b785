"""Protocol engine: arithmetic cases, clock discipline, oracle equivalence."""

import numpy as np
import pytest

from dflsim.analysis import one_step_bounds
from dflsim.data import Dataset
from dflsim.engine import (
    IntervalPlan,
    Protocol,
    TrainingSchedule,
    periodic_offsets,
    run_baseline,
    run_training,
)
from dflsim.errors import InfeasibleError, ScheduleError
from dflsim.fleet import build_topology
from dflsim.losses import RIDGE, LossModel, full_gradient, stochastic_gradient
from dflsim.netcost import TAG_SGD, stream
from dflsim.validate import diverse_problem


def small_fleet(rng, n_devices=4, subnets=(2, 2), points=12, dim=3, reg=0.3):
    parts = [Dataset(rng.standard_normal((points, dim)), rng.standard_normal(points))
             for _ in range(n_devices)]
    topo = build_topology(parts, list(subnets))
    return topo, LossModel(RIDGE, feature_dim=dim, regularization=reg)


# -- schedule validation ------------------------------------------------------


def test_plan_validation():
    with pytest.raises(ScheduleError):
        IntervalPlan(tau=0, alpha=0.0, eta=0.1)
    with pytest.raises(ScheduleError):
        IntervalPlan(tau=5, alpha=0.0, eta=0.1, delay=5)
    with pytest.raises(ScheduleError):
        IntervalPlan(tau=5, alpha=1.2, eta=0.1)
    with pytest.raises(ScheduleError):
        IntervalPlan(tau=5, alpha=0.0, eta=0.1, delay=2, up_delay=3)
    with pytest.raises(ScheduleError):
        IntervalPlan(tau=5, alpha=0.0, eta=0.1, local_agg_offsets=((6,),))
    plan = IntervalPlan(tau=5, alpha=0.2, eta=0.1, delay=3, up_delay=2)
    assert plan.down_delay == 1


def test_periodic_offsets():
    assert periodic_offsets(20, 5, 2) == ((5, 10, 15, 20), (5, 10, 15, 20))
    assert periodic_offsets(7, None, 1) == ((),)


def test_alpha_one_needs_ablation_flag(rng):
    topo, model = small_fleet(rng)
    sched = TrainingSchedule.uniform(1, 4, alpha=1.0, eta=0.05, delay=1,
                                     num_subnets=2)
    with pytest.raises(InfeasibleError):
        run_training(topo, model, sched, seed=0, batch_size=4)
    run_training(topo, model, sched, seed=0, batch_size=4, allow_alpha_one=True)


# -- aggregation arithmetic ---------------------------------------------------


def test_local_aggregate_arithmetic(rng):
    parts = [Dataset(np.ones((3, 1)), np.zeros(3)),
             Dataset(np.ones((7, 1)), np.zeros(7))]
    topo = build_topology(parts, [2])
    model = LossModel(RIDGE, feature_dim=1, regularization=0.1)
    proto = Protocol(topo, model, seed=0, batch_size=1, w_star=np.zeros(1))
    np.testing.assert_allclose(topo.device_weights, [0.3, 0.7])
    agg = proto.subnet_aggregate(np.array([[1.0], [11.0]]), 0)
    np.testing.assert_allclose(agg, [8.0], atol=1e-12)
    agg_mid = proto.subnet_aggregate(np.array([[0.0], [0.0]]), 0)
    np.testing.assert_allclose(agg_mid, [0.0])


def test_global_average_arithmetic():
    parts = [Dataset(np.ones((4, 1)), np.zeros(4)),
             Dataset(np.ones((6, 1)), np.zeros(6))]
    topo = build_topology(parts, [1, 1])
    model = LossModel(RIDGE, feature_dim=1, regularization=0.1)
    proto = Protocol(topo, model, seed=0, batch_size=1, w_star=np.zeros(1))
    np.testing.assert_allclose(topo.subnet_weights, [0.4, 0.6])
    got = proto.global_average(np.array([[5.0], [0.0]]))
    np.testing.assert_allclose(got, [2.0], atol=1e-12)


def test_sgd_step_arithmetic():
    # eta = 0.1, w = [1], full gradient forced to [2] via a crafted dataset
    ds = Dataset([[1.0]], [-1.0])            # grad at w=1: (w + 1) * 1 = 2
    topo = build_topology([ds], [1])
    model = LossModel(RIDGE, feature_dim=1, regularization=0.0)
    proto = Protocol(topo, model, seed=0, batch_size=1,
                     w_init=np.array([1.0]), w_star=np.array([-1.0]))
    proto.run_interval(IntervalPlan(tau=1, alpha=0.0, eta=0.1))
    np.testing.assert_allclose(proto.w[0], [0.8], atol=1e-15)


# -- protocol collapse and determinism ---------------------------------------


def test_collapse_to_centralized_sgd_bitwise():
    gen = np.random.default_rng(5)
    ds = Dataset(gen.standard_normal((40, 3)), gen.standard_normal(40))
    topo = build_topology([ds], [1])
    model = LossModel(RIDGE, feature_dim=3, regularization=0.1)
    proto = Protocol(topo, model, seed=42, batch_size=5, track_noise_free=False)
    plan = IntervalPlan(tau=1, alpha=0.0, eta=0.05, delay=0)
    traj = [proto.w[0].copy()]
    for _ in range(200):
        proto.run_interval(plan)
        traj.append(proto.w[0].copy())

    w = np.zeros(3)
    ref = [w.copy()]
    for t in range(1, 201):
        g = stochastic_gradient(model, ds, w, 5, stream(42, TAG_SGD, 0, t - 1))
        w = w - 0.05 * g
        ref.append(w.copy())
    np.testing.assert_array_equal(np.asarray(traj), np.asarray(ref))


def test_full_batch_homogeneous_consensus(rng):
    base = Dataset(rng.standard_normal((10, 2)), rng.standard_normal(10))
    topo = build_topology([base] * 4, [2, 2])
    model = LossModel(RIDGE, feature_dim=2, regularization=0.2)
    sched = TrainingSchedule.uniform(3, 6, alpha=0.4, eta=0.05, delay=2,
                                     local_agg_period=2, num_subnets=2)
    res = run_training(topo, model, sched, seed=1, batch_size=10)
    # identical data + full batch: every device stays identical, e1 = e2 = 0
    assert np.ptp(res.final_models, axis=0).max() == 0.0
    np.testing.assert_allclose(res.column("e1"), 0.0, atol=1e-12)
    np.testing.assert_allclose(res.column("e2"), 0.0, atol=1e-12)


def test_two_runs_bit_identical(rng):
    topo, model = small_fleet(rng)
    sched = TrainingSchedule.uniform(4, 5, alpha=0.3, eta=0.05, delay=2,
                                     local_agg_period=2, num_subnets=2)
    a = run_training(topo, model, sched, seed=7, batch_size=3)
    b = run_training(topo, model, sched, seed=7, batch_size=3)
    for name in a.metrics:
        np.testing.assert_array_equal(a.metrics[name], b.metrics[name])
    np.testing.assert_array_equal(a.final_models, b.final_models)


def test_convex_combination_coordinate_bounds(rng):
    topo, model = small_fleet(rng)
    proto = Protocol(topo, model, seed=3, batch_size=3)
    plan = IntervalPlan(tau=4, alpha=0.35, eta=0.08, delay=2)
    seen = {}

    def spy_policy(t, tentative, aggregates):
        seen[t] = tentative.copy()
        return np.zeros(topo.num_subnets, dtype=bool)

    outcome = proto.run_interval(plan, theta_policy=spy_policy)
    snapshot = outcome.snapshot
    tent = seen[4]
    for i in range(topo.num_devices):
        lo = np.minimum(snapshot, tent[i]) - 1e-12
        hi = np.maximum(snapshot, tent[i]) + 1e-12
        assert ((proto.w[i] >= lo) & (proto.w[i] <= hi)).all()


# -- the independent straight-line protocol oracle ----------------------------


def straight_line_protocol(topo, model, seed, batch, num_intervals, tau, alpha,
                           eta, delay, offsets):
    """Flat reimplementation of the training loop used as the engine oracle."""
    I = topo.num_devices
    N = topo.num_subnets
    dim = model.model_dim
    w = [np.zeros(dim) for _ in range(I)]
    t = 0
    for _ in range(num_intervals):
        t_end = t + tau
        capture = t_end - delay
        snapshot = None
        for step in range(1, tau + 1):
            tcur = t + step
            tent = []
            for i in range(I):
                g = stochastic_gradient(model, topo.datasets[i], w[i], batch,
                                        stream(seed, TAG_SGD, i, tcur - 1))
                tent.append(w[i] - eta * g)
            aggs = []
            for c in range(N):
                acc = np.zeros(dim)
                for i in topo.subnets[c]:
                    acc = acc + topo.device_weights[i] * tent[i]
                aggs.append(acc)
            if tcur == capture:
                snapshot = np.zeros(dim)
                for c in range(N):
                    snapshot = snapshot + topo.subnet_weights[c] * aggs[c]
            if tcur == t_end:
                for c in range(N):
                    theta = step in offsets
                    for i in topo.subnets[c]:
                        own = aggs[c] if theta else tent[i]
                        w[i] = (1 - alpha) * snapshot + alpha * own
            else:
                for c in range(N):
                    if step in offsets:
                        for i in topo.subnets[c]:
                            w[i] = aggs[c]
                    else:
                        for i in topo.subnets[c]:
                            w[i] = tent[i]
        t = t_end
    return np.asarray(w)


def test_engine_matches_straight_line_oracle(rng):
    topo, model = small_fleet(rng, n_devices=6, subnets=(3, 3))
    tau, delay, alpha, eta, period = 6, 2, 0.4, 0.06, 2
    offsets = set(range(period, tau + 1, period))
    sched = TrainingSchedule.uniform(5, tau, alpha=alpha, eta=eta, delay=delay,
                                     local_agg_period=period, num_subnets=2)
    res = run_training(topo, model, sched, seed=11, batch_size=4,
                       track_noise_free=False)
    oracle = straight_line_protocol(topo, model, seed=11, batch=4,
                                    num_intervals=5, tau=tau, alpha=alpha,
                                    eta=eta, delay=delay, offsets=offsets)
    np.testing.assert_allclose(res.final_models, oracle, rtol=0, atol=1e-10)


def test_clock_discipline_snapshot_precedes_sync(rng):
    topo, model = small_fleet(rng)
    proto = Protocol(topo, model, seed=5, batch_size=3)
    plan = IntervalPlan(tau=7, alpha=0.2, eta=0.05, delay=3)
    outcome = proto.run_interval(plan)
    assert outcome.capture_t == proto.t - 3
    assert proto.t == 7


def test_duplicate_and_missing_snapshot_guards(rng):
    # plant a leftover pending snapshot to exercise the double-capture guard
    topo, model = small_fleet(rng)
    proto = Protocol(topo, model, seed=5, batch_size=3)
    proto._pending_snapshot = np.zeros(model.model_dim)
    with pytest.raises(Exception):
        proto.run_interval(IntervalPlan(tau=3, alpha=0.0, eta=0.05, delay=1))


# -- baselines ----------------------------------------------------------------


def test_hier_fedavg_is_alpha_zero(rng):
    topo, model = small_fleet(rng)
    base = run_baseline("hier-fedavg", topo, model, num_intervals=3, tau=6,
                        eta=0.05, delay=2, local_agg_period=3, seed=9,
                        batch_size=4)
    sched = TrainingSchedule.uniform(3, 6, alpha=0.0, eta=0.05, delay=2,
                                     local_agg_period=3, num_subnets=2)
    direct = run_training(topo, model, sched, seed=9, batch_size=4)
    for name in base.metrics:
        np.testing.assert_array_equal(base.metrics[name], direct.metrics[name])


def test_fedavg_flattens_topology(rng):
    topo, model = small_fleet(rng)
    res = run_baseline("fedavg", topo, model, num_intervals=2, tau=4, eta=0.05,
                       seed=9, batch_size=4, track_noise_free=False)
    assert res.final_models.shape[0] == topo.num_devices
    with pytest.raises(ValueError):
        run_baseline("nope", topo, model, num_intervals=1, tau=2, eta=0.05,
                     seed=0, batch_size=4)


# -- diagnostics vs one-step bounds -------------------------------------------


def test_logged_dispersion_gap_satisfy_one_step_bounds():
    prob = diverse_problem()
    topo, model, params = prob.topology, prob.model, prob.params
    eta = 0.5 * 2.0 / (params.mu + params.beta)
    tau = 10
    sched = TrainingSchedule.uniform(4, tau, alpha=0.2, eta=eta, delay=3,
                                     num_subnets=topo.num_subnets)
    res = run_training(topo, model, sched, seed=21, batch_size=2,
                       w_star=prob.w_star)
    e2, e3 = res.column("e2"), res.column("e3")
    sync_times = set(int(t) for t in res.sync_times)
    for t in range(len(e2) - 1):
        if (t + 1) in sync_times:
            continue
        _, b2, b3 = one_step_bounds(params, 0.0, e2[t], e3[t], eta)
        assert e2[t + 1] <= b2 + 1e-9
        assert e3[t + 1] <= b3 + 1e-9


def test_metrics_decimation_keeps_sync_rows(rng):
    topo, model = small_fleet(rng)
    sched = TrainingSchedule.uniform(3, 8, alpha=0.1, eta=0.04, delay=2,
                                     num_subnets=2)
    res = run_training(topo, model, sched, seed=2, batch_size=3,
                       metrics_every=8, track_noise_free=False)
    logged = set(int(t) for t in res.column("t"))
    for t_sync in (8, 16, 24):
        assert t_sync in logged
        assert t_sync - 2 in logged  # capture slots forced into the log
    assert res.at_sync("gap").shape == (3,)


def test_weight_sum_guard(rng):
    topo, model = small_fleet(rng)
    proto = Protocol(topo, model, seed=0, batch_size=3, w_star=None)
    bad = topo.device_weights.copy()
    bad[0] += 1e-3
    object.__setattr__(topo, "device_weights", bad)
    from dflsim.errors import WeightSumError

    with pytest.raises(WeightSumError):
        proto.subnet_aggregate(np.zeros((4, 3)), 0)


def test_full_batch_reproduces_deterministic_gd(rng):
    # batch = dataset size turns the protocol into plain gradient descent;
    # compare against a straight-line GD recursion to 1e-12 per step
    ds = Dataset(rng.standard_normal((15, 3)), rng.standard_normal(15))
    topo = build_topology([ds], [1])
    model = LossModel(RIDGE, feature_dim=3, regularization=0.2)
    eta, steps = 0.08, 30
    proto = Protocol(topo, model, seed=0, batch_size=15, w_star=None)
    plan = IntervalPlan(tau=1, alpha=0.0, eta=eta, delay=0)
    w_ref = np.zeros(3)
    for _ in range(steps):
        proto.run_interval(plan)
        w_ref = w_ref - eta * full_gradient(model, ds, w_ref)
        np.testing.assert_allclose(proto.w[0], w_ref, atol=1e-12)


def test_clock_discipline_step_counts(rng):
    # exactly delay slots of device work happen between capture and sync
    topo, model = small_fleet(rng)
    proto = Protocol(topo, model, seed=4, batch_size=3, w_star=None)
    seen = []

    def spy(t, tentative, aggregates):
        seen.append(t)
        return np.zeros(2, dtype=bool)

    out = proto.run_interval(IntervalPlan(tau=9, alpha=0.1, eta=0.05, delay=4),
                             theta_policy=spy)
    assert seen == list(range(1, 10))
    assert proto.t - out.capture_t == 4


def test_single_slot_interval_with_trigger_and_capture(rng):
    # tau=1, delay=0: capture, trigger instant and sync share one slot
    topo, model = small_fleet(rng)
    sched = TrainingSchedule.uniform(3, 1, alpha=0.4, eta=0.05, delay=0,
                                     local_agg_period=1, num_subnets=2)
    res = run_training(topo, model, sched, seed=6, batch_size=3,
                       track_noise_free=False)
    assert res.column("t")[-1] == 3
    # with theta=1 at the sync slot the combiner mixes the snapshot with the
    # subnet aggregate, so devices in a subnet end identical
    for c in range(2):
        members = list(res.final_models[list(range(2 * c, 2 * c + 2))])
        np.testing.assert_array_equal(members[0], members[1])


def test_zero_up_delay_split(rng):
    topo, model = small_fleet(rng)
    sched = TrainingSchedule.uniform(2, 6, alpha=0.2, eta=0.05, delay=3,
                                     up_delay=0, num_subnets=2)
    res = run_training(topo, model, sched, seed=6, batch_size=3,
                       track_noise_free=False)
    assert res.column("t")[-1] == 12
