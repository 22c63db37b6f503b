import numpy as np
import pytest

from conftest import quadratic_setup
from streamsel import AllocationState, run_equal, run_jba, run_sba
from streamsel.engine import (
    ConfigurationError,
    Replication,
    RunConfig,
    allocate_equal_simulation,
    allocate_input_stage,
    allocate_simulation_stage,
    jba_policy,
    simulate_one_choice,
)


def two_stream_active(**kw):
    """Two exponential streams sharing one collection budget of 2 at unit cost."""
    opts = dict(theta=(2.0, 1.0), groups=[[0, 1]], budgets=[2.0], given=[False, False], n0=2, m0=2)
    opts.update(kw)
    return quadratic_setup(**opts)


# -- input rounding --------------------------------------------------------------


def test_singleton_input_stage_spends_whole_budget():
    _, layout = quadratic_setup(theta=(1.0,), budgets=[10.0], n0=2)
    counts = np.array([2])
    inc = allocate_input_stage(1, np.array([10.0]), counts, layout)
    assert inc.tolist() == [10] and counts.tolist() == [12]


def test_symmetric_two_stream_stage():
    _, layout = two_stream_active()
    counts = np.array([2, 2])
    assert allocate_input_stage(1, np.array([1.0, 1.0]), counts, layout).tolist() == [1, 1]


def test_argmax_deficit_rounding():
    # t * n_hat - N = (4 - 4, 2 - 4): stream 0 has the larger deficit twice in a row
    _, layout = two_stream_active()
    counts = np.array([4, 4])
    inc = allocate_input_stage(3, np.array([4 / 3, 2 / 3]), counts, layout)
    assert inc.tolist() == [2, 0]


def test_equal_input_rule_balances_cost_weighted_counts():
    _, layout = two_stream_active(costs=[1.0, 2.0], budgets=[6.0])
    counts = np.array([2, 2])
    allocate_input_stage(1, None, counts, layout, rule="equal")
    # spend 6 with c * N balanced: stream 0 reaches 6 (cost 4), stream 1 reaches 3 (cost 2)
    assert counts.tolist() == [6, 3]


def test_fractional_cost_ceiling():
    _, layout = quadratic_setup(theta=(1.0,), costs=[0.1], budgets=[0.7], n0=2)
    counts = np.array([2])
    for t in range(1, 30):
        allocate_input_stage(t, np.array([7.0]), counts, layout)
        spent = 0.1 * (counts[0] - 2)
        assert t * 0.7 - 1e-9 <= spent < t * 0.7 + 0.1


# -- simulation balancing --------------------------------------------------------


def test_two_designs_prefers_less_sampled_best():
    choice = simulate_one_choice(0, np.array([3, 5]), np.array([1.0, 0.0]), np.ones(2), np.zeros(2), np.ones(2))
    assert choice == 0


def test_smaller_gap_wins_rate_balance():
    # M_b^2 = 100 >= 9 + 9, so a suboptimal design is picked; equal denominators
    choice = simulate_one_choice(0, np.array([10, 3, 3]), np.array([0.0, -1.0, -2.0]), np.ones(3), np.zeros(3), np.ones(3))
    assert choice == 1


def test_global_balance_hand_arithmetic():
    # 25 - (9 + 9) = 7 >= 0: the best design is not chosen
    choice = simulate_one_choice(0, np.array([5, 3, 3]), np.array([0.0, -1.0, -1.5]), np.ones(3), np.zeros(3), np.ones(3))
    assert choice != 0
    # 16 - 18 < 0: the best design is chosen
    assert simulate_one_choice(0, np.array([4, 3, 3]), np.array([0.0, -1.0, -1.5]), np.ones(3), np.zeros(3), np.ones(3)) == 0


def test_simulation_stage_spends_budget():
    model, layout = quadratic_setup(theta=(1, 2, 3, 3, 2, 1), offsets=range(21), sim_budget=100)
    rng = np.random.default_rng(0)
    counts = np.full(21, layout.m0)
    means = -np.arange(21.0) ** 2
    inc = allocate_simulation_stage(1, counts, 0, means, rng.uniform(1, 5, 21), rng.uniform(0, 1, 21), layout)
    assert inc.sum() == 100


def test_simulation_stage_matches_repeated_single_choices():
    _, layout = quadratic_setup(offsets=range(6), sim_budget=40)
    rng = np.random.default_rng(1)
    means, var, term = -rng.uniform(0, 3, 6), rng.uniform(0.5, 2, 6), rng.uniform(0, 0.2, 6)
    means[2] = 0.5
    fast = np.full(6, layout.m0)
    allocate_simulation_stage(1, fast, 2, means, var, term, layout)
    slow = np.full(6, layout.m0)
    for _ in range(40):
        slow[simulate_one_choice(2, slow, means, var, term, layout.sim_costs)] += 1
    assert fast.tolist() == slow.tolist()


def test_symmetric_pair_splits_evenly():
    _, layout = quadratic_setup(offsets=range(2), sim_budget=31)
    counts = np.full(2, layout.m0)
    inc = allocate_simulation_stage(1, counts, 0, np.array([0.0, -1.0]), np.ones(2), np.zeros(2), layout)
    assert abs(inc[0] - inc[1]) <= 1 and inc.sum() == 31


@pytest.mark.parametrize("k, expected", [(4, [2, 2, 2, 2]), (3, [3, 3, 2])])
def test_equal_simulation_round_robin(k, expected):
    _, layout = quadratic_setup(offsets=range(k), sim_budget=8)
    counts = np.full(k, layout.m0)
    assert allocate_equal_simulation(1, counts, layout).tolist() == expected


# -- full runs ---------------------------------------------------------------------


def _check_budget_bounds(history, layout):
    c_max = layout.stream_costs.max()
    d_max = layout.sim_costs.max()
    prev_n = np.array(history.initial.input_count)
    prev_m = np.array(history.initial.sim_count)
    for rec in history.stages:
        n, m = np.array(rec.input_count), np.array(rec.sim_count)
        assert np.all(n >= prev_n) and np.all(m >= prev_m)
        for g, u in zip(layout.groups, layout.group_budgets):
            spent = np.dot(layout.stream_costs[g], n[g] - layout.n0)
            assert rec.stage * u - c_max <= spent < rec.stage * u + c_max
        sim_spent = np.dot(layout.sim_costs, m - layout.m0)
        assert rec.stage * layout.sim_budget - d_max <= sim_spent < rec.stage * layout.sim_budget + d_max
        prev_n, prev_m = n, m


def mixed_layout():
    return quadratic_setup(
        theta=(1.0, 2.0, 3.0, 1.5),
        offsets=range(6),
        groups=[[0, 1, 2], [3]],
        costs=[1.0, 2.5, 0.5, 1.0],
        budgets=[7.0, 5.0],
        given=[False, False, False, True],
        sim_budget=25,
        n0=5,
        m0=4,
    )


@pytest.mark.parametrize("runner", [run_sba, run_equal])
def test_budget_accounting_every_stage(runner):
    model, layout = mixed_layout()
    history = runner(RunConfig(model, layout, stages=60, seed=3))
    assert len(history) == 60
    _check_budget_bounds(history, layout)


def test_sba_is_deterministic():
    model, layout = quadratic_setup(theta=(1.5,), offsets=range(2))
    first = run_sba(RunConfig(model, layout, stages=25, seed=11))
    second = run_sba(RunConfig(model, layout, stages=25, seed=11))
    assert first.to_dict() == second.to_dict()
    other = run_sba(RunConfig(model, layout, stages=25, seed=12))
    assert other.to_dict() != first.to_dict()


def test_sba_prefix_independent_of_horizon():
    model, layout = mixed_layout()
    short = run_sba(RunConfig(model, layout, stages=30, seed=4)).to_dict()
    long = run_sba(RunConfig(model, layout, stages=70, seed=4)).to_dict()
    assert long["initial"] == short["initial"]
    assert long["stages"][:30] == short["stages"]


def test_equal_run_balances_counts():
    model, layout = mixed_layout()
    history = run_equal(RunConfig(model, layout, stages=20, seed=5))
    last = history.stages[-1]
    weighted = layout.stream_costs[:3] * np.array(last.input_count[:3])
    assert weighted.max() - weighted.min() <= layout.stream_costs[:3].max()
    assert max(last.sim_count) - min(last.sim_count) <= 1


def test_history_selections_and_initial_state():
    model, layout = quadratic_setup()
    history = run_sba(RunConfig(model, layout, stages=5, seed=1))
    assert history.selections.shape == (6,)
    assert history.initial.input_count == [layout.n0] * 2
    assert history.initial.sim_count == [layout.m0] * 5
    assert history.final_selection == history.stages[-1].best


def test_allocation_state_initial():
    _, layout = mixed_layout()
    state = AllocationState.initial(layout)
    assert state.input_count.tolist() == [5, 5, 5, 5] and state.sim_count.tolist() == [4] * 6


def test_config_validation():
    model, layout = quadratic_setup()
    with pytest.raises(ConfigurationError):
        RunConfig(model, layout, stages=-1)
    wrong_model, _ = quadratic_setup(offsets=range(3))
    with pytest.raises(ConfigurationError):
        RunConfig(wrong_model, layout, stages=1)
    with pytest.raises(ConfigurationError):
        quadratic_setup(groups=[[0, 1]], budgets=[3.0], given=[True, True])
    with pytest.raises(ConfigurationError):
        quadratic_setup(n0=1)


def test_stage_dump_callback():
    model, layout = quadratic_setup()
    seen = []
    run_sba(RunConfig(model, layout, stages=9, seed=1, dump_every=4, on_stage=lambda t, p: seen.append((t, p))))
    assert [t for t, _ in seen] == [4, 8]
    assert {"estimators", "input_count", "sim_count", "n_hat", "kkt_residual"} <= set(seen[0][1])


# -- JBA -------------------------------------------------------------------------


def jba_layout():
    return quadratic_setup(
        theta=(1.0, 2.0, 3.0, 3.0),
        offsets=range(8),
        groups=[[0, 1, 2], [3]],
        budgets=[10.0, 20.0],
        given=[False, False, False, True],
        sim_budget=100,
        n0=50,
        m0=10,
    )


def test_jba_without_budget_keeps_pilot_selection():
    model, layout = jba_layout()
    history = run_jba(RunConfig(model, layout, stages=0, seed=2))
    assert history.selections.tolist() == [history.initial.best]


def test_jba_delays_simulation_until_input_is_collected():
    model, layout = jba_layout()
    history = run_jba(RunConfig(model, layout, stages=200, seed=2))
    sims = np.array([r.sim_count for r in history.stages]).sum(axis=1)
    first_sim = int(np.argmax(sims > sims[0])) if np.any(sims > sims[0]) else None
    assert sims[0] == 8 * layout.m0
    assert first_sim is not None and first_sim > 0
    # joint budget: everything spent by the end is at most M * T plus one unit
    rep = Replication(RunConfig(model, layout, stages=200, seed=2))
    rep.initialize()
    policy = jba_policy(rep.estimates(), layout, 200)
    n = np.array(history.stages[-1].input_count)
    active_spend = np.dot(policy["unit_cost"][:3], n[:3] - layout.n0)
    sim_spend = sims[-1] - 8 * layout.m0
    assert active_spend + sim_spend <= 200 * layout.sim_budget + policy["unit_cost"][:3].max()


def test_jba_starts_simulating_later_with_longer_horizon():
    model, layout = jba_layout()

    def first_sim_stage(stages):
        history = run_jba(RunConfig(model, layout, stages=stages, seed=6))
        sims = [sum(r.sim_count) for r in history.stages]
        return next(t for t, s in enumerate(sims, start=1) if s > sims[0] or t > 1 and s > 8 * layout.m0)

    assert first_sim_stage(300) > first_sim_stage(100)


def test_jba_given_streams_keep_arriving():
    model, layout = jba_layout()
    history = run_jba(RunConfig(model, layout, stages=10, seed=2))
    assert [r.input_count[3] for r in history.stages] == [layout.n0 + 20 * t for t in range(1, 11)]


# -- oracle mode and long-run properties ------------------------------------------


def test_oracle_mode_uses_true_statistics():
    model, layout = two_stream_active(budgets=[10.0], offsets=range(4))
    rep = Replication(RunConfig(model, layout, stages=1, seed=0, oracle_mode=True))
    est = rep.estimates()
    means, _, grads = model.true_stats(layout.theta_true)
    np.testing.assert_array_equal(est["means"], means)
    np.testing.assert_array_equal(est["gradients"], grads)
    assert est["best"] == 0


@pytest.fixture(scope="module")
def growth_runs():
    """Twenty 400-stage SBA runs on the K=5 layout with one shared and three given streams."""
    model, layout = quadratic_setup(
        theta=(1, 2, 3, 3, 2, 1),
        offsets=range(5),
        groups=[[0, 1, 2], [3], [4], [5]],
        budgets=[10, 20, 20, 20],
        given=[False] * 3 + [True] * 3,
        sim_budget=100,
        n0=50,
        m0=10,
    )
    runs = []
    for seed in range(20):
        history = run_sba(RunConfig(model, layout, stages=400, seed=seed))
        runs.append(
            (
                np.array([r.input_count for r in history.stages]),
                np.array([r.sim_count for r in history.stages]),
            )
        )
    return runs


def min_window_growth(counts, start=100, window=200):
    # counts[k] is the count after stage k + 1; windows begin after stage `start`
    gains = counts[window:] - counts[:-window]
    return gains[start - 1 :].min()


def test_input_counts_keep_growing(growth_runs):
    for n, _ in growth_runs:
        assert min_window_growth(n) >= 1


@pytest.mark.xfail(
    strict=True,
    reason="designs with a badly estimated pilot mean can go unsampled for more than 200 stages "
    "while the input-uncertainty term dominates the rate of the apparent best; growth is only asymptotic",
)
def test_simulation_counts_keep_growing(growth_runs):
    for _, m in growth_runs:
        assert min_window_growth(m) >= 1


def final_means(config):
    captured = {}
    config.dump_every = config.stages
    config.on_stage = lambda t, payload: captured.update(payload)
    run_sba(config)
    return np.array(captured["estimators"]["mu_hat"])


@pytest.mark.slow
def test_streaming_estimates_are_consistent():
    model, layout = quadratic_setup(offsets=range(3), sim_budget=30)
    reps = 100
    final = np.array([final_means(RunConfig(model, layout, stages=2000, seed=99, replication=r)) for r in range(reps)])
    truth = np.array([model.true_mean(i, layout.theta_true) for i in range(3)])
    spread = final.std(axis=0, ddof=1)
    assert np.all(np.abs(final.mean(axis=0) - truth) <= 3 * spread / np.sqrt(reps))
    assert np.all(spread < 1.0)
