"""Multi-stage allocation of input-data budgets and the simulation budget.

``run_sba`` implements the simultaneous budget allocation procedure; ``run_equal``
and ``run_jba`` are the two baselines. All three share the replication
machinery below: counts are advanced *virtually* while a stage is being
planned, and the stage's input data and simulation outputs are generated
afterwards, under the input estimate that was current when the stage began.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from streamsel.estimators import EstimatorBank, g_matrix
from streamsel.models import SimulationModel
from streamsel.randomness import ReplicationStreams
from streamsel.rate_optimizer import (
    PaeSolution,
    minimax_allocation,
    pae_problem_from_estimates,
    solve_input_allocation,
)


class ConfigurationError(ValueError):
    pass


@dataclass
class StreamLayout:
    """Input streams, their partition into budgets, and the simulation costs.

    A *given* stream is one whose data arrive in fixed batches; it always
    forms a singleton partition whose budget is the batch size at unit cost.
    """

    families: list
    theta_true: list
    groups: list
    stream_costs: np.ndarray
    group_budgets: np.ndarray
    sim_costs: np.ndarray
    sim_budget: float
    n0: int = 2
    m0: int = 2
    given: list = field(default_factory=list)

    def __post_init__(self):
        self.theta_true = [f.validate(t) for f, t in zip(self.families, self.theta_true)]
        self.groups = [sorted(int(s) for s in g) for g in self.groups]
        self.stream_costs = np.asarray(self.stream_costs, dtype=float)
        self.group_budgets = np.asarray(self.group_budgets, dtype=float)
        self.sim_costs = np.asarray(self.sim_costs, dtype=float)
        self.sim_budget = float(self.sim_budget)
        if not self.given:
            self.given = [False] * len(self.families)
        self.validate()

    @property
    def n_streams(self) -> int:
        return len(self.families)

    @property
    def n_designs(self) -> int:
        return self.sim_costs.size

    def validate(self):
        s = self.n_streams
        if len(self.theta_true) != s or self.stream_costs.size != s or len(self.given) != s:
            raise ConfigurationError("families, theta_true, stream_costs and given must have one entry per stream")
        if sorted(x for g in self.groups for x in g) != list(range(s)):
            raise ConfigurationError("groups must partition the streams")
        if self.group_budgets.size != len(self.groups):
            raise ConfigurationError("one budget per group is required")
        if np.any(self.stream_costs <= 0) or np.any(self.group_budgets <= 0):
            raise ConfigurationError("stream costs and group budgets must be positive")
        if np.any(self.sim_costs <= 0) or self.sim_budget <= 0:
            raise ConfigurationError("simulation costs and budget must be positive")
        if self.n0 < 2 or self.m0 < 2:
            raise ConfigurationError("n0 and m0 must be at least 2")
        for g in self.groups:
            if any(self.given[x] for x in g) and len(g) != 1:
                raise ConfigurationError("given streams must form singleton groups")

    @property
    def offsets(self) -> np.ndarray:
        dims = [f.param_dim for f in self.families]
        return np.concatenate([[0], np.cumsum(dims)]).astype(int)

    def true_covariances(self) -> list[np.ndarray]:
        return [f.moment_cov(t) for f, t in zip(self.families, self.theta_true)]


@dataclass
class AllocationState:
    """Cumulative counts ``N_s``, ``M_i`` and the increments of the last stage."""

    input_count: np.ndarray
    sim_count: np.ndarray
    stage: int = 0
    input_increment: np.ndarray | None = None
    sim_increment: np.ndarray | None = None

    @classmethod
    def initial(cls, layout: StreamLayout) -> "AllocationState":
        return cls(
            input_count=np.full(layout.n_streams, layout.n0, dtype=np.int64),
            sim_count=np.full(layout.n_designs, layout.m0, dtype=np.int64),
            input_increment=np.zeros(layout.n_streams, dtype=np.int64),
            sim_increment=np.zeros(layout.n_designs, dtype=np.int64),
        )


@dataclass
class StageRecord:
    stage: int
    best: int
    input_count: list
    sim_count: list
    digest: str

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "best": self.best,
            "input_count": self.input_count,
            "sim_count": self.sim_count,
            "digest": self.digest,
        }


@dataclass
class StageHistory:
    """Stage-0 record (after initialization) plus one record per stage."""

    procedure: str
    initial: StageRecord
    stages: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.stages)

    @property
    def selections(self) -> np.ndarray:
        return np.array([self.initial.best] + [r.best for r in self.stages], dtype=np.int64)

    @property
    def final_selection(self) -> int:
        return int(self.selections[-1])

    def to_dict(self) -> dict:
        return {
            "procedure": self.procedure,
            "initial": self.initial.to_dict(),
            "stages": [r.to_dict() for r in self.stages],
        }


@dataclass
class RunConfig:
    """Everything one replication of a procedure needs.

    ``stages`` is ``T``. ``oracle_mode`` replaces every estimated quantity used
    by the allocation rules with its true value (the model must provide
    ``true_stats``). ``on_stage`` is called as ``on_stage(t, state_dict)``
    every ``dump_every`` stages when both are set.
    """

    model: SimulationModel
    layout: StreamLayout
    stages: int
    seed: int = 0
    replication: int = 0
    oracle_mode: bool = False
    solver_tol: float = 1e-8
    dump_every: int = 0
    on_stage: Callable | None = None

    def __post_init__(self):
        if self.stages < 0:
            raise ConfigurationError("the number of stages must be nonnegative")
        if self.model.n_designs != self.layout.n_designs:
            raise ConfigurationError(
                f"model has {self.model.n_designs} designs but layout has {self.layout.n_designs} simulation costs"
            )
        if getattr(self.model, "n_streams", self.layout.n_streams) != self.layout.n_streams:
            raise ConfigurationError("model and layout disagree on the number of input streams")
        if self.oracle_mode and not hasattr(self.model, "true_stats"):
            raise ConfigurationError(f"oracle mode needs exact statistics, which the {self.model.kind} model lacks")


# -- stage-level allocation rules ----------------------------------------------


def allocate_input_stage(t: int, n_hat, input_count, layout: StreamLayout, rule: str = "target") -> np.ndarray:
    """Round the stage-``t`` input budgets to integer data counts.

    While a partition's cumulative spend (initial data excluded) is below
    ``t * U_j``, one more point goes to ``argmax_s t * n_hat_s - N_s`` (rule
    ``"target"``) or to ``argmin_s c_s N_s`` (rule ``"equal"``); ties go to the
    lowest index. ``input_count`` is advanced in place; the increments are
    returned.
    """
    n_hat = None if n_hat is None else np.asarray(n_hat, dtype=float)
    start = input_count.copy()
    costs = layout.stream_costs
    for g, budget in zip(layout.groups, layout.group_budgets):
        target = t * budget
        spent = float(np.dot(costs[g], input_count[g] - layout.n0))
        if len(g) == 1:
            s = g[0]
            if spent < target:
                k = math.ceil((target - spent) / costs[s] - 1e-12)
                # guard against the float ceiling landing one short
                while spent + k * costs[s] < target:
                    k += 1
                input_count[s] += k
            continue
        while spent < target:
            if rule == "target":
                s = g[int(np.argmax(t * n_hat[g] - input_count[g]))]
            else:
                s = g[int(np.argmin(costs[g] * input_count[g]))]
            input_count[s] += 1
            spent += costs[s]
    return input_count - start


def simulate_one_choice(best: int, sim_count, means, variances, input_term, sim_costs) -> int:
    """One step of the sequential simulation rule.

    The best design is chosen when the global-balance left side is short of
    the right side; otherwise the suboptimal design with the smallest
    rate-balance value. ``input_term`` holds ``2 sum_s g(i, s) / N_s``.
    """
    m = sim_count.astype(float)
    others = np.arange(m.size) != best
    balance = m[best] ** 2 - variances[best] / sim_costs[best] * np.sum(
        sim_costs[others] * m[others] ** 2 / variances[others]
    )
    if balance < 0 or m.size == 1:
        return int(best)
    denom = input_term + variances / m + variances[best] / m[best]
    rates = (means[best] - means) ** 2 / denom
    rates[best] = np.inf
    return int(np.argmin(rates))


def allocate_simulation_stage(
    t: int, sim_count, best, means, variances, input_term, layout: StreamLayout, target: float | None = None
) -> np.ndarray:
    """Repeat ``simulate_one_choice`` until the cumulative budget ``t * M`` is met.

    Counts are advanced virtually (statistics stay fixed within the stage).
    ``sim_count`` is updated in place; the increments are returned. A
    different cumulative ``target`` may be passed explicitly.
    """
    start = sim_count.copy()
    d = layout.sim_costs
    if target is None:
        target = t * layout.sim_budget
    spent = float(np.dot(d, sim_count - layout.m0))
    if spent >= target:
        return sim_count - start
    m = sim_count.astype(float)
    others = np.arange(m.size) != best
    weighted = d / variances
    rhs_sum = float(np.sum(weighted[others] * m[others] ** 2))
    coeff = variances[best] / d[best]
    gap2 = (means[best] - means) ** 2
    var_over_m = variances / m
    while spent < target:
        if m.size == 1 or m[best] ** 2 - coeff * rhs_sum < 0:
            i = best
        else:
            rates = gap2 / (input_term + var_over_m + var_over_m[best])
            rates[best] = np.inf
            i = int(np.argmin(rates))
        if i != best:
            rhs_sum += weighted[i] * (2.0 * m[i] + 1.0)
        m[i] += 1.0
        var_over_m[i] = variances[i] / m[i]
        spent += d[i]
    sim_count[:] = m.astype(np.int64)
    return sim_count - start


def allocate_equal_simulation(t: int, sim_count, layout: StreamLayout) -> np.ndarray:
    """Round-robin on ``d_i M_i`` until the cumulative budget is met."""
    start = sim_count.copy()
    d = layout.sim_costs
    target = t * layout.sim_budget
    spent = float(np.dot(d, sim_count - layout.m0))
    while spent < target:
        i = int(np.argmin(d * sim_count))
        sim_count[i] += 1
        spent += d[i]
    return sim_count - start


# -- replication ---------------------------------------------------------------


class Replication:
    """Data, counts and estimators of one independent run."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.model = config.model
        self.layout = config.layout
        self.bank = EstimatorBank(self.layout.families, self.layout.n_designs)
        self.streams = ReplicationStreams(config.seed, config.replication, self.layout.n_streams, self.layout.n_designs)
        self.state = AllocationState.initial(self.layout)
        self._truth = None
        if config.oracle_mode:
            means, variances, grads = self.model.true_stats(self.layout.theta_true)
            self._truth = {
                "means": means,
                "variances": variances,
                "gradients": grads,
                "covariances": self.layout.true_covariances(),
                "best": int(np.argmax(means)),
            }

    def collect_input(self, increments) -> None:
        for s, n in enumerate(increments):
            if n > 0:
                fam = self.layout.families[s]
                draws = fam.sample(self.layout.theta_true[s], self.streams.inputs[s], size=int(n))
                self.bank.update_input(s, draws)

    def simulate(self, increments) -> None:
        """Run the requested outputs under the current input estimate."""
        thetas = self.bank.thetas()
        r = self.model.draws_per_stream
        for i, m in enumerate(increments):
            if m <= 0:
                continue
            rng = self.streams.simulations[i]
            scenario = [fam.sample(th, rng, size=(int(m), r)) for fam, th in zip(self.layout.families, thetas)]
            outputs = self.model.evaluate(i, scenario, rng)
            scores = np.concatenate(
                [fam.score(th, sc) for fam, th, sc in zip(self.layout.families, thetas, scenario)], axis=1
            )
            self.bank.update_output(i, outputs, scores)

    def initialize(self) -> None:
        self.collect_input(np.full(self.layout.n_streams, self.layout.n0))
        self.simulate(np.full(self.layout.n_designs, self.layout.m0))

    def execute(self, input_inc, sim_inc) -> None:
        # simulations use the estimate in force at the start of the stage
        self.simulate(sim_inc)
        self.collect_input(input_inc)

    def estimates(self, streams=None) -> dict:
        """Quantities used by the allocation rules (true values in oracle mode)."""
        if self._truth is not None:
            est = dict(self._truth)
        else:
            est = {
                "means": self.bank.means(),
                "variances": self.bank.variances(),
                "gradients": self.bank.gradients(),
                "covariances": [self.bank.sigma_d(s) for s in range(self.layout.n_streams)],
            }
            est["best"] = int(np.argmax(est["means"]))
        est["g"] = g_matrix(est["gradients"], est["covariances"], self.layout.offsets, est["best"])
        return est

    def record(self, stage: int) -> StageRecord:
        return StageRecord(
            stage=stage,
            best=self.bank.best_design(),
            input_count=self.state.input_count.tolist(),
            sim_count=self.state.sim_count.tolist(),
            digest=self.bank.digest(),
        )

    def maybe_dump(self, stage: int, extra: dict | None = None) -> None:
        cfg = self.config
        if cfg.on_stage is None or cfg.dump_every <= 0 or stage % cfg.dump_every:
            return
        payload = {
            "replication": cfg.replication,
            "stage": stage,
            "input_count": self.state.input_count.tolist(),
            "sim_count": self.state.sim_count.tolist(),
            "estimators": self.bank.snapshot(),
        }
        if extra:
            payload.update(extra)
        cfg.on_stage(stage, payload)


def _input_term(g, input_count, mask=None) -> np.ndarray:
    inv = 1.0 / input_count.astype(float)
    if mask is not None:
        inv = np.where(mask, inv, 0.0)
    return 2.0 * g @ inv


def solve_stage_inputs(est: dict, layout: StreamLayout, tol: float = 1e-8) -> PaeSolution:
    prob = pae_problem_from_estimates(
        est["means"], est["g"], est["best"], layout.groups, layout.stream_costs, layout.group_budgets
    )
    return solve_input_allocation(prob, tol=tol)


def run_sba(config: RunConfig) -> StageHistory:
    """Simultaneous budget allocation for data collection and simulation."""
    rep = Replication(config)
    rep.initialize()
    history = StageHistory("sba", rep.record(0))
    layout = rep.layout
    fixed_solution = None
    if config.oracle_mode:
        fixed_solution = solve_stage_inputs(rep.estimates(), layout, tol=config.solver_tol)
    for t in range(1, config.stages + 1):
        state = rep.state
        est = rep.estimates()
        solution = fixed_solution or solve_stage_inputs(est, layout, tol=config.solver_tol)
        state.input_increment = allocate_input_stage(t, solution.n_bar, state.input_count, layout)
        state.sim_increment = allocate_simulation_stage(
            t,
            state.sim_count,
            est["best"],
            est["means"],
            est["variances"],
            _input_term(est["g"], state.input_count),
            layout,
        )
        state.stage = t
        rep.execute(state.input_increment, state.sim_increment)
        history.stages.append(rep.record(t))
        rep.maybe_dump(t, {"n_hat": solution.n_bar.tolist(), "kkt_residual": solution.kkt_residual})
    return history


def run_equal(config: RunConfig) -> StageHistory:
    """Equal allocation: equal cost-weighted counts within partitions and across designs."""
    rep = Replication(config)
    rep.initialize()
    history = StageHistory("equal", rep.record(0))
    for t in range(1, config.stages + 1):
        state = rep.state
        state.input_increment = allocate_input_stage(t, None, state.input_count, rep.layout, rule="equal")
        state.sim_increment = allocate_equal_simulation(t, state.sim_count, rep.layout)
        state.stage = t
        rep.execute(state.input_increment, state.sim_increment)
        history.stages.append(rep.record(t))
        rep.maybe_dump(t)
    return history


def jba_policy(est: dict, layout: StreamLayout, stages: int, tol: float = 1e-8) -> dict:
    """One-shot joint split of the total budget ``M * T`` between active input
    data and simulation, computed from pilot estimates.

    Active-stream costs are expressed in simulation-budget units
    (``c_s * M / U_j``). Given streams are ignored. Returns the planned
    total input spend and the per-stream target proportions.
    """
    active = [s for s in range(layout.n_streams) if not layout.given[s]]
    unit = np.empty(layout.n_streams)
    for g, u in zip(layout.groups, layout.group_budgets):
        unit[g] = layout.stream_costs[g] * layout.sim_budget / u
    total = layout.sim_budget * stages
    best = est["best"]
    means, variances = est["means"], est["variances"]
    rows = [i for i in range(layout.n_designs) if i != best and means[best] > means[i]]
    if total <= 0 or not rows or not active:
        return {"input_spend": 0.0, "input_total": np.zeros(layout.n_streams), "active": active}
    gap2 = (means[best] - means[rows]) ** 2
    g_act = est["g"][np.ix_(rows, active)]
    used = [k for k, s in enumerate(active) if g_act[:, k].sum() > 0]
    n_in = len(used)
    k_designs = layout.n_designs
    a = np.zeros((len(rows), n_in + k_designs))
    a[:, :n_in] = g_act[:, used] / gap2[:, None]
    for r, i in enumerate(rows):
        a[r, n_in + i] = variances[i] / gap2[r]
        a[r, n_in + best] = variances[best] / gap2[r]
    used_streams = [active[k] for k in used]
    # designs that never enter a row get no simulation budget from the plan
    live = np.flatnonzero(a.sum(axis=0) > 0)
    costs = np.concatenate([unit[used_streams], layout.sim_costs])
    solved = minimax_allocation(
        a[:, live], np.zeros(len(rows)), [list(range(live.size))], costs[live], np.array([total]), tol=tol
    )
    x = np.zeros(a.shape[1])
    x[live] = solved[0]
    input_total = np.zeros(layout.n_streams)
    input_total[used_streams] = x[:n_in]
    spend = float(np.dot(unit[used_streams], x[:n_in]))
    return {"input_spend": spend, "input_total": input_total, "active": active, "unit_cost": unit}


def run_jba(config: RunConfig) -> StageHistory:
    """Joint budget allocation baseline: input collection first, then simulation.

    The total budget ``M * T`` is split once from pilot estimates. Active input
    data are collected at a per-stage spend of ``M`` (in simulation-budget
    units) until the planned input spend is exhausted; the remaining budget
    runs simulations with the sequential balancing rule, where the input
    term only counts active streams. Given streams keep arriving and
    updating the input estimate throughout.
    """
    rep = Replication(config)
    rep.initialize()
    layout = rep.layout
    history = StageHistory("jba", rep.record(0))
    policy = jba_policy(rep.estimates(), layout, config.stages, tol=config.solver_tol)
    input_spend = policy["input_spend"]
    unit = policy.get("unit_cost", layout.stream_costs)
    active_mask = np.array([not g for g in layout.given])
    plan = policy["input_total"]
    per_stage_rate = plan * layout.sim_budget / input_spend if input_spend > 0 else plan
    spent_input = 0.0
    for t in range(1, config.stages + 1):
        state = rep.state
        start_inputs = state.input_count.copy()
        # given streams: fixed batches, as for every procedure
        for g, u in zip(layout.groups, layout.group_budgets):
            s = g[0]
            if layout.given[s]:
                target = t * u
                spent = layout.stream_costs[s] * (state.input_count[s] - layout.n0)
                while spent < target:
                    state.input_count[s] += 1
                    spent += layout.stream_costs[s]
        # active input phase, by cumulative joint spend
        limit = min(t * layout.sim_budget, input_spend)
        while spent_input < limit:
            cand = [s for s in range(layout.n_streams) if active_mask[s] and plan[s] > 0]
            deficits = [t * per_stage_rate[s] - state.input_count[s] for s in cand]
            s = cand[int(np.argmax(deficits))]
            state.input_count[s] += 1
            spent_input += unit[s]
        state.input_increment = state.input_count - start_inputs
        # simulation phase uses whatever joint budget is left
        sim_target = t * layout.sim_budget - spent_input
        start_sims = state.sim_count.copy()
        if sim_target > 0 and spent_input >= input_spend:
            est = rep.estimates()
            sim_layout_budget = float(np.dot(layout.sim_costs, state.sim_count - layout.m0))
            if sim_layout_budget < sim_target:
                input_term = _input_term(est["g"], state.input_count, mask=active_mask)
                allocate_simulation_stage(
                    t,
                    state.sim_count,
                    est["best"],
                    est["means"],
                    est["variances"],
                    input_term,
                    layout,
                    target=sim_target,
                )
        state.sim_increment = state.sim_count - start_sims
        state.stage = t
        rep.execute(state.input_increment, state.sim_increment)
        history.stages.append(rep.record(t))
        rep.maybe_dump(t, {"jba_input_spend": input_spend})
    return history


PROCEDURES = {"sba": run_sba, "equal": run_equal, "jba": run_jba}
