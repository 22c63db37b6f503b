"""Rate optimization for the input budgets and balance diagnostics for the
simulation budget.

The input-allocation problem maximizes ``min_i gap2_i / sum_s w_is / n_s``
subject to one linear budget per partition of streams. Writing
``a_is = w_is / gap2_i`` it is the convex program

    minimize  max_i  e_i + sum_s a_is / x_s   s.t.  sum_{s in G_j} c_s x_s = U_j

with ``e = 0``. The same program with a nonzero offset ``e`` also covers the
one-shot joint allocation used by the JBA baseline, so the solver below is
written for the general form.

The solver is a primal log-barrier method with equality-constrained Newton
steps. Its output is certified by a closed-form dual bound: for weights
``lam`` on the simplex, minimizing ``sum_i lam_i f_i`` over the budget set
gives ``x_s proportional to sqrt(A_s / c_s)`` per partition, with
``A_s = sum_i lam_i a_is``. The reported ``kkt_residual`` is the relative
gap between the primal objective and that dual bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BARRIER_GROWTH = 20.0
CENTERING_TOL = 1e-10


@dataclass
class PaeProblem:
    """Plug-in data of the input-allocation problem.

    Attributes:
        gap2: squared gaps ``delta_bi^2`` of the suboptimal designs, shape ``(I,)``.
        weights: input-variance weights ``w_is``, shape ``(I, S)``.
        groups: partition of the stream indices ``0..S-1``.
        costs: per-stream unit cost ``c_s``.
        budgets: per-partition stage budget ``U_j``.
    """

    gap2: np.ndarray
    weights: np.ndarray
    groups: list
    costs: np.ndarray
    budgets: np.ndarray

    def __post_init__(self):
        self.gap2 = np.asarray(self.gap2, dtype=float).ravel()
        self.weights = np.asarray(self.weights, dtype=float).reshape(self.gap2.size, -1)
        self.groups = [list(map(int, g)) for g in self.groups]
        self.costs = np.asarray(self.costs, dtype=float).ravel()
        self.budgets = np.asarray(self.budgets, dtype=float).ravel()
        n_streams = self.weights.shape[1]
        if sorted(s for g in self.groups for s in g) != list(range(n_streams)):
            raise ValueError("groups must partition the stream indices")
        if self.costs.size != n_streams or self.budgets.size != len(self.groups):
            raise ValueError("costs must have one entry per stream and budgets one per group")
        if np.any(self.weights < 0) or np.any(self.gap2 < 0):
            raise ValueError("weights and squared gaps must be nonnegative")
        if np.any(self.costs <= 0) or np.any(self.budgets <= 0):
            raise ValueError("costs and budgets must be positive")

    @property
    def n_streams(self) -> int:
        return self.weights.shape[1]


@dataclass
class PaeSolution:
    n_bar: np.ndarray
    achieved_rate: float
    kkt_residual: float
    iterations: int = 0
    degenerate: bool = False
    degenerate_groups: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_bar": self.n_bar.tolist(),
            "achieved_rate": self.achieved_rate,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "degenerate": self.degenerate,
            "degenerate_groups": self.degenerate_groups,
            "trace": self.trace,
        }


def pae_rate(n_bar, prob: PaeProblem) -> float:
    """``min_i gap2_i / sum_s w_is / n_s``; insensitive designs count as ``+inf``."""
    n_bar = np.asarray(n_bar, dtype=float).ravel()
    if n_bar.size != prob.n_streams or np.any(n_bar <= 0):
        raise ValueError("rates must be positive, one per stream")
    denom = prob.weights @ (1.0 / n_bar)
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = np.where(denom > 0, prob.gap2 / np.where(denom > 0, denom, 1.0), np.inf)
    return float(rates.min()) if rates.size else float("inf")


# -- generic minimax solver ---------------------------------------------------


def _closed_form(lam_a: np.ndarray, groups, costs, budgets) -> np.ndarray:
    """Minimizer of ``sum_s A_s / x_s`` over the budget set (dual inner step)."""
    x = np.empty(costs.size)
    for g, u in zip(groups, budgets):
        root = np.sqrt(np.maximum(lam_a[g], 0.0) * costs[g])
        total = root.sum()
        if total > 0:
            x[g] = u * root / (costs[g] * total)
        else:
            x[g] = u / (len(g) * costs[g])
    return x


def _dual_bound(lam, a, e, groups, costs, budgets) -> float:
    lam_a = lam @ a
    value = float(lam @ e)
    for g, u in zip(groups, budgets):
        value += np.sqrt(np.maximum(lam_a[g], 0.0) * costs[g]).sum() ** 2 / u
    return value


def _objective(x, a, e) -> np.ndarray:
    return e + a @ (1.0 / x)


def minimax_allocation(a, e, groups, costs, budgets, tol: float = 1e-8, max_iter: int = 10_000):
    """Minimize ``max_i e_i + sum_s a_is / x_s`` over per-group budget simplices.

    Every stream must be used by some row (``a[:, s].sum() > 0``). Returns
    ``(x, objective, relative_gap, newton_steps, trace)``.
    """
    a = np.asarray(a, dtype=float)
    e = np.asarray(e, dtype=float)
    costs = np.asarray(costs, dtype=float)
    budgets = np.asarray(budgets, dtype=float)
    # work with budget shares y_s = c_s x_s / U_j, which live on unit simplices
    share_scale = np.empty(costs.size)
    for g, u in zip(groups, budgets):
        share_scale[g] = u / costs[g]
    a_unit = a / share_scale
    y, obj, gap, steps, trace = _minimax_shares(a_unit, e, groups, tol, max_iter)
    return y * share_scale, obj, gap, steps, trace


def _minimax_shares(a, e, groups, tol, max_iter):
    n_rows, n_vars = a.shape
    ones = np.ones(n_vars)
    unit = np.ones(len(groups))

    # one binding row: the dual closed form is optimal whenever that row stays the max;
    # rows that bind at the uniform split are tried first
    order = np.argsort(-_objective(_closed_form(ones, groups, ones, unit), a, e), kind="stable")
    best_gap, best_y, best_obj = np.inf, None, np.inf
    for k in order:
        y = _closed_form(a[k], groups, ones, unit)
        if np.any(y <= 0):
            continue
        vals = _objective(y, a, e)
        obj = vals.max()
        gap = (obj - vals[k]) / obj if obj > 0 else 0.0
        if gap < best_gap:
            best_gap, best_y, best_obj = gap, y, obj
        if gap <= tol:
            return y, float(obj), float(max(gap, 0.0)), 0, [{"shortcut_row": int(k), "gap": float(gap)}]

    # Lifted form: each term a_is / y_s gets its own variable v bounded by the
    # hyperbolic constraint v * y_s >= a_is. Its log barrier is self-concordant,
    # which keeps damped Newton phases short; the plain barrier on a / y is not.
    y = _closed_form(ones, groups, ones, unit)
    scale = _objective(y, a, e).max()
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    a_s, e_s = a / scale, e / scale
    row_of, col_of = np.nonzero(a_s)
    coef = a_s[row_of, col_of]
    n_terms = coef.size
    n_all = n_vars + n_terms + 1
    v_idx = n_vars + np.arange(n_terms)
    z_idx = n_all - 1

    n_eq = len(groups)
    kkt = np.zeros((n_all + n_eq, n_all + n_eq))
    for j, g in enumerate(groups):
        kkt[n_all + j, g] = 1.0
        kkt[g, n_all + j] = 1.0
    row_grad = np.zeros((n_rows, n_all))
    row_grad[:, z_idx] = 1.0
    row_grad[row_of, v_idx] = -1.0

    def slacks(yv, vv, zv):
        return zv - e_s - np.bincount(row_of, weights=vv, minlength=n_rows), vv * yv[col_of] - coef

    def barrier(yv, vv, zv):
        r, q = slacks(yv, vv, zv)
        if np.any(yv <= 0) or np.any(r <= 0) or np.any(q <= 0):
            return np.inf
        return t * zv - np.log(r).sum() - np.log(q).sum()

    v = 1.5 * coef / y[col_of]
    z = (e_s + np.bincount(row_of, weights=v, minlength=n_rows)).max() * 1.1 + 1e-3
    t = (n_rows + n_terms) / z
    steps = 0
    trace = []
    lam = np.full(n_rows, 1.0 / n_rows)
    stalled = False

    while steps < max_iter and not stalled:
        for _ in range(500):
            r, q = slacks(y, v, z)
            w, p = 1.0 / r, 1.0 / q
            grad = -(row_grad.T @ w)
            grad[z_idx] += t
            grad[:n_vars] -= np.bincount(col_of, weights=p * v, minlength=n_vars)
            grad[v_idx] -= p * y[col_of]
            hess = (row_grad * (w**2)[:, None]).T @ row_grad
            p2 = p**2
            hess[v_idx, v_idx] += p2 * y[col_of] ** 2
            np.add.at(hess, (col_of, col_of), p2 * v**2)
            cross = p2 * y[col_of] * v - p
            np.add.at(hess, (v_idx, col_of), cross)
            np.add.at(hess, (col_of, v_idx), cross)
            kkt[:n_all, :n_all] = hess
            # symmetric diagonal equilibration keeps the solve accurate near the boundary
            d = np.ones(n_all + n_eq)
            d[:n_all] = 1.0 / np.sqrt(np.diag(hess))
            rhs = d * np.concatenate([-grad, np.zeros(n_eq)])
            scaled = kkt * d[:, None] * d[None, :]
            try:
                step_dir = d * np.linalg.solve(scaled, rhs)
            except np.linalg.LinAlgError:
                step_dir = d * np.linalg.lstsq(scaled, rhs, rcond=None)[0]
            dx = step_dir[:n_all]
            decrement = -(grad @ dx)
            steps += 1
            if not np.isfinite(decrement) or decrement / 2.0 <= CENTERING_TOL:
                break
            phi0 = barrier(y, v, z)
            step = 1.0
            while step > 1e-14:
                yn, vn, zn = y + step * dx[:n_vars], v + step * dx[v_idx], z + step * dx[z_idx]
                if barrier(yn, vn, zn) <= phi0 - 0.25 * step * decrement:
                    break
                step *= 0.5
            else:
                stalled = True
                break
            y, v, z = yn, vn, zn
            if steps >= max_iter:
                break
        r, _ = slacks(y, v, z)
        lam = (1.0 / r) / (1.0 / r).sum()
        obj = _objective(y, a_s, e_s).max()
        bound = _dual_bound(lam, a_s, e_s, groups, ones, unit)
        gap = (obj - bound) / obj if obj > 0 else 0.0
        trace.append({"t": t, "objective": float(obj * scale), "gap": float(gap), "steps": steps})
        if gap <= tol:
            break
        t *= BARRIER_GROWTH

    # the dual closed form at the final multipliers is sometimes sharper
    obj = _objective(y, a_s, e_s).max()
    y_dual = _closed_form(lam @ a_s, groups, ones, unit)
    if np.all(y_dual > 0):
        obj_dual = _objective(y_dual, a_s, e_s).max()
        if obj_dual < obj:
            y, obj = y_dual, obj_dual
    bound = _dual_bound(lam, a_s, e_s, groups, ones, unit)
    gap = max((obj - bound) / obj, 0.0) if obj > 0 else 0.0
    if best_y is not None and best_gap < gap:
        return best_y, float(best_obj), float(max(best_gap, 0.0)), steps, trace
    for g in groups:
        y[g] /= y[g].sum()
    return y, float(obj * scale), float(gap), steps, trace


def solve_input_allocation(prob: PaeProblem, tol: float = 1e-8, max_iter: int = 10_000) -> PaeSolution:
    """Rates ``n_bar`` maximizing the PAE rate under the partition budgets.

    Singleton partitions spend their whole budget on their stream. A
    multi-stream partition containing a stream no design is sensitive to
    falls back to an equal cost-weighted split and is flagged.
    """
    n_bar = np.empty(prob.n_streams)
    free_groups, free_budgets = [], []
    degenerate_groups = []
    # designs with zero gap but some sensitivity pin the rate at zero and cannot be helped
    sensitive = prob.weights.sum(axis=1) > 0
    active_rows = sensitive & (prob.gap2 > 0)
    for j, (g, u) in enumerate(zip(prob.groups, prob.budgets)):
        if len(g) == 1:
            n_bar[g[0]] = u / prob.costs[g[0]]
            continue
        used = prob.weights[np.ix_(active_rows, g)].sum(axis=0) > 0
        if not np.all(used):
            n_bar[g] = u / (len(g) * prob.costs[g])
            degenerate_groups.append(j)
            continue
        free_groups.append(g)
        free_budgets.append(u)

    iterations, residual, trace = 0, 0.0, []
    if free_groups:
        free = [s for g in free_groups for s in g]
        fixed = [s for s in range(prob.n_streams) if s not in set(free)]
        rows = np.flatnonzero(active_rows)
        a = prob.weights[np.ix_(rows, free)] / prob.gap2[rows, None]
        e = prob.weights[np.ix_(rows, fixed)] @ (1.0 / n_bar[fixed]) / prob.gap2[rows] if fixed else np.zeros(rows.size)
        local = {s: k for k, s in enumerate(free)}
        groups = [[local[s] for s in g] for g in free_groups]
        x, _, residual, iterations, trace = minimax_allocation(
            a, e, groups, prob.costs[free], np.asarray(free_budgets), tol=tol, max_iter=max_iter
        )
        n_bar[free] = x

    return PaeSolution(
        n_bar=n_bar,
        achieved_rate=pae_rate(n_bar, prob),
        kkt_residual=float(residual),
        iterations=iterations,
        degenerate=bool(degenerate_groups),
        degenerate_groups=degenerate_groups,
        trace=trace,
    )


def pae_problem_from_estimates(means, g, best: int, groups, costs, budgets) -> PaeProblem:
    """Plug-in problem: squared gaps from ``means`` and weights from ``g``."""
    means = np.asarray(means, dtype=float)
    rows = [i for i in range(means.size) if i != best]
    return PaeProblem(
        gap2=(means[best] - means[rows]) ** 2,
        weights=np.asarray(g, dtype=float)[rows],
        groups=groups,
        costs=costs,
        budgets=budgets,
    )


# -- simulation balance diagnostics -------------------------------------------


@dataclass
class BalanceResiduals:
    rates: np.ndarray
    modified_rates: np.ndarray
    rate_gap: float
    rate_gap_rel: float
    global_defect: float
    global_defect_rel: float
    modified_gap: float
    modified_gap_rel: float


def _spread(values: np.ndarray) -> tuple[float, float]:
    finite = values[np.isfinite(values)]
    if finite.size < 2:
        return 0.0, 0.0
    hi, lo = finite.max(), finite.min()
    return float(hi - lo), float((hi - lo) / hi) if hi > 0 else 0.0


def pcs_balance_residuals(m_bar, n_bar, gap2, g, sigma2, costs, best: int) -> BalanceResiduals:
    """Residuals of the rate-balance and global-balance optimality conditions.

    Args:
        m_bar: per-design simulation rates, shape ``(K,)``.
        n_bar: per-stream input rates, shape ``(S,)``.
        gap2: squared gaps to the best design, shape ``(K,)`` (entry ``best`` unused).
        g: input-uncertainty quadratic forms, shape ``(K, S)``.
        sigma2: output variances, shape ``(K,)``.
        costs: per-design simulation costs ``d_i``.
        best: index of the best design.
    """
    m_bar = np.asarray(m_bar, dtype=float)
    n_bar = np.asarray(n_bar, dtype=float)
    if np.any(m_bar <= 0) or np.any(n_bar <= 0):
        raise ValueError("rates must be positive")
    gap2 = np.asarray(gap2, dtype=float)
    g = np.asarray(g, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    costs = np.asarray(costs, dtype=float)
    others = np.array([i for i in range(m_bar.size) if i != best], dtype=int)

    input_term = 2.0 * g[others] @ (1.0 / n_bar)
    own = sigma2[others] / m_bar[others]
    rates = gap2[others] / (input_term + own + sigma2[best] / m_bar[best])
    modified = gap2[others] / (input_term + own)
    rate_gap, rate_rel = _spread(rates)
    mod_gap, mod_rel = _spread(modified)

    rhs = sigma2[best] / costs[best] * np.sum(costs[others] * m_bar[others] ** 2 / sigma2[others])
    defect = abs(m_bar[best] ** 2 - rhs)
    return BalanceResiduals(
        rates=rates,
        modified_rates=modified,
        rate_gap=rate_gap,
        rate_gap_rel=rate_rel,
        global_defect=float(defect),
        global_defect_rel=float(defect / m_bar[best] ** 2),
        modified_gap=mod_gap,
        modified_gap_rel=mod_rel,
    )
