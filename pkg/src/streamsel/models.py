"""Simulation models: scenario in, scalar performance out.

A scenario is a list with one array per input stream; array ``s`` has shape
``(m, draws_per_stream)`` and holds the raw input realizations consumed by
``m`` independent replications. ``evaluate`` returns the ``m`` outputs.
All models follow the "larger is better" convention.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from streamsel.input_models import InvalidParameter


class SimulationModel:
    """Contract shared by all simulation models."""

    kind: str = ""
    draws_per_stream: int = 1

    @property
    def n_designs(self) -> int:
        raise NotImplementedError

    def evaluate(self, design: int, scenario, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def check_design(self, design: int) -> int:
        if not 0 <= design < self.n_designs:
            raise IndexError(f"design index {design} out of range [0, {self.n_designs})")
        return int(design)

    def describe(self) -> dict:
        raise NotImplementedError

    def digest(self) -> str:
        payload = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def _stacked(scenario, n_streams: int) -> list[np.ndarray]:
    if len(scenario) != n_streams:
        raise ValueError(f"scenario has {len(scenario)} streams, model expects {n_streams}")
    return [np.atleast_2d(np.asarray(a, dtype=float)) for a in scenario]


class QuadraticModel(SimulationModel):
    """Output ``-(x_i - sum_s zeta_s)**2 + eps`` with exponential inputs.

    ``eps`` is standard-normal simulation noise scaled by ``noise_sd`` and
    is drawn from the ``rng`` passed to ``evaluate``.
    """

    kind = "quadratic"
    draws_per_stream = 1

    def __init__(self, design_points, n_streams: int, noise_sd: float = 1.0):
        self.design_points = np.asarray(design_points, dtype=float)
        if self.design_points.ndim != 1 or self.design_points.size == 0:
            raise ValueError("design_points must be a nonempty 1-D sequence")
        self.n_streams = int(n_streams)
        self.noise_sd = float(noise_sd)

    @classmethod
    def from_offsets(cls, theta_true, offsets, noise_sd: float = 1.0) -> "QuadraticModel":
        """Designs ``x_i = sum(theta_true) + offset_i``."""
        theta_true = np.asarray(theta_true, dtype=float).ravel()
        x_star = float(theta_true.sum())
        return cls(x_star + np.asarray(offsets, dtype=float), len(theta_true), noise_sd)

    @property
    def n_designs(self):
        return self.design_points.size

    def evaluate(self, design, scenario, rng, noise=None):
        design = self.check_design(design)
        draws = _stacked(scenario, self.n_streams)
        total = sum(a[:, 0] for a in draws)
        if noise is None:
            noise = rng.standard_normal(total.shape[0]) * self.noise_sd
        return -((self.design_points[design] - total) ** 2) + noise

    def _theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.n_streams or np.any(theta <= 0):
            raise InvalidParameter(f"quadratic model needs {self.n_streams} positive means, got {theta.tolist()}")
        return theta

    def true_mean(self, design, theta) -> float:
        design = self.check_design(design)
        theta = self._theta(theta)
        gap = self.design_points[design] - theta.sum()
        return float(-(gap**2 + np.sum(theta**2)))

    def true_gradient(self, design, theta) -> np.ndarray:
        """Derivative of ``true_mean`` with respect to each stream mean."""
        design = self.check_design(design)
        theta = self._theta(theta)
        return 2.0 * (self.design_points[design] - theta.sum()) - 2.0 * theta

    def true_variance(self, design, theta) -> float:
        """Output variance, from the cumulants of a sum of exponentials."""
        design = self.check_design(design)
        theta = self._theta(theta)
        # W = sum(zeta) - x; exponential cumulants are (n-1)! theta**n
        k1 = theta.sum() - self.design_points[design]
        k2 = np.sum(theta**2)
        k3 = 2.0 * np.sum(theta**3)
        k4 = 6.0 * np.sum(theta**4)
        m2 = k2 + k1**2
        m4 = k4 + 4.0 * k3 * k1 + 3.0 * k2**2 + 6.0 * k2 * k1**2 + k1**4
        return float(m4 - m2**2 + self.noise_sd**2)

    def true_best(self, theta) -> int:
        means = [self.true_mean(i, theta) for i in range(self.n_designs)]
        return int(np.argmax(means))

    def true_stats(self, theta) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact ``(means, variances, gradients)`` of every design."""
        theta = np.concatenate([np.ravel(t) for t in theta]).astype(float)
        k = range(self.n_designs)
        return (
            np.array([self.true_mean(i, theta) for i in k]),
            np.array([self.true_variance(i, theta) for i in k]),
            np.array([self.true_gradient(i, theta) for i in k]),
        )

    def describe(self):
        return {
            "kind": self.kind,
            "design_points": self.design_points.tolist(),
            "n_streams": self.n_streams,
            "noise_sd": self.noise_sd,
        }


class InventoryModel(SimulationModel):
    """Capacitated order-up-to inventory system with multi-channel demand.

    Starting from ``I_0 = level`` and ``R_0 = 0``, each period applies
    ``I_v = I_{v-1} + R_{v-1} - D_v`` and ``R_v = min(R_max, (level - I_v)^+)``
    and costs ``c_H (R_{v-1} + I_v^+) + c_B I_v^-``, where ``D_v`` is the total
    demand over all channels. The output is the negated total cost.
    """

    kind = "inventory"

    def __init__(
        self,
        levels,
        n_streams: int,
        periods: int = 6,
        holding_cost: float = 0.5,
        backlog_cost: float = 1.0,
        max_production: float = float("inf"),
    ):
        self.levels = np.asarray(levels, dtype=float)
        if self.levels.ndim != 1 or self.levels.size == 0:
            raise ValueError("levels must be a nonempty 1-D sequence")
        self.n_streams = int(n_streams)
        self.periods = int(periods)
        self.holding_cost = float(holding_cost)
        self.backlog_cost = float(backlog_cost)
        self.max_production = float(max_production)

    @property
    def draws_per_stream(self):
        return self.periods

    @property
    def n_designs(self):
        return self.levels.size

    def evaluate(self, design, scenario, rng=None):
        design = self.check_design(design)
        draws = _stacked(scenario, self.n_streams)
        demand = sum(draws)
        if demand.shape[1] != self.periods:
            raise ValueError(f"scenario supplies {demand.shape[1]} periods, model needs {self.periods}")
        return -self.trace(self.levels[design], demand)["cost"].sum(axis=1)

    def trace(self, level: float, demand: np.ndarray) -> dict:
        """Run the recursion for a ``(m, periods)`` total-demand array."""
        m = demand.shape[0]
        inventory = np.empty((m, self.periods))
        production = np.empty((m, self.periods))
        cost = np.empty((m, self.periods))
        prev_inv = np.full(m, float(level))
        prev_prod = np.zeros(m)
        for v in range(self.periods):
            inv = prev_inv + prev_prod - demand[:, v]
            cost[:, v] = self.holding_cost * (prev_prod + np.maximum(inv, 0.0)) + self.backlog_cost * np.maximum(-inv, 0.0)
            prod = np.minimum(self.max_production, np.maximum(level - inv, 0.0))
            inventory[:, v] = inv
            production[:, v] = prod
            prev_inv, prev_prod = inv, prod
        return {"inventory": inventory, "production": production, "cost": cost}

    def _theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.n_streams or np.any(theta <= 0):
            raise InvalidParameter(f"inventory model needs {self.n_streams} positive Poisson means, got {theta.tolist()}")
        return theta

    def oracle(self, theta, n_oracle: int, seed: int = 0, chunk: int = 200_000) -> tuple[np.ndarray, np.ndarray]:
        """Monte Carlo means and standard errors of every design under ``theta``.

        All designs share the same demand paths, so their differences are
        estimated with common random numbers.
        """
        theta = self._theta(theta)
        if n_oracle < 10_000:
            raise ValueError("n_oracle must be at least 10**4")
        rng = np.random.default_rng(seed)
        total = np.zeros(self.n_designs)
        total_sq = np.zeros(self.n_designs)
        done = 0
        while done < n_oracle:
            m = min(chunk, n_oracle - done)
            demand = rng.poisson(theta.sum(), size=(m, self.periods)).astype(float)
            for i, level in enumerate(self.levels):
                out = -self.trace(level, demand)["cost"].sum(axis=1)
                total[i] += out.sum()
                total_sq[i] += np.dot(out, out)
            done += m
        mean = total / n_oracle
        var = (total_sq - n_oracle * mean**2) / (n_oracle - 1)
        return mean, np.sqrt(np.maximum(var, 0.0) / n_oracle)

    def true_mean(self, design, theta, n_oracle: int = 100_000, seed: int = 0) -> tuple[float, float]:
        design = self.check_design(design)
        mean, se = self.oracle(theta, n_oracle, seed)
        return float(mean[design]), float(se[design])

    def describe(self):
        return {
            "kind": self.kind,
            "levels": self.levels.tolist(),
            "n_streams": self.n_streams,
            "periods": self.periods,
            "holding_cost": self.holding_cost,
            "backlog_cost": self.backlog_cost,
            "max_production": self.max_production if np.isfinite(self.max_production) else "inf",
        }
