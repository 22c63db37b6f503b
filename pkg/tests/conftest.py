import numpy as np
import pytest

from streamsel import Exponential, QuadraticModel, StreamLayout


def quadratic_setup(theta=(2.0, 1.0), offsets=range(5), groups=None, costs=None, budgets=None, given=None,
                    sim_budget=30, n0=20, m0=10):
    """Quadratic model plus layout; by default every stream is a given stream with batch 10."""
    theta = list(theta)
    s = len(theta)
    model = QuadraticModel.from_offsets(theta, list(offsets))
    layout = StreamLayout(
        families=[Exponential() for _ in range(s)],
        theta_true=theta,
        groups=groups if groups is not None else [[k] for k in range(s)],
        stream_costs=costs if costs is not None else [1.0] * s,
        group_budgets=budgets if budgets is not None else [10.0] * s,
        sim_costs=np.ones(model.n_designs),
        sim_budget=sim_budget,
        n0=n0,
        m0=m0,
        given=given if given is not None else [True] * s,
    )
    return model, layout


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
