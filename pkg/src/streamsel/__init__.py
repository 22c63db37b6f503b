"""Fixed-budget ranking and selection with streaming input data.

The package allocates several input-data-collection budgets and one
simulation budget simultaneously, stage by stage, and selects the design
with the largest expected performance.
"""

from streamsel.input_models import (
    Exponential,
    InvalidParameter,
    NormalMoment,
    ParametricFamily,
    Poisson,
    make_family,
)
from streamsel.models import InventoryModel, QuadraticModel, SimulationModel
from streamsel.estimators import EstimatorBank
from streamsel.rate_optimizer import (
    PaeProblem,
    PaeSolution,
    pae_rate,
    pcs_balance_residuals,
    solve_input_allocation,
)
from streamsel.engine import (
    AllocationState,
    StageHistory,
    StreamLayout,
    run_equal,
    run_jba,
    run_sba,
)

__version__ = "0.1.0"

__all__ = [
    "AllocationState",
    "EstimatorBank",
    "Exponential",
    "InvalidParameter",
    "InventoryModel",
    "NormalMoment",
    "PaeProblem",
    "PaeSolution",
    "ParametricFamily",
    "Poisson",
    "QuadraticModel",
    "SimulationModel",
    "StageHistory",
    "StreamLayout",
    "make_family",
    "pae_rate",
    "pcs_balance_residuals",
    "run_equal",
    "run_jba",
    "run_sba",
    "solve_input_allocation",
]
