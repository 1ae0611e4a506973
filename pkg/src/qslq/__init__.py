"""Linear-quadratic control of systems driven by Fermion Brownian motion, on a discrete Clifford model."""

from .clifford import CliffordElement, CliffordSpace, SuperOperator
from .lq import ProblemSpec, open_loop_qp, simulate_feedback, value
from .qsde import CoefficientPath, TimeGrid, solve_backward, solve_forward
from .riccati import InversionPolicy, integrate_riccati

__version__ = "0.1.0"

__all__ = [
    "CliffordElement",
    "CliffordSpace",
    "CoefficientPath",
    "InversionPolicy",
    "ProblemSpec",
    "SuperOperator",
    "TimeGrid",
    "integrate_riccati",
    "open_loop_qp",
    "simulate_feedback",
    "solve_backward",
    "solve_forward",
    "value",
]
