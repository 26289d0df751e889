"""Dense float64 math: special functions, tape autodiff and optimizers."""

from .autodiff import Graph, Var, backward, stop_gradient
from .optim import OptimizerState, adam, optimizer_step, sgd_momentum
from .special import digamma, lgamma, trigamma

__all__ = [
    "Graph",
    "Var",
    "backward",
    "stop_gradient",
    "OptimizerState",
    "adam",
    "sgd_momentum",
    "optimizer_step",
    "digamma",
    "lgamma",
    "trigamma",
]
