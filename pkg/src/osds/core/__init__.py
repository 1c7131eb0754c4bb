from .autodiff import (
    NonFiniteError,
    divergence,
    grad,
    hutchinson_divergence,
    jvp,
    value_and_grad,
    vjp_divergence,
)
from .params import ParameterVector
from .rng import DTYPE, RngState, gaussian, rademacher

__all__ = [
    "DTYPE",
    "NonFiniteError",
    "ParameterVector",
    "RngState",
    "divergence",
    "gaussian",
    "grad",
    "hutchinson_divergence",
    "jvp",
    "rademacher",
    "value_and_grad",
    "vjp_divergence",
]
