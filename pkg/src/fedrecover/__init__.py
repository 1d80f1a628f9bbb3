"""Federated composite optimization and statistical recovery simulator."""

from fedrecover.core import (
    AlgoHyperparams,
    DomainSpec,
    Regularizer,
    weight_alpha,
    weight_sum,
)

__version__ = "0.1.0"

__all__ = [
    "AlgoHyperparams",
    "DomainSpec",
    "Regularizer",
    "weight_alpha",
    "weight_sum",
    "__version__",
]
