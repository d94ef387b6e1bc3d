"""Multiscale simulation of spatio-temporal population dynamics.

Model hierarchy: an agent-based model (continuous motion + stochastic status
adoption), its Galerkin projection onto subpopulation counts (stochastic
metapopulation model, simulated exactly by SSA), and a piecewise-deterministic
approximation (ODE adoption flow + stochastic spatial jumps), together with an
adaptive SEIRD epidemic layer and batch experiment tooling.
"""

from .core import (
    AdoptionRuleSet,
    CoreSetPartition,
    DoubleWell,
    FirstOrderRule,
    IntervalPartition,
    ModelError,
    PopulationState,
    Potential,
    RngStream,
    SamplingBox,
    SecondOrderRule,
    StatusSpace,
    SystemState,
    distance_indicator,
    multinomial_log_weight,
    multinomial_weight,
    replica_streams,
)

__all__ = [
    "AdoptionRuleSet",
    "CoreSetPartition",
    "DoubleWell",
    "FirstOrderRule",
    "IntervalPartition",
    "ModelError",
    "PopulationState",
    "Potential",
    "RngStream",
    "SamplingBox",
    "SecondOrderRule",
    "StatusSpace",
    "SystemState",
    "distance_indicator",
    "multinomial_log_weight",
    "multinomial_weight",
    "replica_streams",
]

__version__ = "0.1.0"
