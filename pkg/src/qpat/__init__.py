"""Quantitative photoacoustic tomography on the unit square.

Transport forward model (streamline-diffusion finite elements with discrete
ordinates), a circular-detector wave model, and two families of
reconstruction methods: gradient methods that solve the transport equation
in every step, and multilinear stochastic methods that do not.
"""

from .acoustic import DetectorGeometry, WaveOperator
from .experiment import ALGORITHMS, Scenario, build_phantom, run_scenario, simulate, solve
from .forward import ForwardModel
from .grid import build_angles, build_mesh
from .mull import MullConfig, PenaltyWeights, mull_projected_sgd, mull_proximal_sgd
from .optim_standard import (
    InverseProblem,
    OptimConfig,
    loping_landweber_kaczmarz,
    projected_landweber,
    proximal_gradient,
    proximal_stochastic_gradient,
)
from .rte import ParameterPair, TransportDiscretization

__all__ = [
    "ALGORITHMS",
    "DetectorGeometry",
    "ForwardModel",
    "InverseProblem",
    "MullConfig",
    "OptimConfig",
    "ParameterPair",
    "PenaltyWeights",
    "Scenario",
    "TransportDiscretization",
    "WaveOperator",
    "build_angles",
    "build_mesh",
    "build_phantom",
    "loping_landweber_kaczmarz",
    "mull_projected_sgd",
    "mull_proximal_sgd",
    "projected_landweber",
    "proximal_gradient",
    "proximal_stochastic_gradient",
    "run_scenario",
    "simulate",
    "solve",
]
