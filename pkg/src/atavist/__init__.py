"""Multitype branching processes where reproduction follows a randomly chosen ancestor's type."""

from .chain import BiasedChain, consolidation_bound, coupled_run, many_to_one
from .lifted import BudgetError, LiftedOperator, converge_radius, eigen_law, lift, radius
from .model import (InitialMemory, MemoryLaw, ModelError, ModelSpec, OffspringKernel, TypeSpace,
                    example_model, load_model, model_from_dict, validate)
from .population import estimate_growth, exact_mean, simulate, simulate_runs
from .spectral import ConvergenceError, harnack_enclosure, normalized, perron_frobenius

__version__ = "0.1.0"

__all__ = [
    "BiasedChain", "BudgetError", "ConvergenceError", "InitialMemory", "LiftedOperator", "MemoryLaw",
    "ModelError", "ModelSpec", "OffspringKernel", "TypeSpace", "consolidation_bound", "converge_radius",
    "coupled_run", "eigen_law", "estimate_growth", "exact_mean", "example_model", "harnack_enclosure",
    "lift", "load_model", "many_to_one", "model_from_dict", "normalized", "perron_frobenius", "radius",
    "simulate", "simulate_runs", "validate",
]
