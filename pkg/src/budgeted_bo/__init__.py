"""Budgeted Bayesian optimization: cost-aware acquisitions, one-shot lookahead trees and a BO harness."""

from .acquisition import BudgetState, ClosedFormAcquisition, ei, ei_puc, ei_puc_cc, q1
from .gp_core import GpModel, KernelParams, PriorConfig, fit_map, posterior
from .multistep_tree import TreeLayout, TreeVariables, evaluate_tree
from .problems import ProblemSpec, make_synthetic
from .surrogate import Dataset, Observation, SurrogatePair, refit

__all__ = [
    "BudgetState", "ClosedFormAcquisition", "Dataset", "GpModel", "KernelParams", "Observation",
    "PriorConfig", "ProblemSpec", "SurrogatePair", "TreeLayout", "TreeVariables", "ei", "ei_puc",
    "ei_puc_cc", "evaluate_tree", "fit_map", "make_synthetic", "posterior", "q1", "refit",
]
