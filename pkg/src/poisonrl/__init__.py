"""Reward poisoning attacks against no-regret tabular RL learners."""

from .confidence import ConfidenceSet, ObservationCounts, build_confidence_set, contains
from .mdp import TabularMdp, load_mdp, policy_eval, random_mdp, value_iteration
from .robust import delta_hat, robust_policy_eval
from .twophase import TwoPhaseAttacker, TwoPhaseConfig
from .whitebox import AttackConfig, Perturbation, delta_star

__all__ = [
    "AttackConfig",
    "ConfidenceSet",
    "ObservationCounts",
    "Perturbation",
    "TabularMdp",
    "TwoPhaseAttacker",
    "TwoPhaseConfig",
    "build_confidence_set",
    "contains",
    "delta_hat",
    "delta_star",
    "load_mdp",
    "policy_eval",
    "random_mdp",
    "robust_policy_eval",
    "value_iteration",
]

__version__ = "0.1.0"
