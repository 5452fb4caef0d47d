"""Attack built from a fixed prior observation log, with no exploration phase."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .confidence import ObservationCounts, build_confidence_set
from .mdp import TabularMdp
from .robust import delta_hat
from .twophase import error_terms
from .whitebox import AttackConfig, Perturbation, delta_star, neighbor_occupancies


@dataclass(frozen=True)
class PriorDataReport:
    e_q: float
    e_mu: float
    e_table: np.ndarray | None
    delta: Perturbation
    bound: float | None
    vacuous: bool = False
    used_true_range: bool = False

    def to_dict(self) -> dict:
        return {
            "e_q": self.e_q,
            "e_mu": self.e_mu,
            "e_table": None if self.e_table is None else [[_json_float(x) for x in row] for row in self.e_table],
            "delta": self.delta.delta.tolist(),
            "bound": None if self.bound is None else _json_float(self.bound),
            "vacuous": self.vacuous,
            "used_true_range": self.used_true_range,
        }


def _json_float(x: float):
    return float(x) if math.isfinite(x) else "inf"


def generative_counts(mdp: TabularMdp, n_per_pair: int, rng: np.random.Generator) -> ObservationCounts:
    """Counts from ``n_per_pair`` independent samples of every (s, a).

    The reward sum of ``n`` Gaussian samples is drawn directly from its exact
    distribution ``N(n R, n sigma^2)``.
    """
    S, A = mdp.num_states, mdp.num_actions
    n = np.full((S, A), float(n_per_pair))
    reward_sum = n * mdp.rewards + mdp.noise_sigma * np.sqrt(n) * rng.standard_normal((S, A))
    next_counts = np.empty((S, A, S))
    for s in range(S):
        for a in range(A):
            next_counts[s, a] = rng.multinomial(n_per_pair, mdp.transitions[s, a])
    return ObservationCounts(S, A, n, reward_sum, next_counts)


def error_table(mdp: TabularMdp, target, eps: float, e_q: float, e_mu: float) -> np.ndarray:
    """``2 e_Q + eps/[mu - e_mu]_+ - eps/mu`` per off-target pair (0 on target, inf if vacuous)."""
    mu = neighbor_occupancies(mdp, target)
    S, A = mu.shape
    e = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            if a == target[s]:
                continue
            shrunk = max(mu[s, a] - e_mu, 0.0)
            e[s, a] = math.inf if shrunk == 0 else 2 * e_q + eps / shrunk - eps / mu[s, a]
    return e


def attack_from_prior(
    counts: ObservationCounts,
    cfg: AttackConfig,
    sigma: float,
    gamma: float,
    initial_dist,
    num_learners: int = 1,
    failure_p: float = 0.1,
    mdp_true: TabularMdp | None = None,
    subopt: float | Callable[[int, float, float], float] | None = None,
    T: int | None = None,
) -> PriorDataReport:
    """Robust perturbation from ``counts`` plus, given the true MDP, its error table and cost bound.

    Without ``mdp_true`` the error scales use the confidence set's own
    reward range and no error table or bound is produced.
    """
    cs = build_confidence_set(counts, sigma, num_learners, failure_p, gamma, initial_dist)
    delta = delta_hat(cs, cfg)
    if mdp_true is None:
        terms = error_terms(cs)
        return PriorDataReport(terms.e_q, terms.e_mu, None, delta, None)
    r_range = float(mdp_true.rewards.max() - mdp_true.rewards.min())
    terms = error_terms(cs, r_range)
    e = error_table(mdp_true, cfg.target, cfg.eps, terms.e_q, terms.e_mu)
    vacuous = bool(np.any(np.isinf(e)))
    bound = None
    if subopt is not None:
        if T is None:
            raise ValueError("T is required to evaluate the cost bound")
        count = subopt(T, cfg.eps, failure_p / num_learners) if callable(subopt) else subopt
        star = delta_star(mdp_true, cfg).delta
        bound = (float(np.max(np.abs(star + e))) + cfg.lam) * float(count) / T
    return PriorDataReport(terms.e_q, terms.e_mu, e, delta, bound, vacuous, True)


class FrozenAttacker:
    """Applies a fixed perturbation to every reward; used for white-box and prior-data runs."""

    def __init__(self, delta: Perturbation, name: str = "frozen"):
        self.delta = delta
        self.name = name
        self._rows = delta.delta.tolist()

    def begin_learner(self, l, rng):
        pass

    def perturb(self, l, t, s, a, r, s_next):
        return r - self._rows[s][a]

    def end_learner(self, l):
        pass
