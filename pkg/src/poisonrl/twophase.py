"""Two-phase black-box reward poisoning.

Exploration learners receive fair-coin rewards so that they spread their
visits, while the attacker records the true rewards. After each exploration
learner the confidence set is rebuilt; once the stopping condition holds, a
robust perturbation is frozen and applied to every later learner.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .confidence import (
    ConfidenceSet,
    ObservationCounts,
    UnvisitedPairsError,
    build_confidence_set,
    reward_radius_scale,
    transition_radius_scale,
)
from .mdp import ConvergenceError, TabularMdp, mu_min_and_g
from .robust import ZeroOccupancyError, delta_hat, mu_low_table
from .whitebox import AttackConfig, Perturbation, delta_star

C1 = 0.02
C2 = 1.34

EXPLORATION, ATTACK = "exploration", "attack"


@dataclass(frozen=True)
class TwoPhaseConfig:
    target: tuple[int, ...]
    eps: float
    lam: float
    m: float
    failure_p: float
    sigma: float
    gamma: float
    initial_dist: tuple[float, ...]
    num_learners: int

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(int(a) for a in self.target))
        object.__setattr__(self, "initial_dist", tuple(float(x) for x in self.initial_dist))
        if not self.m > 0:
            raise ValueError("m must be positive")
        if not 0 < self.failure_p < 1:
            raise ValueError("failure_p must lie in (0, 1)")
        if not self.eps > 0 or not self.lam > 0:
            raise ValueError("eps and lambda must be positive")
        if self.sigma < 0 or self.num_learners < 1:
            raise ValueError("sigma must be >= 0 and num_learners >= 1")
        if len(self.initial_dist) != len(self.target):
            raise ValueError("initial_dist and target disagree on the number of states")

    @property
    def num_states(self) -> int:
        return len(self.target)

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(self.target, self.eps, self.lam)

    @classmethod
    def for_mdp(cls, mdp: TabularMdp, target, eps, lam, m, failure_p, num_learners, sigma=None):
        """Attacker inputs that are taken as known: gamma, d0 and the noise level."""
        return cls(
            target,
            eps,
            lam,
            m,
            failure_p,
            mdp.noise_sigma if sigma is None else sigma,
            mdp.gamma,
            tuple(mdp.initial_dist),
            num_learners,
        )


@dataclass(frozen=True)
class ErrorTerms:
    r_hat_range: float
    e_q_hat: float
    e_mu: float
    e_q: float
    n_min: float


def error_terms(cs: ConfidenceSet, r_range: float | None = None) -> ErrorTerms:
    """Value and occupancy error scales of ``cs``.

    ``e_q_hat`` uses the reward range of the set itself; ``e_q`` uses
    ``r_range`` when given (the true range) and otherwise equals ``e_q_hat``.
    """
    g = cs.gamma
    root = math.sqrt(cs.n_min)
    rr = cs.r_hat_range
    e_q_hat = (2 * cs.u + 2 * g * rr * cs.w) / ((1 - g) ** 2 * root)
    e_q = e_q_hat if r_range is None else (2 * cs.u + 2 * g * r_range * cs.w) / ((1 - g) ** 2 * root)
    e_mu = 2 * g * cs.w / ((1 - g) * root)
    return ErrorTerms(rr, e_q_hat, e_mu, e_q, cs.n_min)


def exploration_reward(rng: np.random.Generator) -> float:
    return float(rng.integers(0, 2))


def stopping_lhs(cs: ConfidenceSet, cfg, mu_table: np.ndarray) -> np.ndarray:
    """Left side ``2 e_q_hat + eps/mu_low - eps/(mu_low + e_mu)`` per pair; NaN on target."""
    terms = error_terms(cs)
    S, A = mu_table.shape
    off = np.ones((S, A), dtype=bool)
    off[np.arange(S), list(cfg.target)] = False
    lhs = np.full((S, A), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = mu_table[off]
        lhs[off] = 2 * terms.e_q_hat + cfg.eps / mu - cfg.eps / (mu + terms.e_mu)
    return lhs


def stopping_check(cs: ConfidenceSet, cfg, mu_table: np.ndarray) -> bool:
    S, A = mu_table.shape
    off = np.ones((S, A), dtype=bool)
    off[np.arange(S), list(cfg.target)] = False
    if not np.all(mu_table[off] > 0):
        return False
    return bool(np.all(stopping_lhs(cs, cfg, mu_table)[off] <= cfg.m))


@dataclass
class Checkpoint:
    learner: int
    n_min: float
    lhs_max: float
    stopped: bool
    cs: ConfidenceSet | None = field(default=None, repr=False)
    note: str = ""


class TwoPhaseAttacker:
    name = "adaptive"

    def __init__(self, cfg: TwoPhaseConfig, num_actions: int):
        self.cfg = cfg
        S = cfg.num_states
        self.num_actions = num_actions
        self.counts = ObservationCounts(S, num_actions)
        self.phase = EXPLORATION
        self.k1 = 0
        self.cs: ConfidenceSet | None = None
        self.frozen_delta: Perturbation | None = None
        self.checkpoints: list[Checkpoint] = []
        self.learner_phase: dict[int, str] = {}
        self._mu_cache: dict[int, np.ndarray] = {}
        self._bits: list[int] = []
        self._rng: np.random.Generator | None = None
        self._delta_rows: list[list[float]] = []
        self._current = self.phase

    # simulator hooks

    def begin_learner(self, l: int, rng: np.random.Generator) -> None:
        self._rng = rng
        self._bits = []
        self.learner_phase[l] = self.phase
        self._current = self.phase

    def perturb(self, l: int, t: int, s: int, a: int, r: float, s_next: int) -> float:
        if self._current == ATTACK:
            return r - self._delta_rows[s][a]
        self.counts.update(s, a, r, s_next)
        if not self._bits:
            self._bits = self._rng.integers(0, 2, 4096).tolist()
        return float(self._bits.pop())

    def end_learner(self, l: int) -> None:
        if self._current != EXPLORATION:
            return
        self.k1 += 1
        self.refresh(l)

    # phase logic

    def mu_table(self, cs: ConfidenceSet) -> np.ndarray:
        key = self.counts.version
        if key not in self._mu_cache:
            self._mu_cache = {key: mu_low_table(cs, self.cfg.target)}
        return self._mu_cache[key]

    def refresh(self, l: int = -1) -> bool:
        """Rebuild the confidence set and switch phase if the stopping condition holds."""
        cfg = self.cfg
        try:
            cs = build_confidence_set(
                self.counts, cfg.sigma, cfg.num_learners, cfg.failure_p, cfg.gamma, cfg.initial_dist
            )
        except UnvisitedPairsError as exc:
            self.checkpoints.append(Checkpoint(l, self.counts.n_min, math.inf, False, None, str(exc)))
            return False
        self.cs = cs
        mu = self.mu_table(cs)
        stop = stopping_check(cs, cfg, mu)
        lhs = stopping_lhs(cs, cfg, mu)
        lhs_max = float(np.nanmax(lhs)) if np.any(np.isfinite(lhs)) else math.inf
        note = ""
        if stop:
            try:
                self.freeze(cs, mu)
            except (ZeroOccupancyError, ConvergenceError) as exc:
                stop, note = False, f"switch aborted: {exc}"
        self.checkpoints.append(Checkpoint(l, cs.n_min, lhs_max, stop, cs, note))
        return stop

    def freeze(self, cs: ConfidenceSet, mu_table: np.ndarray | None = None) -> Perturbation:
        """Fix the attack-phase perturbation from ``cs`` and switch to the attack phase."""
        self.frozen_delta = delta_hat(cs, self.cfg, mu_table)
        self.cs = cs
        self.phase = ATTACK
        self._delta_rows = self.frozen_delta.delta.tolist()
        return self.frozen_delta

    def snapshot(self) -> dict:
        return {
            "phase": self.phase,
            "k1": self.k1,
            "attack_started": self.phase == ATTACK,
            "frozen_delta": None if self.frozen_delta is None else self.frozen_delta.delta.tolist(),
            "checkpoints": [
                {"learner": c.learner, "n_min": c.n_min, "lhs_max": c.lhs_max, "stopped": c.stopped, "note": c.note}
                for c in self.checkpoints
            ],
        }

    def save_snapshot(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.snapshot(), indent=1, default=float) + "\n")


class ExplorationOnlyAttacker:
    """Replaces every reward with a fair coin flip and never attacks."""

    name = "explore"

    def __init__(self):
        self._bits: list[int] = []

    def begin_learner(self, l, rng):
        self._rng = rng
        self._bits = []

    def perturb(self, l, t, s, a, r, s_next):
        if not self._bits:
            self._bits = self._rng.integers(0, 2, 4096).tolist()
        return float(self._bits.pop())

    def end_learner(self, l):
        pass


# ---------------------------------------------------------------------------
# analysis utilities


@dataclass(frozen=True)
class TheoryBudget:
    n0: float
    k0: float
    n0_terms: tuple[float, float, float]
    alpha: float
    beta: float
    mu_min: float
    r_range: float
    u: float
    w: float
    c1: float = C1
    c2: float = C2


def n0_terms(u, w, r_range, m, eps, mu_min, gamma) -> tuple[float, float, float]:
    with np.errstate(divide="ignore"):
        t1 = (2 * u / r_range) ** 2 if r_range > 0 else math.inf
    t2 = ((8 * u + 16 * gamma * r_range * w) / ((1 - gamma) ** 2 * m)) ** 2
    t3 = ((2 * gamma * w / (1 - gamma)) * (6 * eps + m * mu_min) / (m * mu_min**2)) ** 2
    return t1, t2, t3


def k0_value(n0, alpha, beta, mu_min, S, A, p) -> float:
    log_b = math.log(1.0 / (8 * S * A * beta))
    return 8 * math.log(1.0 / p) + (4 * alpha**2 * n0 / mu_min**2) * (
        math.log(16 * S * A) + C2 * log_b
    ) / (C1 * log_b**2)


def theoretical_budget(mdp: TabularMdp, alpha: float, beta: float, cfg: TwoPhaseConfig) -> TheoryBudget:
    S, A = mdp.num_states, mdp.num_actions
    mu_min, _ = mu_min_and_g(mdp)
    if not alpha < mu_min / (2 * math.sqrt(2)):
        warnings.warn(f"alpha = {alpha} violates alpha < mu_min / (2 sqrt 2) = {mu_min / (2 * math.sqrt(2)):.4g}", RuntimeWarning, stacklevel=2)
    if not beta < 1.0 / (8 * S * A):
        warnings.warn(f"beta = {beta} violates beta < 1/(8SA) = {1 / (8 * S * A):.4g}", RuntimeWarning, stacklevel=2)
    u = reward_radius_scale(cfg.sigma, S, A, cfg.num_learners, cfg.failure_p)
    w = transition_radius_scale(S, A, cfg.num_learners, cfg.failure_p)
    r_range = float(mdp.rewards.max() - mdp.rewards.min())
    terms = n0_terms(u, w, r_range, cfg.m, cfg.eps, mu_min, cfg.gamma)
    n0 = max(terms)
    k0 = k0_value(n0, alpha, beta, mu_min, S, A, cfg.failure_p)
    return TheoryBudget(n0, k0, terms, alpha, beta, mu_min, r_range, u, w)


def _subopt(subopt, T, eps, delta) -> float:
    return float(subopt(T, eps, delta)) if callable(subopt) else float(subopt)


def attack_cost_bound(
    mdp: TabularMdp,
    cfg: TwoPhaseConfig,
    budget: TheoryBudget,
    subopt: float | Callable[[int, float, float], float],
    T: int,
    L: int,
) -> float:
    """Exploration cost share plus the attack-phase cost bound.

    ``subopt`` is either a count or a function ``(T, eps, delta) -> count``
    evaluated at ``delta = p / L``.
    """
    k0, sigma, p = budget.k0, cfg.sigma, cfg.failure_p
    if k0 > 0:
        noise = sigma * math.sqrt(2 * math.log(2 * k0 * T / p))
        first = (k0 / L) * (float(np.max(np.abs(mdp.rewards))) + noise + 1 + cfg.lam)
    else:
        first = 0.0
    star = delta_star(mdp, AttackConfig(cfg.target, cfg.eps)).sup_norm
    return first + (star + cfg.lam + cfg.m) * _subopt(subopt, T, cfg.eps, p / L) / T


def exploration_fixtures(mdp: TabularMdp, s: int, a: int, alpha: float):
    """Constant-1/2 reward MDP and the two variants that shift ``R(s, a)`` by ``+-alpha/g(s, a)``."""
    _, g = mu_min_and_g(mdp)
    if not g[s, a] > 0:
        raise ValueError(f"g({s}, {a}) = 0: pair unreachable under some policy")
    shift = alpha / g[s, a]
    if not 0 < alpha or shift > 0.5:
        raise ValueError(f"alpha / g(s, a) = {shift:.4g} must lie in (0, 1/2]")
    base = np.full((mdp.num_states, mdp.num_actions), 0.5)
    plus, minus = base.copy(), base.copy()
    plus[s, a] += shift
    minus[s, a] -= shift
    return mdp.replace(rewards=base), mdp.replace(rewards=plus), mdp.replace(rewards=minus)


def visitation_lower_bound(g: float, alpha: float, delta: float, beta: float) -> float:
    """Lower bound on visits to a pair under fair-coin rewards for a no-regret learner."""
    x = math.log(delta / (4 * beta))
    return (g**2 / alpha**2) * C1 * x**2 / (math.log(8 / delta) + C2 * x)


@dataclass(frozen=True)
class VisitationReport:
    bound: float
    quantile: float
    visits: tuple[int, ...]
    passed: bool


def visitation_check(
    mdp: TabularMdp,
    learner_factory: Callable[[np.random.Generator], object],
    s: int,
    a: int,
    alpha: float,
    beta_target: float,
    delta: float,
    T: int,
    trials: int,
    seed: int = 0,
) -> VisitationReport:
    """Visits to ``(s, a)`` under fair-coin rewards versus the lower bound.

    The reported quantile is the empirical ``delta``-quantile of the visit
    count, i.e. the level exceeded in a ``1 - delta`` fraction of trials.
    """
    from .simulator import LEARNER, RunConfig, run_learner, stream

    if not 4 * beta_target <= delta:
        raise ValueError("need 4 beta <= delta")
    _, g = mu_min_and_g(mdp)
    if not alpha / g[s, a] < 1 / (2 * math.sqrt(2)):
        raise ValueError("need alpha / g(s, a) < 1 / (2 sqrt 2)")
    bound = visitation_lower_bound(float(g[s, a]), alpha, delta, beta_target)
    visits = []
    for i in range(trials):
        learner = learner_factory(stream(seed, i, LEARNER))
        traj, _ = run_learner(mdp, learner, ExplorationOnlyAttacker(), RunConfig(T, 1, seed), i)
        visits.append(int(np.sum((traj.s == s) & (traj.a == a))))
    q = float(np.quantile(visits, delta))
    return VisitationReport(bound, q, tuple(visits), q >= bound)
