"""Victim learners: an optimistic model-based planner and a Q-learning baseline.

Learners only ever see ``(s, a, r', s', episode_end)`` observations; none of
them hold a reference to the environment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .confidence import reward_radius_scale, transition_radius_scale
from .mdp import Policy, TabularMdp, all_rhos, eps_optimal_action_sets
from .robust import inner_opt_rows
from .simulator import LEARNER, RunConfig, run_learner, stream


@dataclass(frozen=True)
class LearnerGuarantee:
    """Empirical stand-in for a no-regret guarantee: final ``alpha``-optimality w.p. ``1 - beta``."""

    alpha: float
    beta: float
    subopt_fn: Callable[[int, float, float], float]

    def __post_init__(self):
        if not self.alpha > 0 or not 0 < self.beta < 1:
            raise ValueError("need alpha > 0 and 0 < beta < 1")


class OptimisticModelLearner:
    """Extended value iteration over L1 transition balls, replanned every episode.

    Rewards are estimated with an upper confidence bonus ``bonus_scale * u / sqrt(n)``
    and transitions with the matching L1 budget ``bonus_scale * w / sqrt(n)``.
    Unvisited pairs get reward ``max observed reward + 1`` and an unconstrained
    transition row.
    """

    name = "optimistic"

    def __init__(
        self,
        num_states: int,
        num_actions: int,
        gamma: float,
        confidence_delta: float = 0.1,
        reward_sigma: float = 0.5,
        bonus_scale: float = 1.0,
        plan_tol: float = 1e-4,
        rng: np.random.Generator | None = None,
    ):
        if not 0 < confidence_delta < 1:
            raise ValueError("confidence_delta must lie in (0, 1)")
        if bonus_scale < 0:
            raise ValueError("bonus_scale must be non-negative")
        S, A = num_states, num_actions
        self.num_states, self.num_actions, self.gamma = S, A, float(gamma)
        self.u = bonus_scale * reward_radius_scale(reward_sigma, S, A, 1, confidence_delta)
        self.w = bonus_scale * transition_radius_scale(S, A, 1, confidence_delta)
        self.plan_tol = plan_tol
        self.n = np.zeros((S, A))
        self.reward_sum = np.zeros((S, A))
        self.next_counts = np.zeros((S, A, S))
        self.r_max = 0.0
        self._v = np.zeros(S)
        self._q = np.zeros((S, A))
        self._policy = [0] * S
        self._plan()

    def act(self, s: int) -> int:
        return self._policy[s]

    def observe(self, s: int, a: int, r: float, s_next: int, episode_end: bool) -> None:
        self.n[s, a] += 1
        self.reward_sum[s, a] += r
        self.next_counts[s, a, s_next] += 1
        if r > self.r_max:
            self.r_max = r
        if episode_end:
            self._plan()

    def current_policy(self) -> Policy:
        return tuple(self._policy)

    def optimistic_q(self) -> np.ndarray:
        return self._q.copy()

    def _plan(self) -> None:
        S, A, g = self.num_states, self.num_actions, self.gamma
        visited = self.n > 0
        nn = np.maximum(self.n, 1.0)
        root = np.sqrt(nn)
        r_top = np.where(visited, self.reward_sum / nn + self.u / root, self.r_max + 1.0)
        p_hat = np.where(visited[..., None], self.next_counts / nn[..., None], 1.0 / S).reshape(S * A, S)
        budget = np.where(visited, self.w / root, np.inf).ravel()
        threshold = self.plan_tol * (1 - g) / (2 * g)
        v = self._v
        for _ in range(100_000):
            p = inner_opt_rows(p_hat, budget, v, True)
            q = r_top + g * (p @ v).reshape(S, A)
            nv = q.max(axis=1)
            done = np.max(np.abs(nv - v)) <= threshold
            v = nv
            if done:
                break
        self._v, self._q = v, q
        self._policy = [int(a) for a in np.argmax(q, axis=1)]


class QLearner:
    """Tabular Q-learning with epsilon_t-greedy exploration.

    Defaults: step size ``n(s,a)**-0.6``, exploration ``min(1, c / sqrt(t))``.
    Greedy ties break toward the lowest action index.
    """

    name = "qlearn"

    def __init__(
        self,
        num_states: int,
        num_actions: int,
        gamma: float,
        rng: np.random.Generator | None = None,
        learning_rate: Callable[[int], float] | None = None,
        epsilon: Callable[[int], float] | None = None,
        explore_c: float = 1.0,
    ):
        self.num_states, self.num_actions, self.gamma = num_states, num_actions, float(gamma)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.learning_rate = learning_rate or (lambda n: n**-0.6)
        self.epsilon = epsilon or (lambda t: min(1.0, explore_c / math.sqrt(t)))
        self.q = [[0.0] * num_actions for _ in range(num_states)]
        self.n = [[0] * num_actions for _ in range(num_states)]
        self.t = 0
        self._coins: list[float] = []
        self._picks: list[int] = []

    def _draw(self) -> tuple[float, int]:
        if not self._coins:
            self._coins = self.rng.random(4096).tolist()
            self._picks = self.rng.integers(0, self.num_actions, 4096).tolist()
        return self._coins.pop(), self._picks.pop()

    def act(self, s: int) -> int:
        self.t += 1
        coin, pick = self._draw()
        if coin < self.epsilon(self.t):
            return pick
        row = self.q[s]
        return row.index(max(row))

    def observe(self, s: int, a: int, r: float, s_next: int, episode_end: bool) -> None:
        self.n[s][a] += 1
        lr = self.learning_rate(self.n[s][a])
        # resets are artificial, so the target always bootstraps
        target = r + self.gamma * max(self.q[s_next])
        self.q[s][a] += lr * (target - self.q[s][a])

    def current_policy(self) -> Policy:
        return tuple(row.index(max(row)) for row in self.q)


class FixedPolicyLearner:
    """Plays a fixed policy; useful as a reference victim."""

    name = "fixed"

    def __init__(self, policy: Sequence[int]):
        self.policy = [int(a) for a in policy]

    def act(self, s: int) -> int:
        return self.policy[s]

    def observe(self, s, a, r, s_next, episode_end) -> None:
        pass

    def current_policy(self) -> Policy:
        return tuple(self.policy)


LEARNERS = ("optimistic", "qlearn")


def make_learner(
    name: str, mdp_shape: tuple[int, int], gamma: float, rng: np.random.Generator, **params
):
    """Build a fresh learner by name; ``params`` go to its constructor."""
    S, A = mdp_shape
    if name == "optimistic":
        return OptimisticModelLearner(S, A, gamma, rng=rng, **params)
    if name == "qlearn":
        return QLearner(S, A, gamma, rng=rng, **params)
    raise ValueError(f"unknown learner {name!r}; expected one of {LEARNERS}")


def subopt_mask(mdp: TabularMdp, eps: float) -> np.ndarray:
    """Boolean (S, A) table: True where the action is outside the eps-optimal set."""
    sets = eps_optimal_action_sets(mdp, eps)
    mask = np.ones((mdp.num_states, mdp.num_actions), dtype=bool)
    for s, allowed in enumerate(sets):
        mask[s, list(allowed)] = False
    return mask


def count_subopt_steps(mdp: TabularMdp, records, eps: float) -> int:
    """Steps whose action is not eps-optimal in ``mdp`` (pass the delivered-reward MDP for M')."""
    mask = subopt_mask(mdp, eps)
    if hasattr(records, "s") and hasattr(records, "a"):
        s, a = np.asarray(records.s), np.asarray(records.a)
    else:
        s = np.array([rec.s for rec in records], dtype=int)
        a = np.array([rec.a for rec in records], dtype=int)
    return int(mask[s, a].sum())


def estimate_guarantee(
    mdp: TabularMdp,
    learner_factory: Callable[[np.random.Generator], object],
    T: int,
    alpha: float,
    trials: int = 20,
    seed: int = 0,
) -> LearnerGuarantee:
    """Monte Carlo estimate of ``(alpha, beta)`` and a suboptimal-step curve on ``mdp``.

    ``beta`` is the add-one smoothed fraction of runs whose final policy is not
    ``alpha``-optimal. The step curve takes the empirical ``1 - delta``
    quantile of the counts observed at ``T`` and extrapolates with a
    square-root shape in the horizon.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    returns = all_rhos(mdp)
    best = max(returns.values())
    failures, counts = 0, []
    for i in range(trials):
        learner = learner_factory(stream(seed, i, LEARNER))
        traj, final = run_learner(mdp, learner, None, RunConfig(T, trials, seed), i)
        failures += returns[tuple(final)] < best - alpha
        counts.append(count_subopt_steps(mdp, traj, alpha))
    beta = (failures + 1) / (trials + 2)
    observed = np.asarray(counts, dtype=float)

    def subopt_fn(horizon: int, eps: float, delta: float) -> float:
        level = float(np.quantile(observed, min(max(1 - delta, 0.0), 1.0)))
        return level * math.sqrt(horizon / T)

    return LearnerGuarantee(alpha, beta, subopt_fn)
