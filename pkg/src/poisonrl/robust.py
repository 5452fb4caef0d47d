"""Robust policy evaluation over an L1/interval confidence set.

The inner problem ``opt_{p in ball} p . v`` has a greedy solution: move up to
half the L1 budget onto the best state (worst, for ``min``) and take that
mass from the opposite end of the value ordering.
"""

from __future__ import annotations

from typing import Literal, Sequence

import numpy as np

from .confidence import ConfidenceSet, contains
from .mdp import (
    ConvergenceError,
    TabularMdp,
    neighbor_policy,
    policy_eval,
)

Orientation = Literal["min", "max", "low", "high"]

MU_ZERO_TOL = 1e-12


class ZeroOccupancyError(ValueError):
    def __init__(self, pairs):
        self.pairs = pairs
        super().__init__(
            f"lower occupancy bound is zero for (s, a) = {pairs}; exploration insufficient"
        )


def _is_max(orientation: str) -> bool:
    if orientation in ("max", "high"):
        return True
    if orientation in ("min", "low"):
        return False
    raise ValueError(f"unknown orientation {orientation!r}")


def inner_opt_rows(p_hat: np.ndarray, budget, v: np.ndarray, maximize: bool) -> np.ndarray:
    """Batched inner optimizer; ``p_hat`` is (k, S), ``budget`` broadcasts to (k,)."""
    p_hat = np.atleast_2d(p_hat)
    k, S = p_hat.shape
    budget = np.broadcast_to(np.asarray(budget, dtype=float), (k,))
    key = -v if maximize else v
    order = np.argsort(key, kind="stable")  # best first
    best, rest = order[0], order[:0:-1]  # rest: worst first
    p = p_hat.copy()
    add = np.minimum(budget / 2.0, 1.0 - p[:, best])
    add = np.maximum(add, 0.0)
    p[:, best] += add
    mass = p_hat[:, rest]
    before = np.cumsum(mass, axis=1) - mass
    take = np.clip(add[:, None] - before, 0.0, mass)
    p[:, rest] = mass - take
    return p


def inner_linear_opt(p_hat, budget: float, v, orientation: Orientation = "max") -> np.ndarray:
    """argopt of ``p . v`` over distributions within L1 ``budget`` of ``p_hat``."""
    if budget < 0:
        raise ValueError("budget must be non-negative")
    p_hat = np.asarray(p_hat, dtype=float)
    return inner_opt_rows(p_hat[None, :], budget, np.asarray(v, dtype=float), _is_max(orientation))[0]


def robust_policy_eval(
    cs: ConfidenceSet,
    pi: Sequence[int],
    orientation: Orientation = "low",
    reward_override: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 1_000_000,
) -> np.ndarray:
    """Worst-case (``low``) or best-case (``high``) value of ``pi`` over ``cs``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    maximize = _is_max(orientation)
    S = cs.num_states
    idx = np.arange(S)
    pi = np.asarray(pi, dtype=int)
    if reward_override is not None:
        r = np.asarray(reward_override, dtype=float)[idx, pi]
    else:
        r = (cs.r_high if maximize else cs.r_low)[idx, pi]
    rows = cs.p_hat[idx, pi]
    budget = cs.transition_budget[idx, pi]
    g = cs.gamma
    threshold = tol * (1 - g) / (2 * g)
    v = np.zeros(S)
    for _ in range(max_iter):
        p = inner_opt_rows(rows, budget, v, maximize)
        nv = r + g * (p @ v)
        if np.max(np.abs(nv - v)) <= threshold:
            return nv
        v = nv
    raise ConvergenceError(f"robust policy evaluation did not converge in {max_iter} iterations")


def q_high(cs: ConfidenceSet, pi: Sequence[int], v_high: np.ndarray | None = None) -> np.ndarray:
    if v_high is None:
        v_high = robust_policy_eval(cs, pi, "high")
    S, A = cs.num_states, cs.num_actions
    p = inner_opt_rows(cs.p_hat.reshape(S * A, S), cs.transition_budget.ravel(), v_high, True)
    return cs.r_high + cs.gamma * (p @ v_high).reshape(S, A)


def mu_low(cs: ConfidenceSet, pi: Sequence[int], s_target: int) -> float:
    """Lower bound on ``mu^pi(s_target)`` via the indicator-reward MDP."""
    indicator = np.zeros((cs.num_states, cs.num_actions))
    indicator[s_target, :] = 1.0
    v = robust_policy_eval(cs, pi, "low", reward_override=indicator)
    return float(np.clip((1 - cs.gamma) * (cs.initial_dist @ v), 0.0, 1.0))


def mu_low_table(cs: ConfidenceSet, target: Sequence[int]) -> np.ndarray:
    """``mu_low`` of ``target{s;a}`` at ``s`` for every off-target pair (NaN on target)."""
    S, A = cs.num_states, cs.num_actions
    table = np.full((S, A), np.nan)
    for s in range(S):
        for a in range(A):
            if a != target[s]:
                table[s, a] = mu_low(cs, neighbor_policy(target, s, a), s)
    return table


def delta_hat(cs: ConfidenceSet, cfg, mu_table: np.ndarray | None = None):
    """Robust perturbation feasible for every MDP in ``cs``."""
    from .whitebox import Perturbation

    target = tuple(cfg.target)
    if mu_table is None:
        mu_table = mu_low_table(cs, target)
    S, A = cs.num_states, cs.num_actions
    off = np.ones((S, A), dtype=bool)
    off[np.arange(S), list(target)] = False
    bad = [(int(s), int(a)) for s, a in np.argwhere(off & ~(mu_table > MU_ZERO_TOL))]
    if bad:
        raise ZeroOccupancyError(bad)
    v_low = robust_policy_eval(cs, target, "low")
    qh = q_high(cs, target)
    delta = np.zeros((S, A))
    with np.errstate(invalid="ignore"):
        raw = qh - v_low[:, None] + cfg.eps / mu_table
    delta[off] = np.maximum(raw[off], 0.0)
    return Perturbation(delta, target)


def simulation_lemma_bound(m1: TabularMdp, m2: TabularMdp, pi: Sequence[int]):
    """``(max |Q1 - Q2|, (|R1-R2| + gamma R_range |P1-P2|_1) / (1-gamma)^2)``."""
    if m1.rewards.shape != m2.rewards.shape or m1.gamma != m2.gamma:
        raise ValueError("MDPs must share dimensions and discount")
    g = m1.gamma
    lhs = float(np.max(np.abs(policy_eval(m1, pi).q - policy_eval(m2, pi).q)))
    both = np.concatenate([m1.rewards.ravel(), m2.rewards.ravel()])
    r_range = both.max() - both.min()
    dr = np.max(np.abs(m1.rewards - m2.rewards))
    dp = np.max(np.abs(m1.transitions - m2.transitions).sum(axis=2))
    rhs = float((dr + g * r_range * dp) / (1 - g) ** 2)
    return lhs, rhs


def sample_mdp_in_set(cs: ConfidenceSet, rng: np.random.Generator, horizon: int = 100) -> TabularMdp:
    """Draw an MDP inside ``cs``.

    Rewards are uniform in their intervals. Each transition row is a
    Dirichlet draw accepted if inside the L1 ball, otherwise pulled toward
    the empirical row onto the ball boundary.
    """
    S, A = cs.num_states, cs.num_actions
    rad = cs.reward_radius
    R = cs.r_hat + rng.uniform(-1.0, 1.0, size=(S, A)) * rad
    P = np.empty_like(cs.p_hat)
    budget = cs.transition_budget
    for s in range(S):
        for a in range(A):
            center = cs.p_hat[s, a]
            q = rng.dirichlet(np.ones(S))
            dist = np.abs(q - center).sum()
            if dist > budget[s, a]:
                t = budget[s, a] / dist * rng.uniform(0.0, 1.0) ** (1.0 / S)
                q = center + t * (q - center)
            q = np.clip(q, 0.0, None)
            P[s, a] = q / q.sum()
    out = TabularMdp(R, P, cs.gamma, cs.initial_dist, horizon)
    assert contains(cs, out, tol=1e-9)
    return out
