"""Closed-form white-box reward poisoning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import (
    TabularMdp,
    check_policy,
    is_eps_robust_optimal,
    neighbor_policy,
    occupancy,
    policy_eval,
)

MU_POSITIVITY_TOL = 1e-12
FEASIBILITY_SLACK = 1e-7


class PositivityError(ValueError):
    """Some neighbour of the target never visits the state it deviates at."""


class InternalConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    target: tuple[int, ...]
    eps: float
    lam: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(int(a) for a in self.target))
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


@dataclass(frozen=True, eq=False)
class Perturbation:
    delta: np.ndarray
    target: tuple[int, ...] | None = None

    def __post_init__(self):
        delta = np.array(self.delta, dtype=float)
        if not np.all(np.isfinite(delta)):
            raise ValueError("perturbation entries must be finite")
        if np.any(delta < 0):
            raise ValueError("perturbation entries must be non-negative")
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.delta)))

    def __call__(self, s: int, a: int, r: float) -> float:
        return apply_perturbation(self, s, a, r)

    def format_table(self) -> str:
        S, A = self.delta.shape
        head = "state " + " ".join(f"{'a' + str(a):>10}" for a in range(A))
        rows = [head]
        for s in range(S):
            cells = []
            for a in range(A):
                mark = "*" if self.target is not None and self.target[s] == a else " "
                cells.append(f"{self.delta[s, a]:>9.5f}{mark}")
            rows.append(f"{s:>5} " + " ".join(cells))
        return "\n".join(rows)


def apply_perturbation(delta: Perturbation, s: int, a: int, r: float) -> float:
    return r - delta.delta[s, a]


def neighbor_occupancies(mdp: TabularMdp, target: Sequence[int]) -> np.ndarray:
    """``mu^{target{s;a}}(s)`` for every (s, a); on-target entries use the target itself."""
    S, A = mdp.num_states, mdp.num_actions
    table = np.empty((S, A))
    for s in range(S):
        for a in range(A):
            table[s, a] = occupancy(mdp, neighbor_policy(target, s, a))[s]
    return table


def delta_star(mdp: TabularMdp, cfg: AttackConfig) -> Perturbation:
    target = check_policy(mdp, cfg.target)
    S, A = mdp.num_states, mdp.num_actions
    ev = policy_eval(mdp, target)
    mu = neighbor_occupancies(mdp, target)
    off = np.ones((S, A), dtype=bool)
    off[np.arange(S), list(target)] = False
    bad = [(int(s), int(a)) for s, a in np.argwhere(off & (mu <= MU_POSITIVITY_TOL))]
    if bad:
        raise PositivityError(
            f"occupancy of neighbour policy is zero at (s, a) = {bad}; Delta* undefined"
        )
    delta = np.zeros((S, A))
    raw = ev.q - ev.v[:, None] + cfg.eps / np.where(off, mu, 1.0)
    delta[off] = np.maximum(raw[off], 0.0)
    return Perturbation(delta, target)


def poisoned_mdp(mdp: TabularMdp, delta: Perturbation) -> TabularMdp:
    return mdp.replace(rewards=mdp.rewards - delta.delta)


def is_feasible_p1(mdp: TabularMdp, cfg: AttackConfig, delta: Perturbation) -> bool:
    """Feasibility of ``delta`` for the white-box program, checked two ways.

    The entrywise characterization against Delta* and a direct robust
    optimality check in ``R - delta`` must agree unless ``delta`` sits within
    ``FEASIBILITY_SLACK`` of the boundary.
    """
    target = check_policy(mdp, cfg.target)
    d = delta.delta
    star = delta_star(mdp, cfg).delta
    S = mdp.num_states
    on = np.zeros(d.shape, dtype=bool)
    on[np.arange(S), list(target)] = True
    target_zero = bool(np.all(d[on] == 0.0))
    margin = float(np.min((d - star)[~on])) if np.any(~on) else np.inf
    characterization = target_zero and margin >= 0.0
    direct = target_zero and is_eps_robust_optimal(poisoned_mdp(mdp, delta), target, cfg.eps)
    if characterization != direct and abs(margin) > FEASIBILITY_SLACK:
        raise InternalConsistencyError(
            f"feasibility checks disagree (characterization={characterization}, "
            f"direct={direct}, min(delta - delta*)={margin:.3g})"
        )
    return characterization and direct


def whitebox_cost_bound(
    delta: Perturbation, lam: float, subopt_count: float, T: int, L: int = 1
) -> float:
    """``(|delta|_inf + lambda) * SubOpt / T`` with SubOpt a per-learner count.

    Passing the maximum per-learner count makes the bound valid for the
    average over ``L`` learners.
    """
    return (delta.sup_norm + lam) * subopt_count / T
