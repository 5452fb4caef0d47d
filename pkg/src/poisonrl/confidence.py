"""Observation bookkeeping and the confidence set of plausible MDPs.

The set contains every MDP whose reward at ``(s, a)`` is within
``u / sqrt(N(s, a))`` of the empirical mean and whose transition row is a
distribution within L1 distance ``w / sqrt(N(s, a))`` of the empirical row.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import TabularMdp


class UnvisitedPairsError(ValueError):
    def __init__(self, pairs):
        self.pairs = [tuple(int(x) for x in p) for p in pairs]
        super().__init__(f"confidence set undefined: unvisited (s, a) pairs {self.pairs}")


def reward_radius_scale(sigma: float, S: int, A: int, L: int, p: float) -> float:
    """``u = sqrt(2 sigma^2 log(2SAL/p))``."""
    return math.sqrt(2.0 * sigma**2 * math.log(2.0 * S * A * L / p))


def transition_radius_scale(S: int, A: int, L: int, p: float) -> float:
    """``w = sqrt(2 log(2SAL/p) + 2S log 2)``."""
    return math.sqrt(2.0 * math.log(2.0 * S * A * L / p) + 2.0 * S * math.log(2.0))


@dataclass
class ObservationCounts:
    num_states: int
    num_actions: int
    n: np.ndarray = field(default=None)
    reward_sum: np.ndarray = field(default=None)
    next_counts: np.ndarray = field(default=None)
    version: int = 0

    def __post_init__(self):
        S, A = self.num_states, self.num_actions
        if self.n is None:
            self.n = np.zeros((S, A))
        if self.reward_sum is None:
            self.reward_sum = np.zeros((S, A))
        if self.next_counts is None:
            self.next_counts = np.zeros((S, A, S))
        self.n = np.asarray(self.n, dtype=float)
        self.reward_sum = np.asarray(self.reward_sum, dtype=float)
        self.next_counts = np.asarray(self.next_counts, dtype=float)

    @property
    def n_min(self) -> float:
        return float(self.n.min())

    def update(self, s: int, a: int, r: float, s_next: int) -> "ObservationCounts":
        if not math.isfinite(r):
            raise ValueError(f"non-finite reward {r!r} at ({s}, {a})")
        self.n[s, a] += 1
        self.reward_sum[s, a] += r
        self.next_counts[s, a, s_next] += 1
        self.version += 1
        return self

    def unvisited(self) -> list[tuple[int, int]]:
        return [tuple(p) for p in np.argwhere(self.n == 0)]

    def copy(self) -> "ObservationCounts":
        return ObservationCounts(
            self.num_states,
            self.num_actions,
            self.n.copy(),
            self.reward_sum.copy(),
            self.next_counts.copy(),
            self.version,
        )

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "n": self.n.tolist(),
            "reward_sum": self.reward_sum.tolist(),
            "next_counts": self.next_counts.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ObservationCounts":
        counts = cls(
            int(data["num_states"]),
            int(data["num_actions"]),
            np.asarray(data["n"], dtype=float),
            np.asarray(data["reward_sum"], dtype=float),
            np.asarray(data["next_counts"], dtype=float),
        )
        S, A = counts.num_states, counts.num_actions
        if counts.n.shape != (S, A) or counts.next_counts.shape != (S, A, S):
            raise ValueError("counts arrays do not match num_states/num_actions")
        if np.any(np.abs(counts.next_counts.sum(axis=2) - counts.n) > 1e-9):
            raise ValueError("next_counts rows do not sum to n")
        return counts


@dataclass(frozen=True, eq=False)
class ConfidenceSet:
    r_hat: np.ndarray
    p_hat: np.ndarray
    n: np.ndarray
    u: float
    w: float
    gamma: float
    initial_dist: np.ndarray
    sigma: float = 0.0
    num_learners: int = 1
    failure_p: float = 0.1
    counts: ObservationCounts | None = None

    @property
    def num_states(self) -> int:
        return self.r_hat.shape[0]

    @property
    def num_actions(self) -> int:
        return self.r_hat.shape[1]

    @property
    def n_min(self) -> float:
        return float(self.n.min())

    @property
    def reward_radius(self) -> np.ndarray:
        return self.u / np.sqrt(self.n)

    @property
    def transition_budget(self) -> np.ndarray:
        return self.w / np.sqrt(self.n)

    @property
    def r_high(self) -> np.ndarray:
        return self.r_hat + self.reward_radius

    @property
    def r_low(self) -> np.ndarray:
        return self.r_hat - self.reward_radius

    @property
    def r_hat_range(self) -> float:
        return float(self.r_high.max() - self.r_low.min())

    @classmethod
    def point(cls, mdp: TabularMdp, n: float = math.inf) -> "ConfidenceSet":
        """Set centred on ``mdp``; with infinite counts it is the singleton {mdp}."""
        S, A = mdp.num_states, mdp.num_actions
        return cls(
            r_hat=mdp.rewards.copy(),
            p_hat=mdp.transitions.copy(),
            n=np.full((S, A), float(n)),
            u=reward_radius_scale(mdp.noise_sigma, S, A, 1, 0.1),
            w=transition_radius_scale(S, A, 1, 0.1),
            gamma=mdp.gamma,
            initial_dist=mdp.initial_dist.copy(),
            sigma=mdp.noise_sigma,
        )

    def to_dict(self) -> dict:
        return {
            "r_hat": self.r_hat.tolist(),
            "p_hat": self.p_hat.tolist(),
            "u": self.u,
            "w": self.w,
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
            "sigma": self.sigma,
            "num_learners": self.num_learners,
            "failure_p": self.failure_p,
            "counts": self.counts.to_dict() if self.counts is not None else {"n": self.n.tolist()},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def build_confidence_set(
    counts: ObservationCounts,
    sigma: float,
    num_learners: int,
    failure_p: float,
    gamma: float,
    initial_dist,
) -> ConfidenceSet:
    if counts.n_min < 1:
        raise UnvisitedPairsError(counts.unvisited())
    if not 0 < failure_p < 1:
        raise ValueError("failure_p must lie in (0, 1)")
    S, A = counts.num_states, counts.num_actions
    n = counts.n.copy()
    return ConfidenceSet(
        r_hat=counts.reward_sum / n,
        p_hat=counts.next_counts / n[:, :, None],
        n=n,
        u=reward_radius_scale(sigma, S, A, num_learners, failure_p),
        w=transition_radius_scale(S, A, num_learners, failure_p),
        gamma=float(gamma),
        initial_dist=np.asarray(initial_dist, dtype=float),
        sigma=float(sigma),
        num_learners=int(num_learners),
        failure_p=float(failure_p),
        counts=counts.copy(),
    )


def load_snapshot(path: str | Path) -> tuple[ObservationCounts, dict]:
    """Read a confidence-set snapshot; returns the counts and the remaining params."""
    data = json.loads(Path(path).read_text())
    counts = ObservationCounts.from_dict(data["counts"])
    params = {k: v for k, v in data.items() if k not in ("counts", "r_hat", "p_hat")}
    return counts, params


def contains(cs: ConfidenceSet, mdp: TabularMdp, tol: float = 0.0) -> bool:
    if mdp.rewards.shape != cs.r_hat.shape:
        raise ValueError("dimension mismatch between MDP and confidence set")
    reward_ok = np.abs(mdp.rewards - cs.r_hat) <= cs.reward_radius + tol
    l1 = np.abs(mdp.transitions - cs.p_hat).sum(axis=2)
    trans_ok = l1 <= cs.transition_budget + tol
    return bool(np.all(reward_ok) and np.all(trans_ok))
