"""Seeded environment simulation with an attacker hook on the reward channel.

Random streams are derived from one root seed per (learner index, role), so
swapping the attacker never changes the environment's noise.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Protocol

import numpy as np

from .mdp import Policy, TabularMdp

ENV, LEARNER, ATTACKER, AUX = 0, 1, 2, 3


class SimulationError(RuntimeError):
    pass


def stream(seed: int, learner_index: int, role: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(learner_index), role)))


@dataclass(frozen=True)
class RunConfig:
    total_steps: int
    num_learners: int = 1
    seed: int = 0
    record_trajectories: bool = False

    def __post_init__(self):
        if self.total_steps < 1 or self.num_learners < 1:
            raise ValueError("total_steps and num_learners must be >= 1")


class TransitionRecord(NamedTuple):
    l: int
    t: int
    s: int
    a: int
    r: float
    r_delivered: float
    s_next: int
    episode_end: bool


class Learner(Protocol):
    def act(self, s: int) -> int: ...

    def observe(self, s: int, a: int, r: float, s_next: int, episode_end: bool) -> None: ...

    def current_policy(self) -> Policy: ...


class Attacker(Protocol):
    """Sees only environment-side data: never the learner object."""

    def begin_learner(self, l: int, rng: np.random.Generator) -> None: ...

    def perturb(self, l: int, t: int, s: int, a: int, r: float, s_next: int) -> float: ...

    def end_learner(self, l: int) -> None: ...


class NoAttack:
    name = "none"

    def begin_learner(self, l, rng):
        pass

    def perturb(self, l, t, s, a, r, s_next):
        return r

    def end_learner(self, l):
        pass


@dataclass(eq=False)
class Trajectory:
    """Columnar per-step log of one learner's run; iterates as TransitionRecords."""

    l: int
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    r_delivered: np.ndarray
    s_next: np.ndarray
    episode_end: np.ndarray

    def __len__(self) -> int:
        return len(self.s)

    def __getitem__(self, i: int) -> TransitionRecord:
        return TransitionRecord(
            self.l,
            i + 1,
            int(self.s[i]),
            int(self.a[i]),
            float(self.r[i]),
            float(self.r_delivered[i]),
            int(self.s_next[i]),
            bool(self.episode_end[i]),
        )

    def __iter__(self) -> Iterator[TransitionRecord]:
        return (self[i] for i in range(len(self)))

    def write_csv(self, path: str | Path, append: bool = False) -> None:
        path = Path(path)
        new = not append or not path.exists()
        with path.open("a" if append else "w", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["l", "t", "s", "a", "r", "r_delivered", "s_next", "episode_end"])
            for rec in self:
                writer.writerow(
                    [rec.l, rec.t, rec.s, rec.a, repr(rec.r), repr(rec.r_delivered), rec.s_next, int(rec.episode_end)]
                )


class _Sampler:
    """Per-MDP lookup tables for fast scalar sampling."""

    def __init__(self, mdp: TabularMdp):
        cum = np.cumsum(mdp.transitions, axis=2)
        self.cum = cum.tolist()
        self.rewards = mdp.rewards.tolist()
        self.d0_cum = np.cumsum(mdp.initial_dist).tolist()
        self.last = mdp.num_states - 1
        self.sigma = mdp.noise_sigma

    def next_state(self, s: int, a: int, u: float) -> int:
        return min(bisect.bisect_right(self.cum[s][a], u), self.last)

    def initial(self, u: float) -> int:
        return min(bisect.bisect_right(self.d0_cum, u), self.last)


def sample_step(mdp: TabularMdp, s: int, a: int, rng: np.random.Generator) -> tuple[float, int]:
    """One noisy reward and next state: ``r = R + sigma * N(0,1)``, inverse-CDF transition."""
    xi = rng.standard_normal()
    u = rng.random()
    r = float(mdp.rewards[s, a] + mdp.noise_sigma * xi)
    cum = np.cumsum(mdp.transitions[s, a])
    s_next = min(int(np.searchsorted(cum, u, side="right")), mdp.num_states - 1)
    return r, s_next


def run_learner(
    mdp: TabularMdp,
    learner: Learner,
    attacker: Attacker | None,
    cfg: RunConfig,
    l: int = 0,
    rng: np.random.Generator | None = None,
) -> tuple[Trajectory, Policy]:
    """Run one fresh learner for ``cfg.total_steps`` steps with resets every ``horizon``.

    ``rng`` is the environment stream; by default it is derived from
    ``cfg.seed`` and ``l``. The attacker's stream is derived likewise.
    """
    T, H = cfg.total_steps, mdp.horizon
    S, A = mdp.num_states, mdp.num_actions
    if rng is None:
        rng = stream(cfg.seed, l, ENV)
    attacker = attacker if attacker is not None else NoAttack()
    attacker.begin_learner(l, stream(cfg.seed, l, ATTACKER))

    # fixed draw counts per step keep the environment stream attacker-independent
    noise = rng.standard_normal(T).tolist()
    u_next = rng.random(T).tolist()
    u_init = rng.random(T // H + 1).tolist()
    sampler = _Sampler(mdp)
    rewards, sigma = sampler.rewards, sampler.sigma

    s_log = np.empty(T, dtype=np.int64)
    a_log = np.empty(T, dtype=np.int64)
    r_log = np.empty(T)
    rd_log = np.empty(T)
    sn_log = np.empty(T, dtype=np.int64)
    end_log = np.zeros(T, dtype=bool)

    act, observe, perturb = learner.act, learner.observe, attacker.perturb
    s = sampler.initial(u_init[0])
    episode = 0
    for i in range(T):
        t = i + 1
        a = act(s)
        if a.__class__ is not int:
            a = int(a)
        if not 0 <= a < A:
            raise SimulationError(f"learner {l} returned invalid action {a!r} at step {t} (state {s})")
        r = rewards[s][a] + sigma * noise[i]
        s_next = sampler.next_state(s, a, u_next[i])
        r_prime = perturb(l, t, s, a, r, s_next)
        if not math.isfinite(r_prime):
            raise SimulationError(f"attacker delivered non-finite reward {r_prime!r} at learner {l}, step {t}")
        end = t % H == 0 or t == T
        observe(s, a, r_prime, s_next, end)
        s_log[i], a_log[i], r_log[i], rd_log[i], sn_log[i] = s, a, r, r_prime, s_next
        if end:
            end_log[i] = True
            episode += 1
            s = sampler.initial(u_init[min(episode, len(u_init) - 1)])
        else:
            s = s_next

    attacker.end_learner(l)
    traj = Trajectory(l, s_log, a_log, r_log, rd_log, sn_log, end_log)
    return traj, tuple(int(x) for x in learner.current_policy())
