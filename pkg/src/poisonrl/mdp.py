"""Exact tabular MDP representation and ground-truth dynamic programming.

Everything here is exact (direct linear solves) and is used both by the
attacks and as the oracle the tests compare against.

Two return scales appear in this module:

* ``rho`` is the raw expected discounted return, ``sum_s d0(s) V(s)``.
  Epsilon-optimality of policies and actions is measured on this scale.
* epsilon-robust optimality compares *normalized* returns ``(1 - gamma) * rho``.
  On that scale the neighbour-policy gap equals
  ``mu(s) * (V(s) - Q(s, a))`` exactly, which is what makes the closed-form
  white-box perturbation the entrywise-minimal feasible one.
"""

from __future__ import annotations

import itertools
import json
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PROB_TOL = 1e-12
ROBUST_SLACK = 1e-9
DEFAULT_ENUM_CAP = 10**6

Policy = tuple[int, ...]


class MdpError(ValueError):
    """Invalid MDP data."""


class EnumerationCapError(RuntimeError):
    """Raised when A**S exceeds the brute-force enumeration cap."""


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TabularMdp:
    rewards: np.ndarray  # (S, A)
    transitions: np.ndarray  # (S, A, S)
    gamma: float
    initial_dist: np.ndarray  # (S,)
    horizon: int = 100
    noise_sigma: float = 0.0

    def __post_init__(self):
        R = np.array(self.rewards, dtype=float)
        P = np.array(self.transitions, dtype=float)
        d0 = np.array(self.initial_dist, dtype=float)
        for name, arr in (("rewards", R), ("transitions", P), ("initial_dist", d0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))
        object.__setattr__(self, "horizon", int(self.horizon))
        for problem in _mdp_problems(R, P, d0, self.gamma, self.horizon, self.noise_sigma):
            raise MdpError(problem[1])

    @property
    def num_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def num_actions(self) -> int:
        return self.rewards.shape[1]

    def replace(self, **changes) -> "TabularMdp":
        fields = dict(
            rewards=self.rewards,
            transitions=self.transitions,
            gamma=self.gamma,
            initial_dist=self.initial_dist,
            horizon=self.horizon,
            noise_sigma=self.noise_sigma,
        )
        fields.update(changes)
        return TabularMdp(**fields)

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "rewards": self.rewards.tolist(),
            "transitions": self.transitions.tolist(),
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
            "horizon": self.horizon,
            "noise_sigma": self.noise_sigma,
        }


def _mdp_problems(R, P, d0, gamma, horizon, sigma):
    """Yield (field, message) for every violated invariant."""
    if R.ndim != 2 or R.shape[0] < 1 or R.shape[1] < 1:
        yield "rewards", f"rewards must be a non-empty S x A table, got shape {R.shape}"
        return
    S, A = R.shape
    if P.shape != (S, A, S):
        yield "transitions", f"transitions must have shape {(S, A, S)}, got {P.shape}"
        return
    if d0.shape != (S,):
        yield "initial_dist", f"initial_dist must have length {S}, got shape {d0.shape}"
        return
    if not np.all(np.isfinite(R)):
        yield "rewards", "rewards must be finite"
    if not np.all(np.isfinite(P)) or np.any(P < 0):
        s, a, _ = np.argwhere(~(np.isfinite(P) & (P >= 0)))[0]
        yield "transitions", f"transitions[{s}][{a}] has a negative or non-finite entry"
    row_err = np.abs(P.sum(axis=2) - 1.0)
    if np.any(row_err > PROB_TOL):
        s, a = np.unravel_index(np.argmax(row_err), row_err.shape)
        yield "transitions", f"transitions[{s}][{a}] sums to {P[s, a].sum()!r}, expected 1"
    if np.any(d0 < 0) or not np.all(np.isfinite(d0)) or abs(d0.sum() - 1.0) > PROB_TOL:
        yield "initial_dist", f"initial_dist must be a probability vector (sum={d0.sum()!r})"
    if not 0.0 < gamma < 1.0:
        yield "gamma", f"gamma must lie in (0, 1), got {gamma}"
    if horizon < 1:
        yield "horizon", f"horizon must be a positive integer, got {horizon}"
    if not sigma >= 0:
        yield "noise_sigma", f"noise_sigma must be >= 0, got {sigma}"


def load_mdp(path: str | Path) -> TabularMdp:
    """Load and validate an MDP JSON file.

    Errors are reported as ``path:line: message`` where the line is the one
    holding the offending field.
    """
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MdpError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None

    def line_of(field: str) -> int:
        m = re.search(r'"%s"\s*:' % re.escape(field), text)
        return text.count("\n", 0, m.start()) + 1 if m else 1

    required = ["num_states", "num_actions", "rewards", "transitions", "gamma", "initial_dist"]
    for key in required:
        if key not in data:
            raise MdpError(f"{path}:1: missing field {key!r}")
    try:
        R = np.asarray(data["rewards"], dtype=float)
        P = np.asarray(data["transitions"], dtype=float)
        d0 = np.asarray(data["initial_dist"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise MdpError(f"{path}:1: ragged or non-numeric array: {exc}") from None
    S, A = int(data["num_states"]), int(data["num_actions"])
    if R.shape != (S, A):
        raise MdpError(f"{path}:{line_of('rewards')}: rewards shape {R.shape} != ({S}, {A})")
    gamma = float(data["gamma"])
    horizon = int(data.get("horizon", 100))
    sigma = float(data.get("noise_sigma", 0.0))
    for field, message in _mdp_problems(R, P, d0, gamma, horizon, sigma):
        raise MdpError(f"{path}:{line_of(field)}: {message}")
    return TabularMdp(R, P, gamma, d0, horizon, sigma)


def save_mdp(mdp: TabularMdp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=2) + "\n")


def random_mdp(
    rng: np.random.Generator,
    num_states: int,
    num_actions: int,
    gamma: float | None = None,
    horizon: int = 50,
    noise_sigma: float = 0.0,
    reward_range: tuple[float, float] = (0.0, 1.0),
) -> TabularMdp:
    """Dense random MDP: Dirichlet(1) rows, uniform rewards, uniform d0."""
    if gamma is None:
        gamma = rng.uniform(0.5, 0.95)
    R = rng.uniform(*reward_range, size=(num_states, num_actions))
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    P /= P.sum(axis=2, keepdims=True)
    d0 = np.full(num_states, 1.0 / num_states)
    return TabularMdp(R, P, gamma, d0, horizon, noise_sigma)


# ---------------------------------------------------------------------------
# policies


def check_policy(mdp: TabularMdp, pi: Sequence[int]) -> Policy:
    pi = tuple(int(a) for a in pi)
    if len(pi) != mdp.num_states:
        raise ValueError(f"policy has {len(pi)} entries, MDP has {mdp.num_states} states")
    for s, a in enumerate(pi):
        if not 0 <= a < mdp.num_actions:
            raise ValueError(f"policy maps state {s} to invalid action {a}")
    return pi


def neighbor_policy(pi: Sequence[int], s: int, a: int) -> Policy:
    """``pi`` with state ``s`` remapped to action ``a``."""
    out = list(pi)
    out[s] = int(a)
    return tuple(out)


def enumerate_policies(mdp: TabularMdp, cap: int = DEFAULT_ENUM_CAP) -> Iterator[Policy]:
    S, A = mdp.num_states, mdp.num_actions
    if A**S > cap:
        raise EnumerationCapError(f"{A}**{S} = {A**S} policies exceeds enumeration cap {cap}")
    return itertools.product(range(A), repeat=S)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ValueFunctions:
    v: np.ndarray
    q: np.ndarray
    rho: float


def _policy_matrices(mdp: TabularMdp, pi: Sequence[int]):
    idx = np.arange(mdp.num_states)
    pi = np.asarray(pi, dtype=int)
    return mdp.transitions[idx, pi], mdp.rewards[idx, pi]


def evaluate_reward(
    P_pi: np.ndarray, r_pi: np.ndarray, gamma: float, tol: float = 1e-10, max_iter: int = 1_000_000
) -> np.ndarray:
    """Solve ``V = r + gamma P V``; falls back to fixed-point iteration."""
    S = len(r_pi)
    try:
        return np.linalg.solve(np.eye(S) - gamma * P_pi, r_pi)
    except np.linalg.LinAlgError:
        pass
    v = np.zeros(S)
    for _ in range(max_iter):
        nv = r_pi + gamma * P_pi @ v
        if np.max(np.abs(nv - v)) <= tol * (1 - gamma) / (2 * gamma):
            return nv
        v = nv
    raise ConvergenceError(f"policy evaluation did not converge in {max_iter} iterations")


def policy_eval(mdp: TabularMdp, pi: Sequence[int]) -> ValueFunctions:
    P_pi, r_pi = _policy_matrices(mdp, pi)
    v = evaluate_reward(P_pi, r_pi, mdp.gamma)
    q = mdp.rewards + mdp.gamma * mdp.transitions @ v
    return ValueFunctions(v=v, q=q, rho=float(mdp.initial_dist @ v))


def rho(mdp: TabularMdp, pi: Sequence[int]) -> float:
    P_pi, r_pi = _policy_matrices(mdp, pi)
    return float(mdp.initial_dist @ evaluate_reward(P_pi, r_pi, mdp.gamma))


def occupancy(mdp: TabularMdp, pi: Sequence[int]) -> np.ndarray:
    """Discounted state distribution ``(1-gamma) d0^T (I - gamma P_pi)^-1``."""
    P_pi, _ = _policy_matrices(mdp, pi)
    S = mdp.num_states
    mu = (1 - mdp.gamma) * np.linalg.solve((np.eye(S) - mdp.gamma * P_pi).T, mdp.initial_dist)
    return np.clip(mu, 0.0, None)


def greedy(q: np.ndarray) -> Policy:
    # np.argmax returns the first maximal index: lowest-index tie-breaking
    return tuple(int(a) for a in np.argmax(q, axis=1))


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Returns ``(v_star, q_star, pi_star)`` with ``|v - V*| <= tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    g = mdp.gamma
    threshold = tol * (1 - g) / (2 * g)
    v = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        q = mdp.rewards + g * mdp.transitions @ v
        nv = q.max(axis=1)
        done = np.max(np.abs(nv - v)) <= threshold
        v = nv
        if done:
            q = mdp.rewards + g * mdp.transitions @ v
            return v, q, greedy(q)
    raise ConvergenceError(f"value iteration did not converge in {max_iter} iterations")


# ---------------------------------------------------------------------------
# oracle checks


def rho_identity_check(mdp: TabularMdp, pi: Sequence[int]) -> float:
    """``|rho - sum_s mu(s) R(s, pi(s)) / (1-gamma)|``."""
    _, r_pi = _policy_matrices(mdp, pi)
    lhs = policy_eval(mdp, pi).rho
    rhs = occupancy(mdp, pi) @ r_pi / (1 - mdp.gamma)
    return abs(lhs - rhs)


def q_rho_difference_check(mdp: TabularMdp, pi: Sequence[int], pi2: Sequence[int]) -> float:
    """Residual of the performance-difference identity between two policies.

    The identity holds for normalized returns::

        (1-gamma)(rho^pi - rho^pi2) = sum_s mu^pi2(s) (Q^pi(s, pi(s)) - Q^pi(s, pi2(s)))
    """
    ev, ev2 = policy_eval(mdp, pi), policy_eval(mdp, pi2)
    idx = np.arange(mdp.num_states)
    adv = ev.q[idx, np.asarray(pi)] - ev.q[idx, np.asarray(pi2)]
    rhs = occupancy(mdp, pi2) @ adv
    return abs((1 - mdp.gamma) * (ev.rho - ev2.rho) - rhs)


def is_eps_robust_optimal(
    mdp: TabularMdp, pi: Sequence[int], eps: float, slack: float = ROBUST_SLACK
) -> bool:
    """True iff every neighbour of ``pi`` trails it by ``eps`` in normalized return.

    By the neighbour characterization this is equivalent to ``pi`` beating
    every other deterministic policy by ``eps``. Ties within ``slack`` count
    in ``pi``'s favour.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    pi = check_policy(mdp, pi)
    scale = 1 - mdp.gamma
    base = scale * rho(mdp, pi)
    for s in range(mdp.num_states):
        for a in range(mdp.num_actions):
            if a == pi[s]:
                continue
            if base < scale * rho(mdp, neighbor_policy(pi, s, a)) + eps - slack:
                return False
    return True


def all_rhos(mdp: TabularMdp, cap: int = DEFAULT_ENUM_CAP) -> dict[Policy, float]:
    return {pi: rho(mdp, pi) for pi in enumerate_policies(mdp, cap)}


def eps_optimal_action_sets(
    mdp: TabularMdp, eps: float, cap: int = DEFAULT_ENUM_CAP
) -> list[frozenset[int]]:
    """For each state, actions taken by some policy with ``rho >= rho* - eps``."""
    returns = all_rhos(mdp, cap)
    best = max(returns.values())
    sets: list[set[int]] = [set() for _ in range(mdp.num_states)]
    for pi, r in returns.items():
        if r >= best - eps - ROBUST_SLACK:
            for s, a in enumerate(pi):
                sets[s].add(a)
    return [frozenset(x) for x in sets]


def mu_min_and_g(mdp: TabularMdp, cap: int = DEFAULT_ENUM_CAP):
    """``g[s, a] = min_{pi: pi(s)=a} mu^pi(s)`` and ``mu_min = min g``."""
    S, A = mdp.num_states, mdp.num_actions
    g = np.full((S, A), np.inf)
    for pi in enumerate_policies(mdp, cap):
        mu = occupancy(mdp, pi)
        idx = np.arange(S)
        g[idx, pi] = np.minimum(g[idx, pi], mu)
    mu_min = float(g.min())
    if mu_min <= PROB_TOL:
        warnings.warn(
            f"mu_min = {mu_min:.3g}: some state is unreachable under some policy",
            RuntimeWarning,
            stacklevel=2,
        )
    return mu_min, g
