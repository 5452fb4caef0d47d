"""Small reference environments used by the harness defaults and tests."""

from __future__ import annotations

import numpy as np

from .mdp import TabularMdp


def two_state_mdp(noise_sigma: float = 0.1, horizon: int = 20, gamma: float = 0.5) -> TabularMdp:
    """Two states, two actions. Action 0 tends to stay, action 1 tends to switch.

    The optimal policy is ``(0, 0)``; ``TWO_STATE_TARGET`` differs from it at
    state 0.
    """
    R = np.array([[0.8, 0.3], [0.5, 0.1]])
    P = np.array(
        [
            [[0.7, 0.3], [0.3, 0.7]],
            [[0.3, 0.7], [0.7, 0.3]],
        ]
    )
    return TabularMdp(R, P, gamma, np.array([0.5, 0.5]), horizon, noise_sigma)


TWO_STATE_TARGET = (1, 0)


def single_state_mdp(noise_sigma: float = 0.0) -> TabularMdp:
    """One state, rewards ``(1, 0)``, gamma 1/2: V = 2 and Q = (2, 1) when playing action 0."""
    return TabularMdp(np.array([[1.0, 0.0]]), np.ones((1, 2, 1)), 0.5, np.array([1.0]), 10, noise_sigma)
