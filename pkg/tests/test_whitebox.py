from __future__ import annotations

import numpy as np
import pytest

from oracles import oracle_delta_star
from poisonrl.fixtures import TWO_STATE_TARGET, single_state_mdp, two_state_mdp
from poisonrl.harness import CostLedger
from poisonrl.learners import make_learner, subopt_mask
from poisonrl.mdp import TabularMdp, random_mdp
from poisonrl.prior import FrozenAttacker
from poisonrl.simulator import LEARNER, RunConfig, run_learner, stream
from poisonrl.whitebox import (
    AttackConfig,
    InternalConsistencyError,
    Perturbation,
    PositivityError,
    apply_perturbation,
    delta_star,
    is_feasible_p1,
    whitebox_cost_bound,
    poisoned_mdp,
)


@pytest.mark.parametrize("eps,expected", [(0.5, 0.0), (2.0, 1.0)])
def test_single_state_hand_values(eps, expected):
    d = delta_star(single_state_mdp(), AttackConfig((0,), eps))
    assert d.delta[0, 1] == pytest.approx(expected)
    assert d.delta[0, 0] == 0.0


def test_matches_series_oracle(rng):
    for _ in range(10):
        m = random_mdp(rng, 3, 3)
        target = tuple(rng.integers(0, 3, 3))
        d = delta_star(m, AttackConfig(target, 0.2))
        oracle = oracle_delta_star(m.rewards, m.transitions, m.gamma, m.initial_dist, target, 0.2)
        assert np.allclose(d.delta, oracle, atol=1e-9)
        assert np.all(d.delta[np.arange(3), list(target)] == 0)


def test_positivity_error_names_pair():
    P = np.zeros((2, 2, 2))
    P[:, :, 0] = 1.0
    m = TabularMdp(np.zeros((2, 2)), P, 0.5, np.array([1.0, 0.0]))
    with pytest.raises(PositivityError, match=r"\(1, 1\)"):
        delta_star(m, AttackConfig((0, 0), 0.1))


def test_apply_perturbation():
    d = Perturbation(np.array([[0.0, 1.0]]), (0,))
    assert apply_perturbation(d, 0, 1, 1.0) == 0.0
    assert apply_perturbation(d, 0, 0, 0.3) == 0.3
    assert apply_perturbation(Perturbation(np.zeros((1, 2))), 0, 1, 0.7) == 0.7


def test_perturbation_rejects_nonfinite():
    with pytest.raises(ValueError):
        Perturbation(np.array([[np.nan]]))


def test_config_invariants():
    with pytest.raises(ValueError):
        AttackConfig((0,), 0.0)
    with pytest.raises(ValueError):
        AttackConfig((0,), 0.1, lam=0.0)


class TestFeasibility:
    def test_examples(self, rng):
        for _ in range(10):
            m = random_mdp(rng, 3, 2)
            cfg = AttackConfig(tuple(rng.integers(0, 2, 3)), 0.1)
            star = delta_star(m, cfg)
            assert is_feasible_p1(m, cfg, star)
            assert is_feasible_p1(m, cfg, Perturbation(star.delta + 0.5 * (star.delta >= 0) * _off_mask(cfg.target, 2)))
            if np.any(star.delta > 0.01):
                s, a = np.argwhere(star.delta > 0.01)[0]
                reduced = star.delta.copy()
                reduced[s, a] -= 0.01
                assert not is_feasible_p1(m, cfg, Perturbation(reduced))

    def test_nonzero_target_column_is_infeasible(self):
        m = two_state_mdp()
        cfg = AttackConfig(TWO_STATE_TARGET, 0.1)
        d = delta_star(m, cfg).delta.copy()
        d[1, 0] = 0.2
        assert not is_feasible_p1(m, cfg, Perturbation(d))

    def test_disagreement_raises(self, monkeypatch):
        import poisonrl.whitebox as wb

        m = two_state_mdp()
        cfg = AttackConfig(TWO_STATE_TARGET, 0.1)
        d = delta_star(m, cfg)
        monkeypatch.setattr(wb, "is_eps_robust_optimal", lambda *a, **k: False)
        with pytest.raises(InternalConsistencyError):
            wb.is_feasible_p1(m, cfg, Perturbation(d.delta + 0.5 * _off_mask(cfg.target, 2)))


def _off_mask(target, A):
    mask = np.ones((len(target), A))
    mask[np.arange(len(target)), list(target)] = 0
    return mask


def test_norm_minimality(rng):
    """The entrywise-minimal feasible perturbation also minimizes the 1- and sup-norms."""
    m = random_mdp(rng, 3, 3)
    cfg = AttackConfig((0, 1, 2), 0.1)
    star = delta_star(m, cfg)
    mask = _off_mask(cfg.target, 3)
    for _ in range(50):
        d = Perturbation(star.delta + rng.uniform(0, 0.5, (3, 3)) * mask)
        assert is_feasible_p1(m, cfg, d)
        assert np.abs(star.delta).sum() <= np.abs(d.delta).sum() + 1e-12
        assert star.sup_norm <= d.sup_norm + 1e-12


def test_whitebox_cost_bound_examples():
    one = Perturbation(np.array([[0.0, 1.0]]))
    assert whitebox_cost_bound(one, 1.0, 0, 1000) == 0
    assert whitebox_cost_bound(one, 1.0, 50, 1000) == pytest.approx(0.1)


def test_whitebox_cost_bound_holds_end_to_end():
    m = two_state_mdp()
    cfg = AttackConfig(TWO_STATE_TARGET, 0.1)
    star = delta_star(m, cfg)
    mask = subopt_mask(poisoned_mdp(m, star), cfg.eps)
    # in the poisoned MDP only the target action is eps-optimal
    assert np.array_equal(mask, _off_mask(cfg.target, 2).astype(bool))
    T, L = 3000, 5
    ledger = CostLedger(cfg.lam, cfg.target)
    counts = []
    attacker = FrozenAttacker(star)
    for l in range(L):
        learner = make_learner("optimistic", (2, 2), m.gamma, stream(5, l, LEARNER))
        traj, _ = run_learner(m, learner, attacker, RunConfig(T, L, 5), l)
        ledger.add(traj)
        counts.append(int(mask[traj.s, traj.a].sum()))
    assert ledger.aggregate <= whitebox_cost_bound(star, cfg.lam, max(counts), T, L) + 1e-12


def test_two_state_fixture_target_is_not_optimal():
    from poisonrl.mdp import value_iteration

    assert value_iteration(two_state_mdp())[2] != TWO_STATE_TARGET


def test_perturbation_rejects_negative():
    with pytest.raises(ValueError):
        Perturbation(np.array([[0.0, -0.1]]))
