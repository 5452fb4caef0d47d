"""End-to-end acceptance criteria; each test prints one pass/fail line."""

from __future__ import annotations

import math
import time
import warnings
from itertools import product

import numpy as np
import pytest

from oracles import (
    e_mu_scalar,
    e_q_scalar,
    grid_linear_opt,
    k0_scalar,
    n0_scalar,
    oracle_delta_star,
    series_occupancy,
    series_values,
    attack_cost_scalar,
    u_scalar,
    w_scalar,
)
from poisonrl.confidence import (
    ObservationCounts,
    UnvisitedPairsError,
    build_confidence_set,
    contains,
    reward_radius_scale,
    transition_radius_scale,
)
from poisonrl.fixtures import TWO_STATE_TARGET, two_state_mdp
from poisonrl.harness import ExperimentConfig, run_experiment
from poisonrl.learners import make_learner
from poisonrl.mdp import (
    all_rhos,
    enumerate_policies,
    mu_min_and_g,
    occupancy,
    policy_eval,
    q_rho_difference_check,
    random_mdp,
    rho,
    rho_identity_check,
)
from poisonrl.prior import attack_from_prior, generative_counts
from poisonrl.robust import delta_hat, inner_linear_opt, mu_low, q_high, robust_policy_eval, simulation_lemma_bound
from poisonrl.simulator import ATTACKER, LEARNER, RunConfig, run_learner, sample_step, stream
from poisonrl.twophase import (
    ExplorationOnlyAttacker,
    TheoryBudget,
    TwoPhaseConfig,
    error_terms,
    exploration_fixtures,
    k0_value,
    n0_terms,
    attack_cost_bound,
)
from poisonrl.whitebox import AttackConfig, Perturbation, delta_star, is_feasible_p1, poisoned_mdp
from twophase_runs import run_two_phase

SLACK = 1e-7


def random_instance(rng, max_dim=3):
    S, A = int(rng.integers(2, max_dim + 1)), int(rng.integers(2, max_dim + 1))
    mdp = random_mdp(rng, S, A, gamma=float(rng.uniform(0.5, 0.95)))
    target = tuple(int(x) for x in rng.integers(0, A, size=S))
    return mdp, target


def off_target_mask(S, A, target):
    off = np.ones((S, A), dtype=bool)
    off[np.arange(S), list(target)] = False
    return off


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_01_delta_star_is_minimal_feasible(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    feasible_star, dominated, worst = 0, 0, -np.inf
    for _ in range(50):
        mdp, target = random_instance(rng)
        cfg = AttackConfig(target, float(rng.uniform(0.01, 0.2)))
        star = delta_star(mdp, cfg)
        feasible_star += is_feasible_p1(mdp, cfg, star)
        off = off_target_mask(mdp.num_states, mdp.num_actions, target)
        found = 0
        while found < 50:
            cand = np.where(off, np.maximum(star.delta + rng.uniform(-0.02, 0.5, star.delta.shape), 0.0), 0.0)
            # direct check only: eps-robust optimality of the target in R - delta
            if not rho_gap_ok(poisoned_mdp(mdp, Perturbation(cand)), target, cfg.eps):
                continue
            found += 1
            worst = max(worst, float(np.max(star.delta - cand)))
            dominated += bool(np.all(star.delta <= cand + SLACK))
    elapsed = time.perf_counter() - start
    passed = feasible_star == 50 and dominated == 2500 and elapsed < 60
    report(1, "delta_star minimal and feasible", passed,
           f"feasible {feasible_star}/50, dominated {dominated}/2500, max(star - delta) {worst:.2e}, {elapsed:.1f}s")
    assert passed


def rho_gap_ok(mdp, target, eps):
    """Every policy differing from ``target`` trails it by ``eps`` in normalized return."""
    rhos = all_rhos(mdp)
    best = rhos[tuple(target)]
    return all((1 - mdp.gamma) * (best - r) >= eps - 1e-9 for pi, r in rhos.items() if pi != tuple(target))


def test_02_target_uniquely_enforced(report):
    rng = np.random.default_rng(2)
    worst_norm, worst_raw, bad = np.inf, np.inf, 0
    for _ in range(50):
        mdp, target = random_instance(rng)
        eps = float(rng.uniform(0.01, 0.2))
        poisoned = poisoned_mdp(mdp, delta_star(mdp, AttackConfig(target, eps)))
        rhos = all_rhos(poisoned)
        best = rhos[target]
        for pi, r in rhos.items():
            if pi == target:
                continue
            norm, raw = (1 - mdp.gamma) * (best - r), best - r
            worst_norm, worst_raw = min(worst_norm, norm - eps), min(worst_raw, raw - eps)
            bad += norm < eps - SLACK or raw < eps - SLACK
    passed = bad == 0
    report(2, "target uniquely eps-optimal after attack", passed,
           f"min normalized margin {worst_norm:.2e}, min raw margin {worst_raw:.2e}, violations {bad}")
    assert passed


def exploration_counts(mdp, steps, rng):
    counts = ObservationCounts(mdp.num_states, mdp.num_actions)
    s = int(rng.choice(mdp.num_states, p=mdp.initial_dist))
    for t in range(steps):
        a = int(rng.integers(mdp.num_actions))
        r, s2 = sample_step(mdp, s, a, rng)
        counts.update(s, a, r, s2)
        s = s2 if (t + 1) % mdp.horizon else int(rng.choice(mdp.num_states, p=mdp.initial_dist))
    return counts


def test_03_robust_evaluation_sandwich(report):
    rng = np.random.default_rng(3)
    pairs, violations, attempts = 0, 0, 0
    while pairs < 50:
        attempts += 1
        mdp, target = random_instance(rng)
        mdp = mdp.replace(noise_sigma=0.1)
        try:
            cs = build_confidence_set(exploration_counts(mdp, 3000, rng), 0.1, 1, 0.1, mdp.gamma, mdp.initial_dist)
        except UnvisitedPairsError:
            continue
        if not contains(cs, mdp):
            continue
        pairs += 1
        ev = policy_eval(mdp, target)
        v_low = robust_policy_eval(cs, target, "low")
        v_high = robust_policy_eval(cs, target, "high")
        ok = np.all(v_low - SLACK <= ev.v) and np.all(ev.v <= v_high + SLACK)
        ok &= np.all(ev.q <= q_high(cs, target, v_high) + SLACK)
        mu = occupancy(mdp, target)
        ok &= all(mu_low(cs, target, s) <= mu[s] + SLACK for s in range(mdp.num_states))
        violations += not ok
    grid_err = 0.0
    for _ in range(100):
        S = int(rng.integers(2, 4))
        p_hat = rng.dirichlet(np.ones(S))
        budget = float(rng.uniform(0, 1))
        v = rng.uniform(0, 1, S)
        for maximize in (True, False):
            p = inner_linear_opt(p_hat, budget, v, "max" if maximize else "min")
            grid_err = max(grid_err, abs(p @ v - grid_linear_opt(p_hat, budget, v, maximize)))
    passed = violations == 0 and grid_err <= 2e-3
    report(3, "robust evaluation sandwich", passed,
           f"{pairs} contained pairs ({attempts} drawn), violations {violations}, grid oracle gap {grid_err:.2e}")
    assert passed


def test_04_noiseless_collapse(report):
    """Large noiseless sample: robust perturbation approaches the white-box one."""
    rows = []
    mdp = two_state_mdp(noise_sigma=0.0)
    cfg = AttackConfig(TWO_STATE_TARGET, 0.1)
    counts = generative_counts(mdp, 10**6, np.random.default_rng(4))
    cs = build_confidence_set(counts, 0.0, 1, 0.1, mdp.gamma, mdp.initial_dist)
    gap = float(np.max(np.abs(delta_hat(cs, cfg).delta - delta_star(mdp, cfg).delta)))
    rows.append(gap)
    passed = gap <= 1e-4
    report(4, "noiseless collapse at 1e6 samples per pair", passed,
           f"|delta_hat - delta_star|_inf = {gap:.3e} (tolerance 1e-4); transition radius w/sqrt(N) = {cs.w / 1e3:.2e}")
    assert passed


def test_05_stopping_certifies_margin(report):
    mdp = two_state_mdp()
    star = delta_star(mdp, AttackConfig(TWO_STATE_TARGET, 0.1)).delta
    qualifying, held, switched, worst = 0, 0, 0, -np.inf
    for seed in range(20):
        run = run_two_phase(seed, T=5000, L=30, m=0.5, stop_at_switch=True)
        att = run.attacker
        if att.frozen_delta is None:
            continue
        switched += 1
        sets = [c.cs for c in att.checkpoints if c.cs is not None]
        if not all(contains(cs, mdp) for cs in sets):
            continue
        qualifying += 1
        excess = float(np.max(att.frozen_delta.delta - star - 0.5))
        worst = max(worst, excess)
        held += excess <= 1e-6
    passed = qualifying > 0 and held == qualifying
    report(5, "stopping condition bounds delta_hat by delta_star + m", passed,
           f"{switched}/20 switched, {qualifying} contained throughout, {held} within bound, max excess {worst:.3f}")
    assert passed


def test_06_confidence_coverage(report):
    mdp = two_state_mdp()
    L, p, runs = 3, 0.1, 200
    covered = 0
    for seed in range(runs):
        counts = ObservationCounts(2, 2)
        attacker = ExplorationOnlyAttacker()
        for l in range(L):
            learner = make_learner("optimistic", (2, 2), mdp.gamma, stream(seed, l, LEARNER))
            traj, _ = run_learner(mdp, learner, attacker, RunConfig(1000, L, seed), l)
            for rec in traj:
                counts.update(rec.s, rec.a, rec.r, rec.s_next)
        cs = build_confidence_set(counts, mdp.noise_sigma, L, p, mdp.gamma, mdp.initial_dist)
        covered += contains(cs, mdp)
    need = runs * (1 - p) - 3 * math.sqrt(runs * p * (1 - p))
    passed = covered >= need
    report(6, "confidence set coverage", passed, f"{covered}/{runs} covered, need >= {need:.1f}")
    assert passed


def test_07_identities(report):
    rng = np.random.default_rng(7)
    worst_rho, worst_q, worst_occ, sim_bad = 0.0, 0.0, 0.0, 0
    for _ in range(100):
        mdp, target = random_instance(rng)
        other = tuple(int(x) for x in rng.integers(0, mdp.num_actions, size=mdp.num_states))
        worst_rho = max(worst_rho, rho_identity_check(mdp, target))
        worst_q = max(worst_q, q_rho_difference_check(mdp, target, other))
        worst_occ = max(worst_occ, abs(occupancy(mdp, target).sum() - 1))
        m2 = random_mdp(rng, mdp.num_states, mdp.num_actions, gamma=mdp.gamma)
        lhs, rhs = simulation_lemma_bound(mdp, m2, target)
        sim_bad += lhs > rhs
    passed = worst_rho <= 1e-8 and worst_q <= 1e-8 and worst_occ <= 1e-9 and sim_bad == 0
    report(7, "return and occupancy identities", passed,
           f"rho {worst_rho:.1e}, q-rho {worst_q:.1e}, occupancy {worst_occ:.1e}, simulation violations {sim_bad}")
    assert passed


def prior_bound_oracle(mdp, target, eps, lam, e_q, e_mu, subopt, T):
    star = oracle_delta_star(mdp.rewards, mdp.transitions, mdp.gamma, mdp.initial_dist, target, eps)
    total = star.copy()
    for s, a in product(range(mdp.num_states), range(mdp.num_actions)):
        if a == target[s]:
            continue
        nb = list(target)
        nb[s] = a
        mu = series_occupancy(mdp.transitions, mdp.gamma, mdp.initial_dist, nb)[s]
        if mu <= e_mu:
            return math.inf
        total[s, a] += 2 * e_q + eps / (mu - e_mu) - eps / mu
    return (np.max(np.abs(total)) + lam) * subopt / T


def test_08_formula_oracles(report):
    rng = np.random.default_rng(8)
    worst = {k: 0.0 for k in ("u", "w", "e_q_hat", "e_mu", "n0", "k0", "two_phase", "prior_data")}
    for _ in range(10):
        mdp, target = random_instance(rng)
        S, A = mdp.num_states, mdp.num_actions
        sigma, L, p = float(rng.uniform(0.01, 1)), int(rng.integers(1, 200)), float(rng.uniform(0.01, 0.5))
        u, w = reward_radius_scale(sigma, S, A, L, p), transition_radius_scale(S, A, L, p)
        worst["u"] = max(worst["u"], rel_err(u, u_scalar(sigma, S, A, L, p)))
        worst["w"] = max(worst["w"], rel_err(w, w_scalar(S, A, L, p)))

        n = int(rng.integers(10**8, 10**9))
        counts = generative_counts(mdp.replace(noise_sigma=sigma), n, rng)
        cs = build_confidence_set(counts, sigma, L, p, mdp.gamma, mdp.initial_dist)
        terms = error_terms(cs)
        rad = u / math.sqrt(n)
        r_hat = counts.reward_sum / n
        r_hat_range = float((r_hat + rad).max() - (r_hat - rad).min())
        worst["e_q_hat"] = max(worst["e_q_hat"], rel_err(terms.e_q_hat, e_q_scalar(u, w, r_hat_range, mdp.gamma, n)))
        worst["e_mu"] = max(worst["e_mu"], rel_err(terms.e_mu, e_mu_scalar(w, mdp.gamma, n)))

        m, eps = float(rng.uniform(0.05, 2)), float(rng.uniform(0.01, 0.3))
        alpha, beta = float(rng.uniform(1e-3, 0.1)), float(rng.uniform(1e-5, 1 / (8 * S * A) / 2))
        mu_min, _ = mu_min_and_g(mdp)
        r_range = float(mdp.rewards.max() - mdp.rewards.min())
        n0 = max(n0_terms(u, w, r_range, m, eps, mu_min, mdp.gamma))
        worst["n0"] = max(worst["n0"], rel_err(n0, n0_scalar(u, w, r_range, m, eps, mu_min, mdp.gamma)))
        k0 = k0_value(n0, alpha, beta, mu_min, S, A, p)
        worst["k0"] = max(worst["k0"], rel_err(k0, k0_scalar(n0, alpha, beta, mu_min, S, A, p)))

        lam, T, subopt = float(rng.uniform(0.1, 2)), int(rng.integers(100, 10**5)), float(rng.uniform(1, 1000))
        ucfg = TwoPhaseConfig(target, eps, lam, m, p, sigma, mdp.gamma, mdp.initial_dist, L)
        budget = TheoryBudget(n0, k0, (n0, 0.0, 0.0), alpha, beta, mu_min, r_range, u, w)
        star_inf = float(oracle_delta_star(mdp.rewards, mdp.transitions, mdp.gamma, mdp.initial_dist, target, eps).max())
        want = attack_cost_scalar(k0, L, T, float(np.max(np.abs(mdp.rewards))), sigma, p, lam, star_inf, m, subopt)
        worst["two_phase"] = max(worst["two_phase"], rel_err(attack_cost_bound(mdp, ucfg, budget, subopt, T, L), want))

        rep = attack_from_prior(counts, AttackConfig(target, eps, lam), sigma, mdp.gamma, mdp.initial_dist, L, p,
                                mdp_true=mdp, subopt=subopt, T=T)
        want = prior_bound_oracle(mdp, target, eps, lam, rep.e_q, rep.e_mu, subopt, T)
        assert math.isfinite(want) and not rep.vacuous
        e_q_true = e_q_scalar(u, w, r_range, mdp.gamma, n)
        worst["prior_data"] = max(worst["prior_data"], rel_err(rep.bound, want), rel_err(rep.e_q, e_q_true))
    passed = all(v <= 1e-9 for v in worst.values())
    report(8, "closed-form formulas match scripted oracles", passed,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert passed


@pytest.mark.slow
def test_09_cost_diminishes_end_to_end(report):
    start = time.perf_counter()
    base = {
        "mdp": "builtin:two_state",
        "learner": "optimistic",
        "attacker": "adaptive",
        "attacker_params": {"target": list(TWO_STATE_TARGET), "eps": 0.1, "lambda": 1.0, "m": 0.5, "p": 0.1},
        "seeds": list(range(10)),
    }
    small = run_experiment(ExperimentConfig.from_dict({**base, "T": 500, "L": 10}))
    large = run_experiment(ExperimentConfig.from_dict({**base, "T": 5000, "L": 100}))
    elapsed = time.perf_counter() - start
    matches = [m for r in large["_results"] for m in r.attack_match]
    started = sum(r.attack_started for r in large["_results"])
    min_match = min(matches) if matches else float("nan")
    passed = (
        large["cost_mean"] < small["cost_mean"]
        and started == 10
        and bool(matches)
        and min_match >= 0.9
        and elapsed < 600
    )
    report(9, "attack cost diminishes with T and L", passed,
           f"cost {small['cost_mean']:.4f} at (500, 10) vs {large['cost_mean']:.4f} at (5000, 100); "
           f"attack started {started}/10; min final-quarter match {min_match:.3f}; {elapsed:.0f}s")
    assert passed


def test_10_exploration_fixtures(report):
    rng = np.random.default_rng(10)
    draws, bad = 0, 0
    while draws < 10:
        mdp, _ = random_instance(rng)
        s, a = int(rng.integers(mdp.num_states)), int(rng.integers(mdp.num_actions))
        _, g = mu_min_and_g(mdp)
        alpha = float(rng.uniform(0.05, 0.5)) * float(g[s, a])
        _, plus, minus = exploration_fixtures(mdp, s, a, alpha)
        draws += 1
        for fixture, must_play in ((plus, True), (minus, False)):
            rhos = all_rhos(fixture)
            best = max(rhos.values())
            for pi, r in rhos.items():
                if r >= best - alpha and (pi[s] == a) != must_play:
                    bad += 1
    passed = bad == 0
    report(10, "exploration fixture optimal sets", passed, f"{draws} draws, violations {bad}")
    assert passed
