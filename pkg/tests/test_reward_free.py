import itertools
import json

import numpy as np
import pytest

from conftest import deterministic_game
from snelab.game import random_game
from snelab.online import LearnerConfig, run_ovi_sne
from snelab.planner import exact_sne
from snelab.reward_free import (
    EmpiricalRewards,
    MultiFollower,
    NotLeaderController,
    commit_with_estimated_rewards,
    deterministic_leader_policies,
    gap_epsilon,
    hoeffding_radius,
    random_policy,
    reward_free_explore,
    value_error,
)


def true_tables(spec):
    return np.concatenate([spec.leader_reward[None], spec.follower_rewards])


def test_chain_reachable_cells_are_all_visited():
    # every action pair from every state moves to state (x + 1) mod S: one path of states
    H, S, A, B = 3, 3, 2, 2
    nxt = np.zeros((H, S, A, B), dtype=int)
    nxt[:] = ((np.arange(S) + 1) % S)[None, :, None, None]
    rng = np.random.default_rng(0)
    spec = deterministic_game(nxt, rng.uniform(-1, 1, (H, S, A, B)), rng.uniform(-1, 1, (1, H, S, A, B)), S)
    est, _ = reward_free_explore(spec, k0=20, k=2000, seed=1)
    for h in range(H):
        assert np.all(est.counts[h, h % S] >= 1)
        assert np.all(est.counts[h, [x for x in range(S) if x != h % S]] == 0)
    assert np.array_equal(est.mask, est.counts == 0)
    assert np.all(est.leader[est.mask] == 0)


def test_exact_rewards_recovered_on_visited_cells():
    spec = random_game(3, 2, [2], 2, seed=3)
    est, _ = reward_free_explore(spec, k0=20, k=5000, seed=3)
    seen = ~est.mask
    assert np.allclose(est.leader[seen], spec.leader_reward[seen])
    assert np.allclose(est.followers[:, seen], spec.follower_rewards[:, seen])


def test_hoeffding_radius_holds_with_noisy_rewards():
    held = 0
    for seed in range(20):
        spec = random_game(3, 2, [2], 2, seed)
        est, _ = reward_free_explore(spec, k0=20, k=5000, seed=seed, bernoulli_rewards=True)
        err = np.abs(true_tables(spec) - np.concatenate([est.leader[None], est.followers]))
        held += bool(np.all(err <= hoeffding_radius(est.counts)[None]))
        assert np.all(np.abs(est.leader) <= 1)
    assert held >= 19


def test_pool_policies_are_uniform_at_target():
    spec = random_game(2, 3, [2, 2], 2, seed=4)
    _, psi = reward_free_explore(spec, k0=5, k=10, seed=0)
    assert len(psi) == 2 * 2 * 5
    for j in range(len(psi)):
        pol = psi.policy(j)
        assert pol.problems() == []
        h, x = psi.targets[j]
        assert np.array_equal(pol.leader[h, x], np.full(3, 1 / 3))
        for f in pol.followers:
            assert np.array_equal(f[h, x], np.full(2, 0.5))


def test_value_error_small_with_many_episodes():
    spec = random_game(3, 2, [2], 2, seed=6)
    est, _ = reward_free_explore(spec, k0=30, k=20_000, seed=6, bernoulli_rewards=True)
    rng = np.random.default_rng(0)
    assert value_error(spec, est, [random_policy(spec, rng) for _ in range(50)]) <= 0.1


def test_empirical_rewards_round_trip(tmp_path):
    spec = random_game(2, 2, [2], 2, seed=0)
    est, _ = reward_free_explore(spec, k0=3, k=100, seed=0)
    est.write(tmp_path / "r.json")
    back = EmpiricalRewards.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert np.array_equal(back.counts, est.counts)
    assert back.metadata["explorer"] == "ucbvi-hoeffding"


def test_commit_with_true_rewards_matches_plain_run():
    spec = random_game(3, 2, [2], 2, seed=2)
    truth = exact_sne(spec)
    cfg = LearnerConfig(episodes=40, beta=1.0, seed=5)
    exact = EmpiricalRewards(spec.leader_reward, spec.follower_rewards, np.ones(spec.leader_reward.shape, int))
    a = commit_with_estimated_rewards(spec, exact, cfg, truth)
    b = run_ovi_sne(spec, cfg, truth)
    assert [e.regret_inst for e in a.episodes] == [e.regret_inst for e in b.episodes]
    assert [e.true_regret_inst for e in a.episodes] == [e.regret_inst for e in b.episodes]


def test_commit_tolerates_masked_cells():
    spec = random_game(3, 2, [2], 2, seed=1)
    est, _ = reward_free_explore(spec, k0=2, k=20, seed=1)
    assert est.mask.any()
    report = commit_with_estimated_rewards(spec, est, LearnerConfig(episodes=10, beta=1.0), exact_sne(spec))
    assert len(report.episodes) == 10 and report.metadata["unvisited_cells"] == int(est.mask.sum())


def test_leader_reward_perturbation_costs_at_most_two_h_delta():
    spec = random_game(3, 2, [2], 2, seed=7)
    truth = exact_sne(spec)
    cfg = LearnerConfig(episodes=400, beta=1.0, seed=0)
    known = run_ovi_sne(spec, cfg, truth)
    rng = np.random.default_rng(7)
    noisy = np.clip(spec.leader_reward + rng.uniform(-0.05, 0.05, spec.leader_reward.shape), -1, 1)
    est = EmpiricalRewards(noisy, spec.follower_rewards, np.ones(noisy.shape, int))
    report = commit_with_estimated_rewards(spec, est, cfg, truth)
    assert report.episodes[-1].true_regret_inst <= 2 * spec.horizon * 0.05 + known.episodes[-1].regret_inst + 1e-9


# -- gap_eps -----------------------------------------------------------------------------


def one_leader_game():
    """x0 -> x1 for sure; at (h=0, x0) the follower's runner-up action is 0.05 worse for it
    and 0.5 better for the leader."""
    H, S, A, B = 2, 2, 1, 2
    nxt = np.ones((H, S, A, B), dtype=int)
    r_l = np.zeros((H, S, A, B))
    r_f = np.zeros((1, H, S, A, B))
    r_l[0, 0, 0] = [0.0, 0.5]
    r_f[0, 0, 0, 0] = [1.0, 0.95]
    r_f[0, 1, :, 0] = [0.2, -0.3]
    return deterministic_game(nxt, r_l, r_f, S)


def brute_v_eps(spec, leader, eps):
    """Enumerate every deterministic follower policy whose stage choices are eps-optimal."""
    H, (S, A, B) = spec.horizon, spec.cell_shape
    best = -np.inf
    for choice in itertools.product(range(B), repeat=H * S):
        b = np.array(choice).reshape(H, S)
        ok = True
        for h, x in itertools.product(range(H), range(S)):
            u = leader[h, x] @ spec.follower_rewards[0, h, x]
            ok &= u[b[h, x]] >= u.max() - eps - 1e-12
        if not ok:
            continue
        V = np.zeros(S)
        for h in reversed(range(H)):
            Q = spec.leader_reward[h] + spec.transition[h] @ V
            V = np.array([leader[h, x] @ Q[x, :, b[h, x]] for x in range(S)])
        best = max(best, V[spec.initial_state])
    return best


def test_gap_of_hand_built_game():
    spec = one_leader_game()
    leader = [np.ones((2, 2, 1))]
    assert gap_epsilon(spec, 0.1, leader).gap == pytest.approx(0.5)
    assert brute_v_eps(spec, leader[0], 0.1) == pytest.approx(0.5)
    assert gap_epsilon(spec, 0.0, leader).gap == 0.0


def test_gap_is_zero_when_stage_gaps_exceed_eps():
    spec = one_leader_game()
    assert gap_epsilon(spec, 0.04, [np.ones((2, 2, 1))]).gap == 0.0


def test_gap_matches_brute_force_and_grows_with_eps():
    spec = random_game(2, 2, [2], 2, seed=5, leader_controller=True)
    cands = deterministic_leader_policies(spec)
    prev = 0.0
    for eps in (0.0, 0.05, 0.2, 0.5, 1.0):
        rep = gap_epsilon(spec, eps, cands)
        for leader, v in zip(cands, rep.v_eps):
            assert v == pytest.approx(brute_v_eps(spec, leader, eps), abs=1e-12)
        assert rep.gap >= prev - 1e-12
        prev = rep.gap
    assert gap_epsilon(spec, 0.0, cands).gap == 0.0


def test_gap_preconditions():
    with pytest.raises(NotLeaderController):
        gap_epsilon(random_game(2, 2, [2], 2, seed=0), 0.1, [np.full((2, 2, 2), 0.5)])
    with pytest.raises(MultiFollower):
        gap_epsilon(random_game(2, 2, [2, 2], 2, seed=0, leader_controller=True), 0.1, [np.full((2, 2, 2), 0.5)])


def test_explore_rejects_zero_budgets():
    spec = random_game(2, 2, [2], 2, seed=0)
    with pytest.raises(ValueError):
        reward_free_explore(spec, 0, 10, seed=0)
