import itertools

import numpy as np
import pytest

from conftest import deterministic_game
from snelab.game import JointPolicy, TabularGameSpec, episode_rng, random_game, sample_episode
from snelab.planner import (
    ShapeMismatch,
    decompose_episode,
    evaluate_policies,
    exact_sne,
    myopic_best_response,
    occupancy,
)
from snelab.stage import StageGame, TieBreak, solve_stage_sne


def test_horizon_one_is_a_stage_solve():
    spec = random_game(3, 3, [2], 1, seed=4)
    plan = exact_sne(spec)
    for x in range(3):
        sol = solve_stage_sne(StageGame(spec.leader_reward[0, x], spec.follower_rewards[:, 0, x], (2,)))
        assert np.array_equal(plan.policy.leader[0, x], sol.leader_mixed)
        assert plan.stage[0][x].follower_profile == sol.follower_profile
        assert plan.values.V[0, 0, x] == pytest.approx(sol.leader_value, abs=1e-12)


def test_dummy_follower_reduces_to_value_iteration():
    spec = random_game(4, 3, [1], 3, seed=9)
    plan = exact_sne(spec)
    V = np.zeros(4)
    for h in reversed(range(3)):
        V = (spec.leader_reward[h, :, :, 0] + spec.transition[h, :, :, 0] @ V).max(axis=1)
    assert np.allclose(plan.values.V[0, 0], V, atol=1e-9)


def test_sne_beats_every_deterministic_leader_policy():
    spec = random_game(2, 2, [2], 2, seed=13)
    plan = exact_sne(spec)
    for choice in itertools.product(range(2), repeat=4):
        leader = np.eye(2)[np.array(choice).reshape(2, 2)]
        followers, _ = myopic_best_response(spec, leader)
        v = evaluate_policies(spec, JointPolicy(leader, followers)).V[0, 0, 0]
        assert plan.value_at(0) >= v - 1e-9


def test_sne_beats_random_mixed_leader_policies():
    spec = random_game(3, 2, [2], 3, seed=21)
    v_star = exact_sne(spec).value_at(0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        leader = rng.dirichlet(np.ones(2), size=(3, 3))
        followers, _ = myopic_best_response(spec, leader)
        assert v_star >= evaluate_policies(spec, JointPolicy(leader, followers)).V[0, 0, 0] - 1e-9


def test_plan_values_are_reproduced_and_certified():
    for seed in range(5):
        spec = random_game(3, 2, [3], 3, seed)
        plan = exact_sne(spec)
        again = evaluate_policies(spec, plan.policy)
        assert np.allclose(again.V, plan.values.V, atol=1e-9)
        assert plan.worst_certificate() >= -1e-7
        H = spec.horizon
        for h in range(H + 1):
            assert np.all(np.abs(plan.values.V[0, h]) <= H - h + 1e-9)


def test_pessimistic_value_below_optimistic():
    for seed in range(10):
        spec = random_game(3, 2, [2], 2, seed)
        assert exact_sne(spec, "pessimistic").value_at(0) <= exact_sne(spec).value_at(0) + 1e-9


def test_value_tables_are_bellman_consistent():
    spec = random_game(3, 2, [2, 2], 3, seed=1)
    pol = JointPolicy.uniform(spec)
    vt = evaluate_policies(spec, pol)
    rewards = np.concatenate([spec.leader_reward[None], spec.follower_rewards])
    for h in range(3):
        assert np.allclose(vt.Q[:, h], rewards[:, h] + np.einsum("sabt,pt->psab", spec.transition[h], vt.V[:, h + 1]))
        assert np.allclose(vt.V[:, h], np.einsum("psab,sab->ps", vt.Q[:, h], pol.joint()[h]))


def test_zero_rewards_and_one_step_evaluation():
    spec = random_game(2, 2, [2], 2, seed=0)
    zero = spec.with_rewards(np.zeros_like(spec.leader_reward), np.zeros_like(spec.follower_rewards))
    assert np.all(evaluate_policies(zero, JointPolicy.uniform(zero)).V == 0)
    one = random_game(2, 3, [2], 1, seed=3)
    pol = JointPolicy.uniform(one)
    V = evaluate_policies(one, pol).V
    assert np.allclose(V[0, 0], (one.leader_reward[0] * pol.joint()[0]).sum(axis=(1, 2)))


def test_evaluation_matches_monte_carlo():
    spec = random_game(3, 2, [2], 3, seed=6)
    rng = np.random.default_rng(1)
    pol = JointPolicy(rng.dirichlet(np.ones(2), (3, 3)), (rng.dirichlet(np.ones(2), (3, 3)),))
    n = 20_000
    returns = np.array([sample_episode(spec, pol, episode_rng(2, k)).leader_return() for k in range(n)])
    se = returns.std(ddof=1) / np.sqrt(n)
    assert abs(returns.mean() - evaluate_policies(spec, pol).V[0, 0, 0]) <= 3 * se


def test_myopic_response_tiebreaks():
    H, S, A, B = 1, 1, 1, 3
    spec = TabularGameSpec(S, H, A, (B,), [[[[0.2, 0.9, -0.4]]]], np.zeros((1, H, S, A, B)),
                           np.ones((H, S, A, B, S)))
    leader = np.ones((1, 1, 1))
    assert myopic_best_response(spec, leader, "optimistic")[1][0, 0] == 1
    assert myopic_best_response(spec, leader, "pessimistic")[1][0, 0] == 2
    dominant = spec.with_rewards(spec.leader_reward, [[[[[0.0, 0.1, 0.5]]]]])
    for tb in ("optimistic", "pessimistic"):
        assert myopic_best_response(dominant, leader, tb)[1][0, 0] == 2


def test_myopic_response_reproduces_plan():
    for seed in range(5):
        spec = random_game(3, 3, [2], 3, seed)
        plan = exact_sne(spec)
        _, profiles = myopic_best_response(spec, plan.policy.leader)
        assert np.array_equal(profiles, [[s.follower_profile for s in row] for row in plan.stage])


def test_occupancy_basics():
    spec = random_game(3, 2, [2], 3, seed=2)
    pol = JointPolicy(np.random.default_rng(0).dirichlet(np.ones(2), (3, 3)), JointPolicy.uniform(spec).followers)
    rho = occupancy(spec, pol)
    assert np.allclose(rho[0, 0], pol.joint()[0, 0])
    assert np.all(rho[0, 1:] == 0)
    assert np.allclose(rho.sum(axis=(1, 2, 3)), 1.0)
    assert np.all(rho >= 0)


def test_occupancy_uniform_on_symmetric_chain():
    H, S, A, B = 3, 2, 2, 2
    P = np.full((H, S, A, B, S), 0.5)
    spec = TabularGameSpec(S, H, A, (B,), np.zeros((H, S, A, B)), np.zeros((1, H, S, A, B)), P)
    rho = occupancy(spec, JointPolicy.uniform(spec))
    assert np.allclose(rho[1:], 1.0 / (S * A * B))


def test_decomposition_of_exact_self_estimate_is_zero():
    spec = random_game(3, 2, [2], 3, seed=3)
    pol = exact_sne(spec).policy
    vt = evaluate_policies(spec, pol)
    traj = sample_episode(spec, pol, episode_rng(0, 0))
    rep = decompose_episode(spec, vt.Q[0], vt.V[0], pol, pol, traj)
    for term in (rep.lhs, rep.computational_error, rep.statistical_error, rep.randomness, rep.identity_residual):
        assert abs(term) <= 1e-12
    assert np.abs(rep.delta).max() <= 1e-12


def test_statistical_error_vanishes_with_perfect_regression(chain_game):
    spec = chain_game
    executed = JointPolicy.uniform(spec)
    reference = exact_sne(spec).policy
    # perfect model: Q = r + P V for the executed V, no bonus
    vt = evaluate_policies(spec, executed)
    traj = sample_episode(spec, executed, episode_rng(1, 0))
    rep = decompose_episode(spec, vt.Q[0], vt.V[0], executed, reference, traj)
    assert abs(rep.statistical_error) <= 1e-12
    assert rep.identity_residual <= 1e-12
    assert rep.lhs == pytest.approx(rep.computational_error + rep.randomness, abs=1e-12)


def test_decomposition_identity_with_arbitrary_estimates():
    spec = random_game(3, 2, [2], 3, seed=8)
    rng = np.random.default_rng(4)
    executed = JointPolicy(rng.dirichlet(np.ones(2), (3, 3)), (rng.dirichlet(np.ones(2), (3, 3)),))
    Q = rng.uniform(-2, 2, (3, 3, 2, 2))
    V = np.zeros((4, 3))
    V[:3] = np.einsum("hsab,hsab->hs", Q, executed.joint())
    for k in range(20):
        traj = sample_episode(spec, executed, episode_rng(5, k))
        rep = decompose_episode(spec, Q, V, executed, exact_sne(spec).policy, traj)
        assert rep.identity_residual <= 1e-10


def test_decomposition_shape_check():
    spec = random_game(2, 2, [2], 2, seed=0)
    pol = JointPolicy.uniform(spec)
    traj = sample_episode(spec, pol, episode_rng(0, 0))
    with pytest.raises(ShapeMismatch):
        decompose_episode(spec, np.zeros((2, 2, 2, 3)), np.zeros((3, 2)), pol, pol, traj)


def test_deterministic_game_helper_builds_valid_spec():
    nxt = np.zeros((1, 2, 1, 1), dtype=int)
    spec = deterministic_game(nxt, np.zeros((1, 2, 1, 1)), np.zeros((1, 1, 2, 1, 1)), 2)
    assert spec.transition[0, 1, 0, 0].tolist() == [1.0, 0.0]
