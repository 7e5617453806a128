import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snelab.stage import (
    GridTooLarge,
    NoPureProfile,
    StageGame,
    TieBreak,
    TieBreakRule,
    follower_pure_nash_set,
    grid_oracle,
    quantize,
    solve_stage_sne,
)


def random_stage(seed, A=3, fa=(3,)):
    rng = np.random.default_rng(seed)
    B = int(np.prod(fa))
    return StageGame(rng.uniform(-1, 1, (A, B)), rng.uniform(-1, 1, (len(fa), A, B)), fa)


def test_all_ties_split_by_tiebreak():
    game = StageGame([[5.0, -5.0]], [[[0.0, 0.0]]], (2,))
    opt = solve_stage_sne(game, TieBreak.OPTIMISTIC)
    pes = solve_stage_sne(game, TieBreak.PESSIMISTIC)
    assert (opt.leader_value, opt.follower_profile) == (5.0, 0)
    assert (pes.leader_value, pes.follower_profile) == (-5.0, 1)


def test_dominant_follower_response():
    game = StageGame([[0.3, -0.2, 0.9]], [[[0.1, 0.7, 0.4]]], (3,))
    for tb in TieBreak:
        sol = solve_stage_sne(game, tb)
        assert sol.follower_profile == 1
        assert sol.leader_value == pytest.approx(-0.2)


def test_commitment_beats_pure_play_and_certificate_holds():
    for seed in range(50):
        game = random_stage(seed)
        sol = solve_stage_sne(game)
        assert sol.certificate.min() >= -1e-7
        assert abs(sol.leader_mixed.sum() - 1) <= 1e-9
        for a in range(3):
            br = follower_pure_nash_set(game.followers, game.follower_actions, np.eye(3)[a])
            assert sol.leader_value >= max(game.leader[a, b] for b in br) - 1e-9


def test_pessimistic_never_exceeds_optimistic():
    for seed in range(500):
        game = random_stage(seed, A=2, fa=(2,)) if seed % 2 else random_stage(seed)
        opt = solve_stage_sne(game, TieBreak.OPTIMISTIC)
        pes = solve_stage_sne(game, TieBreak.PESSIMISTIC)
        assert pes.leader_value <= opt.leader_value + 1e-9
        assert pes.follower_profile in pes.best_response_set


def test_pessimistic_value_is_worst_in_response_set():
    for seed in range(50):
        game = random_stage(seed)
        sol = solve_stage_sne(game, TieBreakRule(TieBreak.PESSIMISTIC, 0.01))
        values = sol.leader_mixed @ game.leader
        assert sol.leader_value == pytest.approx(min(values[b] for b in sol.best_response_set))


def test_optimistic_matches_grid_on_3x3():
    for seed in range(20):
        game = random_stage(seed)
        grid = grid_oracle(game, resolution=0.005)
        assert abs(solve_stage_sne(game).leader_value - grid.leader_value) <= 0.02


def test_grid_agrees_on_2x2_within_resolution():
    res = 0.01
    for seed in range(30):
        game = random_stage(seed, A=2, fa=(2,))
        spread = np.ptp(game.leader)
        grid = grid_oracle(game, resolution=res)
        assert abs(solve_stage_sne(game).leader_value - grid.leader_value) <= res * spread + 1e-9


def test_grid_pure_dominant_and_degenerate():
    L = np.array([[1.0, 0.9], [-1.0, -0.5]])
    F = np.array([[[0.2, 0.1], [0.0, 0.3]]])
    sol = grid_oracle(StageGame(L, F, (2,)))
    assert np.allclose(sol.leader_mixed, [1.0, 0.0])
    one = grid_oracle(StageGame([[0.2, 0.4]], [[[1.0, 0.0]]], (2,)), resolution=0.25)
    assert np.allclose(one.leader_mixed, [1.0]) and one.follower_profile == 0


def test_grid_guards():
    with pytest.raises(GridTooLarge):
        grid_oracle(random_stage(0, A=4), resolution=0.0001)
    with pytest.raises(GridTooLarge):
        grid_oracle(random_stage(0, A=5))
    with pytest.raises(ValueError):
        grid_oracle(random_stage(0, A=2, fa=(2, 2)))


def test_coordination_and_matching_pennies():
    # followers 0 and 1 each choose 0/1; one leader action
    coord = np.zeros((2, 1, 4))
    for b, (i, j) in enumerate(itertools.product(range(2), range(2))):
        coord[:, 0, b] = float(i == j)
    assert follower_pure_nash_set(coord, (2, 2), [1.0]) == [0, 3]
    pennies = np.zeros((2, 1, 4))
    for b, (i, j) in enumerate(itertools.product(range(2), range(2))):
        pennies[0, 0, b] = 1.0 if i == j else -1.0
        pennies[1, 0, b] = -pennies[0, 0, b]
    assert follower_pure_nash_set(pennies, (2, 2), [1.0]) == []
    with pytest.raises(NoPureProfile):
        solve_stage_sne(StageGame(np.zeros((1, 4)), pennies, (2, 2)))


def _brute_nash(F, pi):
    u = np.einsum("a,iab->ib", pi, F).reshape(2, 2, 2)
    out = []
    for b1, b2 in itertools.product(range(2), range(2)):
        if u[0, b1, b2] >= u[0, 1 - b1, b2] - 1e-9 and u[1, b1, b2] >= u[1, b1, 1 - b2] - 1e-9:
            out.append(b1 * 2 + b2)
    return out


def test_two_follower_nash_set_matches_brute_force():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        F = rng.uniform(-1, 1, (2, 2, 4))
        pi = rng.dirichlet(np.ones(2))
        assert follower_pure_nash_set(F, (2, 2), pi) == _brute_nash(F, pi)


def test_multi_follower_solution_is_nash():
    solved = 0
    for seed in range(40):
        game = random_stage(seed, A=2, fa=(2, 2))
        try:
            sol = solve_stage_sne(game)
        except NoPureProfile:
            continue
        solved += 1
        assert sol.certificate.min() >= -1e-7
        assert sol.follower_profile in follower_pure_nash_set(game.followers, (2, 2), sol.leader_mixed)
    assert solved > 30


def test_from_nested_flattens_row_major():
    L = np.arange(2 * 2 * 3).reshape(2, 2, 3).astype(float)
    F = np.zeros((2, 2, 2, 3))
    g = StageGame.from_nested(L, F)
    assert g.follower_actions == (2, 3)
    assert g.leader[1, 4] == L[1, 1, 1]


def test_tiebreak_margin_bounds():
    with pytest.raises(ValueError):
        TieBreakRule(TieBreak.PESSIMISTIC, 0.0)
    with pytest.raises(ValueError):
        TieBreakRule(TieBreak.PESSIMISTIC, 0.2)


def test_quantize_examples():
    assert quantize(0.26, 0.1) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        quantize(1.0, 0.0)


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(values=arrays(float, st.integers(1, 20), elements=finite), eps=st.floats(1e-4, 1.0))
def test_quantize_is_idempotent_and_close(values, eps):
    q = quantize(values, eps)
    assert np.allclose(quantize(q, eps), q, atol=1e-12)
    assert np.abs(q - values).max() <= eps / 2 + 1e-12


@settings(max_examples=100, deadline=None)
@given(values=arrays(float, st.integers(2, 10), elements=finite, unique=True), eps=st.floats(1e-4, 0.1))
def test_quantize_keeps_argmax_when_gaps_exceed_eps(values, eps):
    gaps = np.diff(np.sort(values))
    if gaps.min() <= eps:
        return
    assert np.argmax(quantize(values, eps)) == np.argmax(values)
