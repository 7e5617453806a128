import numpy as np
import pytest

from snelab.game import TabularGameSpec


def deterministic_game(next_state, leader_reward, follower_rewards, num_states, initial_state=0):
    """Game whose transition at (h, x, a, b) goes to next_state[h, x, a, b] with certainty."""
    nxt = np.asarray(next_state)
    P = np.zeros(nxt.shape + (num_states,))
    np.put_along_axis(P, nxt[..., None], 1.0, axis=-1)
    H, S, A, B = nxt.shape
    r_l = np.asarray(leader_reward, dtype=float)
    r_f = np.asarray(follower_rewards, dtype=float)
    return TabularGameSpec(num_states, H, A, (B,), r_l, r_f, P, initial_state)


@pytest.fixture
def chain_game():
    """Two states, H=2, A=B=2: action pair (a, b) moves to state a; rewards fixed."""
    H, S, A, B = 2, 2, 2, 2
    nxt = np.zeros((H, S, A, B), dtype=int)
    nxt[:] = np.arange(A)[None, None, :, None]
    rng = np.random.default_rng(7)
    r_l = np.round(rng.uniform(-1, 1, size=(H, S, A, B)), 3)
    r_f = np.round(rng.uniform(-1, 1, size=(1, H, S, A, B)), 3)
    return deterministic_game(nxt, r_l, r_f, S)
