"""Exact planning with a known model: SNE by backward induction, policy
evaluation, myopic best responses, occupancy measures, and the one-episode
regret decomposition used to audit the learners."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .game import JointPolicy, TabularGameSpec, Trajectory
from .stage import (
    NoPureProfile,
    StageGame,
    StageSolution,
    TieBreak,
    _tie_pick,
    as_tiebreak,
    follower_pure_nash_set,
    solve_stage_sne,
)


class ShapeMismatch(ValueError):
    pass


@dataclass
class ValueTables:
    """Per-player values; player 0 is the leader, player i+1 is follower i."""

    V: np.ndarray  # (N+1, H+1, S), V[:, H] = 0
    Q: np.ndarray  # (N+1, H, S, A, B)

    @property
    def leader_V(self) -> np.ndarray:
        return self.V[0]

    @property
    def leader_Q(self) -> np.ndarray:
        return self.Q[0]


@dataclass
class SnePlan:
    policy: JointPolicy
    values: ValueTables
    stage: list  # stage[h][x] -> StageSolution
    tiebreak: TieBreak

    @property
    def leader_values(self) -> np.ndarray:
        return self.values.V[0]

    def value_at(self, x: int) -> float:
        return float(self.values.V[0, 0, x])

    def worst_certificate(self) -> float:
        return float(min(s.certificate.min() for row in self.stage for s in row))

    def to_dict(self) -> dict:
        return {
            "tiebreak": self.tiebreak.value,
            "policy": self.policy.to_dict(),
            "leader_values": self.values.V[0].tolist(),
            "follower_values": self.values.V[1:].tolist(),
            "stage": [[s.to_dict() for s in row] for row in self.stage],
        }


def pure_follower_policy(spec: TabularGameSpec, profiles: np.ndarray) -> tuple[np.ndarray, ...]:
    """Point-mass follower policies from joint profile indices, profiles shape (H, S)."""
    coords = np.unravel_index(profiles, spec.follower_actions)
    out = []
    for i, n in enumerate(spec.follower_actions):
        out.append(np.eye(n)[coords[i]])
    return tuple(out)


def stage_game(spec: TabularGameSpec, leader_payoff: np.ndarray, h: int, x: int) -> StageGame:
    return StageGame(leader_payoff, spec.follower_rewards[:, h, x], spec.follower_actions)


def evaluate_policies(spec: TabularGameSpec, policy: JointPolicy) -> ValueTables:
    """Exact dynamic-programming evaluation for every player at once."""
    H, (S, A, B) = spec.horizon, spec.cell_shape
    rewards = np.concatenate([spec.leader_reward[None], spec.follower_rewards])  # (N+1, H, S, A, B)
    joint = policy.joint()
    V = np.zeros((rewards.shape[0], H + 1, S))
    Q = np.zeros(rewards.shape)
    for h in range(H - 1, -1, -1):
        Q[:, h] = rewards[:, h] + np.einsum("sabt,pt->psab", spec.transition[h], V[:, h + 1])
        V[:, h] = np.einsum("psab,sab->ps", Q[:, h], joint[h])
    return ValueTables(V, Q)


def exact_sne(spec: TabularGameSpec, tiebreak=TieBreak.OPTIMISTIC) -> SnePlan:
    """Stackelberg-Nash equilibrium of the known game by backward induction over stage games."""
    rule = as_tiebreak(tiebreak)
    H, (S, A, B) = spec.horizon, spec.cell_shape
    leader = np.zeros((H, S, A))
    profiles = np.zeros((H, S), dtype=int)
    V_next = np.zeros(S)
    stages: list = [None] * H
    for h in range(H - 1, -1, -1):
        Ql = spec.leader_reward[h] + spec.transition[h] @ V_next
        row = []
        for x in range(S):
            sol = solve_stage_sne(stage_game(spec, Ql[x], h, x), rule)
            leader[h, x] = sol.leader_mixed
            profiles[h, x] = sol.follower_profile
            row.append(sol)
        stages[h] = row
        V_next = np.array([leader[h, x] @ Ql[x, :, profiles[h, x]] for x in range(S)])
    policy = JointPolicy(leader, pure_follower_policy(spec, profiles))
    return SnePlan(policy, evaluate_policies(spec, policy), stages, rule.kind)


def myopic_best_response(spec: TabularGameSpec, leader: np.ndarray, tiebreak=TieBreak.OPTIMISTIC):
    """Followers' myopic pure Nash response to a leader policy, ties broken on the
    leader's continuation value (best case for optimistic, worst case for pessimistic).

    Returns ``(follower policies, profiles (H, S))``.
    """
    rule = as_tiebreak(tiebreak)
    H, (S, A, B) = spec.horizon, spec.cell_shape
    leader = np.asarray(leader, dtype=float)
    profiles = np.zeros((H, S), dtype=int)
    V_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        Ql = spec.leader_reward[h] + spec.transition[h] @ V_next
        V = np.zeros(S)
        for x in range(S):
            pi = leader[h, x]
            br = follower_pure_nash_set(spec.follower_rewards[:, h, x], spec.follower_actions, pi)
            if not br:
                raise NoPureProfile(f"no pure follower Nash profile at h={h}, x={x}")
            values = pi @ Ql[x]
            b = _tie_pick(values, br, rule.pessimistic)
            profiles[h, x] = b
            V[x] = values[b]
        V_next = V
    return pure_follower_policy(spec, profiles), profiles


def occupancy(spec: TabularGameSpec, policy: JointPolicy) -> np.ndarray:
    """Visitation probabilities rho[h, x, a, b] from the fixed initial state."""
    H, (S, A, B) = spec.horizon, spec.cell_shape
    joint = policy.joint()
    rho = np.zeros((H, S, A, B))
    d = np.zeros(S)
    d[spec.initial_state] = 1.0
    for h in range(H):
        rho[h] = d[:, None, None] * joint[h]
        d = np.einsum("sab,saby->y", rho[h], spec.transition[h])
    return rho


# -- regret decomposition ------------------------------------------------------------


@dataclass
class DecompositionReport:
    lhs: float  # V^{ref}_1(x_1) - V^{exec}_1(x_1)
    computational_error: float
    statistical_error: float
    randomness: float
    delta: np.ndarray  # (H,) model prediction error at the realized cells
    zeta1: np.ndarray  # (H,)
    zeta2: np.ndarray  # (H,)
    identity_residual: float

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "computational_error": self.computational_error,
            "statistical_error": self.statistical_error,
            "randomness": self.randomness,
            "delta": self.delta.tolist(),
            "zeta1": self.zeta1.tolist(),
            "zeta2": self.zeta2.tolist(),
            "identity_residual": self.identity_residual,
        }


def prediction_error(spec: TabularGameSpec, Q_est: np.ndarray, V_est: np.ndarray, rewards=None) -> np.ndarray:
    """delta_h = r_h + P_h V_{h+1} - Q_h for every cell, computed with the true kernel."""
    r = spec.leader_reward if rewards is None else rewards
    return r + np.einsum("hsaby,hy->hsab", spec.transition, V_est[1:]) - Q_est


def decompose_episode(
    spec: TabularGameSpec,
    Q_est: np.ndarray,
    V_est: np.ndarray,
    executed: JointPolicy,
    reference: JointPolicy,
    trajectory: Trajectory,
) -> DecompositionReport:
    """Split V^{ref}_1 - V^{exec}_1 at x_1 into computational, statistical and
    randomness terms for one episode.

    ``Q_est`` is (H, S, A, B); ``V_est`` is (H+1, S) with a zero last row and
    must equal the expectation of ``Q_est`` under ``executed`` for the split to
    be exact.
    """
    H, (S, A, B) = spec.horizon, spec.cell_shape
    if Q_est.shape != (H, S, A, B) or V_est.shape != (H + 1, S):
        raise ShapeMismatch(f"estimates have shapes {Q_est.shape}, {V_est.shape}")
    if trajectory.horizon != H:
        raise ShapeMismatch("trajectory length differs from the horizon")

    delta = prediction_error(spec, Q_est, V_est)
    ref_vals = evaluate_policies(spec, reference)
    exe_vals = evaluate_policies(spec, executed)
    Vx, Qx = exe_vals.V[0], exe_vals.Q[0]
    rho_ref = occupancy(spec, reference)
    state_ref = rho_ref.sum(axis=(2, 3))  # (H, S)
    joint_exe = executed.joint()

    comp = float(np.sum(state_ref[:, :, None, None] * Q_est * (reference.joint() - joint_exe)))
    expected_delta = float(np.sum(rho_ref * delta))

    xs, acts, bs = trajectory.states, trajectory.leader_actions, trajectory.joint_actions
    d_real = np.array([delta[h, xs[h], acts[h], bs[h]] for h in range(H)])
    diff_V = V_est - Vx  # (H+1, S)
    z1 = np.array([diff_V[h, xs[h]] - (Q_est[h, xs[h], acts[h], bs[h]] - Qx[h, xs[h], acts[h], bs[h]])
                   for h in range(H)])
    z2 = np.array([spec.transition[h, xs[h], acts[h], bs[h]] @ diff_V[h + 1] - diff_V[h + 1, xs[h + 1]]
                   for h in range(H)])
    stat = expected_delta - float(d_real.sum())
    rand = float(z1.sum() + z2.sum())
    x1 = spec.initial_state
    lhs = float(ref_vals.V[0, 0, x1] - Vx[0, x1])
    residual = abs(lhs - (comp + stat + rand))
    return DecompositionReport(lhs, comp, stat, rand, d_real, z1, z2, residual)
