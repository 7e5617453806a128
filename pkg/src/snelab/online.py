"""Optimistic least-squares value iteration for Stackelberg-Nash equilibria.

The learner knows the reward tables and the feature map; it sees transitions
only through sampled episodes. Telemetry (regret, exact prediction errors,
certificates) is computed against the true model, which the learner itself
never reads.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .game import FeatureMap, JointPolicy, TabularGameSpec, episode_rng, one_hot_features, sample_episode
from .planner import (
    DecompositionReport,
    SnePlan,
    decompose_episode,
    evaluate_policies,
    prediction_error,
    pure_follower_policy,
)
from .stage import StageGame, TieBreak, TieBreakRule, as_tiebreak, certificate, quantize, solve_stage_sne

log = logging.getLogger(__name__)

OPTIMISM_TOL = 1e-7
LOWER_TOL = 1e-6


class ConfigMismatch(ValueError):
    pass


# -- ridge regression state -----------------------------------------------------------


class RidgeAccumulator:
    """Per-step Gram matrices Lambda_h = I + sum phi phi^T with incrementally
    maintained inverses (Sherman-Morrison), target sums u_h, and next-state
    moments sum phi e_{x'}^T so regression targets can be re-evaluated for any V."""

    def __init__(self, horizon: int, dim: int, num_states: int | None = None):
        self.horizon, self.dim = horizon, dim
        self.lam = np.tile(np.eye(dim), (horizon, 1, 1))
        self.lam_inv = np.tile(np.eye(dim), (horizon, 1, 1))
        self.u = np.zeros((horizon, dim))
        self.count = np.zeros(horizon, dtype=int)
        self.next_moments = None if num_states is None else np.zeros((horizon, dim, num_states))

    def weights(self, h: int) -> np.ndarray:
        return self.lam_inv[h] @ self.u[h]

    def regression_targets(self, h: int, v_next: np.ndarray) -> np.ndarray:
        """sum_tau phi_tau * v_next(x'_tau) over stored transitions at step h."""
        return self.next_moments[h] @ v_next

    def rebuild_error(self, h: int, phis: np.ndarray) -> float:
        direct = np.eye(self.dim) + phis.T @ phis
        return float(np.abs(direct - self.lam[h]).max())


def ridge_update(acc: RidgeAccumulator, h: int, phi, v_target: float = 0.0, next_state: int | None = None):
    phi = np.asarray(phi, dtype=float)
    if np.linalg.norm(phi) > 1.0 + 1e-9:
        raise ValueError("feature norm exceeds 1")
    acc.lam[h] += np.outer(phi, phi)
    Li = acc.lam_inv[h]
    Lp = Li @ phi
    Li -= np.outer(Lp, Lp) / (1.0 + phi @ Lp)
    acc.u[h] += phi * v_target
    acc.count[h] += 1
    if next_state is not None and acc.next_moments is not None:
        acc.next_moments[h, :, next_state] += phi
    return acc


def bonus_table(features: FeatureMap, lam_inv: np.ndarray, beta: float) -> np.ndarray:
    """beta * sqrt(phi^T Lambda^{-1} phi) for every (x, a, b) cell, shape (S, A, B)."""
    phi = features.cell_features()
    quad = np.einsum("sabd,de,sabe->sab", phi, lam_inv, phi)
    return beta * np.sqrt(np.clip(quad, 0.0, None))


def build_q(reward_h, features: FeatureMap, acc: RidgeAccumulator, h: int, beta: float, v_next, horizon: int,
            sign: float = 1.0):
    """Q_h = r_h + clip(phi^T w_h + sign*Gamma_h, -(H-h-1), H-h-1) with ridge weights
    fitted on the current V_{h+1}. Returns ``(Q, Gamma, w)``."""
    w = acc.lam_inv[h] @ acc.regression_targets(h, np.asarray(v_next, dtype=float))
    gamma = bonus_table(features, acc.lam_inv[h], beta)
    span = horizon - h - 1
    fit = features.cell_features() @ w
    Q = reward_h + np.clip(fit + sign * gamma, -span, span)
    return Q, gamma, w


# -- configuration and reports ----------------------------------------------------------


def theorem_beta(C: float, d: int, H: int, T: int, p: float, log_factor: float = 2.0) -> float:
    """C * d * H * sqrt(log(log_factor * d * T / p))."""
    return C * d * H * math.sqrt(math.log(log_factor * d * T / p))


@dataclass
class LearnerConfig:
    episodes: int
    beta: float | None = None
    beta_C: float = 0.1
    p: float = 0.1
    log_factor: float = 2.0
    epsilon: float | None = None  # default 1 / (K H)
    tiebreak: str = "optimistic"
    strict_margin: float = 1e-3
    feature_mode: str = "joint"
    seed: int = 0
    decompose: bool = False
    keep_policies: bool = False

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        TieBreak(self.tiebreak)

    def rule(self) -> TieBreakRule:
        return TieBreakRule(TieBreak(self.tiebreak), self.strict_margin)

    def resolve_beta(self, d: int, H: int) -> float:
        if self.beta is not None:
            return float(self.beta)
        return theorem_beta(self.beta_C, d, H, self.episodes * H, self.p, self.log_factor)

    def resolve_epsilon(self, H: int) -> float:
        return self.epsilon if self.epsilon is not None else 1.0 / (self.episodes * H)


@dataclass
class EpisodeRecord:
    k: int
    realized_return: float
    v_star: float
    v_policy: float
    regret_inst: float
    regret_cum: float
    optimism_violations: int
    lower_bound_violations: int
    bonus_sum: float
    certificate_min: float
    v_estimate: float
    true_regret_inst: float | None = None


CSV_COLUMNS = ["k", "return", "v_star", "regret_inst", "regret_cum", "optimism_violations", "bonus_sum"]


@dataclass
class OnlineRunReport:
    config: dict
    beta: float
    epsilon: float
    dim: int
    episodes: list = field(default_factory=list)
    final_policy: JointPolicy | None = None
    decompositions: list = field(default_factory=list)
    policies: list = field(default_factory=list)  # per-episode JointPolicy when kept
    trajectories: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def regret(self) -> float:
        return self.episodes[-1].regret_cum if self.episodes else 0.0

    def regret_curve(self) -> np.ndarray:
        return np.array([e.regret_cum for e in self.episodes])

    def cells(self) -> int:
        return self.metadata.get("cells_per_episode", 0) * len(self.episodes)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "beta": self.beta,
            "epsilon": self.epsilon,
            "dim": self.dim,
            "regret": self.regret,
            "metadata": self.metadata,
            "episodes": [asdict(e) for e in self.episodes],
            "final_policy": None if self.final_policy is None else self.final_policy.to_dict(),
            "decompositions": [d.to_dict() for d in self.decompositions],
        }

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), sort_keys=True))
        if csv_path is not None:
            write_episode_csv(self.episodes, csv_path)


def write_episode_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for e in records:
            w.writerow([e.k, repr(e.realized_return), repr(e.v_star), repr(e.regret_inst),
                        repr(e.regret_cum), e.optimism_violations, repr(e.bonus_sum)])


# -- the learner ------------------------------------------------------------------------------


class _StageCache:
    """Memoizes stage solves on (h, x, quantized payoff bytes); followers' payoffs are fixed per (h, x)."""

    def __init__(self, follower_rewards, follower_actions, rule):
        self.F, self.fa, self.rule = follower_rewards, follower_actions, rule
        self.memo = {}

    def solve(self, h: int, x: int, payoff: np.ndarray):
        key = (h, x, payoff.tobytes())
        sol = self.memo.get(key)
        if sol is None:
            sol = solve_stage_sne(StageGame(payoff, self.F[:, h, x], self.fa), self.rule)
            self.memo[key] = sol
        return sol


def run_ovi_sne(
    spec: TabularGameSpec,
    config: LearnerConfig,
    truth: SnePlan,
    *,
    rewards: tuple[np.ndarray, np.ndarray] | None = None,
    features: FeatureMap | None = None,
) -> OnlineRunReport:
    """Run the optimistic learner for ``config.episodes`` episodes.

    ``spec`` supplies the environment dynamics. ``rewards`` (leader, followers)
    are the reward tables handed to the learner; they default to the spec's
    own. With ``feature_mode="leader_controller"`` features are phi(x, a).
    """
    rule = config.rule()
    if truth.tiebreak is not rule.kind:
        raise ConfigMismatch(f"truth computed with {truth.tiebreak.value}, config asks {rule.kind.value}")
    if features is None:
        features, _ = one_hot_features(spec, config.feature_mode)
    r_l, r_f = (spec.leader_reward, spec.follower_rewards) if rewards is None else rewards
    r_l, r_f = np.asarray(r_l, dtype=float), np.asarray(r_f, dtype=float)

    H, (S, A, B) = spec.horizon, spec.cell_shape
    K, d = config.episodes, features.dim
    beta = config.resolve_beta(d, H)
    eps = config.resolve_epsilon(H)
    acc = RidgeAccumulator(H, d, S)
    cache = _StageCache(r_f, spec.follower_actions, rule)
    x1 = spec.initial_state
    v_star = truth.value_at(x1)

    report = OnlineRunReport(config=asdict(config), beta=beta, epsilon=eps, dim=d,
                             metadata={"cells_per_episode": H * S * A * B, "feature_mode": features.mode})
    cum = 0.0
    truth_policy = truth.policy

    for k in range(K):
        Q = np.zeros((H, S, A, B))
        Gamma = np.zeros((H, S, A, B))
        V = np.zeros((H + 1, S))
        leader = np.zeros((H, S, A))
        profiles = np.zeros((H, S), dtype=int)
        cert_min = np.inf
        for h in range(H - 1, -1, -1):
            Q[h], Gamma[h], _ = build_q(r_l[h], features, acc, h, beta, V[h + 1], H)
            Qt = quantize(Q[h], eps)
            for x in range(S):
                sol = cache.solve(h, x, Qt[x])
                leader[h, x] = sol.leader_mixed
                profiles[h, x] = sol.follower_profile
                V[h, x] = sol.leader_mixed @ Q[h, x, :, sol.follower_profile]
                # certificate against the followers' true rewards
                c = certificate(spec.follower_rewards[:, h, x], spec.follower_actions,
                                sol.leader_mixed, sol.follower_profile)
                cert_min = min(cert_min, float(c.min()))
        policy = JointPolicy(leader, pure_follower_policy(spec, profiles))

        traj = sample_episode(spec, policy, episode_rng(config.seed, k))
        phis = features.table
        for h in range(H):
            x, a, b = traj.states[h], traj.leader_actions[h], traj.joint_actions[h]
            ridge_update(acc, h, phis[features.index(x, a, b)], 0.0, traj.states[h + 1])

        # telemetry against the true model
        vals = evaluate_policies(spec, policy)
        v_pi = float(vals.V[0, 0, x1])
        inst = v_star - v_pi
        cum += inst
        delta = prediction_error(spec, Q, V, rewards=r_l)
        opt_viol = int(np.count_nonzero(delta > OPTIMISM_TOL))
        low_viol = int(np.count_nonzero(delta < -2.0 * np.minimum(H, Gamma) - LOWER_TOL))
        bonus = float(sum(min(H, Gamma[h, traj.states[h], traj.leader_actions[h], traj.joint_actions[h]])
                          for h in range(H)))
        report.episodes.append(EpisodeRecord(
            k=k + 1, realized_return=traj.leader_return(), v_star=v_star, v_policy=v_pi,
            regret_inst=inst, regret_cum=cum, optimism_violations=opt_viol,
            lower_bound_violations=low_viol, bonus_sum=bonus, certificate_min=cert_min,
            v_estimate=float(V[0, x1]),
        ))
        if config.decompose:
            est_spec = spec if rewards is None else spec.with_rewards(r_l, r_f)
            report.decompositions.append(
                decompose_episode(est_spec, Q, V, policy, truth_policy, traj))
        if config.keep_policies:
            report.policies.append(policy)
            report.trajectories.append(traj)
        if (k + 1) % max(1, K // 10) == 0:
            log.info("episode %d/%d cumulative regret %.4f", k + 1, K, cum)
    report.final_policy = policy
    report.metadata["stage_cache_entries"] = len(cache.memo)
    return report
