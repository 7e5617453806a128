"""Reward-free exploration for tabular games, the explore-then-commit learner,
and the epsilon-best-response gap for two-player leader-controller games.

The explorer only observes sampled transitions and rewards. Its per-target
visitation learner is an optimistic tabular value iteration (UCBVI-style
Hoeffding bonus) over the joint action space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .game import JointPolicy, TabularGameSpec
from .online import LearnerConfig, OnlineRunReport, run_ovi_sne
from .planner import SnePlan, evaluate_policies, myopic_best_response, exact_sne
from .stage import TieBreak

EXPLORER_NAME = "ucbvi-hoeffding"


class NotLeaderController(ValueError):
    pass


class MultiFollower(ValueError):
    pass


@dataclass
class EmpiricalRewards:
    leader: np.ndarray  # (H, S, A, B)
    followers: np.ndarray  # (N, H, S, A, B)
    counts: np.ndarray  # (H, S, A, B)
    metadata: dict = field(default_factory=dict)

    @property
    def mask(self) -> np.ndarray:
        """True where a cell was never visited (its estimate is the 0 convention)."""
        return self.counts == 0

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray]:
        return self.leader, self.followers

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "leader": self.leader.tolist(),
            "followers": self.followers.tolist(),
            "counts": self.counts.tolist(),
            "metadata": self.metadata,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "EmpiricalRewards":
        return cls(np.array(d["leader"], dtype=float), np.array(d["followers"], dtype=float),
                   np.array(d["counts"], dtype=int), d.get("metadata", {}))


@dataclass
class ExplorationPolicySet:
    """Pooled exploration policies. Policy j plays joint action ``actions[j, h, x]``
    (a flattened (leader, followers) index) except at its target, where every
    player is uniform."""

    actions: np.ndarray  # (P, H, S) joint (a, b) indices
    targets: np.ndarray  # (P, 2) rows (h, x)
    leader_actions: int
    follower_actions: tuple[int, ...]

    def __len__(self) -> int:
        return self.actions.shape[0]

    def policy(self, j: int) -> JointPolicy:
        H, S = self.actions.shape[1:]
        B = int(np.prod(self.follower_actions))
        a, b = np.divmod(self.actions[j], B)
        leader = np.eye(self.leader_actions)[a]
        coords = np.unravel_index(b, self.follower_actions)
        followers = [np.eye(n)[coords[i]] for i, n in enumerate(self.follower_actions)]
        h, x = self.targets[j]
        leader[h, x] = 1.0 / self.leader_actions
        for i, n in enumerate(self.follower_actions):
            followers[i][h, x] = 1.0 / n
        return JointPolicy(leader, tuple(followers))


@dataclass
class GapReport:
    epsilon: float
    gap: float
    in_pi_eps: list  # per candidate
    v_eps: list
    v_best_case: list
    v_star: float

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "gap": self.gap, "in_pi_eps": self.in_pi_eps,
                "v_eps": self.v_eps, "v_best_case": self.v_best_case, "v_star": self.v_star}


# -- exploration ---------------------------------------------------------------------------


def _step(spec: TabularGameSpec, rng, h: int, x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized next-state draw for a batch of (x, a, b) at step h."""
    cdf = np.cumsum(spec.transition[h, x, a, b], axis=-1)
    u = rng.random(x.shape[0])[:, None]
    return np.minimum((u >= cdf).sum(axis=1), spec.num_states - 1)


def _visitation_learner(spec: TabularGameSpec, target: tuple[int, int], episodes: int, rng,
                        bonus_scale: float = 1.0) -> np.ndarray:
    """Optimistic tabular learner maximizing the probability of reaching ``target``.

    Returns the deterministic joint-action tables (episodes, H, S) it played.
    Only steps before the target matter; later steps play action 0.
    """
    H, (S, A, B) = spec.horizon, spec.cell_shape
    th, tx = target
    C = A * B
    counts = np.zeros((th, S, C))
    trans = np.zeros((th, S, C, S))
    played = np.zeros((episodes, H, S), dtype=np.int64)
    log_term = math.log(2.0 * max(th, 1) * S * C * max(episodes, 1) / 0.1)
    for k in range(episodes):
        V = np.zeros(S)
        V[tx] = 1.0
        for h in range(th - 1, -1, -1):
            n = counts[h]
            with np.errstate(invalid="ignore", divide="ignore"):
                p_hat = np.where(n[..., None] > 0, trans[h] / np.maximum(n, 1)[..., None], 0.0)
            bonus = np.where(n > 0, bonus_scale * np.sqrt(log_term / np.maximum(n, 1)), 1.0)
            Q = np.minimum(1.0, p_hat @ V + bonus)
            played[k, h] = np.argmax(Q, axis=1)
            V = Q.max(axis=1)
        x = spec.initial_state
        for h in range(th):
            c = played[k, h, x]
            a, b = divmod(int(c), B)
            y = int(_step(spec, rng, h, np.array([x]), np.array([a]), np.array([b]))[0])
            counts[h, x, c] += 1
            trans[h, x, c, y] += 1
            x = y
    return played


def reward_free_explore(spec: TabularGameSpec, k0: int, k: int, seed: int, *,
                        bernoulli_rewards: bool = False) -> tuple[EmpiricalRewards, ExplorationPolicySet]:
    """Explore without rewards, then estimate every player's reward tables.

    For each target (h, x) a visitation learner runs ``k0`` episodes; its
    policies are made uniform at the target and pooled. Then ``k`` episodes
    are played with policies drawn uniformly from the pool. Observed rewards
    are the table entries, or, with ``bernoulli_rewards``, +/-1 draws with the
    table entry as mean.
    """
    if k0 < 1 or k < 1:
        raise ValueError("k0 and k must be >= 1")
    H, (S, A, B) = spec.horizon, spec.cell_shape
    N = spec.num_followers
    master = np.random.SeedSequence(seed)
    streams = master.spawn(H * S + 1)

    tables, targets = [], []
    for h in range(H):
        for x in range(S):
            rng = np.random.default_rng(streams[h * S + x])
            played = _visitation_learner(spec, (h, x), k0, rng)
            tables.append(played)
            targets.append(np.tile([h, x], (k0, 1)))
    psi = ExplorationPolicySet(np.concatenate(tables), np.concatenate(targets), A, spec.follower_actions)

    rng = np.random.default_rng(streams[-1])
    pick = rng.integers(len(psi), size=k)
    rewards = np.concatenate([spec.leader_reward[None], spec.follower_rewards])  # (N+1, H, S, A, B)
    sums = np.zeros((N + 1, H, S, A, B))
    counts = np.zeros((H, S, A, B), dtype=np.int64)
    x = np.full(k, spec.initial_state)
    fa = np.array(spec.follower_actions)
    for h in range(H):
        joint = psi.actions[pick, h, x]
        a, b = np.divmod(joint, B)
        at_target = (psi.targets[pick, 0] == h) & (psi.targets[pick, 1] == x)
        m = int(at_target.sum())
        if m:
            a[at_target] = rng.integers(A, size=m)
            coords = rng.integers(0, fa, size=(m, N))
            b[at_target] = np.ravel_multi_index(tuple(coords.T), spec.follower_actions)
        r = rewards[:, h, x, a, b]  # (N+1, k)
        if bernoulli_rewards:
            r = np.where(rng.random(r.shape) < (1.0 + r) / 2.0, 1.0, -1.0)
        np.add.at(counts[h], (x, a, b), 1)
        for p in range(N + 1):
            np.add.at(sums[p, h], (x, a, b), r[p])
        x = _step(spec, rng, h, x, a, b)

    with np.errstate(invalid="ignore", divide="ignore"):
        r_hat = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    meta = {"explorer": EXPLORER_NAME, "k0": k0, "k": k, "seed": seed,
            "bernoulli_rewards": bernoulli_rewards, "pool_size": len(psi)}
    return EmpiricalRewards(r_hat[0], r_hat[1:], counts, meta), psi


def hoeffding_radius(counts: np.ndarray, p: float = 0.05) -> np.ndarray:
    """Per-cell deviation radius 2*sqrt(log(2*cells/p) / (2n)) for rewards in [-1, 1]; inf where n = 0."""
    cells = counts.size
    with np.errstate(divide="ignore"):
        return np.where(counts > 0, 2.0 * np.sqrt(math.log(2.0 * cells / p) / (2.0 * np.maximum(counts, 1))),
                        np.inf)


def value_error(spec: TabularGameSpec, est: EmpiricalRewards, policies) -> float:
    """sup over the given policy pairs and all players of |V_hat - V| at the initial state."""
    est_spec = spec.with_rewards(est.leader, est.followers)
    x1 = spec.initial_state
    worst = 0.0
    for pol in policies:
        v = evaluate_policies(spec, pol).V[:, 0, x1]
        v_hat = evaluate_policies(est_spec, pol).V[:, 0, x1]
        worst = max(worst, float(np.abs(v - v_hat).max()))
    return worst


def random_policy(spec: TabularGameSpec, rng) -> JointPolicy:
    H, (S, A, _) = spec.horizon, spec.cell_shape
    leader = rng.dirichlet(np.ones(A), size=(H, S))
    followers = tuple(rng.dirichlet(np.ones(n), size=(H, S)) for n in spec.follower_actions)
    return JointPolicy(leader, followers)


def commit_with_estimated_rewards(spec: TabularGameSpec, estimate: EmpiricalRewards, config: LearnerConfig,
                                  truth: SnePlan) -> OnlineRunReport:
    """Run the optimistic learner on estimated rewards; regret is measured with the true ones."""
    report = run_ovi_sne(spec, config, truth, rewards=estimate.as_tuple())
    for rec in report.episodes:
        rec.true_regret_inst = rec.regret_inst
    report.metadata["rewards"] = "estimated"
    report.metadata["unvisited_cells"] = int(estimate.mask.sum())
    return report


# -- epsilon best responses ------------------------------------------------------------------


def _best_case_values(spec: TabularGameSpec, leader: np.ndarray, eps: float) -> float:
    """Leader value when the follower picks, stage by stage, the leader-best action among
    those within eps of its own stage maximum."""
    H, (S, A, B) = spec.horizon, spec.cell_shape
    V = np.zeros(S)
    for h in range(H - 1, -1, -1):
        Ql = spec.leader_reward[h] + spec.transition[h] @ V  # (S, A, B)
        u = np.einsum("sa,sab->sb", leader[h], spec.follower_rewards[0, h])
        ok = u >= u.max(axis=1, keepdims=True) - eps - 1e-12
        vals = np.einsum("sa,sab->sb", leader[h], Ql)
        V = np.where(ok, vals, -np.inf).max(axis=1)
    return float(V[spec.initial_state])


def gap_epsilon(spec: TabularGameSpec, eps: float, candidates) -> GapReport:
    """gap_eps over caller-supplied leader policies (arrays (H, S, A)) for a
    two-player leader-controller game."""
    if spec.num_followers != 1:
        raise MultiFollower("gap_epsilon needs exactly one follower")
    if not spec.is_leader_controller():
        raise NotLeaderController("transitions depend on the follower's action")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    candidates = [np.asarray(c, dtype=float) for c in candidates]
    if not candidates:
        raise ValueError("at least one candidate leader policy is required")
    v_star = exact_sne(spec, TieBreak.OPTIMISTIC).value_at(spec.initial_state)
    flags, v_eps, v_bc = [], [], []
    gap = 0.0
    for leader in candidates:
        followers, _ = myopic_best_response(spec, leader, TieBreak.OPTIMISTIC)
        exact = float(evaluate_policies(spec, JointPolicy(leader, followers)).V[0, 0, spec.initial_state])
        approx = _best_case_values(spec, leader, eps)
        member = approx >= v_star - eps - 1e-12
        flags.append(bool(member))
        v_eps.append(approx)
        v_bc.append(exact)
        if member:
            gap = max(gap, approx - exact)
    return GapReport(eps, max(0.0, gap), flags, v_eps, v_bc, v_star)


def deterministic_leader_policies(spec: TabularGameSpec, limit: int = 4096) -> list[np.ndarray]:
    """Every deterministic leader policy, for tiny games."""
    H, (S, A, _) = spec.horizon, spec.cell_shape
    total = A ** (H * S)
    if total > limit:
        raise ValueError(f"{total} deterministic policies exceed the limit {limit}")
    out = []
    for idx in range(total):
        choice = np.array(np.unravel_index(idx, (A,) * (H * S))).reshape(H, S)
        out.append(np.eye(A)[choice])
    return out
