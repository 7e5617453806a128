"""Episodic general-sum Markov games with one leader and N followers.

All tensors are indexed ``[h][x][a][b]`` where ``b`` is the flattened joint
follower action (row-major over ``b_1 .. b_N``). Steps are 0-based in code;
step ``h`` here is step ``h + 1`` in the usual 1-based notation, so the number
of remaining steps after ``h`` is ``H - h - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1
PROB_TOL = 1e-9
RECON_TOL = 1e-12


class LeaderControllerViolation(ValueError):
    """Transitions depend on follower actions, so phi(x, a) cannot represent them."""


@dataclass(frozen=True)
class TabularGameSpec:
    num_states: int
    horizon: int
    leader_actions: int
    follower_actions: tuple[int, ...]
    leader_reward: np.ndarray  # (H, S, A, B)
    follower_rewards: np.ndarray  # (N, H, S, A, B)
    transition: np.ndarray  # (H, S, A, B, S)
    initial_state: int = 0

    def __post_init__(self):
        object.__setattr__(self, "follower_actions", tuple(int(n) for n in self.follower_actions))
        for name in ("leader_reward", "follower_rewards", "transition"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_followers(self) -> int:
        return len(self.follower_actions)

    @property
    def joint_follower_actions(self) -> int:
        return int(np.prod(self.follower_actions, dtype=int))

    @property
    def cell_shape(self) -> tuple[int, int, int]:
        return (self.num_states, self.leader_actions, self.joint_follower_actions)

    def unravel(self, b: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(b, self.follower_actions))

    def ravel(self, b: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(b), self.follower_actions))

    def with_rewards(self, leader_reward, follower_rewards) -> "TabularGameSpec":
        return TabularGameSpec(
            self.num_states, self.horizon, self.leader_actions, self.follower_actions,
            leader_reward, follower_rewards, self.transition, self.initial_state,
        )

    def is_leader_controller(self, tol: float = RECON_TOL) -> bool:
        P = self.transition
        return bool(np.all(np.abs(P - P[:, :, :, :1, :]) <= tol))

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        H, S, A = self.horizon, self.num_states, self.leader_actions
        fa = self.follower_actions
        return {
            "format_version": FORMAT_VERSION,
            "num_states": S,
            "horizon": H,
            "leader_actions": A,
            "follower_actions": list(fa),
            "initial_state": self.initial_state,
            "leader_reward": self.leader_reward.reshape(H, S, A, *fa).tolist(),
            "follower_rewards": [r.reshape(H, S, A, *fa).tolist() for r in self.follower_rewards],
            "transition": self.transition.reshape(H, S, A, *fa, S).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularGameSpec":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported game format_version {version!r}")
        H, S, A = int(d["horizon"]), int(d["num_states"]), int(d["leader_actions"])
        fa = tuple(int(n) for n in d["follower_actions"])
        B = int(np.prod(fa, dtype=int))
        return cls(
            num_states=S,
            horizon=H,
            leader_actions=A,
            follower_actions=fa,
            leader_reward=np.asarray(d["leader_reward"], dtype=float).reshape(H, S, A, B),
            follower_rewards=np.asarray(d["follower_rewards"], dtype=float).reshape(len(fa), H, S, A, B),
            transition=np.asarray(d["transition"], dtype=float).reshape(H, S, A, B, S),
            initial_state=int(d.get("initial_state", 0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TabularGameSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def validate_spec(spec: TabularGameSpec) -> list[str]:
    """Return every violated invariant; an empty list means the spec is valid."""
    problems = []
    H, S, A = spec.horizon, spec.num_states, spec.leader_actions
    if min(H, S, A) < 1 or any(n < 1 for n in spec.follower_actions) or spec.num_followers < 1:
        problems.append("sizes must be positive integers with at least one follower")
        return problems
    B = spec.joint_follower_actions
    N = spec.num_followers
    expected = {
        "leader_reward": (H, S, A, B),
        "follower_rewards": (N, H, S, A, B),
        "transition": (H, S, A, B, S),
    }
    for name, shape in expected.items():
        got = getattr(spec, name).shape
        if got != shape:
            problems.append(f"shape mismatch: {name} has shape {got}, expected {shape}")
    if problems:
        return problems
    if not 0 <= spec.initial_state < S:
        problems.append(f"initial state {spec.initial_state} out of range")

    P = spec.transition
    if not np.all(np.isfinite(P)):
        problems.append("transition contains non-finite entries")
    for idx in zip(*np.nonzero(P.min(axis=-1) < 0)):
        problems.append(f"negative probability at (h,x,a,b)={tuple(int(i) for i in idx)}")
    mass = P.sum(axis=-1)
    for idx in zip(*np.nonzero(np.abs(mass - 1.0) > PROB_TOL)):
        problems.append(
            f"probability mass != 1 at (h,x,a,b)={tuple(int(i) for i in idx)}: {mass[idx]:.12g}"
        )

    rewards = {"leader": spec.leader_reward}
    for i, r in enumerate(spec.follower_rewards):
        rewards[f"follower {i}"] = r
    for who, r in rewards.items():
        bad = ~np.isfinite(r) | (r < -1.0) | (r > 1.0)
        for idx in zip(*np.nonzero(bad)):
            problems.append(
                f"reward out of [-1,1] for {who} at (h,x,a,b)={tuple(int(i) for i in idx)}: {r[idx]}"
            )
    return problems


def random_game(
    num_states: int,
    leader_actions: int,
    follower_actions: Sequence[int],
    horizon: int,
    seed: int,
    *,
    leader_controller: bool = False,
    initial_state: int = 0,
) -> TabularGameSpec:
    """Random game: uniform rewards on a 1e-6 grid, Dirichlet(1) transition rows."""
    fa = tuple(int(n) for n in follower_actions)
    if min(num_states, leader_actions, horizon, *fa) < 1:
        raise ValueError("all sizes must be >= 1")
    rng = np.random.default_rng(seed)
    H, S, A, N = horizon, num_states, leader_actions, len(fa)
    B = int(np.prod(fa, dtype=int))
    leader = np.round(rng.uniform(-1.0, 1.0, size=(H, S, A, B)), 6)
    followers = np.round(rng.uniform(-1.0, 1.0, size=(N, H, S, A, B)), 6)
    if leader_controller:
        P = rng.dirichlet(np.ones(S), size=(H, S, A))
        P = np.broadcast_to(P[:, :, :, None, :], (H, S, A, B, S))
    else:
        P = rng.dirichlet(np.ones(S), size=(H, S, A, B))
    P = P / P.sum(axis=-1, keepdims=True)
    return TabularGameSpec(S, H, A, fa, leader, followers, P, initial_state)


# -- linear features ----------------------------------------------------------


@dataclass(frozen=True)
class FeatureMap:
    """phi over (x, a, b) ("joint") or over (x, a) ("leader_controller").

    ``table`` has one row per indexed input: ``x*A*B + a*B + b`` in joint mode,
    ``x*A + a`` in leader-controller mode.
    """

    mode: str
    num_states: int
    leader_actions: int
    joint_follower_actions: int
    table: np.ndarray

    def __post_init__(self):
        if self.mode not in ("joint", "leader_controller"):
            raise ValueError(f"unknown feature mode {self.mode!r}")
        table = np.array(self.table, dtype=float)
        table.setflags(write=False)
        object.__setattr__(self, "table", table)
        norms = np.linalg.norm(table, axis=1)
        if np.any(norms > 1.0 + 1e-9):
            raise ValueError(f"feature norm exceeds 1: max {norms.max():.6g}")

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def cell_features(self) -> np.ndarray:
        """Features of every (x, a, b) cell, shape (S, A, B, d)."""
        S, A, B = self.num_states, self.leader_actions, self.joint_follower_actions
        if self.mode == "joint":
            return self.table.reshape(S, A, B, self.dim)
        return np.broadcast_to(self.table.reshape(S, A, 1, self.dim), (S, A, B, self.dim))

    def index(self, x: int, a: int, b: int) -> int:
        if self.mode == "joint":
            return (x * self.leader_actions + a) * self.joint_follower_actions + b
        return x * self.leader_actions + a

    def phi(self, x: int, a: int, b: int) -> np.ndarray:
        return self.table[self.index(x, a, b)]


@dataclass(frozen=True)
class LinearTransitionModel:
    mu: np.ndarray  # (H, d, S); column x' of mu[h] is mu_h(x')

    def transition(self, features: FeatureMap) -> np.ndarray:
        """phi(x,a,b)^T mu_h for every cell, shape (H, S, A, B, S)."""
        return np.einsum("sabd,hdy->hsaby", features.cell_features(), self.mu)

    def total_mass_norms(self) -> np.ndarray:
        """||mu_h(S)||_2 for each step."""
        return np.linalg.norm(self.mu.sum(axis=2), axis=1)


def one_hot_features(spec: TabularGameSpec, mode: str = "joint") -> tuple[FeatureMap, LinearTransitionModel]:
    H, (S, A, B) = spec.horizon, spec.cell_shape
    P = spec.transition
    if mode == "joint":
        d = S * A * B
        mu = P.reshape(H, d, S).copy()
    elif mode == "leader_controller":
        if not spec.is_leader_controller():
            gap = float(np.abs(P - P[:, :, :, :1, :]).max())
            raise LeaderControllerViolation(
                f"transitions depend on follower actions (max deviation {gap:.3g})"
            )
        d = S * A
        mu = P[:, :, :, 0, :].reshape(H, d, S).copy()
    else:
        raise ValueError(f"unknown feature mode {mode!r}")
    features = FeatureMap(mode, S, A, B, np.eye(d))
    return features, LinearTransitionModel(mu)


# -- policies, sampling ---------------------------------------------------------


@dataclass(frozen=True)
class JointPolicy:
    leader: np.ndarray  # (H, S, A)
    followers: tuple[np.ndarray, ...]  # each (H, S, A_fi)

    def __post_init__(self):
        object.__setattr__(self, "leader", np.asarray(self.leader, dtype=float))
        object.__setattr__(self, "followers", tuple(np.asarray(f, dtype=float) for f in self.followers))

    def follower_joint(self) -> np.ndarray:
        """Product distribution over flattened joint follower actions, (H, S, B)."""
        out = self.followers[0]
        for f in self.followers[1:]:
            out = (out[..., :, None] * f[..., None, :]).reshape(*out.shape[:2], -1)
        return out

    def joint(self) -> np.ndarray:
        """pi_h(a|x) * nu_h(b|x) for every cell, shape (H, S, A, B)."""
        return self.leader[..., :, None] * self.follower_joint()[..., None, :]

    def problems(self) -> list[str]:
        out = []
        for name, arr in [("leader", self.leader)] + [(f"follower {i}", f) for i, f in enumerate(self.followers)]:
            if np.any(arr < -PROB_TOL):
                out.append(f"{name} policy has negative entries")
            if np.any(np.abs(arr.sum(axis=-1) - 1.0) > PROB_TOL):
                out.append(f"{name} policy rows do not sum to 1")
        return out

    @classmethod
    def uniform(cls, spec: TabularGameSpec) -> "JointPolicy":
        H, S = spec.horizon, spec.num_states
        return cls(
            np.full((H, S, spec.leader_actions), 1.0 / spec.leader_actions),
            tuple(np.full((H, S, n), 1.0 / n) for n in spec.follower_actions),
        )

    @classmethod
    def mixture(cls, first: "JointPolicy", second: "JointPolicy", alpha: float) -> "JointPolicy":
        """Per-player, per-(h, x) mixture alpha*first + (1-alpha)*second."""
        return cls(
            alpha * first.leader + (1 - alpha) * second.leader,
            tuple(alpha * f + (1 - alpha) * g for f, g in zip(first.followers, second.followers)),
        )

    def to_dict(self) -> dict:
        return {"leader": self.leader.tolist(), "followers": [f.tolist() for f in self.followers]}

    @classmethod
    def from_dict(cls, d: dict) -> "JointPolicy":
        return cls(np.asarray(d["leader"]), tuple(np.asarray(f) for f in d["followers"]))


@dataclass
class Trajectory:
    states: np.ndarray  # (H+1,)
    leader_actions: np.ndarray  # (H,)
    follower_actions: np.ndarray  # (H, N)
    joint_actions: np.ndarray  # (H,) flattened b
    rewards: np.ndarray  # (H, N+1); column 0 is the leader

    @property
    def horizon(self) -> int:
        return len(self.leader_actions)

    def leader_return(self) -> float:
        return float(self.rewards[:, 0].sum())


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    """Independent substream for one episode, so sampling is order-independent."""
    return np.random.default_rng([int(seed), int(episode)])


def _draw(rng: np.random.Generator, p: np.ndarray) -> int:
    c = np.cumsum(p)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, len(p) - 1)


def sample_episode(spec: TabularGameSpec, policy: JointPolicy, rng: np.random.Generator) -> Trajectory:
    H, N = spec.horizon, spec.num_followers
    states = np.empty(H + 1, dtype=int)
    leader_actions = np.empty(H, dtype=int)
    follower_actions = np.empty((H, N), dtype=int)
    joint = np.empty(H, dtype=int)
    rewards = np.empty((H, N + 1))
    x = spec.initial_state
    states[0] = x
    for h in range(H):
        a = _draw(rng, policy.leader[h, x])
        bs = [_draw(rng, f[h, x]) for f in policy.followers]
        b = spec.ravel(bs) if N > 1 else bs[0]
        leader_actions[h], follower_actions[h], joint[h] = a, bs, b
        rewards[h, 0] = spec.leader_reward[h, x, a, b]
        rewards[h, 1:] = spec.follower_rewards[:, h, x, a, b]
        x = _draw(rng, spec.transition[h, x, a, b])
        states[h + 1] = x
    return Trajectory(states, leader_actions, follower_actions, joint, rewards)


# -- offline datasets -------------------------------------------------------------


@dataclass
class OfflineDataset:
    states: np.ndarray  # (K, H+1)
    leader_actions: np.ndarray  # (K, H)
    follower_actions: np.ndarray  # (K, H, N)
    follower_action_counts: tuple[int, ...]
    metadata: dict = field(default_factory=dict)

    @property
    def num_episodes(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.leader_actions.shape[1]

    def head(self, k: int) -> "OfflineDataset":
        """The first k episodes."""
        return OfflineDataset(self.states[:k], self.leader_actions[:k], self.follower_actions[:k],
                              self.follower_action_counts, dict(self.metadata))

    def joint_actions(self) -> np.ndarray:
        if self.num_episodes == 0:
            return np.zeros((0, self.horizon), dtype=int)
        fa = self.follower_action_counts
        return np.ravel_multi_index(tuple(np.moveaxis(self.follower_actions, -1, 0)), fa)

    def write_jsonl(self, path) -> None:
        lines = [json.dumps({"format_version": FORMAT_VERSION, "kind": "header",
                             "num_episodes": self.num_episodes, "horizon": self.horizon,
                             "follower_actions": list(self.follower_action_counts),
                             "metadata": self.metadata}, sort_keys=True)]
        for k in range(self.num_episodes):
            for h in range(self.horizon):
                lines.append(json.dumps({
                    "format_version": FORMAT_VERSION, "episode": k, "h": h,
                    "x": int(self.states[k, h]), "a": int(self.leader_actions[k, h]),
                    "b": [int(v) for v in self.follower_actions[k, h]],
                    "x_next": int(self.states[k, h + 1]),
                }, sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "OfflineDataset":
        header, records = None, []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"unsupported dataset format_version {rec.get('format_version')!r}")
            if rec.get("kind") == "header":
                header = rec
            else:
                records.append(rec)
        if header is None:
            raise ValueError("dataset file has no header record")
        K, H = header["num_episodes"], header["horizon"]
        fa = tuple(header["follower_actions"])
        states = np.zeros((K, H + 1), dtype=int)
        la = np.zeros((K, H), dtype=int)
        fl = np.zeros((K, H, len(fa)), dtype=int)
        seen = np.zeros((K, H), dtype=bool)
        for rec in records:
            k, h = rec["episode"], rec["h"]
            states[k, h], la[k, h], fl[k, h] = rec["x"], rec["a"], rec["b"]
            states[k, h + 1] = rec["x_next"]
            seen[k, h] = True
        if not seen.all():
            raise ValueError("dataset is missing steps: every episode needs exactly H records")
        return cls(states, la, fl, fa, header.get("metadata", {}))


def generate_dataset(
    spec: TabularGameSpec,
    behavior: JointPolicy,
    num_episodes: int,
    seed: int,
    description: str = "",
) -> OfflineDataset:
    H, N = spec.horizon, spec.num_followers
    K = int(num_episodes)
    states = np.zeros((K, H + 1), dtype=int)
    la = np.zeros((K, H), dtype=int)
    fl = np.zeros((K, H, N), dtype=int)
    for k in range(K):
        traj = sample_episode(spec, behavior, episode_rng(seed, k))
        states[k], la[k], fl[k] = traj.states, traj.leader_actions, traj.follower_actions
    meta = {"seed": int(seed), "behavior": description}
    return OfflineDataset(states, la, fl, spec.follower_actions, meta)


def audit_dataset(spec: TabularGameSpec, dataset: OfflineDataset, behavior: JointPolicy) -> bool:
    """Re-derive the dataset from its recorded seed and check it matches exactly."""
    again = generate_dataset(spec, behavior, dataset.num_episodes, dataset.metadata["seed"])
    return (
        np.array_equal(again.states, dataset.states)
        and np.array_equal(again.leader_actions, dataset.leader_actions)
        and np.array_equal(again.follower_actions, dataset.follower_actions)
    )
