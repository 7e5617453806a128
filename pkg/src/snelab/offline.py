"""Pessimistic value iteration from a fixed dataset, with suboptimality
certification and coverage auditing."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .game import FeatureMap, JointPolicy, OfflineDataset, TabularGameSpec
from .online import RidgeAccumulator, build_q
from .planner import SnePlan, evaluate_policies, occupancy, prediction_error
from .stage import StageGame, TieBreak, TieBreakRule, certificate, quantize, solve_stage_sne


class EmptyDataset(ValueError):
    pass


def offline_theorem_beta(C: float, d: int, H: int, K: int, p: float, log_factor: float = 2.0) -> float:
    """C * d * H * sqrt(log(log_factor * d * H * K / p))."""
    return C * d * H * math.sqrt(math.log(log_factor * d * H * max(K, 1) / p))


@dataclass
class OfflinePlan:
    policy: JointPolicy
    V: np.ndarray  # (H+1, S) pessimistic values
    Q: np.ndarray  # (H, S, A, B)
    Gamma: np.ndarray  # (H, S, A, B)
    lam: np.ndarray  # (H, d, d)
    lam_inv: np.ndarray
    beta: float
    epsilon: float
    features: FeatureMap
    certificate_min: float
    num_episodes: int

    def to_dict(self) -> dict:
        return {
            "beta_prime": self.beta,
            "epsilon": self.epsilon,
            "num_episodes": self.num_episodes,
            "feature_mode": self.features.mode,
            "certificate_min": self.certificate_min,
            "policy": self.policy.to_dict(),
            "values": self.V.tolist(),
            "lambda": self.lam.tolist(),
            "gamma": self.Gamma.tolist(),
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))


@dataclass
class CertifiedSubopt:
    subopt: float
    bound: float
    coverage: float | None = None


def run_pvi_sne(
    dataset: OfflineDataset,
    rewards: tuple[np.ndarray, np.ndarray],
    follower_actions,
    features: FeatureMap,
    beta: float,
    epsilon: float | None = None,
    tiebreak=TieBreak.OPTIMISTIC,
) -> OfflinePlan:
    """One backward pass over the whole dataset with the penalty subtracted.

    ``epsilon`` defaults to d / (K H). ``features.mode`` selects phi(x, a, b)
    or the leader-controller phi(x, a).
    """
    K = dataset.num_episodes
    if K == 0:
        raise EmptyDataset("the dataset has no episodes")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    rule = tiebreak if isinstance(tiebreak, TieBreakRule) else TieBreakRule(TieBreak(tiebreak))
    r_l, r_f = (np.asarray(r, dtype=float) for r in rewards)
    H, S, A, B = r_l.shape
    fa = tuple(follower_actions)
    d = features.dim
    eps = epsilon if epsilon is not None else d / (K * H)

    acc = RidgeAccumulator(H, d, S)
    joint = dataset.joint_actions()
    rows = np.array([[features.index(x, a, b) for x, a, b in zip(dataset.states[:, h], dataset.leader_actions[:, h], joint[:, h])]
                     for h in range(H)])  # (H, K)
    for h in range(H):
        phis = features.table[rows[h]]  # (K, d)
        acc.lam[h] = np.eye(d) + phis.T @ phis
        acc.lam_inv[h] = np.linalg.inv(acc.lam[h])
        acc.count[h] = K
        np.add.at(acc.next_moments[h].T, dataset.states[:, h + 1], phis)

    Q = np.zeros((H, S, A, B))
    Gamma = np.zeros((H, S, A, B))
    V = np.zeros((H + 1, S))
    leader = np.zeros((H, S, A))
    profiles = np.zeros((H, S), dtype=int)
    cert_min = np.inf
    for h in range(H - 1, -1, -1):
        Q[h], Gamma[h], _ = build_q(r_l[h], features, acc, h, beta, V[h + 1], H, sign=-1.0)
        Qt = quantize(Q[h], eps)
        for x in range(S):
            sol = solve_stage_sne(StageGame(Qt[x], r_f[:, h, x], fa), rule)
            leader[h, x] = sol.leader_mixed
            profiles[h, x] = sol.follower_profile
            V[h, x] = sol.leader_mixed @ Q[h, x, :, sol.follower_profile]
            cert_min = min(cert_min, float(sol.certificate.min()))
    coords = np.unravel_index(profiles, fa)
    policy = JointPolicy(leader, tuple(np.eye(n)[coords[i]] for i, n in enumerate(fa)))
    return OfflinePlan(policy, V, Q, Gamma, acc.lam, acc.lam_inv, float(beta), float(eps), features,
                       cert_min, K)


def suboptimality(spec: TabularGameSpec, plan: OfflinePlan, truth: SnePlan, x: int | None = None) -> float:
    """V*_1(x) - V^{pi_hat, nu_hat}_1(x) by exact policy evaluation."""
    x = spec.initial_state if x is None else x
    return truth.value_at(x) - float(evaluate_policies(spec, plan.policy).V[0, 0, x])


def theorem_bound(spec: TabularGameSpec, truth: SnePlan, plan: OfflinePlan, x: int | None = None) -> float:
    """3 beta' sum_h E_{pi*, nu*}[ sqrt(phi^T Lambda_h^{-1} phi) ] computed exactly via occupancy."""
    if x is not None and x != spec.initial_state:
        spec = dataclasses.replace(spec, initial_state=x)
    rho = occupancy(spec, truth.policy)
    phi = plan.features.cell_features()
    total = 0.0
    for h in range(spec.horizon):
        quad = np.einsum("sabd,de,sabe->sab", phi, plan.lam_inv[h], phi)
        total += float(np.sum(rho[h] * np.sqrt(np.clip(quad, 0.0, None))))
    return 3.0 * plan.beta * total


def coverage_margin(lam: np.ndarray, truth_occupancy: np.ndarray, features: FeatureMap, K: int,
                    tol: float = 1e-10) -> float:
    """Largest c >= 0 with Lambda_h - I - c K Sigma_h PSD for every h, where
    Sigma_h = E_{pi*, nu*}[phi phi^T] at step h."""
    if K < 1:
        raise ValueError("K must be >= 1")
    phi = features.cell_features()
    c = np.inf
    for h in range(lam.shape[0]):
        sigma = np.einsum("sab,sabd,sabe->de", truth_occupancy[h], phi, phi)
        M = lam[h] - np.eye(lam.shape[1])
        w, U = np.linalg.eigh(M)
        keep = w > tol * max(1.0, w.max(initial=0.0))
        M_pinv = (U[:, keep] / w[keep]) @ U[:, keep].T
        proj = U[:, keep] @ U[:, keep].T
        if np.abs(sigma - proj @ sigma).max() > 1e-9:
            return 0.0  # Sigma has mass where the data has none
        s, V = np.linalg.eigh(sigma)
        root = (V * np.sqrt(np.clip(s, 0.0, None))) @ V.T
        top = float(np.linalg.eigvalsh(root @ M_pinv @ root).max())
        if top > tol:
            c = min(c, 1.0 / (K * top))
    return 0.0 if not np.isfinite(c) else float(c)


def offline_deltas(spec: TabularGameSpec, plan: OfflinePlan) -> np.ndarray:
    """Exact prediction errors r + P V_hat_{h+1} - Q_hat_h for every cell."""
    return prediction_error(spec, plan.Q, plan.V)


def certify(spec: TabularGameSpec, plan: OfflinePlan, truth: SnePlan) -> CertifiedSubopt:
    rho = occupancy(spec, truth.policy)
    return CertifiedSubopt(
        subopt=suboptimality(spec, plan, truth),
        bound=theorem_bound(spec, truth, plan),
        coverage=coverage_margin(plan.lam, rho, plan.features, plan.num_episodes),
    )


CERT_COLUMNS = ["K", "subopt", "bound", "c_estimate"]


def write_certification_csv(rows, path) -> None:
    """rows: iterable of (K, CertifiedSubopt)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CERT_COLUMNS)
        for K, c in rows:
            w.writerow([K, repr(c.subopt), repr(c.bound), "" if c.coverage is None else repr(c.coverage)])


def plan_certificates(spec: TabularGameSpec, plan: OfflinePlan) -> float:
    """Worst follower-deviation certificate of the plan under the spec's follower rewards."""
    H, S = spec.horizon, spec.num_states
    follower = plan.policy.follower_joint()
    worst = np.inf
    for h in range(H):
        for x in range(S):
            b = int(np.argmax(follower[h, x]))
            c = certificate(spec.follower_rewards[:, h, x], spec.follower_actions, plan.policy.leader[h, x], b)
            worst = min(worst, float(c.min()))
    return worst


__all__ = [
    "CertifiedSubopt", "EmptyDataset", "OfflinePlan", "certify", "coverage_margin", "offline_deltas",
    "plan_certificates", "run_pvi_sne", "write_certification_csv", "suboptimality", "offline_theorem_beta", "theorem_bound",
]
