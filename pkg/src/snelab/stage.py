"""One-shot leader/follower matrix games and their Stackelberg-Nash solutions.

A stage game has a leader payoff ``L[a, b]`` and follower payoffs ``F[i, a, b]``
over the flattened joint follower action ``b``. The leader commits to a mixed
strategy; followers answer with a pure Nash profile of the induced game.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .lp import Infeasible, leader_lp

NASH_TOL = 1e-9
TIE_TOL = 1e-10


class NoPureProfile(Exception):
    """No joint pure follower profile can be induced by any leader commitment."""


class GridTooLarge(ValueError):
    pass


class TieBreak(enum.Enum):
    OPTIMISTIC = "optimistic"
    PESSIMISTIC = "pessimistic"


DEFAULT_STRICT_MARGIN = 1e-3


@dataclass(frozen=True)
class TieBreakRule:
    kind: TieBreak = TieBreak.OPTIMISTIC
    strict_margin: float = DEFAULT_STRICT_MARGIN

    def __post_init__(self):
        object.__setattr__(self, "kind", TieBreak(self.kind))
        if not 0.0 < self.strict_margin <= 0.1:
            raise ValueError("strict margin must lie in (0, 0.1]")

    @property
    def pessimistic(self) -> bool:
        return self.kind is TieBreak.PESSIMISTIC


def as_tiebreak(tb) -> TieBreakRule:
    if isinstance(tb, TieBreakRule):
        return tb
    return TieBreakRule(TieBreak(tb))


@dataclass(frozen=True)
class StageGame:
    leader: np.ndarray  # (A, B)
    followers: np.ndarray  # (N, A, B)
    follower_actions: tuple[int, ...]

    def __post_init__(self):
        L = np.asarray(self.leader, dtype=float)
        F = np.asarray(self.followers, dtype=float)
        fa = tuple(int(n) for n in self.follower_actions)
        B = int(np.prod(fa, dtype=int))
        if L.ndim != 2 or L.shape[1] != B:
            raise ValueError(f"leader payoff shape {L.shape} does not match {B} joint follower actions")
        if F.shape != (len(fa),) + L.shape:
            raise ValueError(f"follower payoff shape {F.shape}, expected {(len(fa),) + L.shape}")
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(F))):
            raise ValueError("stage payoffs must be finite")
        object.__setattr__(self, "leader", L)
        object.__setattr__(self, "followers", F)
        object.__setattr__(self, "follower_actions", fa)

    @classmethod
    def from_nested(cls, leader, followers) -> "StageGame":
        """Build from ``leader[a][b_1]..[b_N]`` and ``followers[i][a][b_1]..[b_N]``."""
        L = np.asarray(leader, dtype=float)
        F = np.asarray(followers, dtype=float)
        A, fa = L.shape[0], L.shape[1:]
        return cls(L.reshape(A, -1), F.reshape(F.shape[0], A, -1), fa)

    @property
    def leader_actions(self) -> int:
        return self.leader.shape[0]

    @property
    def num_followers(self) -> int:
        return len(self.follower_actions)


@dataclass
class StageSolution:
    leader_mixed: np.ndarray
    follower_profile: int  # flattened joint pure profile
    follower_actions: tuple[int, ...]  # per-follower pure actions
    leader_value: float
    tiebreak: TieBreak
    certificate: np.ndarray  # per follower: min over deviations of (payoff kept - payoff deviating)
    best_response_set: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "leader_mixed": self.leader_mixed.tolist(),
            "follower_profile": self.follower_profile,
            "follower_actions": list(self.follower_actions),
            "leader_value": self.leader_value,
            "tiebreak": self.tiebreak.value,
            "certificate": self.certificate.tolist(),
            "best_response_set": list(self.best_response_set),
        }


# -- helpers --------------------------------------------------------------------


@functools.lru_cache(maxsize=64)
def _deviations(follower_actions: tuple[int, ...]) -> np.ndarray:
    """dev[i, b, k] = joint index after follower i switches to its action k in profile b."""
    B = int(np.prod(follower_actions, dtype=int))
    n_max = max(follower_actions)
    coords = np.array(np.unravel_index(np.arange(B), follower_actions))  # (N, B)
    dev = np.full((len(follower_actions), B, n_max), -1, dtype=int)
    for i, n in enumerate(follower_actions):
        for k in range(n):
            c = coords.copy()
            c[i] = k
            dev[i, :, k] = np.ravel_multi_index(tuple(c), follower_actions)
    return dev


def deviation_rows(game: StageGame, b: int) -> np.ndarray:
    """Rows g with g.pi = expected gain of keeping b over each unilateral deviation."""
    dev = _deviations(game.follower_actions)
    rows = []
    for i, n in enumerate(game.follower_actions):
        F = game.followers[i]
        for k in range(n):
            j = dev[i, b, k]
            if j != b:
                rows.append(F[:, b] - F[:, j])
    if not rows:
        return np.zeros((0, game.leader_actions))
    return np.array(rows)


def certificate(followers: np.ndarray, follower_actions, leader_mixed, profile: int) -> np.ndarray:
    """Per follower, min over its pure deviations of the expected payoff it would lose.

    The kept action is included, so entries are <= 0 and equal 0 exactly at a best response.
    """
    fa = tuple(follower_actions)
    dev = _deviations(fa)
    u = np.einsum("a,iab->ib", np.asarray(leader_mixed, dtype=float), np.asarray(followers, dtype=float))
    out = np.empty(len(fa))
    for i, n in enumerate(fa):
        out[i] = np.min(u[i, profile] - u[i, dev[i, profile, :n]])
    return out


def follower_pure_nash_set(followers, follower_actions, leader_mixed, tol: float = NASH_TOL) -> list[int]:
    """All joint pure profiles where no follower gains more than ``tol`` by deviating."""
    fa = tuple(int(n) for n in follower_actions)
    F = np.asarray(followers, dtype=float)
    u = np.einsum("a,iab->ib", np.asarray(leader_mixed, dtype=float), F)  # (N, B)
    dev = _deviations(fa)
    ok = np.ones(u.shape[1], dtype=bool)
    for i, n in enumerate(fa):
        best_dev = u[i][dev[i, :, :n]].max(axis=1)
        ok &= u[i] >= best_dev - tol
    return [int(b) for b in np.nonzero(ok)[0]]


def quantize(values, eps: float) -> np.ndarray:
    """Round every entry to the nearest multiple of eps (halves round up)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return np.floor(np.asarray(values, dtype=float) / eps + 0.5) * eps


def _tie_pick(values: np.ndarray, candidates: list[int], pessimistic: bool) -> int:
    """Best (or worst) candidate by leader value; lowest index among ties."""
    vals = values[candidates]
    target = vals.min() if pessimistic else vals.max()
    for b, v in zip(candidates, vals):
        if abs(v - target) <= TIE_TOL:
            return b
    raise AssertionError("unreachable")


def _finish(game: StageGame, pi: np.ndarray, tb: TieBreak, profile: int, br: list[int]) -> StageSolution:
    value = float(pi @ game.leader[:, profile])
    cert = certificate(game.followers, game.follower_actions, pi, profile)
    actions = tuple(int(i) for i in np.unravel_index(profile, game.follower_actions))
    return StageSolution(pi, int(profile), actions, value, tb, cert, br)


# -- solvers ----------------------------------------------------------------------


def solve_stage_sne(game: StageGame, tiebreak=TieBreak.OPTIMISTIC) -> StageSolution:
    """Stackelberg-Nash solution of a stage game by one LP per joint follower profile.

    Optimistic: the returned profile is the best inducible one for the leader.
    Pessimistic: each LP asks for a strict preference margin; the leader value
    is then the worst profile in the best-response set under the returned
    commitment, which lower-bounds the (possibly unattained) weak Stackelberg value.
    """
    rule = as_tiebreak(tiebreak)
    B = game.leader.shape[1]
    if rule.pessimistic:
        return _solve_pessimistic(game, rule)

    best = None
    for b in range(B):
        try:
            res = leader_lp(game.leader[:, b], deviation_rows(game, b))
        except Infeasible:
            continue
        if best is None or res.value > best[1] + TIE_TOL:
            best = (b, res.value, res.pi)
    if best is None:
        raise NoPureProfile("no joint pure follower profile is inducible")
    b, _, pi = best
    br = follower_pure_nash_set(game.followers, game.follower_actions, pi)
    return _finish(game, pi, TieBreak.OPTIMISTIC, b, br)


def _solve_pessimistic(game: StageGame, rule: TieBreakRule) -> StageSolution:
    A, B = game.leader.shape
    candidates = []
    for b in range(B):
        rows = deviation_rows(game, b)
        for margin in (rule.strict_margin, 0.0):
            try:
                candidates.append(leader_lp(game.leader[:, b], rows, margin=margin).pi)
                break
            except Infeasible:
                continue
    candidates.extend(np.eye(A))

    best = None
    for pi in candidates:
        br = follower_pure_nash_set(game.followers, game.follower_actions, pi)
        if not br:
            continue
        values = pi @ game.leader
        worst = _tie_pick(values, br, pessimistic=True)
        v = float(values[worst])
        if best is None or v > best[0] + TIE_TOL:
            best = (v, pi, worst, br)
    if best is None:
        raise NoPureProfile("no joint pure follower profile is inducible")
    _, pi, worst, br = best
    return _finish(game, pi, TieBreak.PESSIMISTIC, worst, br)


@functools.lru_cache(maxsize=32)
def _int_lattice(n_actions: int, steps: int) -> np.ndarray:
    if n_actions == 1:
        return np.array([[steps]])
    blocks = []
    for k in range(steps + 1):
        rest = _int_lattice(n_actions - 1, steps - k)
        blocks.append(np.hstack([np.full((rest.shape[0], 1), k), rest]))
    return np.vstack(blocks)


def simplex_lattice(n_actions: int, resolution: float) -> np.ndarray:
    """All distributions over n_actions whose entries are multiples of resolution."""
    steps = int(round(1.0 / resolution))
    count = math.comb(steps + n_actions - 1, n_actions - 1)
    if count > 10**7:
        raise GridTooLarge(f"lattice would have {count} points")
    return _int_lattice(n_actions, steps) / steps


def grid_oracle(game: StageGame, tiebreak=TieBreak.OPTIMISTIC, resolution: float = 0.01) -> StageSolution:
    """Brute-force reference: best leader commitment on a simplex lattice (single follower)."""
    rule = as_tiebreak(tiebreak)
    if game.num_followers != 1:
        raise ValueError("grid_oracle handles a single follower only")
    if game.leader_actions > 4:
        raise GridTooLarge("grid_oracle is limited to at most 4 leader actions")
    grid = simplex_lattice(game.leader_actions, resolution)
    U = grid @ game.followers[0]  # (M, B)
    V = grid @ game.leader
    in_br = U >= U.max(axis=1, keepdims=True) - NASH_TOL
    if rule.pessimistic:
        scores = np.where(in_br, V, np.inf).min(axis=1)
    else:
        scores = np.where(in_br, V, -np.inf).max(axis=1)
    m = int(np.argmax(scores))
    pi = grid[m]
    br = [int(b) for b in np.nonzero(in_br[m])[0]]
    profile = _tie_pick(V[m], br, rule.pessimistic)
    return _finish(game, pi, rule.kind, profile, br)
