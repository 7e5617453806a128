"""Dense two-phase simplex for the leader's commitment LP.

Solves ``max c.pi`` over the probability simplex intersected with rows
``g.pi >= margin``. Problems here have a handful of variables, so a full
tableau with Bland's rule is both exact enough and fast enough.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEAS_TOL = 1e-9


class Infeasible(Exception):
    """The constraint rows cut the simplex down to the empty set."""


@dataclass
class LPResult:
    pi: np.ndarray
    value: float
    dual_bound: float  # verified upper bound from a feasible dual point
    duals: np.ndarray  # multipliers y >= 0 of the inequality rows


def _pivot(T: np.ndarray, basis: list, row: int, col: int) -> None:
    T[row] /= T[row, col]
    col_vals = T[:, col].copy()
    col_vals[row] = 0.0
    T -= np.outer(col_vals, T[row])
    basis[row] = col


def _run_simplex(T, basis, cost, allowed, tol):
    """Maximize cost.x over the tableau in place (Bland's rule)."""
    m = T.shape[0]
    while True:
        cb = cost[basis]
        reduced = cost[:-1] - cb @ T[:, :-1]
        entering = -1
        for j in np.nonzero(reduced > tol)[0]:
            if allowed[j]:
                entering = int(j)
                break
        if entering < 0:
            return
        col = T[:, entering]
        best_row, best_ratio = -1, np.inf
        for i in range(m):
            if col[i] > tol:
                ratio = T[i, -1] / col[i]
                if ratio < best_ratio - 1e-15 or (
                    abs(ratio - best_ratio) <= 1e-15 and basis[i] < basis[best_row]
                ):
                    best_row, best_ratio = i, ratio
        if best_row < 0:
            raise ArithmeticError("LP unbounded; impossible over the simplex")
        _pivot(T, basis, best_row, entering)


def leader_lp(objective, constraints=None, margin: float = 0.0, tol: float = FEAS_TOL) -> LPResult:
    """Maximize ``objective . pi`` over distributions pi with ``constraints @ pi >= margin``.

    Raises :class:`Infeasible` when no distribution satisfies the rows.
    """
    c = np.asarray(objective, dtype=float)
    n = c.shape[0]
    G = np.zeros((0, n)) if constraints is None else np.asarray(constraints, dtype=float).reshape(-1, n)
    m = G.shape[0]
    if margin < 0:
        raise ValueError("margin must be nonnegative")

    # columns: pi (n) | surplus s (m) | artificial (m+1) | rhs
    rows = m + 1
    ncols = n + m + rows
    T = np.zeros((rows, ncols + 1))
    T[:m, :n] = G
    T[:m, n:n + m] = -np.eye(m)
    T[:m, -1] = margin
    T[m, :n] = 1.0
    T[m, -1] = 1.0
    T[:, n + m:n + m + rows] = np.eye(rows)
    basis = list(range(n + m, n + m + rows))

    phase1 = np.zeros(ncols + 1)
    phase1[n + m:ncols] = -1.0
    allowed = np.ones(ncols, dtype=bool)
    _run_simplex(T, basis, phase1, allowed, tol)
    infeasibility = float(T[:, -1][np.array(basis) >= n + m].sum())
    if infeasibility > tol * max(1.0, margin * m):
        raise Infeasible(f"phase-1 residual {infeasibility:.3g}")

    # Drive zero-level artificials out where possible; rows that cannot pivot are redundant.
    for i, j in enumerate(basis):
        if j >= n + m:
            cand = np.nonzero(np.abs(T[i, :n + m]) > tol)[0]
            if cand.size:
                _pivot(T, basis, i, int(cand[0]))

    phase2 = np.zeros(ncols + 1)
    phase2[:n] = c
    allowed[n + m:] = False
    _run_simplex(T, basis, phase2, allowed, tol)

    x = np.zeros(ncols)
    for i, j in enumerate(basis):
        x[j] = T[i, -1]
    pi = np.clip(x[:n], 0.0, None)
    pi /= pi.sum()

    # Simplex multipliers u = c_B B^{-1}; B^{-1} sits in the artificial block.
    binv = T[:, n + m:ncols]
    u = phase2[basis] @ binv
    y = np.clip(-u[:m], 0.0, None)
    dual_bound = float(np.max(c + G.T @ y) - margin * y.sum())
    return LPResult(pi=pi, value=float(c @ pi), dual_bound=dual_bound, duals=y)
