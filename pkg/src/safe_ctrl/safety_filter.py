"""Minimally invasive control projection under linear barrier constraints.

Solves  min ||u - u*||^2  s.t.  a_i u >= b_i  and  u_lo <= u <= u_hi
exactly for the small control dimensions used here (m <= 3, a handful of
constraints) by enumerating candidate active sets. No external solver: the
subproblems are closed-form least-distance corrections.

When the polytope is empty the filter returns the max-margin fallback
argmax_u min_i (a_i u - b_i) over the box and raises the infeasible flag so
callers can log the event.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from .cbf import LinearConstraint


def _rows_from(constraints, u_lo, u_hi):
    m = u_lo.shape[0]
    rows_a = []
    rows_b = []
    for c in constraints:
        rows_a.append(np.asarray(c.a, dtype=np.float64))
        rows_b.append(float(c.b))
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        rows_a.append(e.copy())
        rows_b.append(float(u_lo[j]))
        rows_a.append(-e)
        rows_b.append(float(-u_hi[j]))
    return np.array(rows_a), np.array(rows_b)


def _tolerances(A, b, u_lo, u_hi):
    span = np.maximum(np.abs(u_lo), np.abs(u_hi))
    return 1e-9 * (1.0 + np.abs(b) + np.abs(A) @ span)


def project_safe(u_star, constraints, u_lo, u_hi):
    """Project a proposal onto the constraint polytope.

    Returns (u, constraint_active, infeasible). constraint_active is set when
    the proposal had to move; infeasible marks the max-margin fallback.
    """
    u_star = np.asarray(u_star, dtype=np.float64)
    u_lo = np.asarray(u_lo, dtype=np.float64)
    u_hi = np.asarray(u_hi, dtype=np.float64)
    m = u_star.shape[0]
    u0 = np.clip(u_star, u_lo, u_hi)
    if not constraints:
        return u0, False, False

    A, b = _rows_from(constraints, u_lo, u_hi)
    tol = _tolerances(A, b, u_lo, u_hi)
    if np.all(A @ u0 >= b - tol):
        # box projection feasible: it is the polytope projection too, since
        # the polytope sits inside the box
        return u0, False, False

    n_rows = A.shape[0]
    best = None  # (obj, u)
    # candidates are equality projections of the raw proposal (the box rows
    # are ordinary constraint rows, so no pre-clipping here)
    for size in range(1, m + 1):
        for S in combinations(range(n_rows), size):
            As = A[list(S)]
            gram = As @ As.T
            rhs = b[list(S)] - As @ u_star
            try:
                lam = np.linalg.solve(gram, rhs)
            except np.linalg.LinAlgError:
                continue
            cand = u_star + As.T @ lam
            if not np.all(np.isfinite(cand)):
                continue
            if np.any(A @ cand < b - tol):
                continue
            obj = float(np.sum((cand - u_star) ** 2))
            if best is None or obj < best[0] - 1e-12:
                best = (obj, cand)
            elif abs(obj - best[0]) <= 1e-12 and tuple(cand) < tuple(best[1]):
                best = (obj, cand)
    if best is not None:
        return best[1], True, False

    u_fb = fallback_safest(constraints, u_lo, u_hi)
    return u_fb, True, True


def fallback_safest(constraints, u_lo, u_hi):
    """Max-margin control: argmax over the box of min_i (a_i u - b_i).

    Solved exactly as a tiny LP in (u, s) by vertex enumeration; the optimum
    sits at a vertex where m+1 of the rows (margin rows, box faces) are tight.
    Ties resolve to the lexicographically smallest control.
    """
    u_lo = np.asarray(u_lo, dtype=np.float64)
    u_hi = np.asarray(u_hi, dtype=np.float64)
    m = u_lo.shape[0]
    if not constraints:
        return 0.5 * (u_lo + u_hi)

    A, b = _rows_from(constraints, u_lo, u_hi)
    tol = _tolerances(A, b, u_lo, u_hi)
    k = len(constraints)
    # rows in (u, s) space: margin rows [a_i, -1] = b_i, box rows [±e_j, 0]
    ext = np.zeros((A.shape[0], m + 1))
    ext[:, :m] = A
    ext[:k, m] = -1.0
    best = None  # (s, u)
    for S in combinations(range(A.shape[0]), m + 1):
        if not any(i < k for i in S):
            continue  # s would be unconstrained
        M = ext[list(S)]
        try:
            sol = np.linalg.solve(M, b[list(S)])
        except np.linalg.LinAlgError:
            continue
        u, s = sol[:m], sol[m]
        if not np.all(np.isfinite(sol)):
            continue
        if np.any(u < u_lo - 1e-9) or np.any(u > u_hi + 1e-9):
            continue
        if np.any(A[:k] @ u - s < b[:k] - tol[:k]):
            continue
        u = np.clip(u, u_lo, u_hi)
        if best is None or s > best[0] + 1e-12:
            best = (s, u)
        elif abs(s - best[0]) <= 1e-12 and tuple(u) < tuple(best[1]):
            best = (s, u)
    if best is None:
        # every vertex solve degenerated; fall back to the box midpoint
        return 0.5 * (u_lo + u_hi)
    return best[1]
