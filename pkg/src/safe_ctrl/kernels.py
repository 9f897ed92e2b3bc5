"""Hot numeric kernels: batched planner rollouts under the mean dynamics model.

Two interchangeable implementations live here. The numba path compiles a
sequential rollout loop per candidate control sequence; the numpy path
vectorizes the same recursion across candidates. Backend selection:

    SAFE_CTRL_BACKEND=numba   force the compiled path (error if numba missing)
    SAFE_CTRL_BACKEND=numpy   force the pure-numpy path
    unset                     numba when importable, numpy otherwise

Both paths implement the identical recursion

    x_{t+1} = nominal(x_t, u_t) [+ d_star(x_t, u_t)] [+ W phi(x_t, u_t)]

and accumulate stage costs at (x_t, u_t) plus an optional quadratic hinge on
safe-set violation of the imagined next state (zero weight disables it; the
executed-trajectory cost bookkeeping never includes it). Environments are
identified by an integer kind; their nominal dynamics, ground-truth residual
and stage cost are inlined below and must stay in sync with the authoritative
single-step formulas in envs.py (tests enforce the equivalence).
"""

from __future__ import annotations

import math
import os

import numpy as np

SYNTHETIC = 0
PENDULUM = 1
UNICYCLE = 2

FEAT_STATE_CONTROL = 0
FEAT_STATE = 1
FEAT_POSITION = 2

FEAT_KIND_RFF = 0
FEAT_KIND_IDENTITY = 1

# Sentinel cost for rollouts that left the representable range.
NONFINITE_COST = 1.0e30

try:
    import numba

    HAS_NUMBA = True
    NUMBA_IMPORT_ERROR = None
except ImportError as exc:  # pragma: no cover - exercised only without numba
    numba = None
    HAS_NUMBA = False
    NUMBA_IMPORT_ERROR = exc


def _select_backend() -> str:
    req = os.environ.get("SAFE_CTRL_BACKEND", "").strip().lower()
    if req not in ("", "numba", "numpy"):
        raise ValueError(
            f"SAFE_CTRL_BACKEND must be 'numba' or 'numpy', got {req!r}"
        )
    if req == "numba":
        if not HAS_NUMBA:
            raise RuntimeError(
                "SAFE_CTRL_BACKEND=numba but numba is not importable: "
                f"{NUMBA_IMPORT_ERROR}"
            )
        return "numba"
    if req == "numpy":
        return "numpy"
    return "numba" if HAS_NUMBA else "numpy"


BACKEND = _select_backend()


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(theta + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def _rollout_loop(kind, x0, U, par, cpar, use_true_res, use_feat, feat_kind,
                  feat_mode, W, omega, bias, amp, out):
    # One rollout per candidate sequence; state arrays are reused, the only
    # per-candidate allocation is the cost accumulator.
    K = U.shape[0]
    Hp = U.shape[1]
    m = U.shape[2]
    n = x0.shape[0]
    r = W.shape[1]
    two_pi = 2.0 * math.pi
    xa = np.empty(n)
    xb = np.empty(n)
    for k in range(K):
        for j in range(n):
            xa[j] = x0[j]
        total = 0.0
        for t in range(Hp):
            # stage cost at the pre-step state
            if kind == PENDULUM:
                w = (xa[0] + math.pi) % two_pi
                if w <= 0.0:
                    w += two_pi
                thw = w - math.pi
                total += (cpar[0] * thw * thw
                          + cpar[1] * xa[1] * xa[1]
                          + cpar[2] * U[k, t, 0] * U[k, t, 0])
            elif kind == UNICYCLE:
                dx = xa[0] - cpar[0]
                dy = xa[1] - cpar[1]
                total += (cpar[2] * dx * dx + cpar[3] * dy * dy
                          + cpar[4] * U[k, t, 0] * U[k, t, 0]
                          + cpar[5] * U[k, t, 1] * U[k, t, 1])
            else:
                d0 = xa[0] - cpar[0]
                total += cpar[1] * d0 * d0 + cpar[2] * U[k, t, 0] * U[k, t, 0]

            # nominal mean step, optionally plus the ground-truth residual
            if kind == PENDULUM:
                w2 = xa[1] + (par[1] * math.sin(xa[0]) + par[2] * U[k, t, 0]) * par[0]
                xb[0] = xa[0] + w2 * par[0]
                xb[1] = w2
                if use_true_res:
                    dw = ((par[3] - par[1]) * math.sin(xa[0])
                          + (par[4] - par[2]) * U[k, t, 0]) * par[0]
                    xb[0] += dw * par[0] + par[5] * math.cos(xa[0] + par[6])
                    xb[1] += dw
            elif kind == UNICYCLE:
                xb[0] = xa[0] + U[k, t, 0] * math.cos(xa[2]) * par[0]
                xb[1] = xa[1] + U[k, t, 0] * math.sin(xa[2]) * par[0]
                xb[2] = xa[2] + U[k, t, 1] * par[0]
                if use_true_res:
                    if (par[2] <= xa[0] and xa[0] <= par[3]
                            and par[4] <= xa[1] and xa[1] <= par[5]):
                        wx = par[1]
                        wy = 0.0
                    else:
                        wx = math.cos(xa[0] - 4.0) * (xa[1] - 3.0)
                        wy = math.sin(xa[0] - 4.0) * (xa[1] - 3.0)
                    xb[0] += wx * par[0]
                    xb[1] += wy * par[0]
            else:
                xb[0] = par[0] * xa[0] + par[1] * U[k, t, 0]
                if use_true_res:
                    xb[0] += par[2] * xa[0] + par[3] * U[k, t, 0]

            # learned residual W phi(x_t, u_t)
            if use_feat:
                if feat_mode == FEAT_POSITION:
                    zs = 2
                else:
                    zs = n
                if feat_kind == FEAT_KIND_RFF:
                    for i in range(r):
                        s = bias[i]
                        for j in range(zs):
                            s += omega[i, j] * xa[j]
                        if feat_mode == FEAT_STATE_CONTROL:
                            for j in range(m):
                                s += omega[i, zs + j] * U[k, t, j]
                        ph = amp * math.cos(s)
                        for jj in range(n):
                            xb[jj] += W[jj, i] * ph
                else:
                    idx = 0
                    for j in range(zs):
                        ph = xa[j]
                        for jj in range(n):
                            xb[jj] += W[jj, idx] * ph
                        idx += 1
                    if feat_mode == FEAT_STATE_CONTROL:
                        for j in range(m):
                            ph = U[k, t, j]
                            for jj in range(n):
                                xb[jj] += W[jj, idx] * ph
                            idx += 1

            # safe-set hinge on the imagined next state; weight zero for
            # methods that plan without regard to the barrier
            if kind == PENDULUM:
                if cpar[3] > 0.0:
                    v1 = xb[0] - cpar[4]
                    if v1 < 0.0:
                        total += cpar[3] * v1 * v1
                    v2 = cpar[5] - xb[0]
                    if v2 < 0.0:
                        total += cpar[3] * v2 * v2
            elif kind == UNICYCLE:
                if cpar[6] > 0.0:
                    ox = xb[0] - cpar[7]
                    oy = xb[1] - cpar[8]
                    hv = ox * ox + oy * oy - cpar[9]
                    if hv < 0.0:
                        total += cpar[6] * hv * hv
            else:
                if cpar[3] > 0.0 and xb[0] < 0.0:
                    total += cpar[3] * xb[0] * xb[0]

            for j in range(n):
                xa[j] = xb[j]

        if math.isfinite(total):
            out[k] = total
        else:
            out[k] = NONFINITE_COST


if HAS_NUMBA:
    _rollout_loop_jit = numba.njit(cache=True)(_rollout_loop)
else:  # pragma: no cover - exercised only without numba
    _rollout_loop_jit = None


def _stage_cost_batch(kind, X, Ut, cpar):
    if kind == PENDULUM:
        w = np.mod(X[:, 0] + np.pi, 2.0 * np.pi)
        w = np.where(w <= 0.0, w + 2.0 * np.pi, w)
        thw = w - np.pi
        return (cpar[0] * thw * thw
                + cpar[1] * X[:, 1] ** 2
                + cpar[2] * Ut[:, 0] ** 2)
    if kind == UNICYCLE:
        dx = X[:, 0] - cpar[0]
        dy = X[:, 1] - cpar[1]
        return (cpar[2] * dx * dx + cpar[3] * dy * dy
                + cpar[4] * Ut[:, 0] ** 2 + cpar[5] * Ut[:, 1] ** 2)
    d0 = X[:, 0] - cpar[0]
    return cpar[1] * d0 * d0 + cpar[2] * Ut[:, 0] ** 2


def _wind_batch(X, par):
    inside = ((par[2] <= X[:, 0]) & (X[:, 0] <= par[3])
              & (par[4] <= X[:, 1]) & (X[:, 1] <= par[5]))
    wx = np.cos(X[:, 0] - 4.0) * (X[:, 1] - 3.0)
    wy = np.sin(X[:, 0] - 4.0) * (X[:, 1] - 3.0)
    wx = np.where(inside, par[1], wx)
    wy = np.where(inside, 0.0, wy)
    return wx, wy


def _mean_step_batch(kind, X, Ut, par, use_true_res):
    Xn = np.empty_like(X)
    if kind == PENDULUM:
        w2 = X[:, 1] + (par[1] * np.sin(X[:, 0]) + par[2] * Ut[:, 0]) * par[0]
        Xn[:, 0] = X[:, 0] + w2 * par[0]
        Xn[:, 1] = w2
        if use_true_res:
            dw = ((par[3] - par[1]) * np.sin(X[:, 0])
                  + (par[4] - par[2]) * Ut[:, 0]) * par[0]
            Xn[:, 0] += dw * par[0] + par[5] * np.cos(X[:, 0] + par[6])
            Xn[:, 1] += dw
    elif kind == UNICYCLE:
        Xn[:, 0] = X[:, 0] + Ut[:, 0] * np.cos(X[:, 2]) * par[0]
        Xn[:, 1] = X[:, 1] + Ut[:, 0] * np.sin(X[:, 2]) * par[0]
        Xn[:, 2] = X[:, 2] + Ut[:, 1] * par[0]
        if use_true_res:
            wx, wy = _wind_batch(X, par)
            Xn[:, 0] += wx * par[0]
            Xn[:, 1] += wy * par[0]
    else:
        Xn[:, 0] = par[0] * X[:, 0] + par[1] * Ut[:, 0]
        if use_true_res:
            Xn[:, 0] += par[2] * X[:, 0] + par[3] * Ut[:, 0]
    return Xn


def _feat_input_batch(X, Ut, feat_mode):
    if feat_mode == FEAT_STATE_CONTROL:
        return np.concatenate([X, Ut], axis=1)
    if feat_mode == FEAT_STATE:
        return X
    return X[:, :2]


def _hinge_penalty_batch(kind, Xn, cpar):
    if kind == PENDULUM:
        if cpar[3] <= 0.0:
            return 0.0
        v1 = np.minimum(Xn[:, 0] - cpar[4], 0.0)
        v2 = np.minimum(cpar[5] - Xn[:, 0], 0.0)
        return cpar[3] * v1 * v1 + cpar[3] * v2 * v2
    if kind == UNICYCLE:
        if cpar[6] <= 0.0:
            return 0.0
        hv = ((Xn[:, 0] - cpar[7]) ** 2 + (Xn[:, 1] - cpar[8]) ** 2
              - cpar[9])
        hv = np.minimum(hv, 0.0)
        return cpar[6] * hv * hv
    if cpar[3] <= 0.0:
        return 0.0
    v = np.minimum(Xn[:, 0], 0.0)
    return cpar[3] * v * v


def rollout_costs_numpy(kind, x0, U, par, cpar, use_true_residual=False,
                        W=None, omega=None, bias=None, amp=0.0,
                        feat_kind=FEAT_KIND_RFF, feat_mode=FEAT_STATE_CONTROL):
    """Vectorized fallback: identical recursion, batched across candidates."""
    K, Hp, _ = U.shape
    X = np.repeat(x0[None, :], K, axis=0)
    costs = np.zeros(K)
    for t in range(Hp):
        Ut = U[:, t, :]
        costs = costs + _stage_cost_batch(kind, X, Ut, cpar)
        Xn = _mean_step_batch(kind, X, Ut, par, use_true_residual)
        if W is not None:
            Z = _feat_input_batch(X, Ut, feat_mode)
            if feat_kind == FEAT_KIND_RFF:
                Phi = amp * np.cos(Z @ omega.T + bias)
            else:
                Phi = Z
            Xn = Xn + Phi @ W.T
        costs = costs + _hinge_penalty_batch(kind, Xn, cpar)
        X = Xn
    costs = np.where(np.isfinite(costs), costs, NONFINITE_COST)
    return costs


def rollout_costs_numba(kind, x0, U, par, cpar, use_true_residual=False,
                        W=None, omega=None, bias=None, amp=0.0,
                        feat_kind=FEAT_KIND_RFF, feat_mode=FEAT_STATE_CONTROL):
    if _rollout_loop_jit is None:  # pragma: no cover
        raise RuntimeError("numba backend requested but numba is unavailable")
    n = x0.shape[0]
    use_feat = W is not None
    if not use_feat:
        W = np.zeros((n, 1))
        omega = np.zeros((1, 1))
        bias = np.zeros(1)
    elif omega is None:
        # identity features never consult omega/bias
        omega = np.zeros((1, 1))
        bias = np.zeros(1)
    out = np.empty(U.shape[0])
    _rollout_loop_jit(kind, x0, U, par, cpar, use_true_residual, use_feat,
                      feat_kind, feat_mode, W, omega, bias, amp, out)
    return out


if BACKEND == "numba":
    rollout_costs = rollout_costs_numba
else:
    rollout_costs = rollout_costs_numpy


def warmup():
    """Trigger JIT compilation on a tiny workload so timings exclude it."""
    if BACKEND != "numba":
        return
    x0 = np.zeros(2)
    U = np.zeros((2, 3, 1))
    par = np.array([0.05, 8.0, 1.6, 15.0, 3.0, 0.05, -3.0])
    cpar = np.array([1.0, 0.1, 0.001, 100.0, -0.4, 3.9])
    W = np.zeros((2, 4))
    om = np.zeros((4, 3))
    bi = np.zeros(4)
    rollout_costs_numba(PENDULUM, x0, U, par, cpar, False, W, om, bi, 1.0,
                        FEAT_KIND_RFF, FEAT_STATE_CONTROL)
    rollout_costs_numba(PENDULUM, x0, U, par, cpar, True)
    x3 = np.zeros(3)
    U2 = np.zeros((2, 3, 2))
    paru = np.array([0.1, 1.5, -2.0, 3.0, -2.6, -0.2])
    cparu = np.array([4.0, 2.0, 1.0, 1.0, 0.05, 0.05, 100.0, 2.0, 0.8, 0.25])
    rollout_costs_numba(UNICYCLE, x3, U2, paru, cparu, True)
    rollout_costs_numba(UNICYCLE, x3, U2, paru, cparu, False,
                        np.zeros((3, 4)), np.zeros((4, 2)), np.zeros(4), 1.0,
                        FEAT_KIND_RFF, FEAT_POSITION)
    x1 = np.zeros(1)
    U1 = np.zeros((2, 3, 1))
    pars = np.array([1.0, 1.0, -0.15, 0.05])
    cpars = np.array([0.0, 1.0, 0.01, 50.0])
    rollout_costs_numba(SYNTHETIC, x1, U1, pars, cpars, False,
                        np.zeros((1, 2)), None, None, 1.0,
                        FEAT_KIND_IDENTITY, FEAT_STATE_CONTROL)
