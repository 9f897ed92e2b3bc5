"""Sampling-based receding-horizon planner.

Perturbs a warm-started control sequence with clipped Gaussian noise, scores
every candidate by a full rollout on the supplied model, and blends candidates
with exponentiated-cost weights. The blend is a convex combination of box-
clipped sequences, so the result respects the box without re-clipping.
"""

from __future__ import annotations

import numpy as np

from . import kernels


def _feature_kwargs(feat, W):
    """Unpack a feature map into the flat arguments the kernels expect."""
    if W is None or feat is None:
        return {}
    return dict(omega=feat.omega, bias=feat.bias, amp=feat.amp,
                feat_kind=feat.feat_kind)


class MppiPlanner:
    def __init__(self, env, horizon: int, samples: int, temperature: float,
                 sigma_scale: float, use_barrier_penalty: bool = True):
        if horizon < 1 or samples < 1 or temperature <= 0 or sigma_scale <= 0:
            raise ValueError("invalid planner parameters")
        self.env = env
        self.horizon = int(horizon)
        self.samples = int(samples)
        self.temperature = float(temperature)
        # Perturbation scale proportional to the half-span of each control axis
        self.sigma = sigma_scale * 0.5 * (env.u_hi - env.u_lo)
        # Methods that plan without regard to the safe set zero the hinge slot
        self.cost_par = env.cost_par.copy()
        if not use_barrier_penalty and env.pen_slot >= 0:
            self.cost_par[env.pen_slot] = 0.0
        self.U_nom = self._center_sequence()
        self._last_weights = None

    def _center_sequence(self) -> np.ndarray:
        mid = 0.5 * (self.env.u_lo + self.env.u_hi)
        return np.tile(mid, (self.horizon, 1))

    def reset(self):
        self.U_nom = self._center_sequence()
        self._last_weights = None

    def weights(self) -> np.ndarray | None:
        return None if self._last_weights is None else self._last_weights.copy()

    def plan_step(self, x: np.ndarray, rng, W: np.ndarray | None,
                  feat=None, use_true_residual: bool = False) -> np.ndarray:
        """One receding-horizon step; returns the first control of the blend.

        W is the residual weight matrix used during rollouts (None with
        use_true_residual=False rolls out the plain nominal model).
        """
        env = self.env
        K, H, m = self.samples, self.horizon, env.m
        noise = rng.standard_normal((K, H, m)) * self.sigma
        cand = np.clip(self.U_nom[None, :, :] + noise, env.u_lo, env.u_hi)
        costs = kernels.rollout_costs(
            env.kind, x, cand, env.par, self.cost_par,
            use_true_residual=use_true_residual, W=W,
            feat_mode=env.feat_mode, **_feature_kwargs(feat, W))
        costs = np.where(np.isfinite(costs), costs, kernels.NONFINITE_COST)
        s = costs - costs.min()
        w = np.exp(-s / self.temperature)
        w_sum = w.sum()
        if not np.isfinite(w_sum) or w_sum <= 0:
            w = np.full(K, 1.0 / K)
        else:
            w = w / w_sum
        self._last_weights = w
        U_new = np.einsum("k,khm->hm", w, cand)
        u0 = U_new[0].copy()
        # Warm start: shift one step, repeat the tail entry
        self.U_nom = np.vstack([U_new[1:], U_new[-1:]])
        return u0

    def score_sequences(self, x: np.ndarray, seqs: np.ndarray,
                        W: np.ndarray | None, feat=None,
                        use_true_residual: bool = False) -> np.ndarray:
        """Rollout costs for externally supplied sequences (no state change)."""
        return kernels.rollout_costs(
            self.env.kind, x, seqs, self.env.par, self.cost_par,
            use_true_residual=use_true_residual, W=W,
            feat_mode=self.env.feat_mode, **_feature_kwargs(feat, W))
