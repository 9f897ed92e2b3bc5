"""Feature maps for residual dynamics regression.

RffMap approximates a shift-invariant kernel with random cosines
    phi_i(z) = sqrt(2/r) cos(omega_i . z + b_i),
frequencies drawn N(0, 1/gamma^2) per coordinate in box-normalized inputs and
folded back into physical units, so one bandwidth setting behaves the same
across environments with very different coordinate ranges.

LinearFeatures is the exact dictionary phi(z) = z used by the synthetic
environment, where the true residual is representable with zero error.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels


class RffMap:
    """Random Fourier feature map over state or state-control inputs.

    Parameters
    ----------
    r : feature count.
    d_in : input dimension (n, n + m, or 2 for position-only inputs).
    n_state_inputs : how many leading inputs are state coordinates; the rest
        are controls and contribute to the control-Lipschitz bound.
    gamma : bandwidth in normalized coordinates.
    rng : source for frequencies and phases.
    center, halfwidth : per-coordinate box normalization (raw physical input
        z is mapped to (z - center) / halfwidth before the cosine).
    """

    feat_kind = kernels.FEAT_KIND_RFF

    def __init__(self, r, d_in, n_state_inputs, gamma, rng,
                 center=None, halfwidth=None):
        if r < 1 or d_in < 1 or not (0 < n_state_inputs <= d_in):
            raise ValueError("invalid feature map dimensions")
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        if center is None:
            center = np.zeros(d_in)
        if halfwidth is None:
            halfwidth = np.ones(d_in)
        center = np.asarray(center, dtype=np.float64)
        halfwidth = np.asarray(halfwidth, dtype=np.float64)
        if np.any(halfwidth <= 0):
            raise ValueError("halfwidth must be positive")
        omega_norm = rng.standard_normal((r, d_in)) / gamma
        self.r = int(r)
        self.d_in = int(d_in)
        self.n_state_inputs = int(n_state_inputs)
        self.amp = math.sqrt(2.0 / r)
        # Fold the normalization into the frequencies: cos(W (z-c)/s + b)
        # becomes cos(W' z + b') with W' = W/s, b' = b - W' c.
        self.omega = omega_norm / halfwidth
        phase = rng.random(r) * 2.0 * math.pi
        self.bias = phase - self.omega @ center

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.amp * np.cos(self.omega @ z + self.bias)

    def eval_batch(self, Z: np.ndarray) -> np.ndarray:
        return self.amp * np.cos(Z @ self.omega.T + self.bias)

    def control_lipschitz(self) -> np.ndarray:
        """Per-feature bound on |phi_i(x,u) - phi_i(x,u')| / ||u - u'||_1."""
        if self.n_state_inputs == self.d_in:
            return np.zeros(self.r)
        ctrl = self.omega[:, self.n_state_inputs:]
        return self.amp * np.sum(np.abs(ctrl), axis=1)

    def norm_bound(self) -> float:
        return math.sqrt(2.0)


class LinearFeatures:
    """Identity dictionary phi(z) = z; exact for linear residuals."""

    feat_kind = kernels.FEAT_KIND_IDENTITY

    def __init__(self, d_in, n_state_inputs):
        self.r = int(d_in)
        self.d_in = int(d_in)
        self.n_state_inputs = int(n_state_inputs)
        self.amp = 1.0
        self.omega = None
        self.bias = None

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64).copy()

    def eval_batch(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64).copy()

    def control_lipschitz(self) -> np.ndarray:
        lips = np.zeros(self.r)
        lips[self.n_state_inputs:] = 1.0
        return lips

    def norm_bound(self) -> float:
        return float("inf")


def feature_input(feat_mode: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    if feat_mode == kernels.FEAT_STATE_CONTROL:
        return np.concatenate([x, u])
    if feat_mode == kernels.FEAT_STATE:
        return np.asarray(x, dtype=np.float64)
    return np.asarray(x[:2], dtype=np.float64)


def make_features(env, cfg, rng):
    """Build the env's feature map (seeded; identical across methods)."""
    mode = env.feat_mode
    if mode == kernels.FEAT_STATE_CONTROL:
        n_state = env.n
        lo = np.concatenate([env.state_lo, env.u_lo])
        hi = np.concatenate([env.state_hi, env.u_hi])
    elif mode == kernels.FEAT_STATE:
        n_state = env.n
        lo, hi = env.state_lo, env.state_hi
    else:
        n_state = 2
        lo, hi = env.state_lo[:2], env.state_hi[:2]
    d_in = lo.shape[0]
    if cfg.feature_type == "linear":
        return LinearFeatures(d_in, n_state)
    if cfg.feature_type != "rff":
        raise ValueError(f"unknown feature_type {cfg.feature_type!r}")
    center = 0.5 * (lo + hi)
    halfwidth = 0.5 * (hi - lo)
    return RffMap(cfg.rff_features, d_in, n_state, cfg.rff_gamma, rng,
                  center=center, halfwidth=halfwidth)
