"""Residual dynamics learning: ridge regression with confidence ellipsoids.

The learner regresses x' - nominal(x, u) on features phi(x, u):

    W_bar = (sum_i y_i phi_i^T) V^{-1},  V = sum_i phi_i phi_i^T + lambda I.

Two ellipsoids track uncertainty. The initial ball is frozen after offline
fitting; the running ball shrinks as online data accumulates and is always
intersected with the initial one, so membership can only tighten. Thompson
sampling draws rows from N(W_bar, nu^2 Sigma^{-1}) and rejects draws outside
the intersection, falling back to the (norm-capped) mean after a bounded
number of attempts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import feature_input


def beta_radius(lam: float, c1: float, sigma_bar: float, n: int, r: int,
                sample_budget: float, delta: float) -> float:
    """Confidence-ellipsoid radius for a given worst-case sample budget.

    Nondecreasing in the budget and in 1/delta; the sqrt(lam)*c1 term pays for
    the ridge bias, the rest for noise concentration.
    """
    if lam <= 0 or c1 < 0 or sigma_bar < 0 or not (0 < delta < 1):
        raise ValueError("invalid confidence radius parameters")
    if n < 1 or r < 1 or sample_budget < 0:
        raise ValueError("invalid dimensions or sample budget")
    tail = (8.0 * n * math.log(5.0)
            + 8.0 * r * math.log(1.0 + sample_budget / lam)
            + 8.0 * math.log(1.0 / delta))
    return math.sqrt(lam) * c1 + sigma_bar * math.sqrt(tail)


def _psd_sqrt_pair(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric sqrt and inverse sqrt with an eigenvalue floor."""
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    floor = 1e-12 * float(np.trace(M))
    vals = np.maximum(vals, max(floor, 1e-300))
    sq = (vecs * np.sqrt(vals)) @ vecs.T
    inv_sq = (vecs / np.sqrt(vals)) @ vecs.T
    return sq, inv_sq


@dataclass
class ThompsonInfo:
    attempts: int
    fallback: bool
    draws_returned: int


class ResidualModel:
    """Ridge-regressed residual model with confidence-ball bookkeeping."""

    def __init__(self, feat, n: int, lam: float, c1: float, sigma_bar: float,
                 delta: float, sample_budget: float):
        self.feat = feat
        self.n = int(n)
        self.r = int(feat.r)
        self.lam = float(lam)
        self.c1 = float(c1)
        self.sigma_bar = float(sigma_bar)
        self.delta = float(delta)
        self.sample_budget = float(sample_budget)
        self.feat_mode = getattr(feat, "feat_mode", 0)
        self.Sigma = lam * np.eye(self.r)
        self.acc = np.zeros((self.n, self.r))
        self.count = 0
        self.W_bar = np.zeros((self.n, self.r))
        # Initial-ball snapshot (set by fit_initial)
        self.W0 = np.zeros((self.n, self.r))
        self.V0 = self.Sigma.copy()
        self.beta0 = beta_radius(lam, c1, sigma_bar, self.n, self.r, 0.0, delta)
        self._V0_sqrt = None
        self._cache_count = -1
        self._Sigma_sqrt = None
        self._Sigma_inv_sqrt = None

    # -- fitting ---------------------------------------------------------

    def _refresh(self):
        self.W_bar = np.linalg.solve(self.Sigma, self.acc.T).T

    def add_samples(self, Phi: np.ndarray, Y: np.ndarray):
        """Accumulate (features, residual targets) sample by sample.

        Per-sample accumulation keeps batch and incremental updates bitwise
        identical for the same sample order.
        """
        for i in range(Phi.shape[0]):
            phi = Phi[i]
            self.Sigma += np.outer(phi, phi)
            self.acc += np.outer(Y[i], phi)
        self.count += Phi.shape[0]
        self._refresh()

    # -- ball machinery ---------------------------------------------------

    def freeze_initial_ball(self, sample_count: int):
        self.W0 = self.W_bar.copy()
        self.V0 = self.Sigma.copy()
        self.beta0 = beta_radius(self.lam, self.c1, self.sigma_bar, self.n,
                                 self.r, float(sample_count), self.delta)
        self._V0_sqrt, _ = _psd_sqrt_pair(self.V0)

    @property
    def beta_t(self) -> float:
        return beta_radius(self.lam, self.c1, self.sigma_bar, self.n, self.r,
                           self.sample_budget, self.delta)

    def _sigma_sqrts(self):
        if self._cache_count != self.count:
            self._Sigma_sqrt, self._Sigma_inv_sqrt = _psd_sqrt_pair(self.Sigma)
            self._cache_count = self.count
        return self._Sigma_sqrt, self._Sigma_inv_sqrt

    def ball0_contains(self, W: np.ndarray) -> bool:
        if self._V0_sqrt is None:
            self._V0_sqrt, _ = _psd_sqrt_pair(self.V0)
        if np.linalg.norm(W, 2) > self.c1 + 1e-12:
            return False
        dev = np.linalg.norm((W - self.W0) @ self._V0_sqrt, 2)
        return bool(dev <= self.beta0 + 1e-12)

    def ball_contains(self, W: np.ndarray) -> bool:
        """Membership in the running ball (intersection with the initial one)."""
        if not self.ball0_contains(W):
            return False
        sq, _ = self._sigma_sqrts()
        dev = np.linalg.norm((W - self.W_bar) @ sq, 2)
        return bool(dev <= self.beta_t + 1e-12)

    # -- prediction and sampling -----------------------------------------

    def predict(self, phi: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
        return (self.W_bar if W is None else W) @ phi

    def mean_clipped(self) -> np.ndarray:
        """W_bar projected onto the norm cap; the Thompson fallback value."""
        W = self.W_bar
        nrm = np.linalg.norm(W, 2)
        if nrm > self.c1 and nrm > 0:
            W = W * (self.c1 / nrm)
        return W.copy()

    def thompson_sample(self, rng, nu: float, max_attempts: int = 50,
                        draws: int = 1):
        """Draw up to `draws` ball members; fall back to the capped mean.

        A raw Gaussian perturbation in the whitened metric has Frobenius
        norm concentrated at sqrt(n*r), so it is scaled by
        nu * beta_t / sqrt(n*r): nu is the draw radius as a fraction of
        the confidence ellipsoid, and acceptance stays likely for nu < 1.
        Each requested draw gets its own attempt budget. The raw Gaussian
        stream is consumed deterministically, so two callers with identical
        rng state and model state get identical samples.
        """
        _, inv_sq = self._sigma_sqrts()
        scale = nu * self.beta_t / math.sqrt(self.n * self.r)
        out = []
        attempts_total = 0
        fallback = False
        for _ in range(max(1, draws)):
            got = None
            if nu == 0.0:
                got = self.W_bar.copy() if self.ball_contains(self.W_bar) else None
                attempts_total += 1
            else:
                for _a in range(max_attempts):
                    attempts_total += 1
                    G = rng.standard_normal((self.n, self.r))
                    W = self.W_bar + scale * (G @ inv_sq)
                    if self.ball_contains(W):
                        got = W
                        break
            if got is None:
                got = self.mean_clipped()
                fallback = True
            out.append(got)
        info = ThompsonInfo(attempts=attempts_total, fallback=fallback,
                            draws_returned=len(out))
        return out, info


def fit_initial_model(feat, feat_mode, env_n, X, U, Xn, nominal_fn, lam, c1,
                      sigma_bar, delta, sample_budget):
    """Build a ResidualModel from offline triples and freeze its initial ball.

    nominal_fn(x, u) -> predicted nominal next state; targets are the
    one-step prediction errors.
    """
    model = ResidualModel(feat, env_n, lam, c1, sigma_bar, delta, sample_budget)
    model.feat_mode = feat_mode
    N = X.shape[0]
    Phi = np.zeros((N, feat.r))
    Y = np.zeros((N, env_n))
    for i in range(N):
        Phi[i] = feat(feature_input(feat_mode, X[i], U[i]))
        Y[i] = Xn[i] - nominal_fn(X[i], U[i])
    model.add_samples(Phi, Y)
    model.freeze_initial_ball(N)
    return model


def update_model(model: ResidualModel, feat_mode, X, U, Xn, nominal_fn):
    """Online update with one episode of executed transitions."""
    N = X.shape[0]
    Phi = np.zeros((N, model.feat.r))
    Y = np.zeros((N, model.n))
    for i in range(N):
        Phi[i] = model.feat(feature_input(feat_mode, X[i], U[i]))
        Y[i] = Xn[i] - nominal_fn(X[i], U[i])
    model.add_samples(Phi, Y)


def prediction_error_bound(model: ResidualModel, feat_mode, true_resid_fn,
                           X, U, W: np.ndarray | None = None) -> float:
    """Measured sup over a grid of ||W phi - d_star|| (calibration check)."""
    Wm = model.W_bar if W is None else W
    worst = 0.0
    for i in range(X.shape[0]):
        phi = model.feat(feature_input(feat_mode, X[i], U[i]))
        err = np.linalg.norm(Wm @ phi - true_resid_fn(X[i], U[i]))
        worst = max(worst, float(err))
    return worst
