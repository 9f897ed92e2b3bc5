"""Discrete-time stochastic control barrier machinery.

A barrier h certifies the safe set {x : h(x) >= 0}. The one-step exact
condition on the mean model asks for

    h(x_next_mean) - margin >= (1 - eta) h(x)

where the margin absorbs the Gaussian process noise over a horizon via a
union bound. Because the exact condition is nonlinear in u, the planner uses
a linear surrogate built by expanding h at the drift image F(x); the
surrogate is one-sidedly conservative: any u in the control box satisfying it
also satisfies the exact condition when h is affine (and when h is convex the
first-order expansion only under-estimates h, so conservatism is preserved).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class BarrierSpec:
    """Barrier function with metadata used by margin and constraint builders.

    lipschitz bounds |h(x) - h(y)| <= L ||x - y||_inf over the operating box;
    affine marks barriers whose linear surrogate is exact.
    """

    name: str
    h: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    affine: bool = False


@dataclass(frozen=True)
class LinearConstraint:
    """Half-space a @ u >= b in control space."""

    a: np.ndarray
    b: float


def noise_margin(lipschitz: float, sigma_bar: float, n: int, horizon: int,
                 delta_s: float) -> float:
    """Barrier slack absorbing diagonal Gaussian noise for a whole episode.

    Derived from the union bound over horizon * n noise coordinates: with
    probability at least 1 - delta_s every |eps| stays below
    sigma_bar * sqrt(2 ln(H n / delta_s)), and an L-Lipschitz barrier moves by
    at most L * sqrt(n) * ... collapsed into the single closed form below.
    """
    if lipschitz < 0 or sigma_bar < 0:
        raise ValueError("lipschitz and sigma_bar must be non-negative")
    if horizon < 1 or n < 1 or not (0.0 < delta_s < 1.0):
        raise ValueError("need horizon >= 1, n >= 1, delta_s in (0, 1)")
    if sigma_bar == 0.0:
        return 0.0
    return lipschitz * sigma_bar * math.sqrt(
        2.0 * n * math.log(horizon * n / delta_s))


def noise_envelope(sigma_bar: float, n: int, horizon: int,
                   delta_s: float) -> float:
    """Per-coordinate noise bound p: all |eps| <= p w.p. >= 1 - delta_s."""
    if sigma_bar == 0.0:
        return 0.0
    return sigma_bar * math.sqrt(2.0 * math.log(horizon * n / delta_s))


def exact_slack(barrier: BarrierSpec, x: np.ndarray, x_next_mean: np.ndarray,
                margin: float, eta: float) -> float:
    """h(x') - margin - (1 - eta) h(x) for a predicted mean next state."""
    return barrier.h(x_next_mean) - margin - (1.0 - eta) * barrier.h(x)


def check_exact(barrier: BarrierSpec, x: np.ndarray, x_next_mean: np.ndarray,
                margin: float, eta: float, tol: float = 0.0) -> bool:
    return exact_slack(barrier, x, x_next_mean, margin, eta) >= -tol


def residual_lipschitz_term(grad_hF: np.ndarray, W: np.ndarray,
                            feat_control_lipschitz: np.ndarray,
                            u_lo: np.ndarray, u_hi: np.ndarray) -> float:
    """Upper bound on |grad_hF @ W (phi(x,u) - phi(x,u*))| over the box.

    Absolute values are taken before the contraction so feature-level
    cancellation cannot under-estimate the bound:
        sum_i |(grad W)_i| L_i * ||u_hi - u_lo||_1.
    Zero whenever the features ignore the control.
    """
    lips = np.asarray(feat_control_lipschitz)
    if not np.any(lips):
        return 0.0
    gw = np.abs(grad_hF @ W)
    return float((gw * lips).sum() * np.sum(u_hi - u_lo))


def known_residual_lipschitz_term(grad_hF: np.ndarray, u_jac: np.ndarray,
                                  u_lo: np.ndarray,
                                  u_hi: np.ndarray) -> float:
    """Same bound when the residual's control Jacobian is known exactly."""
    if u_jac is None or not np.any(u_jac):
        return 0.0
    per_coord = np.abs(grad_hF @ u_jac)
    return float(per_coord @ (u_hi - u_lo))


def linearize_constraint(barrier: BarrierSpec, x: np.ndarray, Fx: np.ndarray,
                         Gx: np.ndarray, resid_at_ustar: np.ndarray,
                         k_lip: float, margin: float,
                         eta: float) -> LinearConstraint:
    """Linear surrogate of the barrier condition, expanded at the drift image.

    a u >= b with
      a = grad h(Fx) @ Gx
      b = -eta h(x) + margin - (h(Fx) - h(x)) + |grad h(Fx) @ d(x, u*)| + k_lip

    resid_at_ustar is the model's residual prediction at the planner's
    proposal; k_lip bounds how much the residual term can move as u sweeps
    the box (see residual_lipschitz_term).
    """
    hx = barrier.h(x)
    hF = barrier.h(Fx)
    g = barrier.grad(Fx)
    a = g @ Gx
    k1 = abs(float(g @ resid_at_ustar))
    b = -eta * hx + margin - (hF - hx) + k1 + k_lip
    return LinearConstraint(a=np.atleast_1d(np.asarray(a, dtype=np.float64)),
                            b=float(b))


def implication_check(barrier: BarrierSpec, x: np.ndarray, u: np.ndarray,
                      constraint: LinearConstraint,
                      x_next_mean: np.ndarray, margin: float, eta: float,
                      tol: float = 1e-9) -> tuple[bool, bool]:
    """Evaluate (linear surrogate holds, exact condition holds) at one u."""
    lin_ok = bool(constraint.a @ u >= constraint.b - tol)
    exact_ok = check_exact(barrier, x, x_next_mean, margin, eta, tol=tol)
    return lin_ok, exact_ok
