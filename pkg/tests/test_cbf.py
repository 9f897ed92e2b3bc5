import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from safe_ctrl.cbf import (BarrierSpec, LinearConstraint, check_exact,
                           exact_slack, implication_check,
                           known_residual_lipschitz_term, linearize_constraint,
                           noise_envelope, noise_margin,
                           residual_lipschitz_term)
from safe_ctrl.domain import seeded_rng


def _floor_barrier(n=1):
    return BarrierSpec(name="floor", h=lambda x: float(x[0]),
                       grad=lambda x: np.eye(n)[0].copy(),
                       lipschitz=1.0, affine=True)


# ----------------------------------------------------------------- margins

def test_noise_margin_closed_form():
    # L sigma sqrt(2 n ln(H n / delta_s)), checked against the raw formula
    got = noise_margin(1.0, 0.01, 2, 200, 0.05)
    hand = 1.0 * 0.01 * math.sqrt(2.0 * 2.0 * math.log(200 * 2 / 0.05))
    assert got == pytest.approx(hand, rel=1e-14)
    # frozen: the pendulum acceptance configuration
    assert got == pytest.approx(0.059957307546826925, rel=1e-12)
    # frozen: the unicycle acceptance configuration
    assert noise_margin(1.0, 0.005, 3, 80, 0.05) \
        == pytest.approx(0.03565747718970591, rel=1e-12)


def test_noise_margin_scales_linearly():
    base = noise_margin(1.0, 0.01, 2, 100, 0.05)
    assert noise_margin(3.0, 0.01, 2, 100, 0.05) == pytest.approx(3 * base)
    assert noise_margin(1.0, 0.02, 2, 100, 0.05) == pytest.approx(2 * base)


def test_noise_margin_zero_noise():
    assert noise_margin(1.0, 0.0, 2, 100, 0.05) == 0.0


def test_noise_margin_validation():
    with pytest.raises(ValueError):
        noise_margin(-1.0, 0.1, 2, 100, 0.05)
    with pytest.raises(ValueError):
        noise_margin(1.0, 0.1, 2, 0, 0.05)
    with pytest.raises(ValueError):
        noise_margin(1.0, 0.1, 2, 100, 0.0)


def test_noise_envelope_closed_form():
    got = noise_envelope(0.01, 2, 200, 0.05)
    assert got == pytest.approx(0.01 * math.sqrt(2 * math.log(400 / 0.05)),
                                rel=1e-14)
    assert got == pytest.approx(0.042396218748048685, rel=1e-12)
    assert noise_envelope(0.0, 2, 200, 0.05) == 0.0


def test_envelope_coverage_monte_carlo():
    # small-sample version of the acceptance check: P(any |eps| > p) <= delta_s
    sigma, n, H, ds = 0.3, 2, 50, 0.1
    p = noise_envelope(sigma, n, H, ds)
    rng = seeded_rng(0, "t")
    M = 2000
    eps = sigma * rng.standard_normal((M, H, n))
    exceed = np.mean(np.any(np.abs(eps) > p, axis=(1, 2)))
    assert exceed <= ds + 3 * math.sqrt(ds * (1 - ds) / M)


# ------------------------------------------------------------ exact checks

def test_exact_slack_by_hand():
    b = _floor_barrier()
    x = np.array([2.0])
    xn = np.array([1.9])
    # h' - margin - (1 - eta) h = 1.9 - 0.1 - 0.7*2.0
    assert exact_slack(b, x, xn, margin=0.1, eta=0.3) \
        == pytest.approx(1.9 - 0.1 - 1.4)
    assert check_exact(b, x, xn, margin=0.1, eta=0.3)
    assert not check_exact(b, x, np.array([1.3]), margin=0.1, eta=0.3)
    # tolerance rescues a marginal miss
    assert check_exact(b, x, np.array([1.4999]), margin=0.1, eta=0.3, tol=1e-3)


# ---------------------------------------------------------- lipschitz slack

def test_residual_lipschitz_term_formula():
    g = np.array([1.0, -1.0])
    W = np.array([[0.5, 0.2], [0.5, -0.2]])
    lips = np.array([0.0, 0.3])
    u_lo, u_hi = np.array([-1.0]), np.array([1.0])
    # |g W| = |[0, 0.4]| -> (0.4 * 0.3) * 2
    got = residual_lipschitz_term(g, W, lips, u_lo, u_hi)
    assert got == pytest.approx(0.24)
    assert residual_lipschitz_term(g, W, np.zeros(2), u_lo, u_hi) == 0.0


def test_residual_lipschitz_bounds_sweep():
    # empirical sweep of the residual term never exceeds the bound
    from safe_ctrl.features import RffMap
    rng = seeded_rng(1, "t")
    f = RffMap(16, 3, 2, 0.9, seeded_rng(2, "features"))
    lips = f.control_lipschitz()
    u_lo, u_hi = np.array([-1.0]), np.array([1.0])
    for _ in range(25):
        x = rng.standard_normal(2)
        W = 0.5 * rng.standard_normal((2, 16))
        g = rng.standard_normal(2)
        u_star = rng.uniform(-1, 1, 1)
        bound = residual_lipschitz_term(g, W, lips, u_lo, u_hi)
        phi_star = f(np.concatenate([x, u_star]))
        for _ in range(40):
            u = rng.uniform(-1, 1, 1)
            move = abs(g @ W @ (f(np.concatenate([x, u])) - phi_star))
            assert move <= bound + 1e-10


def test_known_residual_lipschitz_term():
    g = np.array([1.0])
    u_jac = np.array([[0.05]])
    got = known_residual_lipschitz_term(g, u_jac, np.array([-1.0]),
                                        np.array([1.0]))
    assert got == pytest.approx(0.1)
    assert known_residual_lipschitz_term(g, np.zeros((1, 1)),
                                         np.array([-1.0]),
                                         np.array([1.0])) == 0.0
    assert known_residual_lipschitz_term(g, None, np.array([-1.0]),
                                         np.array([1.0])) == 0.0


# ------------------------------------------------------------ linearization

def test_linearize_constraint_by_hand():
    b = _floor_barrier()
    x = np.array([2.0])
    Fx = np.array([1.8])
    Gx = np.array([[0.5]])
    d = np.array([-0.3])
    con = linearize_constraint(b, x, Fx, Gx, d, k_lip=0.05, margin=0.1,
                               eta=0.25)
    assert_allclose(con.a, [0.5])
    # b = -eta h + margin - (hF - hx) + |g d| + k_lip
    assert con.b == pytest.approx(-0.25 * 2.0 + 0.1 - (1.8 - 2.0) + 0.3 + 0.05)


def test_affine_implication_soundness():
    # whenever the surrogate passes, the exact condition passes (affine h);
    # the acceptance suite runs the full-size randomized version
    rng = seeded_rng(3, "t")
    n, m, r = 2, 1, 3
    barrier = BarrierSpec(name="plane",
                          h=lambda x: float(x[0] - 0.5 * x[1] + 1.0),
                          grad=lambda x: np.array([1.0, -0.5]),
                          lipschitz=1.5, affine=True)
    u_lo, u_hi = np.array([-2.0]), np.array([2.0])
    lin_held = 0
    cases = 0
    for _ in range(2000):
        x = rng.uniform(-1, 1, n)
        Fx = x + 0.1 * rng.standard_normal(n)
        Gx = rng.standard_normal((n, m))
        W = 0.3 * rng.standard_normal((n, r))
        phi = rng.standard_normal(r)       # state-only features: no u sweep
        resid = W @ phi
        margin = float(rng.uniform(0, 0.2))
        eta = float(rng.uniform(0.05, 0.9))
        con = linearize_constraint(barrier, x, Fx, Gx, resid, 0.0, margin, eta)
        u = rng.uniform(u_lo, u_hi)
        xn = Fx + Gx @ u + resid
        lin_ok, exact_ok = implication_check(barrier, x, u, con, xn, margin,
                                             eta)
        cases += 1
        if lin_ok:
            lin_held += 1
            assert exact_ok
    assert lin_held > 50  # the test actually exercised the implication


def test_control_dependent_implication_soundness():
    # state-control features: the k_lip slack must keep the surrogate sound
    # even though the residual moves as u sweeps the box
    from safe_ctrl.features import LinearFeatures
    rng = seeded_rng(4, "t")
    f = LinearFeatures(2, 1)
    barrier = _floor_barrier()
    u_lo, u_hi = np.array([-1.0]), np.array([1.0])
    lin_held = 0
    for _ in range(2000):
        x = rng.uniform(0.1, 3.0, 1)
        Fx = x * rng.uniform(0.9, 1.1)
        Gx = rng.standard_normal((1, 1))
        W = 0.3 * rng.standard_normal((1, 2))
        u_star = rng.uniform(-1, 1, 1)
        resid_star = W @ f(np.concatenate([x, u_star]))
        g = barrier.grad(Fx)
        k_lip = residual_lipschitz_term(g, W, f.control_lipschitz(), u_lo, u_hi)
        margin = float(rng.uniform(0, 0.1))
        eta = float(rng.uniform(0.05, 0.9))
        con = linearize_constraint(barrier, x, Fx, Gx, resid_star, k_lip,
                                   margin, eta)
        u = rng.uniform(u_lo, u_hi)
        xn = Fx + Gx @ u + W @ f(np.concatenate([x, u]))  # residual at the executed u
        lin_ok, exact_ok = implication_check(barrier, x, u, con, xn, margin,
                                             eta)
        if lin_ok:
            lin_held += 1
            assert exact_ok
    assert lin_held > 50
