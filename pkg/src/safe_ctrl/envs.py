"""Benchmark environments: control-affine nominal models plus true residuals.

Every environment is a one-step discrete-time system

    x' = F(x) + G(x) u + d_star(x, u) + eps,   eps ~ N(0, diag(sigma^2))

where F/G form the known control-affine nominal model and d_star is the
unmodelled part the learner estimates. step_true is literally
step_nominal + d_star + eps so the decomposition is exact, not approximate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .cbf import BarrierSpec
from .domain import ExperimentConfig, NoiseSpec, parse_sigma

# Unicycle wind rectangle (x_lo, x_hi, y_lo, y_hi): inside it the wind is
# overridden to a uniform east-pointing gust of configurable strength.
WIND_RECT = (-2.0, 3.0, -2.6, -0.2)


@dataclass
class Env:
    name: str
    kind: int
    n: int
    m: int
    dt: float
    x0: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    state_lo: np.ndarray
    state_hi: np.ndarray
    noise: NoiseSpec
    par: np.ndarray        # kernel parameter pack, layout per kind
    cost_par: np.ndarray   # kernel stage-cost pack
    feat_mode: int
    goal: np.ndarray | None = None
    barriers: list[BarrierSpec] = field(default_factory=list)
    true_w: np.ndarray | None = None        # exact residual weights (synthetic)
    residual_u_jac: np.ndarray | None = None  # d(d_star)/du, constant per env
    pen_slot: int = -1  # index of the hinge-penalty weight inside cost_par
    test_init_box: tuple | None = None  # (lo, hi) box for randomized test starts

    @property
    def feat_d_in(self) -> int:
        if self.feat_mode == kernels.FEAT_STATE_CONTROL:
            return self.n + self.m
        if self.feat_mode == kernels.FEAT_STATE:
            return self.n
        return 2


def wind_field(x1: float, x2: float, w_r: float = 1.5) -> np.ndarray:
    """True wind at a position; uniform eastward gust inside the rectangle."""
    if WIND_RECT[0] <= x1 <= WIND_RECT[1] and WIND_RECT[2] <= x2 <= WIND_RECT[3]:
        return np.array([w_r, 0.0])
    return np.array([math.cos(x1 - 4.0) * (x2 - 3.0),
                     math.sin(x1 - 4.0) * (x2 - 3.0)])


def F_hat(env: Env, x: np.ndarray) -> np.ndarray:
    """Drift of the nominal model: step_nominal at u = 0."""
    p = env.par
    if env.kind == kernels.PENDULUM:
        w2 = x[1] + p[1] * math.sin(x[0]) * p[0]
        return np.array([x[0] + w2 * p[0], w2])
    if env.kind == kernels.UNICYCLE:
        return x.copy()
    return np.array([p[0] * x[0]])


def G_mat(env: Env, x: np.ndarray) -> np.ndarray:
    """Control gain matrix of the nominal model, shape (n, m)."""
    p = env.par
    if env.kind == kernels.PENDULUM:
        return np.array([[p[2] * p[0] * p[0]], [p[2] * p[0]]])
    if env.kind == kernels.UNICYCLE:
        return np.array([
            [math.cos(x[2]) * p[0], 0.0],
            [math.sin(x[2]) * p[0], 0.0],
            [0.0, p[0]],
        ])
    return np.array([[p[1]]])


def step_nominal(env: Env, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Nominal one-step prediction; affine in u by construction."""
    return F_hat(env, x) + G_mat(env, x) @ u


def d_star(env: Env, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Ground-truth residual dynamics (the part the learner must recover)."""
    p = env.par
    if env.kind == kernels.PENDULUM:
        dw = ((p[3] - p[1]) * math.sin(x[0]) + (p[4] - p[2]) * u[0]) * p[0]
        return np.array([dw * p[0] + p[5] * math.cos(x[0] + p[6]), dw])
    if env.kind == kernels.UNICYCLE:
        w = wind_field(x[0], x[1], p[1])
        return np.array([w[0] * p[0], w[1] * p[0], 0.0])
    return np.array([p[2] * x[0] + p[3] * u[0]])


def step_true(env: Env, x: np.ndarray, u: np.ndarray,
              rng: np.random.Generator | None = None,
              eps: np.ndarray | None = None) -> np.ndarray:
    """True system step: nominal + residual + optional Gaussian noise."""
    xn = step_nominal(env, x, u) + d_star(env, x, u)
    if rng is not None:
        xn = xn + env.noise.sample(rng)
    elif eps is not None:
        xn = xn + eps
    return xn


def immediate_cost(env: Env, x: np.ndarray, u: np.ndarray) -> float:
    c = env.cost_par
    if env.kind == kernels.PENDULUM:
        thw = kernels.wrap_angle(x[0])
        return float(c[0] * thw * thw + c[1] * x[1] ** 2 + c[2] * u[0] ** 2)
    if env.kind == kernels.UNICYCLE:
        dx = x[0] - c[0]
        dy = x[1] - c[1]
        return float(c[2] * dx * dx + c[3] * dy * dy
                     + c[4] * u[0] ** 2 + c[5] * u[1] ** 2)
    d0 = x[0] - c[0]
    return float(c[1] * d0 * d0 + c[2] * u[0] ** 2)


def _obstacle_barrier(cx: float, cy: float, radius: float,
                      state_lo: np.ndarray, state_hi: np.ndarray) -> BarrierSpec:
    """Clearance barrier h = dist - radius.

    The distance form keeps the gradient a unit vector everywhere away
    from the center, so the barrier's Lipschitz constant is exactly 1 and
    the noise margin stays on the scale of the noise instead of the scale
    of the arena. A squared form would inflate the margin by the arena
    diameter and choke off the corridor between obstacle and wind field.
    """
    center = np.array([cx, cy])

    def h(x):
        d = x[:2] - center
        return float(math.hypot(d[0], d[1]) - radius)

    def grad(x):
        g = np.zeros(x.shape[0])
        d = x[:2] - center
        nrm = math.hypot(d[0], d[1])
        if nrm < 1e-9:
            g[0] = 1.0
            return g
        g[:2] = d / nrm
        return g

    return BarrierSpec(name="obstacle", h=h, grad=grad, lipschitz=1.0,
                       affine=False)


def safe_set_spec(env: Env) -> list[BarrierSpec]:
    return list(env.barriers)


def default_config(env_name: str) -> ExperimentConfig:
    """Tuned per-environment experiment presets (also the acceptance setups)."""
    cfg = ExperimentConfig(env=env_name)
    if env_name == "pendulum":
        cfg = cfg.replace(
            episodes=50, horizon=200, test_trials=20,
            init_samples=8, init_box_scale=0.15,
            feature_type="rff", rff_features=48, rff_gamma=1.5,
            ridge_lambda=0.05, norm_bound=10.0,
            delta=0.05, delta_s=0.05, eta=0.2,
            thompson_scale=0.3,
            mppi_samples=64, mppi_horizon=15, mppi_temperature=5.0,
            mppi_sigma_scale=0.3,
            barrier_penalty=200.0, test_from=40,
            test_init_mode="random",
            reference_episodes=100,
            noise_sigma="0.01,0.01",
        )
    elif env_name in ("unicycle", "unicycle-obstacle"):
        cfg = cfg.replace(
            episodes=10, horizon=80, test_trials=10,
            init_samples=20, init_box_scale=0.15,
            feature_type="rff", rff_features=64, rff_gamma=0.8,
            ridge_lambda=0.05, norm_bound=10.0,
            delta=0.05, delta_s=0.05, eta=0.2,
            thompson_scale=0.3,
            mppi_samples=128, mppi_horizon=25, mppi_temperature=2.0,
            mppi_sigma_scale=0.3,
            barrier_penalty=200.0,
            wind_rect_strength=2.5,
            obstacle_x=1.0, obstacle_y=0.3, obstacle_radius=0.5,
            reference_episodes=50,
            noise_sigma="0.005,0.005,0.005",
        )
    elif env_name == "synthetic-linear":
        cfg = cfg.replace(
            episodes=10, horizon=100, test_trials=5,
            init_samples=40, init_box_scale=0.5,
            feature_type="linear",
            ridge_lambda=0.1, norm_bound=1.0,
            delta=0.05, delta_s=0.05, eta=0.3,
            thompson_scale=0.1,
            mppi_samples=32, mppi_horizon=10, mppi_temperature=1.0,
            barrier_penalty=50.0,
            reference_episodes=50,
            noise_sigma="0.1",
        )
    else:
        raise ValueError(f"unknown env {env_name!r}")
    return cfg


def make_env(cfg: ExperimentConfig) -> Env:
    name = cfg.env
    if name == "pendulum":
        g, m_t, l_t, l_n = 10.0, 1.0, 1.0, 1.8
        dt = 0.05
        # Model error lives in the gravity scale (wrong length) and the
        # fixed position disturbance; the torque gain is calibrated, so the
        # unknown part of the dynamics depends on the state only.
        c_g_nom = 3.0 * g / (2.0 * l_n)
        c_g_true = 3.0 * g / (2.0 * l_t)
        c_u_true = 3.0 / (m_t * l_t * l_t)
        c_u_nom = c_u_true
        par = np.array([dt, c_g_nom, c_u_nom, c_g_true, c_u_true, 0.05, -3.0])
        theta_lo = -math.pi / 8.0
        theta_hi = 5.0 * math.pi / 4.0
        # Planner hinge band. The wrapped stage cost has a second valley
        # past the upper angle limit, so rollouts that cross the wrap ridge
        # at pi are penalized right away; otherwise the sampled plans chase
        # the far valley and park the pendulum against the ceiling, where
        # the safety filter has to hold it forever. The executed cost is
        # untouched by this shaping.
        plan_hi = math.pi
        sigma = parse_sigma(cfg.noise_sigma) if cfg.noise_sigma else np.array([0.005, 0.005])
        env = Env(
            name=name, kind=kernels.PENDULUM, n=2, m=1, dt=dt,
            x0=np.array([math.pi, 0.0]),
            u_lo=np.array([-15.0]), u_hi=np.array([15.0]),
            state_lo=np.array([theta_lo - 0.6, -10.0]),
            state_hi=np.array([theta_hi + 0.6, 10.0]),
            noise=NoiseSpec(sigma),
            par=par,
            cost_par=np.array([1.0, 0.1, 0.001,
                               cfg.barrier_penalty, theta_lo, plan_hi]),
            feat_mode=kernels.FEAT_STATE,
            goal=np.array([0.0, 0.0]),
            residual_u_jac=np.zeros((2, 1)),
            pen_slot=3,
            test_init_box=(np.array([theta_lo + 0.15, -0.5]),
                           np.array([theta_hi - 0.15, 0.5])),
        )
        env.barriers = [
            BarrierSpec(name="theta_min",
                        h=lambda x: float(x[0] - theta_lo),
                        grad=lambda x: np.array([1.0, 0.0]),
                        lipschitz=1.0, affine=True),
            BarrierSpec(name="theta_max",
                        h=lambda x: float(theta_hi - x[0]),
                        grad=lambda x: np.array([-1.0, 0.0]),
                        lipschitz=1.0, affine=True),
        ]
        return env

    if name in ("unicycle", "unicycle-obstacle"):
        dt = 0.1
        par = np.array([dt, cfg.wind_rect_strength, *WIND_RECT])
        goal = np.array([4.5, 3.0])
        sigma = (parse_sigma(cfg.noise_sigma) if cfg.noise_sigma
                 else np.array([0.005, 0.005, 0.005]))
        env = Env(
            name=name, kind=kernels.UNICYCLE, n=3, m=2, dt=dt,
            x0=np.array([-1.5, 0.2, 0.0]),
            u_lo=np.array([-0.5, -2.0]), u_hi=np.array([2.0, 2.0]),
            state_lo=np.array([-3.0, -4.0, -2.0 * math.pi]),
            state_hi=np.array([7.0, 5.0, 2.0 * math.pi]),
            noise=NoiseSpec(sigma),
            par=par,
            # The hinge radius is inflated a quarter unit beyond the true
            # obstacle so sampled plans keep clearance; the wind can exceed
            # the robot's own speed, and the one-step filter cannot steer
            # (only the speed input moves the position instantly), so
            # avoidance has to be planned upstream.
            cost_par=np.array([goal[0], goal[1], 1.0, 1.0, 0.05, 0.05,
                               cfg.barrier_penalty if name == "unicycle-obstacle" else 0.0,
                               cfg.obstacle_x, cfg.obstacle_y,
                               (cfg.obstacle_radius + 0.25) ** 2]),
            feat_mode=kernels.FEAT_POSITION,
            goal=np.array([goal[0], goal[1], 0.0]),
            residual_u_jac=np.zeros((3, 2)),
            pen_slot=6,
        )
        if name == "unicycle-obstacle":
            env.barriers = [_obstacle_barrier(cfg.obstacle_x, cfg.obstacle_y,
                                              cfg.obstacle_radius,
                                              env.state_lo, env.state_hi)]
        return env

    if name == "synthetic-linear":
        a_nom, b_nom, w_x, w_u = 1.0, 1.0, -0.15, 0.05
        sigma = parse_sigma(cfg.noise_sigma) if cfg.noise_sigma else np.array([0.1])
        env = Env(
            name=name, kind=kernels.SYNTHETIC, n=1, m=1, dt=1.0,
            x0=np.array([1.0]),
            u_lo=np.array([-1.0]), u_hi=np.array([1.0]),
            state_lo=np.array([-2.0]), state_hi=np.array([5.0]),
            noise=NoiseSpec(sigma),
            par=np.array([a_nom, b_nom, w_x, w_u]),
            cost_par=np.array([0.0, 1.0, 0.01, cfg.barrier_penalty]),
            feat_mode=kernels.FEAT_STATE_CONTROL,
            goal=np.array([0.0]),
            true_w=np.array([[w_x, w_u]]),
            residual_u_jac=np.array([[w_u]]),
            pen_slot=3,
        )
        env.barriers = [
            BarrierSpec(name="floor",
                        h=lambda x: float(x[0]),
                        grad=lambda x: np.array([1.0]),
                        lipschitz=1.0, affine=True),
        ]
        return env

    raise ValueError(f"unknown env {name!r}")


def initial_state_box(env: Env, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Sub-box around x0 used for initial data collection."""
    half = 0.5 * scale * (env.state_hi - env.state_lo)
    lo = np.maximum(env.state_lo, env.x0 - half)
    hi = np.minimum(env.state_hi, env.x0 + half)
    return lo, hi


def min_barrier_value(env: Env, x: np.ndarray) -> float:
    if not env.barriers:
        return float("inf")
    return min(b.h(x) for b in env.barriers)


def barrier_coordinate(env: Env, states: np.ndarray) -> np.ndarray:
    """Scalar safety signal per state along a trajectory.

    Where the safe set is an interval on one coordinate (angle, position)
    this is that raw coordinate, so its extremes are directly comparable to
    the interval ends; otherwise it is the worst barrier value.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if env.kind in (kernels.PENDULUM, kernels.SYNTHETIC):
        return states[:, 0].copy()
    return np.array([min_barrier_value(env, x) for x in states])


def sample_test_init(env: Env, rng: np.random.Generator) -> np.ndarray:
    """Starting state for one evaluation trial.

    Envs without a test_init_box always evaluate from x0; the box is kept
    strictly inside the safe set so a freshly drawn start never begins in
    violation.
    """
    if env.test_init_box is None:
        return env.x0.copy()
    lo, hi = env.test_init_box
    return lo + rng.random(env.n) * (hi - lo)


def sample_initial_data(env: Env, cfg: ExperimentConfig,
                        rng: np.random.Generator):
    """Collect (x, u, x') triples by stepping the true system once.

    States are uniform over a sub-box around x0 restricted to the safe set;
    controls are uniform over the admissible box, passed through the
    nominal-model barrier filter so collection itself respects the safe set.
    """
    from .cbf import linearize_constraint, noise_margin
    from .safety_filter import project_safe

    lo, hi = initial_state_box(env, cfg.init_box_scale)
    sig = env.noise.sigma_bar
    margins = [noise_margin(b.lipschitz, sig, env.n, cfg.horizon, cfg.delta_s)
               for b in env.barriers]
    N = cfg.init_samples
    X = np.zeros((N, env.n))
    U = np.zeros((N, env.m))
    Xn = np.zeros((N, env.n))
    count = 0
    guard = 0
    while count < N:
        guard += 1
        if guard > 1000 * N:
            raise RuntimeError("could not sample safe initial states")
        x = lo + rng.random(env.n) * (hi - lo)
        if min_barrier_value(env, x) <= 0.0:
            continue
        u = env.u_lo + rng.random(env.m) * (env.u_hi - env.u_lo)
        if env.barriers:
            Fx = F_hat(env, x)
            Gx = G_mat(env, x)
            cons = [linearize_constraint(b, x, Fx, Gx, np.zeros(env.n), 0.0,
                                         mg, cfg.eta)
                    for b, mg in zip(env.barriers, margins)]
            u, _, _ = project_safe(u, cons, env.u_lo, env.u_hi)
        X[count] = x
        U[count] = u
        Xn[count] = step_true(env, x, u, rng=rng)
        count += 1
    return X, U, Xn
