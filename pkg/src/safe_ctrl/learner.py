"""Episodic training engine: method table, episode loops, run artifacts.

A method is a (planning model, safety filter, learning rule) triple. All
methods share random streams keyed by (seed, purpose, episode[, trial]), so
two methods run with the same seed see identical noise realizations, planner
perturbations, and Thompson draws wherever their models coincide.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .cbf import (known_residual_lipschitz_term, linearize_constraint,
                  noise_margin, residual_lipschitz_term)
from .domain import (EpisodeTrace, ExperimentConfig, fmt_float, seeded_rng)
from .envs import (F_hat, G_mat, barrier_coordinate, d_star, immediate_cost,
                   make_env, min_barrier_value, sample_initial_data,
                   sample_test_init, step_nominal, step_true)
from .features import feature_input, make_features
from .model import ResidualModel, fit_initial_model, update_model
from .planner import MppiPlanner
from .safety_filter import fallback_safest, project_safe


@dataclass(frozen=True)
class MethodSpec:
    name: str
    learns: bool
    filtered: bool
    model: str  # "true" | "nominal" | "mean" | "thompson"


METHODS = {
    "gt-mppi": MethodSpec("gt-mppi", False, False, "true"),
    "gt-mppi-cbf": MethodSpec("gt-mppi-cbf", False, True, "true"),
    "nom-mppi": MethodSpec("nom-mppi", False, False, "nominal"),
    "nom-mppi-cbf": MethodSpec("nom-mppi-cbf", False, True, "nominal"),
    "exploitation": MethodSpec("exploitation", True, True, "mean"),
    "unconstrained-ts": MethodSpec("unconstrained-ts", True, False, "thompson"),
    "algorithm1": MethodSpec("algorithm1", True, True, "thompson"),
}


def barrier_margins(env, cfg: ExperimentConfig) -> list[float]:
    sig = env.noise.sigma_bar
    return [noise_margin(b.lipschitz, sig, env.n, cfg.horizon, cfg.delta_s)
            for b in env.barriers]


def build_constraints(env, x, u_star, margins, eta, filt_W=None,
                      filt_true=False, feat=None, feat_cl=None):
    """One linear constraint per barrier, robust over the control box."""
    Fx = F_hat(env, x)
    Gx = G_mat(env, x)
    cons = []
    for b, mar in zip(env.barriers, margins):
        ghF = b.grad(Fx)
        if filt_true:
            d = d_star(env, x, u_star)
            k = known_residual_lipschitz_term(ghF, env.residual_u_jac,
                                              env.u_lo, env.u_hi)
        elif filt_W is not None:
            phi = feat(feature_input(env.feat_mode, x, u_star))
            d = filt_W @ phi
            k = residual_lipschitz_term(ghF, filt_W, feat_cl,
                                        env.u_lo, env.u_hi)
        else:
            d = np.zeros(env.n)
            k = 0.0
        cons.append(linearize_constraint(b, x, Fx, Gx, d, k, mar, eta))
    return cons


def run_episode(env, cfg, planner, margins, rng_plan, rng_noise,
                plan_W=None, plan_true=False, filtered=False,
                filt_W=None, filt_true=False, feat=None,
                feat_cl=None, x0=None) -> EpisodeTrace:
    """Roll one closed-loop episode on the true system."""
    H = cfg.horizon
    states = np.zeros((H + 1, env.n))
    controls = np.zeros((H, env.m))
    costs = np.zeros(H)
    h_vals = np.zeros(H + 1)
    active = np.zeros(H, dtype=bool)
    infeas = np.zeros(H, dtype=bool)
    x = env.x0.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    states[0] = x
    h_vals[0] = min_barrier_value(env, x)
    planner.reset()
    for t in range(H):
        u_star = planner.plan_step(x, rng_plan, plan_W, feat=feat,
                                   use_true_residual=plan_true)
        if filtered and env.barriers:
            cons = build_constraints(env, x, u_star, margins, cfg.eta,
                                     filt_W=filt_W, filt_true=filt_true,
                                     feat=feat, feat_cl=feat_cl)
            u, act, inf = project_safe(u_star, cons, env.u_lo, env.u_hi)
            if inf:
                u = fallback_safest(cons, env.u_lo, env.u_hi)
            active[t] = bool(act or inf)
            infeas[t] = bool(inf)
        else:
            u = np.clip(u_star, env.u_lo, env.u_hi)
        controls[t] = u
        costs[t] = immediate_cost(env, x, u)
        x = step_true(env, x, u, rng=rng_noise)
        states[t + 1] = x
        h_vals[t + 1] = min_barrier_value(env, x)
    return EpisodeTrace(states=states, controls=controls, costs=costs,
                        h_values=h_vals, constraint_active=active,
                        qp_infeasible=infeas)


def pick_thompson(model: ResidualModel, planner: MppiPlanner, env, feat,
                  rng, cfg: ExperimentConfig):
    """Draw candidate weights; with several draws keep the most optimistic.

    Optimism is scored by the noise-free rollout cost of the planner's
    warm-start sequence under each candidate model.
    """
    Ws, info = model.thompson_sample(rng, cfg.thompson_scale,
                                     max_attempts=cfg.thompson_max_attempts,
                                     draws=cfg.thompson_draws)
    if len(Ws) == 1:
        return Ws[0], info
    seq = planner.U_nom[None, :, :]
    best, best_cost = Ws[0], None
    for W in Ws:
        c = float(planner.score_sequences(env.x0, seq, W, feat=feat)[0])
        if best_cost is None or c < best_cost:
            best, best_cost = W, c
    return best, info


@dataclass
class RunRecord:
    method: str
    env_name: str
    seed: int
    train_costs: np.ndarray          # (E,)
    min_h_train: np.ndarray          # (E,)
    active_steps: np.ndarray         # (E,) int
    infeasible_steps: np.ndarray     # (E,) int
    ts_attempts: np.ndarray          # (E,) int
    ts_fallbacks: np.ndarray         # (E,) int
    betas: np.ndarray                # (E,)
    test_costs: np.ndarray           # (E, T)
    test_min_h: np.ndarray           # (E, T)
    test_finals: np.ndarray          # (E, T, n)
    test_coord_max: np.ndarray = None  # (E,) safety-coordinate extremes
    test_coord_min: np.ndarray = None  # across the episode's test rollouts
    traces: list = field(default_factory=list)
    test_traces: list = field(default_factory=list)  # (ep, trial, trace)
    model: ResidualModel | None = None
    feat: object | None = None

    @property
    def n_episodes(self) -> int:
        return self.train_costs.shape[0]

    @property
    def min_h_overall(self) -> float:
        vals = [self.min_h_train.min()] if self.min_h_train.size else []
        if self.test_min_h.size:
            vals.append(self.test_min_h.min())
        return float(min(vals)) if vals else float("inf")


def run_method(cfg: ExperimentConfig, method: str,
               on_episode=None) -> RunRecord:
    """Train and evaluate one method for cfg.episodes episodes."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    spec = METHODS[method]
    cfg.validate()
    env = make_env(cfg)
    margins = barrier_margins(env, cfg)
    planner = MppiPlanner(env, cfg.mppi_horizon, cfg.mppi_samples,
                          cfg.mppi_temperature, cfg.mppi_sigma_scale,
                          use_barrier_penalty=spec.filtered)

    model = None
    feat = None
    feat_cl = None
    if spec.learns:
        feat = make_features(env, cfg, seeded_rng(cfg.seed, "features"))
        feat_cl = feat.control_lipschitz()
        X, U, Xn = sample_initial_data(env, cfg,
                                       seeded_rng(cfg.seed, "init-data"))
        budget = float(cfg.episodes * cfg.horizon + cfg.init_samples)
        model = fit_initial_model(
            feat, env.feat_mode, env.n, X, U, Xn,
            lambda x, u: step_nominal(env, x, u),
            cfg.ridge_lambda, cfg.norm_bound, env.noise.sigma_bar,
            cfg.delta, budget)

    E, T = cfg.episodes, cfg.test_trials
    rec = RunRecord(
        method=method, env_name=cfg.env, seed=cfg.seed,
        train_costs=np.zeros(E), min_h_train=np.zeros(E),
        active_steps=np.zeros(E, dtype=int),
        infeasible_steps=np.zeros(E, dtype=int),
        ts_attempts=np.zeros(E, dtype=int),
        ts_fallbacks=np.zeros(E, dtype=int),
        betas=np.full(E, float("nan")),
        test_costs=np.zeros((E, T)), test_min_h=np.zeros((E, T)),
        test_finals=np.zeros((E, T, env.n)),
        test_coord_max=np.full(E, float("nan")),
        test_coord_min=np.full(E, float("nan")),
        model=model, feat=feat)

    plan_true = spec.model == "true"
    for ep in range(E):
        planner.reset()
        plan_W = None
        ts_info = None
        if spec.model == "thompson":
            plan_W, ts_info = pick_thompson(
                model, planner, env, feat,
                seeded_rng(cfg.seed, "thompson", ep), cfg)
        elif spec.model == "mean":
            plan_W = model.W_bar.copy()
        filt_W = plan_W if (spec.filtered and spec.model in ("mean", "thompson")) else None

        trace = run_episode(
            env, cfg, planner, margins,
            seeded_rng(cfg.seed, "mppi", ep),
            seeded_rng(cfg.seed, "noise", ep),
            plan_W=plan_W, plan_true=plan_true,
            filtered=spec.filtered, filt_W=filt_W, filt_true=plan_true,
            feat=feat, feat_cl=feat_cl)
        rec.traces.append(trace)
        rec.train_costs[ep] = trace.costs.sum()
        rec.min_h_train[ep] = trace.h_values.min()
        rec.active_steps[ep] = int(trace.constraint_active.sum())
        rec.infeasible_steps[ep] = int(trace.qp_infeasible.sum())
        if ts_info is not None:
            rec.ts_attempts[ep] = ts_info.attempts
            rec.ts_fallbacks[ep] = int(ts_info.fallback)

        if spec.learns:
            update_model(model, env.feat_mode, trace.states[:-1],
                         trace.controls, trace.states[1:],
                         lambda x, u: step_nominal(env, x, u))
            rec.betas[ep] = model.beta_t

        # Evaluation trials use the certainty-equivalent policy: the mean
        # model for learners, the method's own fixed model otherwise.
        # Episodes before test_from skip evaluation (their columns stay NaN).
        if ep < cfg.test_from:
            rec.test_costs[ep] = float("nan")
            rec.test_min_h[ep] = float("nan")
            rec.test_finals[ep] = float("nan")
            if on_episode is not None:
                on_episode(ep, rec)
            continue
        test_W = model.W_bar.copy() if spec.learns else None
        for trial in range(T):
            x0_t = None
            if cfg.test_init_mode == "random":
                x0_t = sample_test_init(
                    env, seeded_rng(cfg.seed, "test-init", ep, trial))
            tr = run_episode(
                env, cfg, planner, margins,
                seeded_rng(cfg.seed, "test-mppi", ep, trial),
                seeded_rng(cfg.seed, "test-noise", ep, trial),
                plan_W=test_W, plan_true=plan_true,
                filtered=spec.filtered, filt_W=test_W if spec.filtered else None,
                filt_true=plan_true, feat=feat, feat_cl=feat_cl, x0=x0_t)
            rec.test_costs[ep, trial] = tr.costs.sum()
            rec.test_min_h[ep, trial] = tr.h_values.min()
            rec.test_finals[ep, trial] = tr.states[-1]
            coord = barrier_coordinate(env, tr.states)
            rec.test_coord_max[ep] = np.nanmax(
                [rec.test_coord_max[ep], coord.max()])
            rec.test_coord_min[ep] = np.nanmin(
                [rec.test_coord_min[ep], coord.min()])
            if cfg.save_test_traces:
                rec.test_traces.append((ep, trial, tr))
        if on_episode is not None:
            on_episode(ep, rec)
    return rec


def reference_costs(cfg: ExperimentConfig) -> np.ndarray:
    """Per-episode costs of the safety-filtered true-model planner.

    The mean of these estimates the benchmark cost that regret is measured
    against; streams are keyed separately from training runs.
    """
    env = make_env(cfg)
    margins = barrier_margins(env, cfg)
    planner = MppiPlanner(env, cfg.mppi_horizon, cfg.mppi_samples,
                          cfg.mppi_temperature, cfg.mppi_sigma_scale)
    costs = np.zeros(cfg.reference_episodes)
    for ep in range(cfg.reference_episodes):
        trace = run_episode(
            env, cfg, planner, margins,
            seeded_rng(cfg.seed, "ref-mppi", ep),
            seeded_rng(cfg.seed, "ref-noise", ep),
            plan_W=None, plan_true=True, filtered=True, filt_true=True)
        costs[ep] = trace.costs.sum()
    return costs


def regret_curve(train_costs: np.ndarray, j_star: float) -> np.ndarray:
    return np.cumsum(np.asarray(train_costs, dtype=np.float64) - j_star)


def slope_stat(values: np.ndarray, start: int, stop: int):
    """Least-squares slope and its standard error over a window.

    values[k] is the statistic at episode k+1; the fit runs over episodes
    start..stop inclusive (1-based).
    """
    t = np.arange(start, stop + 1, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)[start - 1:stop]
    if t.size != y.size or t.size < 3:
        raise ValueError("window too short for a slope estimate")
    tc = t - t.mean()
    denom = float(tc @ tc)
    slope = float(tc @ (y - y.mean())) / denom
    resid = y - y.mean() - slope * tc
    dof = t.size - 2
    se = float(np.sqrt((resid @ resid) / dof / denom))
    return slope, se


# -- run artifacts ---------------------------------------------------------

EPISODES_HEADER = ("episode,train_cost,min_h_train,test_cost_mean,"
                   "test_cost_std,min_h_test,coord_max,coord_min,beta,"
                   "ts_attempts,ts_fallbacks,infeasible_steps,active_steps")


def episodes_csv_text(rec: RunRecord) -> str:
    lines = ["# safe-ctrl episodes v1", EPISODES_HEADER]
    for ep in range(rec.n_episodes):
        row_tested = (rec.test_costs.shape[1] > 0
                      and not np.all(np.isnan(rec.test_costs[ep])))
        if row_tested:
            tmean = fmt_float(rec.test_costs[ep].mean())
            tstd = fmt_float(rec.test_costs[ep].std())
            tmin = fmt_float(rec.test_min_h[ep].min())
            cmax = fmt_float(rec.test_coord_max[ep])
            cmin = fmt_float(rec.test_coord_min[ep])
        else:
            tmean = tstd = tmin = cmax = cmin = ""
        lines.append(",".join([
            str(ep),
            fmt_float(rec.train_costs[ep]),
            fmt_float(rec.min_h_train[ep]),
            tmean, tstd, tmin, cmax, cmin,
            fmt_float(rec.betas[ep]),
            str(int(rec.ts_attempts[ep])),
            str(int(rec.ts_fallbacks[ep])),
            str(int(rec.infeasible_steps[ep])),
            str(int(rec.active_steps[ep])),
        ]))
    return "\n".join(lines) + "\n"


def test_trials_csv_text(rec: RunRecord) -> str:
    n = rec.test_finals.shape[2]
    header = "episode,trial,cost,min_h," + ",".join(
        f"final_{i}" for i in range(n))
    lines = ["# safe-ctrl test-trials v1", header]
    for ep in range(rec.n_episodes):
        if rec.test_costs.shape[1] == 0 or np.all(np.isnan(rec.test_costs[ep])):
            continue
        for trial in range(rec.test_costs.shape[1]):
            lines.append(",".join(
                [str(ep), str(trial),
                 fmt_float(rec.test_costs[ep, trial]),
                 fmt_float(rec.test_min_h[ep, trial])]
                + [fmt_float(v) for v in rec.test_finals[ep, trial]]))
    return "\n".join(lines) + "\n"


def manifest_text(rec: RunRecord, cfg: ExperimentConfig) -> str:
    from . import __version__
    lines = [
        "# safe-ctrl manifest v1",
        f"method = {rec.method}",
        f"env = {rec.env_name}",
        f"seed = {rec.seed}",
        f"episodes = {rec.n_episodes}",
        f"config_hash = {cfg.config_hash()}",
        f"backend = {kernels.BACKEND}",
        f"version = {__version__}",
    ]
    return "\n".join(lines) + "\n"


def write_outputs(rec: RunRecord, cfg: ExperimentConfig, out_dir: str):
    """Write the full artifact set for one run into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    tr_dir = os.path.join(out_dir, "traces")
    os.makedirs(tr_dir, exist_ok=True)

    def put(name, text):
        with open(os.path.join(out_dir, name), "w", newline="\n") as fh:
            fh.write(text)

    put("config.txt", cfg.to_text())
    put("manifest.txt", manifest_text(rec, cfg))
    put("episodes.csv", episodes_csv_text(rec))
    put("test_trials.csv", test_trials_csv_text(rec))
    for ep, trace in enumerate(rec.traces):
        trace.write_csv(os.path.join(tr_dir, f"ep_{ep:03d}.csv"))
    for ep, trial, trace in rec.test_traces:
        trace.write_csv(os.path.join(tr_dir,
                                     f"test_ep_{ep:03d}_trial_{trial:02d}.csv"))
    if rec.model is not None:
        save_model_npz(os.path.join(out_dir, "model_final.npz"),
                       rec.model, rec.feat)


def save_model_npz(path: str, model: ResidualModel, feat):
    arrays = dict(
        W_bar=model.W_bar, Sigma=model.Sigma, acc=model.acc,
        count=np.array([model.count]), W0=model.W0, V0=model.V0,
        beta0=np.array([model.beta0]),
        lam=np.array([model.lam]), c1=np.array([model.c1]),
        sigma_bar=np.array([model.sigma_bar]),
        feat_kind=np.array([feat.feat_kind]),
    )
    if feat.omega is not None:
        arrays["omega"] = feat.omega
        arrays["bias"] = feat.bias
        arrays["amp"] = np.array([feat.amp])
    np.savez(path, **arrays)


def read_manifest(run_dir: str) -> dict:
    out = {}
    with open(os.path.join(run_dir, "manifest.txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def read_episodes_csv(run_dir: str) -> dict:
    """Parse episodes.csv into column arrays keyed by header name."""
    path = os.path.join(run_dir, "episodes.csv")
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    cols = {h: [] for h in header}
    for ln in lines[1:]:
        for h, cell in zip(header, ln.split(",")):
            cols[h].append(float(cell) if cell else float("nan"))
    return {h: np.array(v) for h, v in cols.items()}
