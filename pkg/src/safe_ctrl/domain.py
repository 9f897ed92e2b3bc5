"""Shared value types: seeded randomness, noise specs, configs, traces.

A single 64-bit experiment seed fans out into named independent substreams,
so that e.g. process noise, Thompson draws and planner perturbations never
interact, and replaying any one consumer is possible in isolation.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np


def seeded_rng(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Independent generator for (seed, stream label, optional indices).

    The label is hashed with crc32 (stable across runs and platforms) and the
    tuple feeds a SeedSequence, so distinct labels or indices give streams
    that are independent by construction and bit-reproducible.
    """
    if not (0 <= seed < 2 ** 63):
        raise ValueError(f"seed must be a non-negative 63-bit int, got {seed}")
    key = zlib.crc32(label.encode("utf-8"))
    ss = np.random.SeedSequence([seed, key, *[int(i) for i in indices]])
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class NoiseSpec:
    """Diagonal Gaussian process noise, one sigma per state coordinate."""

    sigma: np.ndarray

    def __post_init__(self):
        sig = np.asarray(self.sigma, dtype=np.float64)
        if sig.ndim != 1 or np.any(sig < 0) or not np.all(np.isfinite(sig)):
            raise ValueError("noise sigmas must be a finite non-negative vector")
        object.__setattr__(self, "sigma", sig)

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    @property
    def sigma_bar(self) -> float:
        return float(np.max(self.sigma)) if self.sigma.size else 0.0

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.sigma == 0.0))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.n) * self.sigma

    def sample_batch(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.standard_normal((count, self.n)) * self.sigma


ENV_NAMES = ("synthetic-linear", "pendulum", "unicycle", "unicycle-obstacle")

METHOD_NAMES = ("algorithm1", "gt-mppi", "gt-mppi-cbf", "nom-mppi",
                "nom-mppi-cbf", "exploitation", "unconstrained-ts")

# The five methods compared side by side in the reference study.
METHODS_ALL = ("algorithm1", "gt-mppi", "nom-mppi-cbf", "exploitation",
               "unconstrained-ts")


# Flat config schema: key -> (type, default). Order is the serialization
# order. Defaults here are env-independent; per-env presets override below.
_SCHEMA: dict[str, tuple[type, object]] = {
    "env": (str, "synthetic-linear"),
    "seed": (int, 0),
    "episodes": (int, 10),
    "horizon": (int, 100),
    "test_trials": (int, 10),
    "init_samples": (int, 30),
    "init_box_scale": (float, 0.2),
    "feature_type": (str, "rff"),
    "rff_features": (int, 100),
    "rff_gamma": (float, 1.0),
    "ridge_lambda": (float, 0.05),
    "norm_bound": (float, 2.0),
    "delta": (float, 0.05),
    "delta_s": (float, 0.05),
    "eta": (float, 0.2),
    "calib_eps": (float, 0.1),
    "thompson_scale": (float, 1.0),
    "thompson_draws": (int, 1),
    "thompson_max_attempts": (int, 50),
    "mppi_samples": (int, 512),
    "mppi_horizon": (int, 30),
    "mppi_temperature": (float, 1.0),
    "mppi_sigma_scale": (float, 0.3),
    "barrier_penalty": (float, 100.0),
    "test_from": (int, 0),
    "test_init_mode": (str, "fixed"),
    "reference_episodes": (int, 100),
    "noise_sigma": (str, ""),
    "wind_rect_strength": (float, 1.5),
    "obstacle_x": (float, 2.0),
    "obstacle_y": (float, 0.8),
    "obstacle_radius": (float, 0.5),
    "save_test_traces": (bool, False),
}


@dataclass
class ExperimentConfig:
    env: str = "synthetic-linear"
    seed: int = 0
    episodes: int = 10
    horizon: int = 100
    test_trials: int = 10
    init_samples: int = 30
    init_box_scale: float = 0.2
    feature_type: str = "rff"
    rff_features: int = 100
    rff_gamma: float = 1.0
    ridge_lambda: float = 0.05
    norm_bound: float = 2.0
    delta: float = 0.05
    delta_s: float = 0.05
    eta: float = 0.2
    calib_eps: float = 0.1
    thompson_scale: float = 1.0
    thompson_draws: int = 1
    thompson_max_attempts: int = 50
    mppi_samples: int = 512
    mppi_horizon: int = 30
    mppi_temperature: float = 1.0
    mppi_sigma_scale: float = 0.3
    barrier_penalty: float = 100.0
    test_from: int = 0
    test_init_mode: str = "fixed"
    reference_episodes: int = 100
    noise_sigma: str = ""
    wind_rect_strength: float = 1.5
    obstacle_x: float = 2.0
    obstacle_y: float = 0.8
    obstacle_radius: float = 0.5
    save_test_traces: bool = False

    def validate(self) -> None:
        if self.env not in ENV_NAMES:
            raise ValueError(f"unknown env {self.env!r}, expected one of {ENV_NAMES}")
        for key in ("delta", "delta_s"):
            v = getattr(self, key)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{key} must lie in (0, 1), got {v}")
        if not (0.0 < self.eta <= 1.0):
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        for key in ("episodes", "horizon", "test_trials", "mppi_samples",
                    "mppi_horizon", "thompson_draws", "thompson_max_attempts"):
            if getattr(self, key) < (0 if key in ("episodes", "test_trials") else 1):
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("ridge_lambda", "norm_bound", "rff_gamma"):
            if getattr(self, key) <= 0.0:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        if self.thompson_scale < 0 or self.mppi_sigma_scale < 0:
            raise ValueError("scale parameters must be non-negative")
        if self.barrier_penalty < 0:
            raise ValueError("barrier_penalty must be non-negative")
        if self.test_from < 0:
            raise ValueError("test_from must be non-negative")
        if self.test_init_mode not in ("fixed", "random"):
            raise ValueError(
                f"test_init_mode must be 'fixed' or 'random', got {self.test_init_mode!r}")
        if self.rff_features < 1 or self.init_samples < 1:
            raise ValueError("rff_features and init_samples must be >= 1")
        if self.noise_sigma:
            sig = parse_sigma(self.noise_sigma)
            if np.any(sig < 0):
                raise ValueError("noise_sigma entries must be non-negative")

    def to_text(self) -> str:
        lines = ["# safe-ctrl config v1"]
        for key in _SCHEMA:
            v = getattr(self, key)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        out = ExperimentConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        for k, v in kw.items():
            if k not in _SCHEMA:
                raise ValueError(f"unknown config key {k!r}")
            setattr(out, k, v)
        return out


def parse_sigma(text: str) -> np.ndarray:
    return np.array([float(p) for p in text.split(",") if p.strip() != ""])


def _coerce(key: str, raw: str):
    typ, _ = _SCHEMA[key]
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}")
    return raw


def parse_config_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen = set()
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ValueError(f"unknown config key {key!r} (line {ln})")
        if key in seen:
            raise ValueError(f"duplicate config key {key!r} (line {ln})")
        seen.add(key)
        setattr(cfg, key, _coerce(key, raw))
    missing = [k for k in _SCHEMA if k not in seen]
    if missing:
        # config documents are complete records, never partial overlays:
        # a written config.txt must round-trip without consulting defaults
        raise ValueError("missing config key(s): " + ", ".join(missing))
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def apply_overrides(cfg: ExperimentConfig, pairs: Iterable[str]) -> ExperimentConfig:
    """Apply 'key=value' override strings on top of a parsed config."""
    out = cfg.replace()
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override must look like key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ValueError(f"unknown config key {key!r} in override")
        setattr(out, key, _coerce(key, raw))
    out.validate()
    return out


def fmt_float(v: float) -> str:
    """Shortest round-trip decimal form; '.' separator regardless of locale."""
    return repr(float(v))


@dataclass
class EpisodeTrace:
    """One executed episode: states, controls, costs, barrier values, flags."""

    states: np.ndarray            # (H+1, n)
    controls: np.ndarray          # (H, m)
    costs: np.ndarray             # (H,)
    h_values: np.ndarray          # (H+1,), min over barriers; +inf when none
    constraint_active: np.ndarray  # (H,) bool
    qp_infeasible: np.ndarray      # (H,) bool

    def __post_init__(self):
        H = self.controls.shape[0]
        if self.states.shape[0] != H + 1:
            raise ValueError("states must have one more row than controls")
        if (self.costs.shape[0] != H or self.h_values.shape[0] != H + 1
                or self.constraint_active.shape[0] != H
                or self.qp_infeasible.shape[0] != H):
            raise ValueError("trace field lengths are inconsistent")

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.costs))

    def to_csv_text(self) -> str:
        n = self.states.shape[1]
        m = self.controls.shape[1]
        cols = (["step"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)]
                + ["cost", "h_value", "constraint_active", "qp_infeasible"])
        lines = ["# safe-ctrl trace v1", ",".join(cols)]
        H = self.horizon
        for t in range(H):
            row = [str(t)]
            row += [fmt_float(v) for v in self.states[t]]
            row += [fmt_float(v) for v in self.controls[t]]
            row.append(fmt_float(self.costs[t]))
            row.append(fmt_float(self.h_values[t]))
            row.append("1" if self.constraint_active[t] else "0")
            row.append("1" if self.qp_infeasible[t] else "0")
            lines.append(",".join(row))
        # terminal state row: no control, cost or flags
        row = [str(H)] + [fmt_float(v) for v in self.states[H]]
        row += ["" for _ in range(m)] + ["", fmt_float(self.h_values[H]), "", ""]
        lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv_text())


def trace_from_csv_text(text: str) -> EpisodeTrace:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    n = sum(1 for c in header if c.startswith("x"))
    m = sum(1 for c in header if c.startswith("u") and c != "u")
    body = lines[1:]
    H = len(body) - 1
    states = np.zeros((H + 1, n))
    controls = np.zeros((H, m))
    costs = np.zeros(H)
    h_values = np.zeros(H + 1)
    active = np.zeros(H, dtype=bool)
    infeas = np.zeros(H, dtype=bool)
    for i, ln in enumerate(body):
        parts = ln.split(",")
        states[i] = [float(p) for p in parts[1:1 + n]]
        h_values[i] = float(parts[1 + n + m + 1])
        if i < H:
            controls[i] = [float(p) for p in parts[1 + n:1 + n + m]]
            costs[i] = float(parts[1 + n + m])
            active[i] = parts[1 + n + m + 2] == "1"
            infeas[i] = parts[1 + n + m + 3] == "1"
    return EpisodeTrace(states, controls, costs, h_values, active, infeas)
