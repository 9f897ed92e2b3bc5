"""Command line front end: run experiments, compare runs, verify, benchmark."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import kernels
from .domain import (ENV_NAMES, METHODS_ALL, apply_overrides, fmt_float,
                     load_config)
from .envs import default_config
from .learner import (METHODS, read_episodes_csv, read_manifest, run_method,
                      write_outputs)
from .verify import SUITES, append_results_csv, run_suite

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_INTERNAL = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="safe-ctrl",
        description="Safe online learning for nonlinear control: "
                    "episodic model learning behind a barrier-certificate filter.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one or all methods")
    run.add_argument("--env", default="pendulum", choices=sorted(ENV_NAMES))
    run.add_argument("--method", default="algorithm1",
                     choices=sorted(METHODS) + ["all"])
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--episodes", type=int, default=None,
                     help="override the episode count")
    run.add_argument("--config", default=None,
                     help="config file to start from (defaults per env)")
    run.add_argument("--override", action="append", default=[],
                     metavar="KEY=VALUE", help="config override, repeatable")
    run.add_argument("--out", default=None,
                     help="output root (default $SAFE_CTRL_OUT or ./runs)")
    run.add_argument("--quiet", action="store_true",
                     help="suppress per-episode progress")

    cmp_ = sub.add_parser("compare",
                          help="aggregate finished runs into a per-episode CSV")
    cmp_.add_argument("dirs", nargs="+",
                      help="run directories, or parents of run directories")
    cmp_.add_argument("--out", default=None,
                      help="also write the CSV to this file")

    ver = sub.add_parser("verify", help="Monte Carlo checks of the safety layer")
    ver.add_argument("--suite", default="all", choices=list(SUITES),
                     help="which guarantee to check")
    ver.add_argument("--quick", action="store_true",
                     help="smaller trial counts")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--out", default=None,
                     help="append machine-readable results to this CSV")

    ben = sub.add_parser("bench", help="compare rollout kernel backends")
    ben.add_argument("--samples", type=int, default=64)
    ben.add_argument("--horizon", type=int, default=15)
    ben.add_argument("--features", type=int, default=48)
    ben.add_argument("--repeat", type=int, default=200)
    return p


def _out_root(arg: str | None) -> str:
    return arg or os.environ.get("SAFE_CTRL_OUT", "runs")


def cmd_run(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = default_config(args.env)
    if args.config and args.env and cfg.env != args.env:
        # explicit --env wins over the file's env line
        cfg = cfg.replace(env=args.env)
    cfg = apply_overrides(cfg, args.override)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.episodes is not None:
        cfg = cfg.replace(episodes=args.episodes)
    cfg.validate()

    methods = METHODS_ALL if args.method == "all" else [args.method]
    root = _out_root(args.out)
    for method in methods:
        t0 = time.perf_counter()

        def progress(ep, rec):
            if args.quiet:
                return
            msg = (f"[{method}] episode {ep + 1}/{cfg.episodes} "
                   f"train_cost={rec.train_costs[ep]:.3f} "
                   f"min_h={rec.min_h_train[ep]:.4f}")
            print(msg, file=sys.stderr, flush=True)

        rec = run_method(cfg, method, on_episode=progress)
        out_dir = os.path.join(root, f"{cfg.env}-s{cfg.seed}", method)
        write_outputs(rec, cfg, out_dir)
        dt = time.perf_counter() - t0
        final = (rec.test_costs[-1].mean()
                 if rec.test_costs.size else rec.train_costs[-1])
        print(f"{method}: episodes={cfg.episodes} final_test_cost={final:.3f} "
              f"min_h={rec.min_h_overall:.4f} elapsed={dt:.1f}s -> {out_dir}")
    return EXIT_OK


def _discover_run_dirs(paths):
    found = []
    for path in paths:
        if os.path.isfile(os.path.join(path, "manifest.txt")):
            found.append(path)
            continue
        if not os.path.isdir(path):
            raise ValueError(f"not a directory: {path}")
        for sub in sorted(os.listdir(path)):
            cand = os.path.join(path, sub)
            if os.path.isfile(os.path.join(cand, "manifest.txt")):
                found.append(cand)
            elif os.path.isdir(cand):
                for sub2 in sorted(os.listdir(cand)):
                    cand2 = os.path.join(cand, sub2)
                    if os.path.isfile(os.path.join(cand2, "manifest.txt")):
                        found.append(cand2)
    if not found:
        raise ValueError("no run directories found (missing manifest.txt)")
    return found


def cmd_compare(args) -> int:
    """Aggregate runs across seeds into one per-episode CSV on stdout.

    Rewards are negated test costs. For the pendulum the safety columns are
    the raw angle extremes over the evaluation rollouts; elsewhere the worst
    barrier value. A readable per-method summary goes to stderr.
    """
    runs = []
    for d in _discover_run_dirs(args.dirs):
        man = read_manifest(d)
        cols = read_episodes_csv(d)
        cfg = load_config(os.path.join(d, "config.txt"))
        runs.append((man, cols, cfg, d))
    counts = {int(man["episodes"]) for man, _, _, _ in runs}
    if len(counts) > 1:
        listing = ", ".join(f"{d} ({man['episodes']})" for man, _, _, d in runs)
        raise ValueError(
            f"cannot compare runs with different episode counts: {listing}")
    horizons = {cfg.horizon for _, _, cfg, _ in runs}
    if len(horizons) > 1:
        listing = ", ".join(f"{d} (horizon={cfg.horizon})"
                            for _, _, cfg, d in runs)
        raise ValueError(
            f"cannot compare runs with different horizons: {listing}")
    env_names = {man["env"] for man, _, _, _ in runs}
    if len(env_names) > 1:
        raise ValueError(
            f"cannot compare runs from different envs: {sorted(env_names)}")
    env_name = env_names.pop()
    episodes = counts.pop()

    order = {m: i for i, m in enumerate(METHODS)}
    groups: dict[str, list] = {}
    for man, cols, _, d in runs:
        groups.setdefault(man["method"], []).append(cols)
    methods = sorted(groups, key=lambda m: order.get(m, 99))

    angle = env_name == "pendulum"
    tail = "max_theta,min_theta" if angle else "min_h"
    lines = ["# safe-ctrl compare v1",
             f"episode,method,runs,reward_mean,reward_std,{tail}"]

    def agg(vals, reduce):
        arr = np.array(vals)
        return "" if np.all(np.isnan(arr)) else fmt_float(float(reduce(arr)))

    for method in methods:
        gs = groups[method]
        for ep in range(episodes):
            rew = [-g["test_cost_mean"][ep] for g in gs]
            cells = [str(ep), method, str(len(gs)),
                     agg(rew, np.nanmean), agg(rew, np.nanstd)]
            if angle:
                cells.append(agg([g["coord_max"][ep] for g in gs], np.nanmax))
                cells.append(agg([g["coord_min"][ep] for g in gs], np.nanmin))
            else:
                cells.append(agg([g["min_h_test"][ep] for g in gs], np.nanmin))
            lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", newline="\n") as fh:
            fh.write(text)

    print(f"{'method':<18} {'runs':>4} {'final test cost':>20} "
          f"{'total train cost':>18} {'min h':>10}", file=sys.stderr)
    for method in methods:
        gs = groups[method]
        finals = np.array([g["test_cost_mean"][-1] for g in gs])
        totals = np.array([g["train_cost"].sum() for g in gs])
        min_h = min(np.nanmin(np.concatenate([g["min_h_train"], g["min_h_test"]]))
                    for g in gs)
        if np.all(np.isnan(finals)):
            final_s = "n/a"
        else:
            final_s = f"{np.nanmean(finals):.3f} +- {np.nanstd(finals):.3f}"
        print(f"{method:<18} {len(gs):>4} {final_s:>20} "
              f"{np.mean(totals):>18.3f} {min_h:>10.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(args.suite, quick=args.quick, seed=args.seed)
    for r in results:
        print(r.line())
    if args.out:
        append_results_csv(args.out, results)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY_FAILED


def cmd_bench(args) -> int:
    K, Hp, r = args.samples, args.horizon, args.features
    rng = np.random.default_rng(0)
    x0 = np.array([np.pi, 0.0])
    U = rng.uniform(-15, 15, size=(K, Hp, 1))
    par = np.array([0.05, 25.0 / 3.0, 5.0 / 3.0, 15.0, 3.0, 0.05, -3.0])
    cpar = np.array([1.0, 0.1, 0.001, 0.0, -np.pi / 8.0, np.pi])
    W = 0.1 * rng.standard_normal((2, r))
    omega = rng.standard_normal((r, 3))
    bias = rng.uniform(0, 2 * np.pi, size=r)
    amp = np.sqrt(2.0 / r)

    def time_one(fn):
        best = float("inf")
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        return best

    np_call = lambda: kernels.rollout_costs_numpy(
        kernels.PENDULUM, x0, U, par, cpar, False, W, omega, bias, amp,
        kernels.FEAT_KIND_RFF, kernels.FEAT_STATE_CONTROL)
    t_np = time_one(np_call)
    print(f"workload: {K} candidates x {Hp} steps, {r} features, pendulum-style plant")
    print(f"numpy    {1e3 * t_np:9.3f} ms/call")
    try:
        nb_call = lambda: kernels.rollout_costs_numba(
            kernels.PENDULUM, x0, U, par, cpar, False, W, omega, bias, amp,
            kernels.FEAT_KIND_RFF, kernels.FEAT_STATE_CONTROL)
        nb_call()  # compile outside the timed region
        t_nb = time_one(nb_call)
        print(f"numba    {1e3 * t_nb:9.3f} ms/call")
        print(f"speedup  {t_np / t_nb:9.2f}x")
        a = np_call()
        b = nb_call()
        print(f"max |diff| = {np.max(np.abs(a - b)):.3e}")
    except RuntimeError as exc:
        print(f"numba    unavailable ({exc})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "compare":
            return cmd_compare(args)
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "bench":
            return cmd_bench(args)
        parser.error(f"unknown command {args.command!r}")
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
