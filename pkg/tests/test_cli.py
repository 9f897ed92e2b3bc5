import subprocess
import sys

import numpy as np
import pytest

from safe_ctrl.cli import main
from safe_ctrl.domain import METHODS_ALL
from safe_ctrl.envs import default_config
from safe_ctrl.learner import read_episodes_csv

FAST_SYN = ["--env", "synthetic-linear", "--episodes", "2",
            "--override", "horizon=15", "--override", "test_trials=1",
            "--override", "init_samples=6", "--override", "mppi_samples=8",
            "--override", "mppi_horizon=4", "--quiet"]

FAST_PEND = ["--env", "pendulum", "--episodes", "2",
             "--override", "horizon=15", "--override", "test_trials=1",
             "--override", "test_from=0", "--override", "init_samples=4",
             "--override", "rff_features=16", "--override", "mppi_samples=8",
             "--override", "mppi_horizon=4", "--quiet"]


def _run(args):
    return main(args)


def test_run_writes_run_directory(tmp_path, capsys):
    rc = _run(["run", *FAST_SYN, "--method", "gt-mppi", "--seed", "3",
               "--out", str(tmp_path)])
    assert rc == 0
    d = tmp_path / "synthetic-linear-s3" / "gt-mppi"
    for name in ("manifest.txt", "config.txt", "episodes.csv",
                 "test_trials.csv"):
        assert (d / name).is_file()
    assert (d / "traces" / "ep_000.csv").is_file()
    out = capsys.readouterr().out
    assert "gt-mppi" in out and "final_test_cost" in out


def test_run_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for root in (a, b):
        assert _run(["run", *FAST_SYN, "--method", "exploitation",
                     "--seed", "1", "--out", str(root)]) == 0
    da = a / "synthetic-linear-s1" / "exploitation"
    db = b / "synthetic-linear-s1" / "exploitation"
    names = sorted(p.relative_to(da) for p in da.rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(db) for p in db.rglob("*") if p.is_file())
    for name in names:
        assert (da / name).read_bytes() == (db / name).read_bytes()


def test_run_all_methods(tmp_path):
    assert _run(["run", *FAST_SYN, "--method", "all", "--seed", "0",
                 "--out", str(tmp_path)]) == 0
    root = tmp_path / "synthetic-linear-s0"
    subdirs = sorted(p.name for p in root.iterdir())
    assert subdirs == sorted(METHODS_ALL)
    # aligned episode indices across methods
    for method in METHODS_ALL:
        cols = read_episodes_csv(str(root / method))
        assert list(cols["episode"]) == [0.0, 1.0]


def test_missing_config_key_names_it(tmp_path, capsys):
    full = default_config("synthetic-linear").to_text()
    lines = [ln for ln in full.splitlines() if not ln.startswith("episodes")]
    cfg_path = tmp_path / "partial.cfg"
    cfg_path.write_text("\n".join(lines) + "\n")
    rc = _run(["run", "--env", "synthetic-linear", "--config", str(cfg_path),
               "--out", str(tmp_path / "runs")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "episodes" in err and "missing" in err


def test_unknown_override_key(tmp_path, capsys):
    rc = _run(["run", *FAST_SYN, "--override", "wibble=3",
               "--out", str(tmp_path)])
    assert rc == 2
    assert "wibble" in capsys.readouterr().err


def test_out_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("SAFE_CTRL_OUT", str(tmp_path / "from-env"))
    assert _run(["run", *FAST_SYN, "--method", "gt-mppi", "--seed", "0"]) == 0
    assert (tmp_path / "from-env" / "synthetic-linear-s0" / "gt-mppi"
            / "manifest.txt").is_file()


# ------------------------------------------------------------------ verify

def test_verify_suites(capsys):
    assert _run(["verify", "--suite", "prop1", "--quick"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert [ln.split()[1].rstrip(":") for ln in out] == \
        ["forward-invariance", "forward-invariance-noiseless"]
    assert all(ln.startswith("PASS") for ln in out)

    assert _run(["verify", "--suite", "thm1", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "depth-bound" in out

    assert _run(["verify", "--suite", "envelope", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "noise-envelope" in out and "negative-control" in out


def test_verify_out_csv(tmp_path, capsys):
    path = tmp_path / "verify.csv"
    assert _run(["verify", "--suite", "thm1", "--quick",
                 "--out", str(path)]) == 0
    assert _run(["verify", "--suite", "thm1", "--quick",
                 "--out", str(path)]) == 0
    capsys.readouterr()
    lines = path.read_text().splitlines()
    assert lines[0] == "# safe-ctrl verify v1"
    assert sum(ln.startswith("depth-bound,") for ln in lines) == 2


# ----------------------------------------------------------------- compare

def test_compare_single_run_identity(tmp_path, capsys):
    _run(["run", *FAST_SYN, "--method", "gt-mppi", "--seed", "0",
          "--out", str(tmp_path)])
    d = tmp_path / "synthetic-linear-s0" / "gt-mppi"
    capsys.readouterr()
    assert _run(["compare", str(d)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "# safe-ctrl compare v1"
    assert out[1] == "episode,method,runs,reward_mean,reward_std,min_h"
    cols = read_episodes_csv(str(d))
    rows = [ln.split(",") for ln in out[2:]]
    assert len(rows) == 2
    for ep, row in enumerate(rows):
        assert row[0] == str(ep) and row[1] == "gt-mppi" and row[2] == "1"
        assert float(row[3]) == pytest.approx(-cols["test_cost_mean"][ep])
        assert float(row[4]) == 0.0
        assert float(row[5]) == pytest.approx(cols["min_h_test"][ep])


def test_compare_aggregates_seeds(tmp_path, capsys):
    for seed in ("0", "1"):
        _run(["run", *FAST_SYN, "--method", "gt-mppi", "--seed", seed,
              "--out", str(tmp_path)])
    capsys.readouterr()
    csv_out = tmp_path / "cmp.csv"
    assert _run(["compare", str(tmp_path / "synthetic-linear-s0"),
                 str(tmp_path / "synthetic-linear-s1"),
                 "--out", str(csv_out)]) == 0
    out = capsys.readouterr().out
    assert csv_out.read_text() == out
    rows = [ln.split(",") for ln in out.splitlines()[2:]]
    c0 = read_episodes_csv(str(tmp_path / "synthetic-linear-s0" / "gt-mppi"))
    c1 = read_episodes_csv(str(tmp_path / "synthetic-linear-s1" / "gt-mppi"))
    for ep, row in enumerate(rows):
        assert row[2] == "2"
        vals = np.array([-c0["test_cost_mean"][ep], -c1["test_cost_mean"][ep]])
        assert float(row[3]) == pytest.approx(vals.mean())
        assert float(row[4]) == pytest.approx(vals.std())


def test_compare_pendulum_angle_columns(tmp_path, capsys):
    _run(["run", *FAST_PEND, "--method", "gt-mppi", "--seed", "0",
          "--out", str(tmp_path)])
    d = tmp_path / "pendulum-s0" / "gt-mppi"
    capsys.readouterr()
    assert _run(["compare", str(d)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1] == "episode,method,runs,reward_mean,reward_std,max_theta,min_theta"
    cols = read_episodes_csv(str(d))
    for ep, row in enumerate(ln.split(",") for ln in out[2:]):
        assert float(row[5]) == pytest.approx(cols["coord_max"][ep])
        assert float(row[6]) == pytest.approx(cols["coord_min"][ep])


def test_compare_rejects_mismatched_episode_counts(tmp_path, capsys):
    _run(["run", *FAST_SYN, "--method", "gt-mppi", "--seed", "0",
          "--out", str(tmp_path / "a")])
    _run(["run", *FAST_SYN[:3], "3", *FAST_SYN[4:], "--method", "gt-mppi",
          "--seed", "0", "--out", str(tmp_path / "b")])
    capsys.readouterr()
    da = str(tmp_path / "a" / "synthetic-linear-s0" / "gt-mppi")
    db = str(tmp_path / "b" / "synthetic-linear-s0" / "gt-mppi")
    assert _run(["compare", da, db]) == 2
    err = capsys.readouterr().err
    assert da in err and db in err


def test_compare_rejects_mismatched_horizons(tmp_path, capsys):
    _run(["run", *FAST_SYN, "--method", "gt-mppi", "--seed", "0",
          "--out", str(tmp_path / "a")])
    args = [s.replace("horizon=15", "horizon=20") for s in FAST_SYN]
    _run(["run", *args, "--method", "gt-mppi", "--seed", "0",
          "--out", str(tmp_path / "b")])
    capsys.readouterr()
    da = str(tmp_path / "a" / "synthetic-linear-s0" / "gt-mppi")
    db = str(tmp_path / "b" / "synthetic-linear-s0" / "gt-mppi")
    assert _run(["compare", da, db]) == 2
    err = capsys.readouterr().err
    assert "horizon" in err and da in err and db in err


def test_compare_missing_dir(tmp_path, capsys):
    assert _run(["compare", str(tmp_path / "nope")]) == 2
    assert "nope" in capsys.readouterr().err


# ------------------------------------------------------------------- bench

def test_bench_reports_both_backends(capsys):
    assert _run(["bench", "--samples", "8", "--horizon", "4",
                 "--features", "8", "--repeat", "2"]) == 0
    out = capsys.readouterr().out
    assert "numpy" in out and "ms/call" in out


# -------------------------------------------------------------- entry point

def test_console_script_installed():
    proc = subprocess.run(["safe-ctrl", "verify", "--suite", "thm1", "--quick"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "depth-bound" in proc.stdout


def test_module_invocation():
    proc = subprocess.run([sys.executable, "-m", "safe_ctrl.cli", "run",
                           "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for flag in ("--config", "--seed", "--episodes", "--out", "--override"):
        assert flag in proc.stdout
