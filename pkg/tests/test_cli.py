import json
import os

import numpy as np
import pytest

from nemo_mbo import cli
from nemo_mbo import optimizer as opt

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fast_config_file(tmp_path, **kw):
    cfg = dict(K=4, M=3, T=2, hidden=[6], pretrain_epochs=2,
               minibatch_size=4, seed=0)
    cfg.update(kw)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_gen_is_byte_deterministic(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    assert cli.cli(["gen", "--task", "sin1d", "--n", "100", "--seed", "7",
                    "--out", str(a)]) == 0
    assert cli.cli(["gen", "--task", "sin1d", "--n", "100", "--seed", "7",
                    "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_narrow_writes_loadable_csv(tmp_path):
    out = tmp_path / "narrow.csv"
    assert cli.cli(["gen", "--task", "narrow", "--n", "20", "--d", "3",
                    "--seed", "1", "--out", str(out)]) == 0
    from nemo_mbo import bench
    ds = bench.load_dataset(str(out))
    assert (ds.n, ds.d) == (20, 3)


def test_run_t0_percentiles_equal_init_scores(tmp_path):
    data = tmp_path / "data.csv"
    cli.cli(["gen", "--task", "sin1d", "--n", "30", "--seed", "3",
             "--out", str(data)])
    cfg = fast_config_file(tmp_path, T=0)
    out = tmp_path / "run.json"
    assert cli.cli(["run", "--algo", "nemo", "--data", str(data),
                    "--config", cfg, "--truth", "sin1d",
                    "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["schema_version"] == 1
    assert len(res["trajectory"]) == 1
    from nemo_mbo.bench import load_dataset
    ds = load_dataset(str(data))
    init = opt.init_candidates(
        ds, 3, "best",
        np.random.default_rng(np.random.SeedSequence(0).spawn(3)[0]), 0.01)
    truth = np.sin(init.X[:, 0])
    assert res["percentiles"]["100"] == pytest.approx(truth.max())


def test_run_emits_full_effective_config(tmp_path):
    data = tmp_path / "data.csv"
    cli.cli(["gen", "--task", "sin1d", "--n", "10", "--seed", "0",
             "--out", str(data)])
    out = tmp_path / "run.json"
    cfg = fast_config_file(tmp_path, T=1)
    assert cli.cli(["run", "--algo", "forward", "--data", str(data),
                    "--config", cfg, "--out", str(out)]) == 0
    config = json.loads(out.read_text())["config"]
    for f in ("K", "M", "T", "alpha_theta", "alpha_x", "tau", "inner_steps",
              "w", "init_strategy", "head", "seed"):
        assert f in config


def test_run_trajectory_csv(tmp_path):
    data = tmp_path / "data.csv"
    cli.cli(["gen", "--task", "sin1d", "--n", "10", "--seed", "0",
             "--out", str(data)])
    out = tmp_path / "run.json"
    traj = tmp_path / "traj.csv"
    cfg = fast_config_file(tmp_path, T=2)
    assert cli.cli(["run", "--algo", "nemo", "--data", str(data),
                    "--config", cfg, "--truth", "sin1d", "--out", str(out),
                    "--trajectory-csv", str(traj)]) == 0
    lines = traj.read_text().strip().splitlines()
    assert lines[0].startswith("iteration,proxy_mean")
    assert len(lines) == 4  # header + T+1 records


def test_run_is_byte_deterministic(tmp_path):
    data = tmp_path / "data.csv"
    cli.cli(["gen", "--task", "sin1d", "--n", "12", "--seed", "2",
             "--out", str(data)])
    cfg = fast_config_file(tmp_path, T=2)
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    for out in (a, b):
        assert cli.cli(["run", "--algo", "ensemble", "--data", str(data),
                        "--config", cfg, "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_usage_errors_exit_2(tmp_path, capsys):
    # unknown flag -> argparse usage error
    assert cli.cli(["gen", "--task", "sin1d", "--n", "5", "--bogus", "1",
                    "--out", str(tmp_path / "x.csv")]) == 2
    # missing data file -> usage error with JSON on stderr
    assert cli.cli(["run", "--algo", "nemo", "--data", str(tmp_path / "no.csv"),
                    "--out", str(tmp_path / "o.json")]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["kind"] == "usage"
    # invalid config -> usage error
    bad = tmp_path / "bad.json"
    bad.write_text('{"K": 1}')
    data = tmp_path / "d.csv"
    cli.cli(["gen", "--task", "sin1d", "--n", "5", "--out", str(data)])
    assert cli.cli(["run", "--algo", "nemo", "--data", str(data),
                    "--config", str(bad), "--out", str(tmp_path / "o.json")]) == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    data = tmp_path / "d.csv"
    cli.cli(["gen", "--task", "sin1d", "--n", "60", "--out", str(data)])
    # n=60 exceeds the oracle's desk-scale limit -> runtime failure
    cfg = fast_config_file(tmp_path)
    assert cli.cli(["oracle-check", "--data", str(data), "--config", cfg,
                    "--out", str(tmp_path / "o.json")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["kind"] == "ValueError"


def test_profile_writes_grid_rows(tmp_path):
    data = tmp_path / "d.csv"
    cli.cli(["gen", "--task", "sin1d", "--n", "15", "--out", str(data)])
    out = tmp_path / "profile.csv"
    cfg = fast_config_file(tmp_path, pretrain_epochs=5)
    assert cli.cli(["profile", "--data", str(data), "--config", cfg,
                    "--grid=-4:4:5", "--refine-steps", "3",
                    "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["x", "entropy", "y_mean"]
    assert len(lines) == 6
    first = [float(v) for v in lines[1].split(",")]
    assert first[0] == -4.0
    assert np.sum(first[3:]) == pytest.approx(1.0, abs=1e-9)


def test_profile_rejects_bad_grid(tmp_path):
    data = tmp_path / "d.csv"
    cli.cli(["gen", "--task", "sin1d", "--n", "15", "--out", str(data)])
    assert cli.cli(["profile", "--data", str(data), "--grid", "oops",
                    "--out", str(tmp_path / "p.csv")]) == 2


def test_oracle_check_matches_golden_fixture(tmp_path):
    with open(os.path.join(FIXTURES, "golden_oracle.json")) as fh:
        fix = json.load(fh)
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"K": fix["scheme"]["K"],
                               "hidden": fix["oracle"]["hidden"],
                               "seed": fix["oracle"]["seed"]}))
    lo = fix["queries"][0]["x"]
    hi = fix["queries"][-1]["x"]
    grid = f"{lo}:{hi}:{len(fix['queries'])}"
    out = tmp_path / "oracle.json"
    code = cli.cli([
        "oracle-check", "--data", os.path.join(FIXTURES, "golden_data.csv"),
        "--config", str(cfg), f"--grid={grid}",
        "--restarts", str(fix["oracle"]["restarts"]),
        "--max-steps", str(fix["oracle"]["max_steps"]),
        "--out", str(out),
    ])
    assert code == 0
    got = json.loads(out.read_text())
    by_x = {round(e["x"], 6): e for e in fix["queries"]}
    matched = 0
    for rep in got["reports"]:
        key = round(rep["x"], 6)
        if key not in by_x:
            continue
        want = by_x[key]
        assert rep["individual_regret"] == pytest.approx(want["regret"], abs=1e-6)
        assert rep["bound"] == pytest.approx(want["bound"], abs=1e-6)
        assert rep["pmf"] == pytest.approx(want["pmf"], abs=1e-6)
        assert rep["bound_holds"]
        matched += 1
    assert matched >= 2


def test_ablate_no_nml_runs_both_arms(tmp_path):
    data = tmp_path / "d.csv"
    cli.cli(["gen", "--task", "narrow", "--n", "12", "--d", "2",
             "--out", str(data)])
    cfg = fast_config_file(tmp_path, T=1)
    out = tmp_path / "ablate.json"
    assert cli.cli(["ablate", "--which", "no-nml", "--data", str(data),
                    "--config", cfg, "--truth", "narrow",
                    "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert set(res["runs"]) == {"nemo", "no_nml"}
    assert res["runs"]["no_nml"]["config"]["alpha_theta"] == 0.0
