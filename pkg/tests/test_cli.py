import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from topdm.cli import main, parse_arm, planner_config, load_config
from topdm.demos import dumps, load
from topdm.envs import make_env
from topdm.planner import desk_defaults, run_episode
from topdm.rl import read_curve

SMALL_PLANNER = "[planner]\ntau = 4\nn_traj = 8\nn_iter = 2\n"


def write_cfg(path, experiment, extra=SMALL_PLANNER):
    lines = ["[experiment]"] + [f"{k} = {v}" for k, v in experiment.items()]
    path.write_text("\n".join(lines) + "\n" + extra)
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def plan_cfg(tmp_path):
    return write_cfg(tmp_path / "plan.cfg", dict(mode="plan", env_id="point_reach-sparse",
                                                 plan_on="point_reach-dense", seeds="0 1",
                                                 episodes=2, out=tmp_path / "plan"),
                     SMALL_PLANNER + "[env]\nepisode_length = 8\ndistance_tolerance = 0.3\n")


def test_plan_outputs(plan_cfg, tmp_path):
    assert main(["--config", plan_cfg]) == 0
    out = tmp_path / "plan"
    data = rows(out / "episodes.csv")
    assert len(data) == 4
    assert list(data[0]) == ["seed", "episode", "return", "success", "plan_wall_seconds"]
    agg = json.loads((out / "aggregate.json").read_text())
    assert agg["success_rate"] == np.mean([int(r["success"]) for r in data])
    assert agg["median_return"] == float(np.median([float(r["return"]) for r in data]))
    demos = sorted((out / "demos" / "point_reach-sparse").glob("*.demo"))
    assert [p.stem for p in demos] == ["0", "1", "1000", "1001"]


def test_plan_rerun_is_byte_identical(plan_cfg, tmp_path):
    for name in ("a", "b"):
        assert main(["--config", plan_cfg, "--no-timing", "--out", str(tmp_path / name)]) == 0
    for rel in ("episodes.csv", "aggregate.json", "demos/point_reach-sparse/1001.demo"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_flags_override_file(plan_cfg, tmp_path):
    cfg = load_config(["--config", plan_cfg, "--seed", "7", "--episodes", "1", "--beta", "0.5",
                       "--workers", "3"])
    assert cfg.seeds == [7] and cfg.episodes == 1 and cfg.workers == 3
    assert planner_config(cfg).beta == 0.5
    assert planner_config(cfg).tau == 4


def test_ablate_shares_seeds(tmp_path):
    cfg = write_cfg(tmp_path / "ab.cfg", dict(mode="ablate", env_id="double_integrator", seeds="0 1",
                                              out=tmp_path / "ab"), SMALL_PLANNER + "[env]\nepisode_length = 5\n")
    assert main(["--config", cfg, "--no-timing"]) == 0
    table = rows(tmp_path / "ab" / "ablation.csv")
    groups = {}
    for r in table:
        groups.setdefault(r["variant"], []).append(r["seed"])
    assert list(groups) == ["mppi", "mod1", "mod12", "topdm"]
    assert len({tuple(v) for v in groups.values()}) == 1
    summary = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert set(summary) == set(groups)


def test_variant_flag_and_kappa_suffix(tmp_path):
    cfg = load_config(["--mode", "ablate", "--env", "point_reach-dense", "--out", str(tmp_path),
                       "--variant", "topdm,mppi@20"])
    assert cfg.variants == ["topdm", "mppi@20"]
    assert planner_config(cfg, "mppi@20").kappa == 20.0
    assert planner_config(cfg, "mppi@20").mode == "mppi"


def test_train_rl_outputs(tmp_path):
    plan = write_cfg(tmp_path / "p.cfg", dict(mode="plan", env_id="rotor_spin", seeds="0", out=tmp_path / "p"),
                     SMALL_PLANNER + "[env]\nepisode_length = 10\n")
    assert main(["--config", plan]) == 0
    td3 = ("[env]\nepisode_length = 10\n[td3]\ntotal_timesteps = 60\nstart_timesteps = 20\n"
           "batch_size = 8\nhidden = 8\neval_every = 20\neval_episodes = 1\n")
    cfg = write_cfg(tmp_path / "t.cfg", dict(mode="train-rl", env_id="rotor_spin", seeds="0 1 2",
                                             out=tmp_path / "t", demo_dir=tmp_path / "p" / "demos",
                                             arms="plain, demos@1.0"), td3)
    assert main(["--config", cfg, "--no-timing"]) == 0
    arm = tmp_path / "t" / "demos-beta1"
    assert sorted(p.name for p in arm.glob("*.csv")) == ["median.csv", "seed_0.csv", "seed_1.csv", "seed_2.csv"]
    assert len(list((arm / "checkpoints").glob("*.mlp"))) == 3
    curves = [read_curve(arm / f"seed_{s}.csv") for s in range(3)]
    median = read_curve(arm / "median.csv")
    for i, row in enumerate(median):
        assert row["eval_median_return"] == float(np.median([c[i]["eval_median_return"] for c in curves]))
    summary = json.loads((tmp_path / "t" / "summary.json").read_text())
    assert set(summary["arms"]) == {"plain-beta0.7", "demos-beta1"}
    assert summary["arms"]["demos-beta1"]["beta"] == 1.0


def test_train_rl_missing_demos_is_contract_error(tmp_path):
    cfg = write_cfg(tmp_path / "t.cfg", dict(mode="train-rl", env_id="rotor_spin", out=tmp_path / "t",
                                             demo_dir=tmp_path / "nowhere"), "")
    assert main(["--config", cfg]) == 2


def test_parse_arm():
    assert parse_arm("plain", 0.7) == ("plain-beta0.7", False, 0.7)
    assert parse_arm("demos@1.0", 0.7) == ("demos-beta1", True, 1.0)


def test_replay_demo_ok_and_tampered(plan_cfg, tmp_path, capsys):
    assert main(["--config", plan_cfg]) == 0
    demo_dir = tmp_path / "plan" / "demos"
    assert main(["--mode", "replay-demo", "--demo", str(demo_dir), "--out", str(tmp_path / "rep")]) == 0
    report = rows(tmp_path / "rep" / "replay.csv")
    assert len(report) == 4 and all(float(r["max_deviation"]) == 0.0 for r in report)

    # Dense rewards so that any change to an action shows up immediately.
    demo = run_episode(make_env("point_reach-dense"), desk_defaults(n_traj=8, n_iter=2), episode_length=8).demo
    demo.actions[3] = demo.actions[3] * 0.5 + 0.01
    path = tmp_path / "tampered.demo"
    path.write_text(dumps(demo))
    capsys.readouterr()
    assert main(["--mode", "replay-demo", "--demo", str(path)]) == 3
    assert "diverged@3" in capsys.readouterr().out


def test_replay_demo_format_error(tmp_path):
    bad = tmp_path / "bad.demo"
    bad.write_text('{"env_id": "rotor_spin"}')
    assert main(["--mode", "replay-demo", "--demo", str(bad)]) == 2


@pytest.mark.parametrize("argv", [
    ["--mode", "plan", "--env", "cartpole", "--out", "x"],
    ["--mode", "fly"],
    ["--mode", "plan", "--env", "rotor_spin"],
    ["--config", "/no/such/file.cfg"],
    ["--mode", "ablate", "--env", "rotor_spin", "--out", "x", "--variant", "ilqr"],
    [],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_bench(tmp_path):
    cfg = write_cfg(tmp_path / "b.cfg", dict(mode="bench", env_id="rotor_spin", out=tmp_path / "b",
                                             bench_workers="1 8", bench_candidates=20, bench_batches=2))
    assert main(["--config", cfg]) == 0
    data = rows(tmp_path / "b" / "bench.csv")
    assert [r["workers"] for r in data] == ["1", "8"] and all(r["identical"] == "1" for r in data)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "topdm.cli", "--mode", "fly"], capture_output=True, text=True)
    assert proc.returncode == 1
