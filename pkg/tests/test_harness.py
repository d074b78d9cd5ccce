import json
from collections import Counter

import numpy as np
import pytest

from compose_rl import harness
from compose_rl.harness import (ConfigError, ExperimentConfig, ablate, build_trainer, checkpoint_load,
                                checkpoint_save, learning_auc, load_config, parse_override, read_manifest,
                                read_metrics, run_experiment)
from compose_rl.replay import ReplayBuffer

TINY_SAC = dict(warmup_steps=10, batch_size=4, critic_hidden=6, encoder_hidden=3, decoder_hidden=4,
                baseline_hidden=4, episode_limit=15)
TINY_HIRO = dict(warmup_steps=10, batch_size=4, low_critic_hidden=4, high_hidden=4, encoder_hidden=3,
                 decoder_hidden=3, baseline_hidden=3, c=4, high_update_every=4, n_candidates=3)


def config(tmp_path, name="run", **kw):
    base = dict(steps=30, eval_interval=15, eval_episodes=2, out=str(tmp_path / name), sac=dict(TINY_SAC),
                hiro=dict(TINY_HIRO))
    base.update(kw)
    return ExperimentConfig.from_dict(base)


# ------------------------------------------------------------------- replay

def test_ring_overwrites_oldest():
    rb = ReplayBuffer(2, np.random.default_rng(0))
    for i in (1, 2, 3):
        rb.push(x=float(i))
    assert len(rb) == 2
    assert set(rb.sample(100)["x"]) == {2.0, 3.0}


def test_single_item_sample_repeats():
    rb = ReplayBuffer(5, np.random.default_rng(0))
    rb.push(x=np.array([1.0, 2.0]))
    np.testing.assert_array_equal(rb.sample(4)["x"], np.tile([1.0, 2.0], (4, 1)))


def test_sampling_is_uniform():
    rb = ReplayBuffer(10, np.random.default_rng(1))
    for i in range(10):
        rb.push(x=float(i))
    n = 20_000
    counts = Counter(rb.sample(n)["x"].tolist())
    expected = n / 10
    chi2 = sum((counts[float(i)] - expected) ** 2 / expected for i in range(10))
    assert chi2 < 27.9  # 99.9% quantile, 9 degrees of freedom


def test_replay_errors():
    rb = ReplayBuffer(3, np.random.default_rng(0))
    with pytest.raises(ValueError, match="empty"):
        rb.sample(1)
    rb.push(x=np.zeros(2))
    with pytest.raises(ValueError):
        rb.push(x=np.zeros(3))
    with pytest.raises(KeyError):
        rb.push(y=np.zeros(2))
    with pytest.raises(ValueError):
        ReplayBuffer(0, np.random.default_rng(0))


def test_replay_state_round_trip():
    a = ReplayBuffer(4, np.random.default_rng(2))
    for i in range(6):
        a.push(x=float(i))
    b = ReplayBuffer(4, np.random.default_rng(99))
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.sample(8)["x"], b.sample(8)["x"])


# ------------------------------------------------------------------- config

def test_overrides_and_dot_paths(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"steps": 5, "sac": {"batch_size": 8}}))
    cfg = load_config(path, dict([parse_override("sac.batch_size=16"), parse_override("seed=3")]))
    assert (cfg.steps, cfg.seed, cfg.sac["batch_size"]) == (5, 3, 16)
    assert parse_override("out=runs/x") == ("out", "runs/x")
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="point_umaze"):
        load_config(None, {"env": "ant_maze"})
    with pytest.raises(ConfigError):
        load_config(None, {"variant": "bogus"})
    with pytest.raises(ConfigError):
        load_config(None, {"sac.gamma": 2.0})
    with pytest.raises(ConfigError):
        load_config(None, {"colour": 1})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        load_config(None, {"steps.x": 1})


def test_unknown_env_exits_with_config_status(tmp_path):
    cfg = config(tmp_path, env="ant_maze")
    assert run_experiment(cfg) == harness.EXIT_CONFIG


# ---------------------------------------------------------------------- runs

def test_zero_budget_writes_summary(tmp_path):
    cfg = config(tmp_path, steps=0)
    assert run_experiment(cfg) == 0
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["steps"] == 0 and summary["training_episodes"] == 0
    assert (tmp_path / "run" / "train_log.csv").read_text().strip() == ",".join(harness.TRAIN_COLUMNS)


def test_metrics_layout(tmp_path):
    cfg = config(tmp_path)
    assert run_experiment(cfg) == 0
    text = (tmp_path / "run" / "metrics.csv").read_text(encoding="utf-8")
    assert text.splitlines()[0] == ",".join(harness.METRIC_COLUMNS)
    rows = read_metrics(tmp_path / "run" / "metrics.csv")
    steps = [r["step"] for r in rows]
    assert steps == sorted(steps) and set(steps) == {0, 15, 30}
    assert all(r["normalized_distance"] >= 0 and r["success"] in (0, 1) for r in rows)
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["n_episodes"] == 2 and summary["eval_step"] == 30


def test_identical_runs_give_identical_files(tmp_path):
    a, b = config(tmp_path, "a", checkpoint_interval=10), config(tmp_path, "b", checkpoint_interval=10)
    assert run_experiment(a) == run_experiment(b) == 0
    for name in ("metrics.csv", "train_log.csv", "checkpoint_00000030.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


@pytest.mark.parametrize("algo,env", [("sac", "point_random_goal"), ("hiro", "point_umaze")])
def test_resume_matches_uninterrupted_run(tmp_path, algo, env):
    full = config(tmp_path, "full", algo=algo, env=env, steps=40, eval_interval=10, checkpoint_interval=10)
    assert run_experiment(full) == 0
    part = config(tmp_path, "part", algo=algo, env=env, steps=20, eval_interval=10, checkpoint_interval=10)
    assert run_experiment(part) == 0
    rest = config(tmp_path, "part", algo=algo, env=env, steps=40, eval_interval=10, checkpoint_interval=10)
    assert run_experiment(rest, resume=True) == 0
    for name in ("metrics.csv", "train_log.csv", "checkpoint_00000040.bin"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes(), name


def test_save_load_save_is_identical(tmp_path):
    cfg = config(tmp_path)
    tr = build_trainer(cfg)
    tr.train(25)
    p1 = checkpoint_save(tmp_path / "a", tr)
    other = build_trainer(cfg)
    checkpoint_load(tmp_path / "a", other)
    p2 = checkpoint_save(tmp_path / "b", other)
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_old_checkpoints_are_pruned(tmp_path):
    tr = build_trainer(config(tmp_path))
    for _ in range(3):
        tr.train(5)
        checkpoint_save(tmp_path / "c", tr)
    assert sorted(p.name for p in (tmp_path / "c").glob("checkpoint_*.bin")) == \
        ["checkpoint_00000010.bin", "checkpoint_00000015.bin"]


def test_corrupt_manifest_names_the_field(tmp_path):
    tr = build_trainer(config(tmp_path))
    tr.train(12)
    checkpoint_save(tmp_path / "c", tr)
    path = tmp_path / "c" / "manifest.json"
    m = json.loads(path.read_text())
    del m["meta"]["streams"]
    path.write_text(json.dumps(m))
    with pytest.raises(ValueError, match="meta.streams"):
        read_manifest(tmp_path / "c")
    del m["tensors"]
    path.write_text(json.dumps(m))
    with pytest.raises(ValueError, match="tensors"):
        checkpoint_load(tmp_path / "c", build_trainer(config(tmp_path)))


def test_load_into_wrong_shaped_nets(tmp_path):
    tr = build_trainer(config(tmp_path))
    tr.train(12)
    checkpoint_save(tmp_path / "c", tr)
    wide = config(tmp_path, sac={**TINY_SAC, "critic_hidden": 9})
    with pytest.raises(ValueError, match="shape"):
        checkpoint_load(tmp_path / "c", build_trainer(wide))


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    from compose_rl import sac

    def boom(*args, **kwargs):
        raise sac.NumericalFailure("forced", {"loss": "q_loss"})

    monkeypatch.setattr(sac.SacTrainer, "update", boom)
    cfg = config(tmp_path)
    assert run_experiment(cfg) == harness.EXIT_NUMERIC
    assert json.loads((tmp_path / "run" / "failure.json").read_text())["snapshot"]["loss"] == "q_loss"


# ------------------------------------------------------------------ ablation

def test_ablate_writes_three_curves(tmp_path):
    cfg = config(tmp_path, "abl", steps=12, eval_interval=6, eval_episodes=1)
    report = ablate(cfg, [0])
    for v in harness.ABLATION_VARIANTS:
        assert (tmp_path / "abl" / f"curve_{v}.csv").exists()
        assert len(report["variants"][v]["auc"]) == 1
    assert json.loads((tmp_path / "abl" / "ablation.json").read_text())["seeds"] == [0]


def test_ablation_variants_share_env_randomness(tmp_path):
    cfg = config(tmp_path, "abl", steps=12, eval_interval=6, eval_episodes=1)
    ablate(cfg, [0], variants=("full", "no_attention"))
    goals = []
    for v in ("full", "no_attention"):
        rows = read_metrics(tmp_path / "abl" / v / "seed_0" / "metrics.csv")
        goals.append([r["final_distance"] / max(r["normalized_distance"], 1e-300) for r in rows])
    np.testing.assert_allclose(goals[0], goals[1], rtol=1e-12)


def test_learning_auc():
    assert learning_auc(np.array([0.0, 10.0]), np.array([1.0, 0.0])) == pytest.approx(0.5)
    assert learning_auc(np.array([5.0]), np.array([0.25])) == pytest.approx(0.75)
