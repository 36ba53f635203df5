import csv
import json

import jsonschema
import numpy as np
import pytest

from mpcmobo import experiment as ex
from mpcmobo.experiment import ConfigError, ExperimentConfig


def quick(mode="mobo", **kw):
    base = dict(mode=mode, episodes=1, steps=5, n_init=2, n_mc=64)
    base.update(kw)
    return ExperimentConfig(**base)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- configuration ---------------------------------------------------------


def test_default_config_is_valid():
    cfg = ExperimentConfig()
    assert cfg.n_theta == 14 and cfg.n_objectives == 4
    lo, hi = cfg.bounds()
    assert np.all(lo <= cfg.theta0()) and np.all(cfg.theta0() <= hi)


@pytest.mark.parametrize("bad", [
    {"mode": "sgd"}, {"problem": "pendulum"}, {"problem": "synthetic", "mode": "mpc-rl"}, {"episodes": 0},
    {"gamma": 1.5}, {"beta": 0.0}, {"seed": -1}, {"mpc_model": "learned"}, {"initial_theta": [0.0] * 3},
    {"params": {"not_a_param": 1.0}}, {"model_biases": {"nope": 1.0}},
    {"initial_box_lower": [110.0, 0.1, 430.0], "initial_box_upper": [100.0, 0.2, 440.0]},
])
def test_invalid_configs_are_rejected(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"episdoes": 3})


def test_load_with_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"mode": "bo", "episodes": 7, "gamma": 0.95}))
    cfg = ExperimentConfig.load(p, seed=4, episodes=None)
    assert (cfg.mode, cfg.episodes, cfg.gamma, cfg.seed) == ("bo", 7, 0.95, 4)
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


def test_input_hash_matches_git_blob_convention():
    assert ex.git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert ex.git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


# -- seeding and design ----------------------------------------------------


def test_streams_share_states_and_noise_across_modes():
    a, b = ex.CstrTask(quick("mobo")), ex.CstrTask(quick("mpc-rl"))
    for k in range(3):
        np.testing.assert_array_equal(a.initial_state(k), b.initial_state(k))
    assert not np.array_equal(a.initial_state(0), a.initial_state(1))
    other = ex.CstrTask(quick("mobo", seed=1))
    assert not np.array_equal(a.initial_state(0), other.initial_state(0))
    lo, hi = quick().initial_box()
    assert np.all(a.initial_state(5) >= lo) and np.all(a.initial_state(5) <= hi)


def test_initial_design():
    cfg = ExperimentConfig()
    D = ex.initial_design(cfg)
    assert D.shape == (9, 14)
    np.testing.assert_array_equal(D[0], cfg.theta0())
    lo, hi = cfg.bounds()
    assert np.all(D >= lo) and np.all(D <= hi)
    np.testing.assert_array_equal(D, ex.initial_design(cfg))
    assert not np.array_equal(D[1:], ex.initial_design(cfg.replace(seed=1))[1:])


# -- single runs ---------------------------------------------------------------


@pytest.mark.parametrize("mode", ex.MODES)
def test_one_episode_per_mode(mode, tmp_path):
    res = ex.run_experiment(quick(mode), tmp_path)
    assert len(res.archive) == 1 and res.status == "complete"
    rows = read_rows(tmp_path / "archive.csv")
    assert len(rows) == 1 and rows[0]["mode"] == mode
    assert float(rows[0]["f3"]) == 0.0
    assert len(read_rows(tmp_path / "pareto_trace.csv")) == 1
    assert (tmp_path / "episodes" / "ep_0.csv").exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    jsonschema.validate(manifest, ex.manifest_schema())
    assert manifest["final"]["episode"] == 0
    assert manifest["input_hash"] == ex.git_blob_hash(quick(mode).canonical_json().encode())


def test_single_step_episode():
    ev = ex.run_episode(quick(steps=1), quick().theta0())
    assert len(ev.log) == 1 and np.all(np.isfinite(ev.f))


def test_episodes_are_reproducible():
    cfg = quick()
    a = ex.run_episode(cfg, cfg.theta0(), 3)
    b = ex.run_episode(cfg, cfg.theta0(), 3)
    np.testing.assert_array_equal(a.f, b.f)
    np.testing.assert_array_equal(a.log.u, b.log.u)


def test_unsolvable_configuration_fails_initialization(tmp_path):
    cfg = quick(max_iter=1, episodes=3)
    with pytest.raises(ex.InitializationError):
        ex.run_experiment(cfg, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    jsonschema.validate(manifest, ex.manifest_schema())
    assert [int(r["episode"]) for r in read_rows(tmp_path / "failures.csv")] == [0, 1, 2]


def test_safety_rule():
    exp = ex.Experiment(quick("bo"))
    exp.state.archive.add(0, np.zeros(14), [2.0, 0.0, 0.0, 0.0])
    assert exp.safe(ex.Evaluation(np.array([20.0, 0, 0, 0])))
    assert not exp.safe(ex.Evaluation(np.array([20.1, 0, 0, 0])))


# -- synthetic problem -----------------------------------------------------------


def synthetic(mode="mobo", episodes=20, **kw):
    return ExperimentConfig(problem="synthetic", mode=mode, episodes=episodes, n_mc=128, **kw)


def test_synthetic_front_area():
    ref = ex.synthetic_reference()
    D2 = float(np.sum((ex.SYNTHETIC_A - ex.SYNTHETIC_B) ** 2))
    # the front f2 = (D - sqrt(f1))^2 encloses D^4 / 6 with the axes
    expected = ref[0] * ref[1] - D2 * D2 / 6
    assert ex.synthetic_max_hypervolume() == pytest.approx(expected, rel=1e-10)


def test_synthetic_hypervolume_trace_is_monotone(tmp_path):
    res = ex.run_experiment(synthetic(episodes=50), tmp_path)
    hv = [float(r["hypervolume"]) for r in read_rows(tmp_path / "pareto_trace.csv")]
    assert len(hv) == 50
    assert all(b >= a for a, b in zip(hv, hv[1:]))
    assert hv[-1] == pytest.approx(res.archive.hypervolume())
    assert hv[-1] <= ex.synthetic_max_hypervolume()


def test_bo_and_mobo_propose_differently():
    a = ex.run_experiment(synthetic("bo", episodes=11))
    b = ex.run_experiment(synthetic("mobo", episodes=11))
    np.testing.assert_array_equal(a.archive.thetas[:9], b.archive.thetas[:9])
    assert not np.allclose(a.archive.thetas[9:], b.archive.thetas[9:])


def test_resume_matches_an_uninterrupted_run(tmp_path):
    ex.run_experiment(synthetic(episodes=12), tmp_path / "r")
    ex.run_experiment(synthetic(episodes=15), tmp_path / "r")
    ex.run_experiment(synthetic(episodes=15), tmp_path / "r")
    fresh = ex.run_experiment(synthetic(episodes=15), tmp_path / "f")
    rows = read_rows(tmp_path / "r" / "archive.csv")
    assert [int(r["episode"]) for r in rows] == list(range(15))
    np.testing.assert_array_equal(ex.mobo.ParetoArchive.from_csv(tmp_path / "r" / "archive.csv").objectives,
                                  fresh.archive.objectives)


def test_gradient_mode_resume(tmp_path):
    cfg = quick("mpc-rl", episodes=3, steps=4)
    ex.run_experiment(cfg, tmp_path / "r")
    resumed = ex.run_experiment(cfg.replace(episodes=4), tmp_path / "r")
    fresh = ex.run_experiment(cfg.replace(episodes=4), tmp_path / "f")
    np.testing.assert_allclose(resumed.archive.thetas, fresh.archive.thetas, rtol=1e-12)
    np.testing.assert_allclose(resumed.archive.objectives, fresh.archive.objectives, rtol=1e-9)


def test_replay_reproduces_archived_objectives(tmp_path):
    ex.run_experiment(quick(episodes=2), tmp_path)
    rows = read_rows(tmp_path / "archive.csv")
    ep1 = tmp_path / "episodes" / "ep_1.csv"
    assert ex.previous_log_for(ep1) == tmp_path / "episodes" / "ep_0.csv"
    out = ex.replay_log(ep1, 0.99, 1.0, ex.previous_log_for(ep1))
    for m in ("f1", "f2", "f3", "f4"):
        assert out[m] == pytest.approx(float(rows[1][m]), rel=1e-12, abs=1e-12)
    assert ex.previous_log_for(tmp_path / "episodes" / "ep_0.csv") is None


def test_perfect_model_baseline_uses_the_run_states():
    cfg = quick(steps=4)
    base = ex.perfect_model_baseline(cfg, 2)
    assert base.shape == (2,) and np.all(base > 0)
    task = ex.CstrTask(cfg.replace(mpc_model="perfect"))
    assert base[1] == ex.objectives.f1(task.run_episode(cfg.theta0(), 1).log, cfg.gamma)
