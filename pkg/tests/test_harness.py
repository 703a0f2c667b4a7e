import json

import numpy as np
import pytest

from roomclear import cli, harness, map_path
from roomclear.floorplan import load_scenario
from roomclear.harness import (
    METRICS_HEADER,
    CheckpointMismatch,
    ConfigError,
    RunConfig,
    Trainer,
    checkpoint_path,
    evaluate_orders,
    freeze_fingerprint,
    pretrain_agents,
    read_metrics,
    read_trace,
    replay_check,
    run_eval,
    run_training,
    sample_pretrain_start,
)

from conftest import FIXTURES
from oracles import chi_square_uniform


def config(tmp_path=None, **kw):
    base = dict(scenario=map_path("loop4"), episodes=5, seed=3)
    base.update(kw)
    if tmp_path is not None:
        base["out"] = tmp_path
    return RunConfig(**base)


# --- configuration -------------------------------------------------------------


def test_mode_aliases_and_validation():
    assert config(agents_mode="scripted").agents_mode == "scripted"
    assert config(agents_mode="pretrain").agents_mode == "pretrain-then-freeze"
    with pytest.raises(ConfigError):
        config(algo="joint-tabular", agents_mode="scripted")
    with pytest.raises(ConfigError):
        config(algo="sarsa")
    with pytest.raises(ConfigError):
        config(episodes=-1)


def test_scoped_hyperparameters():
    cfg = config(hp={"lr": "0.01", "commander.lr": "0.5", "agent.gamma": "0.5"})
    assert cfg.hparams("commander").lr == 0.5
    assert cfg.hparams("agent").lr == 0.01 and cfg.hparams("agent").gamma == 0.5


def test_reward_override():
    assert config(reward="sparse").load().reward.kind == "sparse"
    assert config(reward="death_penalty:3").load().reward.death_penalty == 3.0
    with pytest.raises(ConfigError):
        config(reward="bogus").load()


# --- metrics and traces ---------------------------------------------------------


def test_zero_episodes_writes_header_only(tmp_path):
    assert run_training(config(tmp_path, episodes=0)) == []
    text = (tmp_path / "feudal-tabular-3.metrics.csv").read_text()
    assert text == ",".join(METRICS_HEADER) + "\n"
    assert not list(tmp_path.glob("*.ckpt"))


def test_metrics_schema_and_wallclock(tmp_path):
    history = run_training(config(tmp_path))
    rows = read_metrics(tmp_path / "feudal-tabular-3.metrics.csv")
    assert list(rows[0]) == METRICS_HEADER
    assert [int(r["episode"]) for r in rows] == list(range(5))
    assert all(r["wallclock_ms"] == "0.000" for r in rows)
    assert [int(r["steps"]) for r in rows] == [m.steps for m in history]
    timed = run_training(config(None, timing=True, episodes=2))
    assert all(m.wallclock_ms > 0 for m in timed)


def test_identical_runs_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        run_training(config(tmp_path / name, trace=True, episodes=8, algo="feudal-ddqn"))
    for f in ("feudal-ddqn-3.metrics.csv", "feudal-ddqn-3.trace.jsonl", "feudal-ddqn-3-ep8.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_different_seeds_differ(tmp_path):
    run_training(config(tmp_path, trace=True, seed=1, episodes=5))
    run_training(config(tmp_path, trace=True, seed=2, episodes=5))
    a = (tmp_path / "feudal-tabular-1.trace.jsonl").read_text()
    b = (tmp_path / "feudal-tabular-2.trace.jsonl").read_text()
    assert a != b


def test_trace_has_one_line_per_step_plus_initial(tmp_path):
    history = run_training(config(tmp_path, trace=True, scenario=FIXTURES / "duel.txt"))
    records = read_trace(tmp_path / "feudal-tabular-3.trace.jsonl")
    for m in history:
        mine = [r for r in records if r["episode"] == m.episode]
        assert len(mine) == m.steps + 1
        assert mine[0]["t"] == 0 and mine[0]["actions"] is None
    fields = {"t", "agents", "enemies", "civilians", "u", "orders", "actions", "reward", "events"}
    assert fields <= set(records[0])


def test_replay_check_reproduces_and_detects_tampering(tmp_path):
    sc_path = FIXTURES / "duel.txt"
    run_training(config(tmp_path, trace=True, scenario=sc_path, episodes=4))
    records = read_trace(tmp_path / "feudal-tabular-3.trace.jsonl")
    sc = load_scenario(sc_path)
    assert replay_check(sc, records) == []
    records[2]["u"] = [1 - b for b in records[2]["u"]]
    assert replay_check(sc, records)


# --- checkpoints ---------------------------------------------------------------


def test_checkpoint_naming_and_periodic_saves(tmp_path):
    run_training(config(tmp_path, episodes=5, checkpoint_every=2))
    names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
    assert names == ["feudal-tabular-3-ep2.ckpt", "feudal-tabular-3-ep4.ckpt", "feudal-tabular-3-ep5.ckpt"]
    assert checkpoint_path(tmp_path, "feudal-ddqn", 7, 12).name == "feudal-ddqn-7-ep12.ckpt"
    head = json.loads((tmp_path / "feudal-tabular-3-ep4.ckpt").read_text().splitlines()[0])
    assert head["episode"] == 4 and head["seed"] == 3


def test_checkpoint_scenario_mismatch(tmp_path):
    run_training(config(tmp_path, episodes=1))
    other = Trainer(config(scenario=map_path("corridors7")))
    with pytest.raises(CheckpointMismatch):
        other.load(tmp_path / "feudal-tabular-3-ep1.ckpt")


def test_eval_loads_trained_checkpoint(tmp_path):
    cfg = config(tmp_path, episodes=30, eval_episodes=3)
    trainer = Trainer(cfg)
    run_training(cfg, trainer=trainer)
    direct = run_eval(config(None, eval_episodes=3), trainer=trainer)
    loaded = run_eval(cfg, [tmp_path / "feudal-tabular-3-ep30.ckpt"])
    assert direct == loaded
    assert json.loads((tmp_path / "feudal-tabular-3-eval.json").read_text()) == loaded


# --- evaluation -----------------------------------------------------------------


def test_greedy_eval_has_zero_variance():
    cfg = config(scenario=map_path("sync2"), agents_mode="scripted", episodes=20, eval_episodes=5)
    trainer = Trainer(cfg)
    run_training(cfg, trainer=trainer)
    summary = run_eval(cfg, trainer=trainer)
    assert summary["return"]["sd"] == 0.0
    if summary["success_rate"]:
        assert summary["steps_to_clear"]["sd"] == 0.0


def test_summary_fields():
    m = [harness.EpisodeMetrics(k, 10 + k, 1.0, k < 2, 0, True, 3, 1.0) for k in range(3)]
    s = harness.summarize(m)
    assert s["success_rate"] == pytest.approx(2 / 3)
    assert s["steps_to_clear"] == {"mean": 10.5, "median": 10.5, "sd": 0.5}
    assert s["civilian_survival_rate"] == 1.0


def test_rolling_success_and_first_hit():
    h = [harness.EpisodeMetrics(k, 1, 0.0, k >= 5, 0, True, 1, 1.0) for k in range(20)]
    roll = harness.rolling_success(h, window=10)
    assert roll[0] == 0.5 and roll[-1] == 1.0
    assert harness.episodes_to_rate(h, 1.0, window=10) == 15
    assert harness.episodes_to_rate(h[:5], 0.5, window=10) is None


def test_stop_rate_ends_training_early():
    cfg = config(agents_mode="scripted", episodes=50, stop_rate=0.0, stop_window=4)
    assert len(run_training(cfg)) == 4


# --- update parity and freezing ----------------------------------------------------


@pytest.mark.parametrize("algo", ["feudal-tabular", "feudal-ddqn"])
def test_one_update_per_push(algo):
    cfg = config(algo=algo, episodes=6, hp={"batch_size": "8"})
    trainer = Trainer(cfg)
    warm = 0 if algo == "feudal-tabular" else 8 - 1
    for k in range(cfg.episodes):
        trainer.episode(k)
        for role in (trainer.commander, trainer.agent):
            learner = role.learner
            assert learner.train_steps == max(0, learner.pushes - warm)
    assert trainer.commander.learner.pushes > 0 and trainer.agent.learner.pushes > 0


def test_joint_learner_updates_every_step():
    trainer = Trainer(config(algo="joint-tabular", episodes=3))
    steps = sum(trainer.episode(k).steps for k in range(3))
    assert trainer.joint.learner.pushes == trainer.joint.learner.train_steps == steps


def test_frozen_agents_stay_bitwise_constant(tmp_path):
    pre = pretrain_agents(config(tmp_path, pretrain_episodes=300))
    cfg = config(agents_mode="pretrain", agent_checkpoint=pre.checkpoint, episodes=10)
    trainer = Trainer(cfg)
    before = freeze_fingerprint(trainer.agent)
    assert before == freeze_fingerprint(pre.learner)
    pushes = trainer.agent.learner.pushes
    for k in range(cfg.episodes):
        trainer.episode(k)
    assert freeze_fingerprint(trainer.agent) == before
    assert trainer.agent.learner.pushes == pushes
    assert trainer.commander.learner.pushes > 0


# --- pre-training ---------------------------------------------------------------


def test_pretrain_spawn_rooms_uniform():
    sc = load_scenario(map_path("office15"))
    rng = np.random.default_rng(11)
    counts = np.zeros(sc.floorplan.m)
    for _ in range(10_000):
        room, cell = sample_pretrain_start(sc, rng)
        assert cell in sc.floorplan.rooms[room].cells
        counts[room] += 1
    stat, bound = chi_square_uniform(counts)
    assert stat < bound


def test_zero_threshold_stops_after_first_window(tmp_path):
    res = pretrain_agents(config(tmp_path, pretrain_threshold=0.0, pretrain_window=50))
    assert res.episodes == 50 and res.reached
    assert res.checkpoint.name == "feudal-tabular-3-pretrain.ckpt"


def test_exhausted_budget_is_reported(tmp_path):
    res = pretrain_agents(config(tmp_path, pretrain_episodes=20, pretrain_window=50))
    assert res.episodes == 20 and not res.reached and res.checkpoint.exists()


def test_pretrain_rejects_joint():
    with pytest.raises(ConfigError):
        pretrain_agents(config(algo="joint-tabular"))


def test_pretrained_tabular_agent_completes_orders():
    cfg = config(scenario=map_path("loop4"), pretrain_episodes=20_000, seed=0)
    res = pretrain_agents(cfg)
    assert res.reached
    rate = evaluate_orders(cfg.load(), lambda obs: res.learner.act(obs, None, False), 1000, seed=1)
    assert rate >= 0.95


# --- command line ---------------------------------------------------------------


def test_cli_train_eval_and_replay(tmp_path, capsys):
    out = str(tmp_path)
    sc = str(FIXTURES / "duel.txt")
    assert cli.main(["train", "--scenario", sc, "--episodes", "3", "--out", out, "--trace", "--seed", "1"]) == 0
    assert (tmp_path / "feudal-tabular-1.metrics.csv").exists()
    trace = str(tmp_path / "feudal-tabular-1.trace.jsonl")
    assert cli.main(["replay-check", "--scenario", sc, "--trace-file", trace]) == 0
    assert "replay ok" in capsys.readouterr().out
    ckpt = str(tmp_path / "feudal-tabular-1-ep3.ckpt")
    assert cli.main(["eval", "--scenario", sc, "--checkpoint", ckpt, "--eval-episodes", "2", "--out", out, "--seed", "1"]) == 0
    assert json.loads((tmp_path / "feudal-tabular-1-eval.json").read_text())["episodes"] == 2


def test_cli_replay_mismatch_exit_code(tmp_path):
    sc = str(FIXTURES / "duel.txt")
    assert cli.main(["train", "--scenario", sc, "--episodes", "1", "--out", str(tmp_path), "--trace"]) == 0
    path = tmp_path / "feudal-tabular-0.trace.jsonl"
    records = read_trace(path)
    records[-1]["reward"] += 1.0
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    assert cli.main(["replay-check", "--scenario", sc, "--trace-file", str(path)]) == 1


def test_cli_errors_exit_2(tmp_path, capsys):
    assert cli.main(["train", "--scenario", str(tmp_path / "missing.txt"), "--episodes", "1"]) == 2
    assert cli.main(["train", "--scenario", str(map_path("loop4")), "--reward", "bogus", "--episodes", "1"]) == 2
    assert cli.main(["train", "--scenario", str(map_path("loop4")), "--algo", "joint-tabular", "--agents-mode", "scripted"]) == 2
    assert "error:" in capsys.readouterr().err
    run_training(config(tmp_path, episodes=1))
    ckpt = str(tmp_path / "feudal-tabular-3-ep1.ckpt")
    assert cli.main(["eval", "--scenario", str(map_path("corridors7")), "--checkpoint", ckpt]) == 2


def test_cli_reward_flag_changes_returns(tmp_path):
    sc = str(map_path("loop4"))
    common = ["train", "--scenario", sc, "--episodes", "3", "--agents-mode", "scripted"]
    assert cli.main(common + ["--out", str(tmp_path / "d")]) == 0
    assert cli.main(common + ["--out", str(tmp_path / "s"), "--reward", "default"]) == 0
    d = read_metrics(tmp_path / "d" / "feudal-tabular-0.metrics.csv")
    s = read_metrics(tmp_path / "s" / "feudal-tabular-0.metrics.csv")
    assert [r["steps"] for r in d] == [r["steps"] for r in s]
    assert [r["return"] for r in d] != [r["return"] for r in s]


def test_cli_pretrain(tmp_path, capsys):
    argv = ["pretrain", "--scenario", str(map_path("loop4")), "--episodes", "600", "--threshold", "0", "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    assert (tmp_path / "feudal-tabular-0-pretrain.ckpt").exists()
    assert "500 orders" in capsys.readouterr().out
