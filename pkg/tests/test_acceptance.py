"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The learning criteria train real agents and take minutes; they carry the
``slow`` marker so ``pytest -m "not slow"`` skips them.
"""

import statistics
import time

import numpy as np
import pytest

from roomclear import map_path
from roomclear.clearance import oracle_propagate_bfs, propagate_unclear, propagate_unclear_counted
from roomclear.engine import Event, env_reward, reset
from roomclear.feudal import OrderOutcome, agent_reward
from roomclear.floorplan import RewardConfig, parse_scenario
from roomclear.harness import (
    RunConfig,
    Trainer,
    episodes_to_rate,
    read_trace,
    replay_check,
    rolling_success,
    run_training,
)

from oracles import chain_q_learning, chain_value_iteration, gradient_check

SEEDS = (0, 1, 2)


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, detail


def random_instances(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        m = int(rng.integers(1, 21))
        upper = np.triu(rng.random((m, m)) < rng.uniform(0.05, 0.5), 1)
        A = (upper | upper.T).astype(int)
        out.append((A, rng.integers(0, 2, m), rng.integers(0, 2, m)))
    return out


def median_or_none(xs):
    """Median where ``None`` (never reached) counts as infinitely late."""
    vals = sorted(float("inf") if x is None else x for x in xs)
    mid = vals[len(vals) // 2]
    return None if mid == float("inf") else mid


def greedy_eval(trainer, n):
    return [trainer.episode(k, explore=False) for k in range(n)]


def train_then_eval(scenario, reward, seed, episodes, hp, n_eval=100):
    cfg = RunConfig(scenario=map_path(scenario), agents_mode="scripted", episodes=episodes, seed=seed, hp=hp, reward=reward)
    trainer = Trainer(cfg)
    run_training(cfg, trainer=trainer)
    return greedy_eval(trainer, n_eval)


# --- 1-4: oracle checks -------------------------------------------------------------


def test_criterion_1_clearance_oracle(capsys):
    cases = random_instances(1000, seed=2024)
    t0 = time.perf_counter()
    results = [propagate_unclear(A, u, v) for A, u, v in cases]
    elapsed = time.perf_counter() - t0
    mismatches = sum(not np.array_equal(r, oracle_propagate_bfs(A, u, v)) for r, (A, u, v) in zip(results, cases))
    ok = mismatches == 0 and elapsed < 1.0
    report(capsys, "criterion 1 (clearance oracle)", ok, f"{mismatches} mismatches in 1000 instances, {elapsed:.3f}s")


def test_criterion_2_fixed_point_bound(capsys):
    worst = 0
    for A, u, v in random_instances(1000, seed=2024):
        _, iterations = propagate_unclear_counted(A, u, v)
        worst = max(worst, iterations - len(u))
    report(capsys, "criterion 2 (fixed point within m iterations)", worst <= 0, f"max iterations minus m = {worst}")


def test_criterion_3_gradient_check(capsys):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = max(gradient_check(rng, h=1e-5) for _ in range(100))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10.0
    report(capsys, "criterion 3 (gradient check)", ok, f"max relative error {worst:.2e} over 100 nets, {elapsed:.2f}s")


def test_criterion_4_value_iteration(capsys):
    t0 = time.perf_counter()
    err = float(np.abs(chain_q_learning(alpha=0.5, gamma=0.9) - chain_value_iteration(0.9)).max())
    elapsed = time.perf_counter() - t0
    ok = err < 1e-6 and elapsed < 1.0
    report(capsys, "criterion 4 (Q-learning vs value iteration)", ok, f"max error {err:.2e}, {elapsed:.3f}s")


# --- 5-8: learning experiments ---------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_feudal_vs_joint(capsys):
    t0 = time.perf_counter()
    hp = {"eps_decay": "20000"}
    feudal = []
    for seed in SEEDS:
        cfg = RunConfig(scenario=map_path("loop4"), algo="feudal-tabular", episodes=5000, seed=seed, hp=hp, stop_rate=0.95)
        feudal.append(episodes_to_rate(run_training(cfg), 0.95))
    f_med = median_or_none(feudal)
    # the joint learner only has to be run until it is 20x behind
    budget = min(100_000, 20 * f_med) if f_med is not None else 100_000
    joint = []
    for seed in SEEDS:
        cfg = RunConfig(scenario=map_path("loop4"), algo="joint-tabular", episodes=int(budget), seed=seed, hp=hp, stop_rate=0.95)
        joint.append(episodes_to_rate(run_training(cfg), 0.95))
    j_med = median_or_none(joint)
    elapsed = time.perf_counter() - t0
    separated = f_med is not None and (j_med is None or j_med >= 20 * f_med)
    ok = f_med is not None and f_med <= 5000 and separated
    detail = f"feudal episodes to 95% {feudal} (median {f_med}); joint {joint} within {int(budget)} (None = not reached); {elapsed:.0f}s"
    report(capsys, "criterion 5 (feudal vs joint-action)", ok, detail)


@pytest.mark.slow
def test_criterion_6_ddqn_scaling(capsys):
    t0 = time.perf_counter()
    tab_peak = []
    for seed in SEEDS:
        # stop as soon as the rolling rate exceeds 50%, which already decides the seed
        cfg = RunConfig(scenario=map_path("corridors7"), algo="feudal-tabular", episodes=20_000, seed=seed, stop_rate=0.51)
        roll = rolling_success(run_training(cfg))
        tab_peak.append(float(roll.max()) if len(roll) else 0.0)
    ddqn = []
    hp = {"commander.eps_decay": "15000", "commander.eps_end": "0.02"}
    for seed in SEEDS:
        cfg = RunConfig(scenario=map_path("corridors7"), algo="feudal-ddqn", agents_mode="scripted", episodes=3000, seed=seed, hp=hp, stop_rate=0.9)
        ddqn.append(episodes_to_rate(run_training(cfg), 0.9))
    elapsed = time.perf_counter() - t0
    tab_med = statistics.median(tab_peak)
    d_med = median_or_none(ddqn)
    ok = tab_med <= 0.5 and d_med is not None and d_med <= 3000 and elapsed <= 1800
    detail = f"feudal-tabular peak rolling success {tab_peak}; feudal-ddqn episodes to 90% {ddqn} (median {d_med}); {elapsed:.0f}s"
    report(capsys, "criterion 6 (DDQN scaling)", ok, detail)


@pytest.mark.slow
def test_criterion_7_command_synchronisation(capsys):
    t0 = time.perf_counter()
    hp = {"commander.eps_decay": "10000"}
    deaths, zero_death = [], []
    for seed in SEEDS:
        ev = train_then_eval("sync2", "default", seed, 2000, hp)
        deaths.append(statistics.fmean(m.agent_deaths for m in ev))
        ev = train_then_eval("sync2", "death_penalty:10", seed, 2000, hp)
        zero_death.append(sum(m.agent_deaths == 0 for m in ev) / len(ev))
    elapsed = time.perf_counter() - t0
    ok = statistics.median(deaths) >= 1.0 and statistics.median(zero_death) >= 0.9 and elapsed <= 1800
    detail = f"default reward deaths per episode {deaths}; death-penalty zero-death fraction {zero_death}; {elapsed:.0f}s"
    report(capsys, "criterion 7 (command synchronisation)", ok, detail)


@pytest.mark.slow
def test_criterion_8_civilian_rescue(capsys):
    t0 = time.perf_counter()
    hp = {"commander.eps_decay": "30000"}
    results = {}
    for reward in ("default", "civilian"):
        survival, steps = [], []
        for seed in SEEDS:
            ev = train_then_eval("gunman9", reward, seed, 5000, hp)
            survival.append(sum(m.civilian_alive for m in ev) / len(ev))
            cleared = [m.steps for m in ev if m.success]
            steps.append(statistics.fmean(cleared) if cleared else float("inf"))
        results[reward] = (statistics.median(survival), statistics.median(steps), survival, steps)
    elapsed = time.perf_counter() - t0
    d_surv, d_steps, *_ = results["default"]
    c_surv, c_steps, *_ = results["civilian"]
    ok = c_surv >= 0.9 and d_surv < 0.5 and d_steps < c_steps and elapsed <= 1800
    detail = (
        f"civilian reward survival {results['civilian'][2]} steps {results['civilian'][3]}; "
        f"default reward survival {results['default'][2]} steps {results['default'][3]}; {elapsed:.0f}s"
    )
    report(capsys, "criterion 8 (civilian rescue)", ok, detail)


# --- 9-10: determinism and rewards ------------------------------------------------------


def test_criterion_9_determinism(capsys, tmp_path):
    files = ("feudal-ddqn-5.metrics.csv", "feudal-ddqn-5.trace.jsonl")
    for name in ("a", "b"):
        cfg = RunConfig(scenario=map_path("sync2"), algo="feudal-ddqn", episodes=20, seed=5, out=tmp_path / name, trace=True)
        run_training(cfg)
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    problems = replay_check(cfg.load(), read_trace(tmp_path / "a" / files[1]))
    ok = same and not problems
    report(capsys, "criterion 9 (determinism and replay)", ok, f"byte-identical={same}, replay mismatches={len(problems)}")


def _chain(m, reward="default"):
    row = "#A" + "+." * (m - 1) + "#"
    wall = "#" * len(row)
    return parse_scenario(f"[map]\n{wall}\n{row}\n{wall}\n[meta]\nreward={reward}\n")


def _with_clear(sc, n_clear):
    world = reset(sc)
    u = np.ones(sc.floorplan.m, dtype=int)
    u[:n_clear] = 0
    world.clearance = type(world.clearance)(u, world.clearance.v)
    return world


def test_criterion_10_reward_suite(capsys):
    checks = {
        "agent complete +10": agent_reward(OrderOutcome.COMPLETED) == 10.0,
        "agent wrong door -10": agent_reward(OrderOutcome.FAILED_WRONG_DOOR) == -10.0,
        "agent in progress 0": agent_reward(OrderOutcome.IN_PROGRESS) == 0.0,
        "agent timeout 0": agent_reward(OrderOutcome.FAILED_TIMEOUT) == 0.0,
    }
    sc = _chain(8)
    checks["default, none clear -1"] = env_reward(_with_clear(sc, 0), [], RewardConfig("default"), 10.0) == -1.0
    checks["default, 6 of 8 clear -0.25"] = env_reward(_with_clear(sc, 6), [], RewardConfig("default"), 10.0) == -0.25
    done = _with_clear(sc, 8)
    done.done, done.done_reason = True, "cleared"
    checks["default, building clear R_complete"] = env_reward(done, [], RewardConfig("default"), 10.0) == 10.0
    checks["sparse, building clear R_complete"] = env_reward(done, [], RewardConfig("sparse"), 10.0) == 10.0
    sc = _chain(4, "civilian")
    checks["civilian death -R_complete"] = env_reward(_with_clear(sc, 1), [Event("civilian_died", 0)], RewardConfig("civilian"), 10.0) == -10.0
    checks["civilian alive -1 + 1/4"] = env_reward(_with_clear(sc, 1), [], RewardConfig("civilian"), 10.0) == -0.75
    failed = [k for k, v in checks.items() if not v]
    report(capsys, "criterion 10 (reward functions)", not failed, f"{len(checks) - len(failed)}/{len(checks)} cases exact; failing: {failed}")


# --- smoke test on the 15-room plan ---------------------------------------------------


@pytest.mark.slow
def test_smoke_fifteen_room_plan(capsys):
    t0 = time.perf_counter()
    cfg = RunConfig(scenario=map_path("office15"), algo="feudal-ddqn", agents_mode="scripted", episodes=500, seed=0)
    sc = cfg.load()
    history = run_training(cfg)
    first = statistics.median(m.ret for m in history[:100])
    last = statistics.median(m.ret for m in history[-100:])
    ok = sc.floorplan.m == 15 and len(sc.agent_spawns) == 4 and len(history) == 500 and last > first
    detail = f"median return first 100 {first:.2f}, last 100 {last:.2f}; {time.perf_counter() - t0:.0f}s"
    report(capsys, "smoke (15 rooms, 4 scripted agents, 500 episodes)", ok, detail)
