"""Training orchestration, pre-training, evaluation, metrics and traces."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import statistics
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .baseline import JointActionAgent, joint_action_count, primitive_actions
from .engine import Action, env_step, reset
from .feudal import (
    FeudalEpisode,
    OrderOutcome,
    Transition,
    agent_obs_size,
    agent_reward,
    commander_obs_size,
    encode_agent_obs,
    make_order,
    n_order_slots,
    order_space,
    order_status,
    scripted_agent_policy,
)
from .floorplan import RewardConfig, Scenario, load_scenario
from .learn import DDQNLearner, Hyperparams, TabularLearner, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

ALGOS = ("feudal-tabular", "feudal-ddqn", "joint-tabular")
AGENT_MODES = {"learned": "learned-concurrent", "pretrain": "pretrain-then-freeze", "scripted": "scripted"}
METRICS_HEADER = ["episode", "steps", "return", "success", "agent_deaths", "civilian_alive", "orders_issued", "order_success_rate", "wallclock_ms"]
N_AGENT_ACTIONS = len(Action)


class ConfigError(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str | Path | Scenario
    algo: str = "feudal-tabular"
    agents_mode: str = "learned-concurrent"
    episodes: int = 1000
    seed: int = 0
    hp: dict = field(default_factory=dict)  # "key", "commander.key" or "agent.key"
    out: str | Path | None = None
    trace: bool = False
    timing: bool = False
    eval_episodes: int = 10
    checkpoint_every: int = 0  # 0: only at the end
    agent_checkpoint: str | Path | None = None  # frozen agents for pretrain mode
    pretrain_episodes: int = 20_000
    pretrain_threshold: float = 0.95
    pretrain_window: int = 500
    stop_rate: float | None = None  # stop once the rolling success rate reaches this
    stop_window: int = 100
    reward: str | None = None  # overrides the scenario's reward config

    def __post_init__(self):
        self.agents_mode = AGENT_MODES.get(self.agents_mode, self.agents_mode)
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algorithm {self.algo!r}")
        if self.agents_mode not in AGENT_MODES.values():
            raise ConfigError(f"unknown agents mode {self.agents_mode!r}")
        if self.algo == "joint-tabular" and self.agents_mode != "learned-concurrent":
            raise ConfigError("pretrain and scripted agent modes need a feudal algorithm")
        if self.episodes < 0:
            raise ConfigError("episodes must be non-negative")

    def load(self) -> Scenario:
        sc = self.scenario if isinstance(self.scenario, Scenario) else load_scenario(self.scenario)
        if self.reward is not None:
            try:
                sc = dataclasses.replace(sc, reward=RewardConfig.parse(self.reward))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return sc

    def hparams(self, role: str) -> Hyperparams:
        plain = {k: v for k, v in self.hp.items() if "." not in k}
        scoped = {k.split(".", 1)[1]: v for k, v in self.hp.items() if k.startswith(role + ".")}
        return Hyperparams().override(**{**plain, **scoped})

    @property
    def tabular(self) -> bool:
        return self.algo in ("feudal-tabular", "joint-tabular")


@dataclass
class EpisodeMetrics:
    episode: int
    steps: int
    ret: float
    success: bool
    agent_deaths: int
    civilian_alive: bool
    orders_issued: int
    order_success_rate: float
    wallclock_ms: float = 0.0

    def row(self) -> list[str]:
        return [
            str(self.episode),
            str(self.steps),
            f"{self.ret:.6f}",
            str(int(self.success)),
            str(self.agent_deaths),
            str(int(self.civilian_alive)),
            str(self.orders_issued),
            f"{self.order_success_rate:.6f}",
            f"{self.wallclock_ms:.3f}",
        ]


# -- learners -----------------------------------------------------------------


def _rngs(seed: int) -> dict:
    names = ("commander", "agent", "pretrain", "joint")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


class Role:
    """Adapter between the feudal driver's observations and a learner."""

    def __init__(self, learner, tabular: bool):
        self.learner = learner
        self.tabular = tabular

    def view(self, obs):
        if obs is None:
            return () if self.tabular else None
        return obs.key() if self.tabular else obs.vector()

    def act(self, obs, mask=None, explore=True) -> int:
        return self.learner.act(self.view(obs), mask, explore)

    def observe(self, t: Transition) -> None:
        self.learner.observe(Transition(self.view(t.s), t.a, t.r, self.view(t.s_next), t.done, t.next_mask))


def make_commander(config: RunConfig, scenario: Scenario, rng) -> Role:
    hp = config.hparams("commander")
    n = n_order_slots(scenario)
    if config.algo == "feudal-tabular":
        return Role(TabularLearner(n, hp, rng), True)
    return Role(DDQNLearner(commander_obs_size(scenario), n, hp, rng), False)


def make_agent_learner(config: RunConfig, scenario: Scenario, rng) -> Role:
    hp = config.hparams("agent")
    if config.algo == "feudal-tabular":
        return Role(TabularLearner(N_AGENT_ACTIONS, hp, rng), True)
    return Role(DDQNLearner(agent_obs_size(scenario), N_AGENT_ACTIONS, hp, rng), False)


def make_joint(config: RunConfig, scenario: Scenario, rng) -> JointActionAgent:
    k = len(primitive_actions(scenario))
    n = len(scenario.agent_spawns)
    return JointActionAgent(scenario, TabularLearner(joint_action_count(k, n), config.hparams("joint"), rng))


# -- io -----------------------------------------------------------------------


def write_metrics(path, records: Iterable[EpisodeMetrics]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow(r.row())


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def trace_record(world, actions, reward, events, orders, episode: int) -> dict:
    snap = world.snapshot()
    return {
        "episode": episode,
        "t": snap["t"],
        "agents": snap["agents"],
        "enemies": snap["enemies"],
        "civilians": snap["civilians"],
        "u": snap["u"],
        "orders": {
            str(i): {"kind": o.kind, "door": o.door, "slot": o.slot, "issued_at": o.issued_at, "deadline": o.deadline, "approach": o.approach}
            for i, o in sorted(orders.items())
        },
        "actions": None if actions is None else {str(i): Action(a).name.lower() for i, a in sorted(actions.items())},
        "reward": reward,
        "events": [[e.kind, e.id] for e in events],
    }


def write_trace(path, records: Iterable[dict], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay_check(scenario: Scenario, records: list[dict]) -> list[str]:
    """Re-simulate every traced episode from its actions; returns mismatches."""
    problems = []
    episodes: dict[int, list] = {}
    for rec in records:
        episodes.setdefault(rec.get("episode", 0), []).append(rec)
    fields = ("t", "agents", "enemies", "civilians", "u")
    for ep, recs in sorted(episodes.items()):
        world = reset(scenario)
        snap = world.snapshot()
        for f in fields:
            if snap[f] != recs[0][f]:
                problems.append(f"episode {ep} t=0: {f} differs")
        for rec in recs[1:]:
            if world.done:
                problems.append(f"episode {ep}: trace continues after the episode ended")
                break
            actions = {int(i): Action[name.upper()] for i, name in rec["actions"].items()}
            world, reward, events = env_step(world, actions)
            snap = world.snapshot()
            for f in fields:
                if snap[f] != rec[f]:
                    problems.append(f"episode {ep} t={rec['t']}: {f} differs")
            if reward != rec["reward"]:
                problems.append(f"episode {ep} t={rec['t']}: reward {reward} != {rec['reward']}")
            if [[e.kind, e.id] for e in events] != rec["events"]:
                problems.append(f"episode {ep} t={rec['t']}: events differ")
    return problems


def _header(config: RunConfig, scenario: Scenario, episode: int) -> dict:
    return {
        "algo": config.algo,
        "agents_mode": config.agents_mode,
        "seed": config.seed,
        "episode": episode,
        "scenario_hash": scenario.hash,
        "hparams": {role: config.hparams(role).to_dict() for role in ("commander", "agent", "joint")},
    }


def checkpoint_path(out, algo: str, seed: int, episode: int) -> Path:
    return Path(out) / f"{algo}-{seed}-ep{episode}.ckpt"


# -- agent sub-episodes and pre-training ----------------------------------------


def run_order(world, agent_id: int, slot: int, act, on_agent=None) -> OrderOutcome:
    """Run one agent sub-episode on its own; returns the order outcome."""
    agent = world.agents[agent_id]
    order = make_order(world, agent, slot)
    outcome = OrderOutcome.IN_PROGRESS
    while not world.done and not outcome.terminal:
        obs = encode_agent_obs(world, agent, order)
        a = act(obs)
        before = agent.cell
        env_step(world, {agent_id: a})
        if not agent.alive:
            if on_agent:
                on_agent(Transition(obs, int(a), 0.0, encode_agent_obs(world, agent, order), True))
            return OrderOutcome.FAILED_TIMEOUT
        outcome = order_status(agent, order, world, before)
        if on_agent:
            on_agent(Transition(obs, int(a), agent_reward(outcome), encode_agent_obs(world, agent, order), outcome.terminal))
    return outcome


def sample_pretrain_start(scenario: Scenario, rng) -> tuple[int, tuple[int, int]]:
    """Uniform room, then a uniform floor cell inside it."""
    fp = scenario.floorplan
    room = int(rng.integers(fp.m))
    cells = sorted(fp.rooms[room].cells, key=lambda c: (c[1], c[0]))
    return room, cells[int(rng.integers(len(cells)))]


def random_order_trial(scenario: Scenario, rng, act, on_agent=None) -> tuple[OrderOutcome, int]:
    """One enemy-free sub-episode with a random start and a random valid order."""
    _, cell = sample_pretrain_start(scenario, rng)
    world = reset(scenario, agent_cells=[cell], with_enemies=False)
    world.done = False  # a one-agent sweep may already count as clear; keep stepping
    valid = np.flatnonzero(order_space(world, world.agents[0]))
    slot = int(valid[rng.integers(len(valid))])
    return run_order(world, 0, slot, act, on_agent), slot


@dataclass
class PretrainResult:
    episodes: int
    success_rate: float
    reached: bool
    checkpoint: Path | None
    learner: Role


def pretrain_agents(config: RunConfig, scenario: Scenario | None = None) -> PretrainResult:
    """Train the shared agent learner on random single-agent orders.

    Stops once the success rate over the last ``pretrain_window`` orders
    reaches ``pretrain_threshold``, or when the episode budget runs out.
    """
    if config.algo not in ("feudal-tabular", "feudal-ddqn"):
        raise ConfigError("pre-training needs a feudal algorithm")
    scenario = scenario or config.load()
    rngs = _rngs(config.seed)
    role = make_agent_learner(config, scenario, rngs["agent"])
    window: deque = deque(maxlen=config.pretrain_window)
    rate, n = 0.0, 0
    for n in range(1, config.pretrain_episodes + 1):
        outcome, _ = random_order_trial(scenario, rngs["pretrain"], role.act, role.observe)
        window.append(outcome is OrderOutcome.COMPLETED)
        if len(window) == window.maxlen:
            rate = sum(window) / len(window)
            if rate >= config.pretrain_threshold:
                break
    reached = len(window) == window.maxlen and rate >= config.pretrain_threshold
    if not reached:
        log.warning("pre-training budget exhausted at success rate %.3f", rate)
    path = None
    if config.out is not None:
        os.makedirs(config.out, exist_ok=True)
        path = Path(config.out) / f"{config.algo}-{config.seed}-pretrain.ckpt"
        save_checkpoint(path, {"agent": role.learner}, _header(config, scenario, n))
    return PretrainResult(n, rate, reached, path, role)


def evaluate_orders(scenario: Scenario, act, n: int, seed: int = 0) -> float:
    """Fraction of ``n`` random enemy-free orders the policy completes."""
    rng = np.random.default_rng(seed)
    done = sum(random_order_trial(scenario, rng, act)[0] is OrderOutcome.COMPLETED for _ in range(n))
    return done / n


# -- training -------------------------------------------------------------------


class Trainer:
    """Holds the learners of one run; episodes can be driven one at a time."""

    def __init__(self, config: RunConfig, scenario: Scenario | None = None):
        self.config = config
        self.scenario = scenario or config.load()
        self.rngs = _rngs(config.seed)
        self.commander = self.agent = self.joint = None
        sc = self.scenario
        if config.algo == "joint-tabular":
            self.joint = make_joint(config, sc, self.rngs["joint"])
            return
        self.commander = make_commander(config, sc, self.rngs["commander"])
        if config.agents_mode == "learned-concurrent":
            self.agent = make_agent_learner(config, sc, self.rngs["agent"])
        elif config.agents_mode == "pretrain-then-freeze":
            if config.agent_checkpoint is not None:
                self.agent = make_agent_learner(config, sc, self.rngs["agent"])
                self.load(config.agent_checkpoint, roles=("agent",))
            else:
                self.agent = pretrain_agents(config, sc).learner
            self.agent.learner.frozen = True

    def learners(self) -> dict:
        if self.joint is not None:
            return {"joint": self.joint.learner}
        out = {"commander": self.commander.learner}
        if self.agent is not None:
            out["agent"] = self.agent.learner
        return out

    def save(self, path, episode: int) -> None:
        save_checkpoint(path, self.learners(), _header(self.config, self.scenario, episode))

    def load(self, path, roles=None) -> dict:
        head, body = read_checkpoint(path)
        if head["scenario_hash"] != self.scenario.hash:
            raise CheckpointMismatch(f"{path} was trained on scenario {head['scenario_hash']}, not {self.scenario.hash}")
        mine = self.learners()
        for name in roles or body:
            if name not in mine:
                continue
            if name not in body:
                raise CheckpointMismatch(f"{path} has no {name!r} learner")
            mine[name].load(body[name])
        return head

    def _agent_act(self, explore: bool):
        sc = self.scenario
        if self.agent is None:
            return lambda obs: scripted_agent_policy(obs, sc)
        explore = explore and not self.agent.learner.frozen
        return lambda obs: self.agent.act(obs, None, explore)

    def episode(self, index: int, explore: bool = True, tracer=None) -> EpisodeMetrics:
        t0 = time.perf_counter()
        world = reset(self.scenario, rng_seed=self.config.seed)
        on_step = None
        if tracer is not None:
            on_step = lambda w, a, r, e, o: tracer(trace_record(w, a, r, e, o, index))
        if self.joint is not None:
            res = self.joint.run_episode(world, explore, on_step)
        else:
            learn_agents = explore and self.agent is not None and not self.agent.learner.frozen
            ep = FeudalEpisode(
                world,
                lambda obs, mask: self.commander.act(obs, mask, explore),
                self._agent_act(explore),
                on_commander=self.commander.observe if explore else None,
                on_agent=self.agent.observe if learn_agents else None,
                on_step=on_step,
            )
            res = ep.run()
        ms = (time.perf_counter() - t0) * 1000 if self.config.timing else 0.0
        return EpisodeMetrics(index, res.steps, res.env_return, res.success, res.agent_deaths, res.civilians_alive, res.orders_issued, res.order_success_rate, ms)


def run_training(config: RunConfig, scenario: Scenario | None = None, trainer: Trainer | None = None) -> list[EpisodeMetrics]:
    """Train for ``config.episodes`` episodes, streaming metrics to disk when
    ``config.out`` is set. Returns the per-episode metrics."""
    trainer = trainer or Trainer(config, scenario)
    out = Path(config.out) if config.out is not None else None
    metrics_fh = writer = trace_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / f"{config.algo}-{config.seed}.metrics.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(metrics_fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        metrics_fh.flush()
        if config.trace:
            trace_fh = open(out / f"{config.algo}-{config.seed}.trace.jsonl", "w", encoding="utf-8")
    tracer = None
    if trace_fh is not None:
        tracer = lambda rec: trace_fh.write(json.dumps(rec, sort_keys=True) + "\n")

    history: list[EpisodeMetrics] = []
    window: deque = deque(maxlen=config.stop_window)
    try:
        for k in range(config.episodes):
            m = trainer.episode(k, explore=True, tracer=tracer)
            history.append(m)
            window.append(m.success)
            if writer is not None:
                writer.writerow(m.row())
                metrics_fh.flush()
            if trace_fh is not None:
                trace_fh.flush()
            if out is not None and config.checkpoint_every and (k + 1) % config.checkpoint_every == 0:
                trainer.save(checkpoint_path(out, config.algo, config.seed, k + 1), k + 1)
            if config.stop_rate is not None and len(window) == window.maxlen and sum(window) / len(window) >= config.stop_rate:
                break
        if out is not None and history and not (config.checkpoint_every and len(history) % config.checkpoint_every == 0):
            trainer.save(checkpoint_path(out, config.algo, config.seed, len(history)), len(history))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
        if trace_fh is not None:
            trace_fh.close()
    return history


def rolling_success(history: list[EpisodeMetrics], window: int = 100) -> np.ndarray:
    s = np.array([m.success for m in history], dtype=float)
    if len(s) < window:
        return np.zeros(0)
    c = np.concatenate([[0.0], np.cumsum(s)])
    return (c[window:] - c[:-window]) / window


def episodes_to_rate(history: list[EpisodeMetrics], rate: float, window: int = 100) -> int | None:
    """Episode count at which the rolling success rate first reaches ``rate``."""
    roll = rolling_success(history, window)
    hit = np.flatnonzero(roll >= rate - 1e-12)
    return None if len(hit) == 0 else int(hit[0]) + window


# -- evaluation -------------------------------------------------------------------


def summarize(metrics: list[EpisodeMetrics]) -> dict:
    cleared = [m.steps for m in metrics if m.success]

    def stats(xs):
        if not xs:
            return {"mean": None, "median": None, "sd": None}
        return {"mean": statistics.fmean(xs), "median": statistics.median(xs), "sd": statistics.pstdev(xs)}

    n = len(metrics)
    return {
        "episodes": n,
        "success_rate": sum(m.success for m in metrics) / n if n else 0.0,
        "steps_to_clear": stats(cleared),
        "return": stats([m.ret for m in metrics]),
        "agent_deaths_mean": statistics.fmean(m.agent_deaths for m in metrics) if n else 0.0,
        "civilian_survival_rate": sum(m.civilian_alive for m in metrics) / n if n else 0.0,
        "order_success_rate": statistics.fmean(m.order_success_rate for m in metrics) if n else 0.0,
    }


def run_eval(config: RunConfig, checkpoints=(), trainer: Trainer | None = None, scenario: Scenario | None = None) -> dict:
    """Greedy evaluation of the learners in ``checkpoints`` (or ``trainer``)."""
    if trainer is None:
        cfg = config
        if config.agents_mode == "pretrain-then-freeze" and config.agent_checkpoint is None:
            # the agent parameters come from the run checkpoint itself
            cfg = RunConfig(**{**config.__dict__, "agents_mode": "learned-concurrent"})
        trainer = Trainer(cfg, scenario)
    for path in checkpoints:
        trainer.load(path)
    out = Path(config.out) if config.out is not None else None
    trace_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if config.trace:
            trace_path = out / f"{config.algo}-{config.seed}-eval.trace.jsonl"
            open(trace_path, "w").close()
    metrics = []
    for k in range(config.eval_episodes):
        records = []
        m = trainer.episode(k, explore=False, tracer=records.append if trace_path else None)
        if trace_path is not None:
            write_trace(trace_path, records, append=True)
        metrics.append(m)
    summary = summarize(metrics)
    if out is not None:
        write_metrics(out / f"{config.algo}-{config.seed}-eval.metrics.csv", metrics)
        with open(out / f"{config.algo}-{config.seed}-eval.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def freeze_fingerprint(role: Role) -> str:
    """Digest of a learner's parameters, for frozen-agent checks."""
    return hashlib.sha256(json.dumps(role.learner.dump(), sort_keys=True).encode()).hexdigest()
