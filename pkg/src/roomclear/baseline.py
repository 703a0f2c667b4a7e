"""Flat joint-action tabular learner: every agent's primitive action at once."""

from __future__ import annotations

from .engine import MOVE_ACTIONS, Action, WorldState, env_step
from .feudal import EpisodeResult, Transition
from .floorplan import Scenario


def primitive_actions(scenario: Scenario) -> tuple[Action, ...]:
    """Four moves on enemy-free plans, all six actions when there is combat."""
    if scenario.enemies:
        return tuple(Action)
    return MOVE_ACTIONS


def joint_action_count(k: int, n: int) -> int:
    return k**n


def joint_encode(actions, k: int) -> int:
    """Mixed-radix id of per-agent action indices, agent 0 most significant."""
    ident = 0
    for a in actions:
        if not 0 <= a < k:
            raise ValueError(f"action index {a} outside [0, {k})")
        ident = ident * k + int(a)
    return ident


def joint_decode(ident: int, k: int, n: int) -> tuple[int, ...]:
    if not 0 <= ident < k**n:
        raise ValueError(f"joint id {ident} outside [0, {k ** n})")
    out = []
    for _ in range(n):
        ident, r = divmod(ident, k)
        out.append(r)
    return tuple(reversed(out))


def joint_state_key(world: WorldState) -> tuple:
    """Sorted living-agent cells plus the clearance vector; agents are
    interchangeable so ids do not appear."""
    cells = tuple(sorted(a.cell for a in world.agents if a.alive))
    return cells, tuple(int(x) for x in world.clearance.u)


class JointActionAgent:
    """Drives a whole episode through one tabular learner over joint actions."""

    def __init__(self, scenario: Scenario, learner):
        self.scenario = scenario
        self.actions = primitive_actions(scenario)
        self.n_agents = len(scenario.agent_spawns)
        self.learner = learner

    def decode(self, ident: int) -> list[Action]:
        return [self.actions[i] for i in joint_decode(ident, len(self.actions), self.n_agents)]

    def run_episode(self, world: WorldState, explore: bool = True, on_step=None) -> EpisodeResult:
        res = EpisodeResult()
        if on_step is not None:
            on_step(world, None, 0.0, [], {})
        key = joint_state_key(world)
        while not world.done:
            ident = self.learner.act(key, None, explore)
            per_agent = self.decode(ident)
            actions = {a.id: per_agent[a.id] for a in world.agents if a.alive}
            world, reward, events = env_step(world, actions)
            res.env_return += reward
            res.agent_deaths += sum(1 for e in events if e.kind == "agent_died")
            next_key = joint_state_key(world)
            if explore:
                truncated = world.done_reason == "step_limit"
                self.learner.observe(Transition(key, ident, reward, next_key, world.done and not truncated))
            if on_step is not None:
                on_step(world, actions, reward, events, {})
            key = next_key
        res.steps = world.timestep
        res.done_reason = world.done_reason
        res.success = world.done_reason == "cleared"
        res.civilians_alive = all(c.alive for c in world.civilians)
        return res
