"""Physical simulation: movement, line-of-sight combat, scripted enemies, reward."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .clearance import ClearanceState, recompute_clearance
from .floorplan import DIRECTIONS, FLOOR, WALL, Grid, RewardConfig, Scenario


class Action(enum.IntEnum):
    WAIT = 0
    SHOOT = 1
    NORTH = 2
    SOUTH = 3
    EAST = 4
    WEST = 5


MOVES = {Action.NORTH: (0, -1), Action.SOUTH: (0, 1), Action.EAST: (1, 0), Action.WEST: (-1, 0)}
MOVE_ACTIONS = (Action.NORTH, Action.SOUTH, Action.EAST, Action.WEST)
DIRECTION_ACTION = {name: Action[name.upper()] for name, _, _ in DIRECTIONS}


class Event(NamedTuple):
    kind: str  # agent_died | enemy_died | civilian_died | room_cleared | room_uncleared
    id: int


class ContractViolation(RuntimeError):
    pass


@dataclass
class AgentState:
    id: int
    cell: tuple[int, int]
    hp: int
    room: int

    @property
    def alive(self) -> bool:
        return self.hp > 0


@dataclass
class EnemyState:
    id: int
    cell: tuple[int, int]
    hp: int
    room: int
    behavior: str = "stationary"
    route_index: int = 0  # next route cell to step onto

    @property
    def alive(self) -> bool:
        return self.hp > 0


@dataclass
class CivilianState:
    cell: tuple[int, int]
    room: int
    alive: bool = True


@dataclass
class WorldState:
    scenario: Scenario
    agents: list[AgentState]
    enemies: list[EnemyState]
    civilians: list[CivilianState]
    clearance: ClearanceState = None
    timestep: int = 0
    done: bool = False
    done_reason: str = "none"  # cleared | step_limit | all_agents_dead | none
    step_events: list[Event] = field(default_factory=list)

    def clone(self) -> "WorldState":
        return WorldState(
            self.scenario,
            [AgentState(a.id, a.cell, a.hp, a.room) for a in self.agents],
            [EnemyState(e.id, e.cell, e.hp, e.room, e.behavior, e.route_index) for e in self.enemies],
            [CivilianState(c.cell, c.room, c.alive) for c in self.civilians],
            self.clearance,
            self.timestep,
            self.done,
            self.done_reason,
            list(self.step_events),
        )

    def snapshot(self) -> dict:
        """Plain-data view of the physical state, used by traces and replay."""
        return {
            "t": self.timestep,
            "agents": [{"id": a.id, "cell": list(a.cell), "hp": a.hp, "room": a.room} for a in self.agents],
            "enemies": [{"id": e.id, "cell": list(e.cell), "hp": e.hp, "room": e.room} for e in self.enemies],
            "civilians": [{"cell": list(c.cell), "alive": c.alive} for c in self.civilians],
            "u": [int(x) for x in self.clearance.u],
            "done": self.done,
            "done_reason": self.done_reason,
        }

    def __eq__(self, other):
        return isinstance(other, WorldState) and self.scenario is other.scenario and self.snapshot() == other.snapshot()

    def living_agents(self) -> list[AgentState]:
        return [a for a in self.agents if a.alive]

    def enemy_in_room(self, room: int) -> bool:
        return any(e.alive and e.room == room for e in self.enemies)


def reset(scenario: Scenario, rng_seed=None, agent_cells: Sequence | None = None, with_enemies: bool = True) -> WorldState:
    """Initial world. The room-clearance start state has no randomness, so
    ``rng_seed`` only exists for interface symmetry with stochastic starts;
    ``agent_cells`` overrides spawns (pre-training places agents itself)."""
    fp = scenario.floorplan
    cells = list(agent_cells) if agent_cells is not None else list(scenario.agent_spawns)
    agents = [AgentState(i, tuple(c), scenario.agent_hp, fp.room_at(c)) for i, c in enumerate(cells)]
    enemies = []
    if with_enemies:
        enemies = [EnemyState(k, e.spawn, e.hp, fp.room_at(e.spawn), e.behavior) for k, e in enumerate(scenario.enemies)]
    civilians = [CivilianState(c, fp.room_at(c)) for c in scenario.civilians] if with_enemies else []
    world = WorldState(scenario, agents, enemies, civilians)
    world.clearance = recompute_clearance(world, initial=True)
    if world.clearance.all_clear:
        world.done, world.done_reason = True, "cleared"
    return world


def line_of_sight(grid: Grid, a, b) -> bool:
    """True iff the segment between the two cell centres touches no wall cell.

    Walks the supercover of the segment: every cell whose closed square the
    segment meets, including both side cells where it passes exactly through
    a grid corner.
    """
    x, y = a
    x1, y1 = b
    dx, dy = abs(x1 - x), abs(y1 - y)
    sx = 1 if x1 > x else -1
    sy = 1 if y1 > y else -1
    cells = grid.cells
    if cells[y, x] == WALL:
        return False
    i = j = 0  # vertical / horizontal boundaries crossed so far
    while i < dx or j < dy:
        # compare crossing parameters (2i+1)/(2dx) and (2j+1)/(2dy)
        tx = (2 * i + 1) * dy if i < dx else None
        ty = (2 * j + 1) * dx if j < dy else None
        if ty is None or (tx is not None and tx < ty):
            x += sx
            i += 1
        elif tx is None or ty < tx:
            y += sy
            j += 1
        else:
            if cells[y, x + sx] == WALL or cells[y + sy, x] == WALL:
                return False
            x += sx
            y += sy
            i += 1
            j += 1
        if cells[y, x] == WALL:
            return False
    return True


def can_engage(scenario: Scenario, a, b) -> bool:
    """Combat visibility: clear line of sight and a shared room.

    A door cell belongs to both rooms it joins, so fighters see each other
    across a doorway but never through it from deeper inside another room.
    """
    fp = scenario.floorplan
    ra, rb = fp.rooms_touching(a), fp.rooms_touching(b)
    if not any(r in rb for r in ra):
        return False
    return line_of_sight(fp.grid, a, b)


def _nearest(origin, candidates):
    """Nearest (Euclidean) of ``(id, cell)`` pairs, ties by lowest id."""
    best = None
    for ident, cell in candidates:
        d = math.dist(origin, cell)
        if best is None or (d, ident) < best[0]:
            best = ((d, ident), ident)
    return None if best is None else best[1]


def resolve_shot(world: WorldState, shooter, faction: str):
    """Target of one shot: the nearest visible living opponent's id, or None.

    ``faction`` is the shooter's side, ``"blue"`` for agents, ``"red"`` for
    enemies. Red shooters only consider agents here; firing on civilians is
    handled by the enemy behaviour.
    """
    sc = world.scenario
    if faction == "blue":
        pool = [(e.id, e.cell) for e in world.enemies if e.alive and can_engage(sc, shooter.cell, e.cell)]
    else:
        pool = [(a.id, a.cell) for a in world.agents if a.alive and can_engage(sc, shooter.cell, a.cell)]
    return _nearest(shooter.cell, pool)


def _occupied(world: WorldState) -> set:
    cells = {a.cell for a in world.agents if a.alive}
    cells.update(e.cell for e in world.enemies if e.alive)
    cells.update(c.cell for c in world.civilians if c.alive)
    return cells


def env_step(world: WorldState, actions) -> tuple[WorldState, float, list[Event]]:
    """Advance one timestep in place.

    ``actions`` maps agent id to :class:`Action` (a sequence indexed by agent
    id also works); dead agents are ignored. Phases: agent fire, enemy
    behaviour, agent movement, clearance, termination, reward. Fire in the
    first two phases is simultaneous: an enemy killed by agent fire this step
    still returns fire at agents.
    """
    if world.done:
        raise ContractViolation("env_step called on a finished episode")
    if not isinstance(actions, dict):
        actions = dict(enumerate(actions))
    sc = world.scenario
    fp = sc.floorplan
    events: list[Event] = []
    start_alive_agents = [a for a in world.agents if a.alive]
    start_alive_enemies = [e for e in world.enemies if e.alive]
    for a in start_alive_agents:
        if a.id not in actions:
            raise ContractViolation(f"no action for living agent {a.id}")

    # phase 1: agent fire, all targets chosen on the pre-phase world
    hits: dict[int, int] = {}
    for a in start_alive_agents:
        if Action(actions[a.id]) == Action.SHOOT:
            target = resolve_shot(world, a, "blue")
            if target is not None:
                hits[target] = hits.get(target, 0) + 1
    for eid, n in sorted(hits.items()):
        e = world.enemies[eid]
        e.hp = max(0, e.hp - n)
        if not e.alive:
            events.append(Event("enemy_died", eid))

    # phase 2: enemies, acting on agents as they stood at step start
    agent_hits: dict[int, int] = {}
    civ_hits: set = set()
    for e in start_alive_enemies:
        pool = [(a.id, a.cell) for a in start_alive_agents if can_engage(sc, e.cell, a.cell)]
        target = _nearest(e.cell, pool)
        if target is not None:
            agent_hits[target] = agent_hits.get(target, 0) + 1
            continue
        if not e.alive:
            continue
        if e.behavior == "path-then-fire":
            civ = [(k, c.cell) for k, c in enumerate(world.civilians) if c.alive and c.room == e.room and can_engage(sc, e.cell, c.cell)]
            k = _nearest(e.cell, civ)
            if k is not None:
                civ_hits.add(k)
                continue
        route = sc.enemies[e.id].route
        if e.behavior != "stationary" and e.route_index < len(route):
            nxt = route[e.route_index]
            if nxt not in _occupied(world):
                e.cell = nxt
                e.route_index += 1
                r = fp.room_at(nxt)
                if r >= 0:
                    e.room = r
    for aid, n in sorted(agent_hits.items()):
        a = world.agents[aid]
        a.hp = max(0, a.hp - n)
        if not a.alive:
            events.append(Event("agent_died", aid))
    for k in sorted(civ_hits):
        world.civilians[k].alive = False
        events.append(Event("civilian_died", k))

    # phase 3: agent movement; blocked moves become waits
    occupied = _occupied(world)
    claimed: set = set()
    for a in start_alive_agents:
        if not a.alive:
            continue
        act = Action(actions[a.id])
        if act not in MOVES:
            continue
        dx, dy = MOVES[act]
        target = (a.cell[0] + dx, a.cell[1] + dy)
        if not fp.grid.walkable(target) or target in occupied or target in claimed:
            continue
        claimed.add(target)
        a.cell = target
        if fp.grid.kind(target) == FLOOR:
            a.room = fp.room_at(target)

    # phase 4: clearance
    before = world.clearance.u
    world.clearance = recompute_clearance(world)
    after = world.clearance.u
    for i in np.flatnonzero(before != after):
        events.append(Event("room_cleared" if after[i] == 0 else "room_uncleared", int(i)))

    # phase 5: termination
    world.timestep += 1
    if world.clearance.all_clear:
        world.done, world.done_reason = True, "cleared"
    elif not any(a.alive for a in world.agents):
        world.done, world.done_reason = True, "all_agents_dead"
    elif world.timestep >= sc.step_limit:
        world.done, world.done_reason = True, "step_limit"
    world.step_events = events

    # phase 6: reward
    reward = env_reward(world, events, sc.reward, sc.r_complete)
    return world, reward, events


def env_reward(world: WorldState, events: Sequence[Event], config: RewardConfig, r_complete: float) -> float:
    """Environment (commander-side) reward for the step that produced ``world``."""
    m = world.scenario.floorplan.m
    cleared = world.done_reason == "cleared"
    shaping = -1.0 + world.clearance.clear_count / m
    if config.kind == "sparse":
        return float(r_complete) if cleared else 0.0
    if config.kind == "default":
        return float(r_complete) if cleared else shaping
    if config.kind == "death_penalty":
        deaths = sum(1 for ev in events if ev.kind == "agent_died")
        return (float(r_complete) if cleared else shaping) - config.death_penalty * deaths
    if config.kind == "civilian":
        if any(ev.kind == "civilian_died" for ev in events):
            return -float(r_complete)
        if cleared and all(c.alive for c in world.civilians):
            return float(r_complete)
        return shaping
    raise ValueError(f"unknown reward config {config.kind!r}")
