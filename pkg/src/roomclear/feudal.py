"""Commander/agent hierarchy: orders, observations, reward hiding, scripted agents."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .engine import DIRECTION_ACTION, MOVES, Action, WorldState, can_engage, env_step
from .floorplan import DIRECTIONS, Scenario, neighbours

AGENT_REWARD_COMPLETE = 10.0
AGENT_REWARD_WRONG = -10.0


class OrderOutcome(enum.Enum):
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED_WRONG_DOOR = "failed_wrong_door"
    FAILED_TIMEOUT = "failed_timeout"

    @property
    def terminal(self) -> bool:
        return self is not OrderOutcome.IN_PROGRESS


@dataclass(frozen=True)
class Order:
    kind: str  # "door" | "wait"
    slot: int  # door slot in the origin room, d_max for wait
    door: Optional[int]
    origin_room: int
    issued_at: int
    deadline: int
    approach: bool = False  # order-sync: stop beside the door instead of passing

    @property
    def is_wait(self) -> bool:
        return self.kind == "wait"


class RoomGeometry:
    """Static per-room data used by encoders and the scripted policy."""

    def __init__(self, scenario: Scenario, room_id: int):
        fp = scenario.floorplan
        room = fp.rooms[room_id]
        self.id = room_id
        self.cells = room.cells
        self.doors = list(room.doors)
        self.x0, self.y0, self.w, self.h = room.bbox
        r = scenario.r_max
        grid = np.zeros((r, r), dtype=np.int64)
        for x, y in room.cells:
            grid[y - self.y0, x - self.x0] = 1
        self.grid_flat = grid.ravel()
        self.door_cells = [fp.doors[d].cell for d in self.doors]
        # constant parts of the agent observation for this room
        self.obs_prefix = self.grid_flat.tolist()
        self.obs_doors = [0] * (3 * scenario.d_max)
        for k, (x, y) in enumerate(self.door_cells):
            self.obs_doors[3 * k : 3 * k + 3] = (x - self.x0, y - self.y0, 1)
        self.door_adjacent = [fp.door_neighbours(d, room_id) for d in self.doors]
        nodes = set(room.cells) | set(self.door_cells)
        # distance to each door cell and to the floor cells beside it
        self.dist_to_door = [self._bfs(nodes, [c]) for c in self.door_cells]
        self.dist_to_adjacent = [self._bfs(nodes, adj) for adj in self.door_adjacent]
        self.diameter = max(1, max(max(self._bfs(nodes, [c]).values()) for c in nodes))
        self.deadline_budget = max(20, 4 * (self.w + self.h))
        # direction from a door cell into the room on its far side
        self.exit_action = []
        for d in self.doors:
            far = fp.doors[d].other(room_id)
            dc = fp.doors[d].cell
            act = Action.WAIT
            for name, dx, dy in DIRECTIONS:
                c = (dc[0] + dx, dc[1] + dy)
                if fp.room_at(c) == far:
                    act = DIRECTION_ACTION[name]
                    break
            self.exit_action.append(act)

    def _bfs(self, nodes, sources):
        room_cells = self.cells
        dist = {s: 0 for s in sources}
        queue = deque(sources)
        while queue:
            c = queue.popleft()
            if c not in room_cells and dist[c] > 0:
                continue  # door cells are leaves
            for n in neighbours(c):
                if n in nodes and n not in dist:
                    dist[n] = dist[c] + 1
                    queue.append(n)
        return dist

    def rel(self, cell) -> tuple[int, int]:
        return cell[0] - self.x0, cell[1] - self.y0


class Layout:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.rooms = [RoomGeometry(scenario, r) for r in range(scenario.floorplan.m)]
        self.n_doors = len(scenario.floorplan.doors)


def layout(scenario: Scenario) -> Layout:
    cached = scenario.__dict__.get("_layout")
    if cached is None:
        cached = Layout(scenario)
        object.__setattr__(scenario, "_layout", cached)
    return cached


def n_order_slots(scenario: Scenario) -> int:
    return scenario.d_max + 1


def order_space(world: WorldState, agent) -> np.ndarray:
    """Validity mask over the ``d_max + 1`` order slots; the last is wait."""
    sc = world.scenario
    mask = np.zeros(n_order_slots(sc), dtype=bool)
    mask[: len(layout(sc).rooms[agent.room].doors)] = True
    mask[-1] = True
    return mask


def make_order(world: WorldState, agent, slot: int) -> Order:
    sc = world.scenario
    geo = layout(sc).rooms[agent.room]
    deadline = world.timestep + geo.deadline_budget
    if slot == sc.d_max:
        return Order("wait", slot, None, agent.room, world.timestep, deadline)
    if not 0 <= slot < len(geo.doors):
        raise ValueError(f"order slot {slot} invalid in room {agent.room}")
    approach = bool(sc.order_sync) and agent.cell not in geo.door_adjacent[slot]
    return Order("door", slot, geo.doors[slot], agent.room, world.timestep, deadline, approach)


def order_status(agent, order: Order, world: WorldState, cell_before) -> OrderOutcome:
    """Outcome of an active order after the step that moved the agent from
    ``cell_before``. Wait orders only resolve here at their deadline; the
    re-issuance rule ends them in :func:`issue_orders`."""
    fp = world.scenario.floorplan
    room_safe = not world.enemy_in_room(order.origin_room)
    if agent.room != order.origin_room:
        passed = fp.door_at(cell_before)
        if order.kind == "door" and not order.approach and passed == order.door and room_safe:
            return OrderOutcome.COMPLETED
        return OrderOutcome.FAILED_WRONG_DOOR
    if order.kind == "door" and order.approach and room_safe:
        if agent.cell in layout(world.scenario).rooms[agent.room].door_adjacent[order.slot]:
            return OrderOutcome.COMPLETED
    if world.timestep >= order.deadline:
        if order.is_wait and room_safe:
            return OrderOutcome.COMPLETED
        return OrderOutcome.FAILED_TIMEOUT
    return OrderOutcome.IN_PROGRESS


def agent_reward(outcome: OrderOutcome) -> float:
    if outcome is OrderOutcome.COMPLETED:
        return AGENT_REWARD_COMPLETE
    if outcome is OrderOutcome.FAILED_WRONG_DOOR:
        return AGENT_REWARD_WRONG
    return 0.0


def commander_reward_accumulate(env_rewards) -> float:
    return float(sum(env_rewards))


# -- observations -----------------------------------------------------------


@dataclass(eq=False)
class AgentObservation:
    room: int
    cell: tuple[int, int]
    order: Order
    enemies: list  # cells of engageable living enemies, by enemy id
    ints: np.ndarray
    r_max: int

    def key(self) -> tuple:
        return tuple(self.ints.tolist())

    def vector(self) -> np.ndarray:
        return self.ints / self.r_max


def agent_obs_size(scenario: Scenario) -> int:
    return scenario.r_max**2 + 2 + 3 * scenario.d_max + 3 * scenario.e_max + scenario.d_max + 1 + 1


def encode_agent_obs(world: WorldState, agent, order: Order) -> AgentObservation:
    sc = world.scenario
    geo = layout(sc).rooms[agent.room]
    x0, y0 = geo.x0, geo.y0
    seen = [e.cell for e in world.enemies if e.alive and can_engage(sc, agent.cell, e.cell)]
    enemies = [0] * (3 * sc.e_max)
    for k, (x, y) in enumerate(seen[: sc.e_max]):
        enemies[3 * k : 3 * k + 3] = (x - x0, y - y0, 1)
    onehot = [0] * (sc.d_max + 1)
    onehot[order.slot] = 1
    ints = geo.obs_prefix + [agent.cell[0] - x0, agent.cell[1] - y0] + geo.obs_doors + enemies + onehot + [int(order.approach)]
    return AgentObservation(agent.room, agent.cell, order, seen, np.array(ints, dtype=np.int64), sc.r_max)


@dataclass(eq=False)
class CommanderObservation:
    ints: np.ndarray
    scale: np.ndarray  # divisor per entry for the network view

    def key(self) -> tuple:
        return tuple(self.ints.tolist())

    def vector(self) -> np.ndarray:
        return self.ints / self.scale


def commander_obs_size(scenario: Scenario) -> int:
    m, d, n = scenario.floorplan.m, scenario.d_max, len(scenario.agent_spawns)
    size = m + m + d + (n - 1) * (m + d + 1)
    if scenario.order_sync:
        size += 2 * len(scenario.floorplan.doors)
    return size


def encode_commander_obs(world: WorldState, agent_id: int, orders: dict) -> CommanderObservation:
    """Global view for the decision about ``agent_id``.

    ``orders`` maps agent id to its active :class:`Order`; agents still
    waiting for an order this step are simply absent.
    """
    sc = world.scenario
    lay = layout(sc)
    m, d = sc.floorplan.m, sc.d_max
    ints, scale = [], []

    ints.append(1 - world.clearance.u)
    scale.append(np.ones(m))
    me = world.agents[agent_id]
    geo = lay.rooms[me.room]
    onehot = np.zeros(m, dtype=np.int64)
    onehot[me.room] = 1
    dist = np.zeros(d, dtype=np.int64)
    for k in range(len(geo.doors)):
        dist[k] = geo.dist_to_door[k].get(me.cell, geo.diameter)
    ints += [onehot, dist]
    scale += [np.ones(m), np.full(d, float(geo.diameter))]
    for other in world.agents:
        if other.id == agent_id:
            continue
        room = np.zeros(m, dtype=np.int64)
        order = np.zeros(d + 1, dtype=np.int64)
        if other.alive:
            room[other.room] = 1
            if other.id in orders:
                order[orders[other.id].slot] = 1
        ints += [room, order]
        scale.append(np.ones(m + d + 1))
    if sc.order_sync:
        waiting = np.zeros(lay.n_doors, dtype=np.int64)
        ordered = np.zeros(lay.n_doors, dtype=np.int64)
        for a in world.agents:
            if not a.alive:
                continue
            g = lay.rooms[a.room]
            for k, adj in enumerate(g.door_adjacent):
                if a.cell in adj:
                    waiting[g.doors[k]] = 1
            o = orders.get(a.id)
            if a.id != agent_id and o is not None and o.kind == "door" and not o.approach:
                ordered[o.door] = 1
        ints += [waiting, ordered]
        scale.append(np.ones(2 * lay.n_doors))
    return CommanderObservation(np.concatenate(ints).astype(np.int64), np.concatenate(scale))


# -- scripted agents ---------------------------------------------------------


def scripted_agent_policy(obs: AgentObservation, scenario: Scenario) -> Action:
    """Clear the room first, then walk the shortest in-room path to the door."""
    if obs.enemies:
        return Action.SHOOT
    order = obs.order
    if order.is_wait or obs.room != order.origin_room:
        return Action.WAIT
    geo = layout(scenario).rooms[obs.room]
    k = order.slot
    if not order.approach and obs.cell == geo.door_cells[k]:
        return geo.exit_action[k]
    dist = geo.dist_to_adjacent[k] if order.approach else geo.dist_to_door[k]
    here = dist.get(obs.cell)
    if here is None or here == 0:
        return Action.WAIT
    best, best_d = Action.WAIT, here
    for act in (Action.NORTH, Action.SOUTH, Action.EAST, Action.WEST):
        dx, dy = MOVES[act]
        nd = dist.get((obs.cell[0] + dx, obs.cell[1] + dy))
        if nd is not None and nd < best_d:
            best, best_d = act, nd
    return best


# -- episode driver ----------------------------------------------------------


@dataclass
class Transition:
    s: object
    a: int
    r: float
    s_next: object
    done: bool
    next_mask: Optional[np.ndarray] = None


@dataclass
class CommanderDecisionPoint:
    agent_id: int
    observation: CommanderObservation
    mask: np.ndarray
    reward: float  # accumulated since the previous decision
    index: int
    slot: int = -1


@dataclass
class EpisodeResult:
    steps: int = 0
    env_return: float = 0.0
    success: bool = False
    done_reason: str = "none"
    agent_deaths: int = 0
    civilians_alive: bool = True
    orders_issued: int = 0
    orders_completed: int = 0
    orders_resolved: int = 0
    decisions: list = field(default_factory=list)

    @property
    def order_success_rate(self) -> float:
        return self.orders_completed / self.orders_resolved if self.orders_resolved else 0.0


CommanderPolicy = Callable[[CommanderObservation, np.ndarray], int]


class FeudalEpisode:
    """One room-clearance episode driven by a commander and low-level agents.

    ``commander(obs, mask) -> slot`` picks orders; ``agent_act(obs) -> Action``
    drives every living agent. Transitions are reported through the optional
    ``on_commander`` and ``on_agent`` callbacks; agents only ever see the
    order-outcome reward stream and the commander only the environment one.
    """

    def __init__(self, world: WorldState, commander: CommanderPolicy, agent_act, on_commander=None, on_agent=None, on_step=None):
        self.world = world
        self.commander = commander
        self.agent_act = agent_act
        self.on_commander = on_commander
        self.on_agent = on_agent
        self.on_step = on_step
        self.orders: dict[int, Order] = {}
        self.result = EpisodeResult()
        self._pending = None  # last commander decision awaiting its successor
        self._acc = 0.0

    def issue_orders(self, agent_ids) -> list[CommanderDecisionPoint]:
        """New orders for ``agent_ids`` plus every agent currently waiting."""
        world = self.world
        need = set(agent_ids)
        if need:
            need |= {i for i, o in self.orders.items() if o.is_wait and world.agents[i].alive}
        points = []
        for i in sorted(need):
            self.orders.pop(i, None)
        for i in sorted(need):
            agent = world.agents[i]
            obs = encode_commander_obs(world, i, self.orders)
            mask = order_space(world, agent)
            reward = self._acc if not points else 0.0
            point = CommanderDecisionPoint(i, obs, mask, reward, len(self.result.decisions))
            point.slot = int(self.commander(obs, mask))
            if not mask[point.slot]:
                raise ValueError(f"commander chose invalid order slot {point.slot}")
            self._close_commander(obs, mask, reward, done=False)
            self._pending = point
            self.orders[i] = make_order(world, agent, point.slot)
            self.result.decisions.append(point)
            self.result.orders_issued += 1
            points.append(point)
        if points:
            self._acc = 0.0
        return points

    def _close_commander(self, obs, mask, reward, done):
        if self._pending is not None and self.on_commander is not None:
            p = self._pending
            self.on_commander(Transition(p.observation, p.slot, reward, obs, done, mask))

    def run(self) -> EpisodeResult:
        world = self.world
        res = self.result
        if not world.done:
            self.issue_orders([a.id for a in world.agents if a.alive])
        if self.on_step is not None:
            self.on_step(world, None, 0.0, [], self.orders)
        carried: dict = {}  # observations encoded after the previous step
        while not world.done:
            living = world.living_agents()
            obs_before = {}
            for a in living:
                prev = carried.get(a.id)
                order = self.orders[a.id]
                obs_before[a.id] = prev if prev is not None and prev.order is order else encode_agent_obs(world, a, order)
            actions = {a.id: Action(self.agent_act(obs_before[a.id])) for a in living}
            cells_before = {a.id: a.cell for a in living}
            world, reward, events = env_step(world, actions)
            self._acc += reward
            res.env_return += reward
            res.agent_deaths += sum(1 for e in events if e.kind == "agent_died")

            outcomes = {}
            for a in living:
                if not a.alive:
                    continue
                outcomes[a.id] = order_status(a, self.orders[a.id], world, cells_before[a.id])
            resolved = [i for i, o in outcomes.items() if o.terminal]
            if resolved and not world.done:
                for i, o in self.orders.items():
                    if o.is_wait and i in outcomes and not outcomes[i].terminal:
                        safe = not world.enemy_in_room(o.origin_room)
                        outcomes[i] = OrderOutcome.COMPLETED if safe else OrderOutcome.FAILED_TIMEOUT
            for a in living:
                out = outcomes.get(a.id)
                if out is not None and out.terminal:
                    res.orders_resolved += 1
                    res.orders_completed += out is OrderOutcome.COMPLETED
                s_next = encode_agent_obs(world, a, self.orders[a.id])
                carried[a.id] = s_next
                if self.on_agent is not None:
                    if out is None:  # died this step
                        t = Transition(obs_before[a.id], int(actions[a.id]), 0.0, s_next, True)
                    else:
                        t = Transition(obs_before[a.id], int(actions[a.id]), agent_reward(out), s_next, out.terminal)
                    self.on_agent(t)
            for a in living:
                if not a.alive:
                    self.orders.pop(a.id, None)
            if self.on_step is not None:
                self.on_step(world, actions, reward, events, self.orders)
            if world.done:
                break
            terminal = [i for i, o in outcomes.items() if o.terminal]
            for i in terminal:
                self.orders.pop(i, None)
            self.issue_orders(terminal)

        self._close_commander(None, None, self._acc, done=True)
        self._pending = None
        res.steps = world.timestep
        res.done_reason = world.done_reason
        res.success = world.done_reason == "cleared"
        res.civilians_alive = all(c.alive for c in world.civilians)
        return res
