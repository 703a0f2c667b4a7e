"""Grids, rooms, doors and the text scenario format."""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np

WALL, FLOOR, DOOR = 0, 1, 2

# (name, dx, dy); y grows downwards
DIRECTIONS = (("north", 0, -1), ("south", 0, 1), ("east", 1, 0), ("west", -1, 0))

ENEMY_BEHAVIORS = ("stationary", "path", "path-then-fire")

DEFAULTS = {
    "step_limit": 500,
    "order_sync": False,
    "reward": "default",
    "r_complete": 10.0,
    "agent_hp": 1,
    "enemy_hp": 1,
}


class ScenarioError(Exception):
    """Base class for every scenario problem. ``code`` is machine readable."""

    code = "scenario_error"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ScenarioSyntaxError(ScenarioError):
    code = "syntax"

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ScenarioValidationError(ScenarioError):
    code = "invalid"


class MalformedPlanError(ScenarioValidationError):
    code = "malformed_door"


def neighbours(cell: tuple[int, int]) -> Iterable[tuple[int, int]]:
    x, y = cell
    for _, dx, dy in DIRECTIONS:
        yield (x + dx, y + dy)


@dataclass(frozen=True, eq=False)
class Grid:
    cells: np.ndarray  # [y, x] of WALL/FLOOR/DOOR

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int8)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ScenarioValidationError("grid must be a non-empty 2D array", "empty_grid")
        if not np.isin(cells, (WALL, FLOOR, DOOR)).all():
            raise ScenarioValidationError("unknown cell kind", "bad_cell")
        border = np.concatenate([cells[0], cells[-1], cells[:, 0], cells[:, -1]])
        if (border != WALL).any():
            raise ScenarioValidationError("outer border must be wall", "border_not_wall")

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def kind(self, cell: tuple[int, int]) -> int:
        x, y = cell
        if 0 <= x < self.width and 0 <= y < self.height:
            return int(self.cells[y, x])
        return WALL

    def walkable(self, cell: tuple[int, int]) -> bool:
        return self.kind(cell) != WALL

    def __eq__(self, other):
        return isinstance(other, Grid) and np.array_equal(self.cells, other.cells)

    __hash__ = None


@dataclass(frozen=True)
class Room:
    id: int
    cells: frozenset
    doors: tuple[int, ...]

    @cached_property
    def bbox(self) -> tuple[int, int, int, int]:
        """(x0, y0, width, height) of the room's floor cells."""
        xs = [c[0] for c in self.cells]
        ys = [c[1] for c in self.cells]
        return min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1


@dataclass(frozen=True)
class Door:
    id: int
    cell: tuple[int, int]
    connects: tuple[int, int]  # sorted pair of room ids

    def other(self, room: int) -> int:
        a, b = self.connects
        return b if room == a else a


def derive_rooms(grid: Grid) -> tuple[list[Room], list[Door]]:
    """Flood-fill floor cells into rooms; doors and walls separate them.

    Room ids follow the row-major order of each room's smallest cell, door ids
    the row-major order of door cells.
    """
    h, w = grid.height, grid.width
    label = -np.ones((h, w), dtype=np.int64)
    regions: list[list[tuple[int, int]]] = []
    for y in range(h):
        for x in range(w):
            if grid.cells[y, x] != FLOOR or label[y, x] >= 0:
                continue
            rid = len(regions)
            label[y, x] = rid
            members = []
            queue = deque([(x, y)])
            while queue:
                cx, cy = queue.popleft()
                members.append((cx, cy))
                for nx, ny in neighbours((cx, cy)):
                    if grid.kind((nx, ny)) == FLOOR and label[ny, nx] < 0:
                        label[ny, nx] = rid
                        queue.append((nx, ny))
            regions.append(members)

    doors = []
    for y in range(h):
        for x in range(w):
            if grid.cells[y, x] != DOOR:
                continue
            touching = sorted({int(label[ny, nx]) for nx, ny in neighbours((x, y)) if grid.kind((nx, ny)) == FLOOR})
            if len(touching) != 2:
                raise MalformedPlanError(f"door at {x},{y} touches {len(touching)} rooms, expected 2")
            doors.append(Door(len(doors), (x, y), (touching[0], touching[1])))

    rooms = []
    for rid, members in enumerate(regions):
        rdoors = tuple(d.id for d in doors if rid in d.connects)
        rooms.append(Room(rid, frozenset(members), rdoors))
    return rooms, doors


def adjacency(rooms: list[Room], doors: list[Door]) -> np.ndarray:
    m = len(rooms)
    A = np.zeros((m, m), dtype=np.int64)
    for d in doors:
        i, j = d.connects
        if i != j:
            A[i, j] = A[j, i] = 1
    return A


def _connected(A: np.ndarray) -> bool:
    m = A.shape[0]
    seen = {0}
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(A[i]):
            if int(j) not in seen:
                seen.add(int(j))
                queue.append(int(j))
    return len(seen) == m


class FloorPlan:
    """Grid plus derived rooms, doors, adjacency matrix and lookup caches."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.rooms, self.doors = derive_rooms(grid)
        if not self.rooms:
            raise ScenarioValidationError("plan has no floor cells", "no_rooms")
        self.adjacency = adjacency(self.rooms, self.doors)
        self.adjacency.setflags(write=False)
        if not _connected(self.adjacency):
            raise ScenarioValidationError("building is not connected: some room is unreachable", "unreachable_room")
        room_of = -np.ones((grid.height, grid.width), dtype=np.int64)
        for r in self.rooms:
            for x, y in r.cells:
                room_of[y, x] = r.id
        door_of = -np.ones_like(room_of)
        for d in self.doors:
            door_of[d.cell[1], d.cell[0]] = d.id
        self._room_of = room_of
        self._door_of = door_of

    @property
    def m(self) -> int:
        return len(self.rooms)

    def room_at(self, cell) -> int:
        """Room id of a floor cell, -1 for walls and doors."""
        x, y = cell
        return int(self._room_of[y, x])

    def door_at(self, cell) -> int:
        x, y = cell
        return int(self._door_of[y, x])

    def rooms_touching(self, cell) -> tuple[int, ...]:
        """Rooms a cell belongs to for combat purposes: both sides of a door."""
        r = self.room_at(cell)
        if r >= 0:
            return (r,)
        d = self.door_at(cell)
        return self.doors[d].connects if d >= 0 else ()

    def door_neighbours(self, door_id: int, room: int) -> list[tuple[int, int]]:
        """Floor cells of ``room`` that are 4-adjacent to the door."""
        return [c for c in neighbours(self.doors[door_id].cell) if self.grid.kind(c) == FLOOR and self.room_at(c) == room]

    @cached_property
    def r_max(self) -> int:
        return max(max(r.bbox[2], r.bbox[3]) for r in self.rooms)

    @cached_property
    def d_max(self) -> int:
        return max(len(r.doors) for r in self.rooms)

    def __eq__(self, other):
        return isinstance(other, FloorPlan) and self.grid == other.grid

    __hash__ = None


@dataclass(frozen=True)
class EnemySpec:
    spawn: tuple[int, int]
    hp: int = 1
    behavior: str = "stationary"
    route: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class RewardConfig:
    kind: str = "default"  # sparse | default | death_penalty | civilian
    death_penalty: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "RewardConfig":
        text = text.strip()
        if text in ("sparse", "default", "civilian"):
            return cls(text)
        if text.startswith("death_penalty:"):
            return cls("death_penalty", float(text.split(":", 1)[1]))
        raise ValueError(f"unknown reward config {text!r}")

    def __str__(self):
        if self.kind == "death_penalty":
            return f"death_penalty:{self.death_penalty!r}"
        return self.kind


@dataclass(frozen=True, eq=False)
class Scenario:
    floorplan: FloorPlan
    agent_spawns: tuple[tuple[int, int], ...]
    enemies: tuple[EnemySpec, ...] = ()
    civilians: tuple[tuple[int, int], ...] = ()
    step_limit: int = 500
    order_sync: bool = False
    reward: RewardConfig = field(default_factory=RewardConfig)
    r_complete: float = 10.0
    agent_hp: int = 1
    enemy_hp: int = 1
    # optional caps on observation widths, for sharing networks across plans
    r_max_cap: int | None = None
    d_max_cap: int | None = None
    e_max_cap: int | None = None

    def __post_init__(self):
        validate_scenario(self)

    @property
    def r_max(self) -> int:
        return self.r_max_cap or self.floorplan.r_max

    @property
    def d_max(self) -> int:
        return self.d_max_cap or self.floorplan.d_max

    @property
    def e_max(self) -> int:
        return self.e_max_cap if self.e_max_cap is not None else len(self.enemies)

    @cached_property
    def hash(self) -> str:
        return hashlib.sha256(serialize_scenario(self).encode()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        names = [f for f in self.__dataclass_fields__]
        return all(getattr(self, n) == getattr(other, n) for n in names)

    __hash__ = None


def validate_scenario(s: Scenario) -> None:
    fp = s.floorplan
    grid = fp.grid
    occupied: set = set()

    def claim(cell, what):
        if grid.kind(cell) != FLOOR:
            raise ScenarioValidationError(f"{what} at {cell} not on floor", "spawn_not_on_floor")
        if cell in occupied:
            raise ScenarioValidationError(f"{what} at {cell} shares a cell with another entity", "shared_spawn")
        occupied.add(cell)

    if not s.agent_spawns:
        raise ScenarioValidationError("scenario needs at least one agent", "no_agents")
    for c in s.agent_spawns:
        claim(c, "agent spawn")
    for e in s.enemies:
        claim(e.spawn, "enemy spawn")
    for c in s.civilians:
        claim(c, "civilian")
    for k, e in enumerate(s.enemies):
        if e.behavior not in ENEMY_BEHAVIORS:
            raise ScenarioValidationError(f"enemy {k}: unknown behavior {e.behavior!r}", "bad_behavior")
        if e.hp < 1:
            raise ScenarioValidationError(f"enemy {k}: hp must be positive", "bad_hp")
        prev = e.spawn
        for c in e.route:
            if not grid.walkable(c):
                raise ScenarioValidationError(f"enemy {k}: path cell {c} not walkable", "enemy_path_not_walkable")
            if abs(c[0] - prev[0]) + abs(c[1] - prev[1]) != 1:
                raise ScenarioValidationError(f"enemy {k}: path step {prev}->{c} not 4-connected", "enemy_path_not_walkable")
            prev = c
    if s.step_limit < 1:
        raise ScenarioValidationError("step_limit must be positive", "bad_step_limit")
    if s.agent_hp < 1 or s.enemy_hp < 1:
        raise ScenarioValidationError("hp must be positive", "bad_hp")
    if s.reward.kind not in ("sparse", "default", "death_penalty", "civilian"):
        raise ScenarioValidationError(f"unknown reward config {s.reward}", "bad_reward")
    if s.r_max_cap is not None and fp.r_max > s.r_max_cap:
        raise ScenarioValidationError(f"room of size {fp.r_max} exceeds r_max={s.r_max_cap}", "room_too_large")
    if s.d_max_cap is not None and fp.d_max > s.d_max_cap:
        raise ScenarioValidationError(f"room with {fp.d_max} doors exceeds d_max={s.d_max_cap}", "too_many_doors")
    if s.e_max_cap is not None and len(s.enemies) > s.e_max_cap:
        raise ScenarioValidationError("more enemies than e_max", "too_many_enemies")


_MAP_CHARS = {"#": WALL, ".": FLOOR, "+": DOOR, "A": FLOOR, "E": FLOOR, "C": FLOOR}


def _parse_bool(value: str, lineno: int) -> bool:
    v = value.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ScenarioSyntaxError(f"expected true/false, got {value!r}", lineno)


def _parse_cells(value: str, lineno: int) -> tuple[tuple[int, int], ...]:
    out = []
    for part in value.split(";"):
        part = part.strip()
        if not part:
            continue
        try:
            x, y = (int(t) for t in part.split(","))
        except ValueError:
            raise ScenarioSyntaxError(f"bad coordinate {part!r}", lineno) from None
        out.append((x, y))
    return tuple(out)


def parse_scenario(text: str) -> Scenario:
    section = None
    rows: list[tuple[int, str]] = []
    meta: dict[str, tuple[int, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        stripped = line.strip()
        if stripped in ("[map]", "[meta]"):
            section = stripped[1:-1]
            continue
        if section == "map":
            if not stripped:
                continue
            for col, ch in enumerate(stripped, 1):
                if ch not in _MAP_CHARS:
                    raise ScenarioSyntaxError(f"unknown map character {ch!r}", lineno, col)
            rows.append((lineno, stripped))
        elif section == "meta":
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ScenarioSyntaxError("expected key=value", lineno)
            key, value = stripped.split("=", 1)
            meta[key.strip()] = (lineno, value.strip())
        elif stripped:
            raise ScenarioSyntaxError("content outside a [map] or [meta] section", lineno)
    if not rows:
        raise ScenarioSyntaxError("missing [map] section", 1)
    width = len(rows[0][1])
    for lineno, row in rows:
        if len(row) != width:
            raise ScenarioSyntaxError(f"row length {len(row)} differs from {width}", lineno, min(len(row), width) + 1)

    h = len(rows)
    cells = np.zeros((h, width), dtype=np.int8)
    agents, enemies, civilians = [], [], []
    for y, (lineno, row) in enumerate(rows):
        for x, ch in enumerate(row):
            cells[y, x] = _MAP_CHARS[ch]
            if ch in "AEC":
                if x in (0, width - 1) or y in (0, h - 1):
                    raise ScenarioValidationError(f"entity {ch!r} at {x},{y} lies on the outer wall", "spawn_not_on_floor")
                {"A": agents, "E": enemies, "C": civilians}[ch].append((x, y))

    values = dict(DEFAULTS)
    paths: dict[int, tuple] = {}
    behaviors: dict[int, str] = {}
    caps: dict[str, int] = {}
    for key, (lineno, value) in meta.items():
        try:
            if key in ("step_limit", "agent_hp", "enemy_hp"):
                values[key] = int(value)
            elif key == "order_sync":
                values[key] = _parse_bool(value, lineno)
            elif key == "reward":
                values[key] = RewardConfig.parse(value)
            elif key == "r_complete":
                values[key] = float(value)
            elif key in ("r_max", "d_max", "e_max"):
                caps[key] = int(value)
            elif key.startswith("enemy_path."):
                paths[int(key.split(".", 1)[1])] = _parse_cells(value, lineno)
            elif key.startswith("enemy_behavior."):
                behaviors[int(key.split(".", 1)[1])] = value
            else:
                raise ScenarioSyntaxError(f"unknown key {key!r}", lineno)
        except ValueError as exc:
            raise ScenarioSyntaxError(f"bad value for {key}: {exc}", lineno) from None
    if isinstance(values["reward"], str):
        values["reward"] = RewardConfig.parse(values["reward"])
    for k in list(paths) + list(behaviors):
        if not 0 <= k < len(enemies):
            raise ScenarioValidationError(f"enemy index {k} out of range", "bad_enemy_index")

    specs = []
    for k, spawn in enumerate(enemies):
        route = paths.get(k, ())
        behavior = behaviors.get(k, "path" if route else "stationary")
        specs.append(EnemySpec(spawn, values["enemy_hp"], behavior, route))

    return Scenario(
        floorplan=FloorPlan(Grid(cells)),
        agent_spawns=tuple(agents),
        enemies=tuple(specs),
        civilians=tuple(civilians),
        step_limit=values["step_limit"],
        order_sync=values["order_sync"],
        reward=values["reward"],
        r_complete=values["r_complete"],
        agent_hp=values["agent_hp"],
        enemy_hp=values["enemy_hp"],
        r_max_cap=caps.get("r_max"),
        d_max_cap=caps.get("d_max"),
        e_max_cap=caps.get("e_max"),
    )


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def serialize_scenario(s: Scenario) -> str:
    """Inverse of :func:`parse_scenario`.

    Entity spawn order must be row-major for an exact round trip, which is
    always the case for parsed scenarios.
    """
    chars = {WALL: "#", FLOOR: ".", DOOR: "+"}
    cells = s.floorplan.grid.cells
    rows = [[chars[int(v)] for v in row] for row in cells]
    for x, y in s.agent_spawns:
        rows[y][x] = "A"
    for e in s.enemies:
        rows[e.spawn[1]][e.spawn[0]] = "E"
    for x, y in s.civilians:
        rows[y][x] = "C"
    lines = ["[map]"] + ["".join(r) for r in rows] + ["", "[meta]"]
    lines += [
        f"step_limit={s.step_limit}",
        f"order_sync={'true' if s.order_sync else 'false'}",
        f"reward={s.reward}",
        f"r_complete={s.r_complete!r}",
        f"agent_hp={s.agent_hp}",
        f"enemy_hp={s.enemy_hp}",
    ]
    for key, cap in (("r_max", s.r_max_cap), ("d_max", s.d_max_cap), ("e_max", s.e_max_cap)):
        if cap is not None:
            lines.append(f"{key}={cap}")
    for k, e in enumerate(s.enemies):
        if e.route:
            lines.append(f"enemy_path.{k}=" + ";".join(f"{x},{y}" for x, y in e.route))
        if e.behavior != ("path" if e.route else "stationary"):
            lines.append(f"enemy_behavior.{k}={e.behavior}")
    return "\n".join(lines) + "\n"
