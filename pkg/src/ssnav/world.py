"""Procedural gridworld household: kinematics, visibility, detections, BFS.

One cell is 0.25 m, so MoveAhead is one cell and the 1.5 m success radius is
six cells. Headings are multiples of 45 degrees, clockwise, 0 = +y.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .semantic import ClassSplit, EmbeddingTable, cosine_similarity

HEADINGS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))
VIEW_DISTANCE = 6.0
FIELD_OF_VIEW = 90.0
WORLD_HEADER = "ssnav-world v1"


class Action(enum.IntEnum):
    MOVE_AHEAD = 0
    ROTATE_LEFT = 1
    ROTATE_RIGHT = 2
    LOOK_UP = 3
    LOOK_DOWN = 4
    DONE = 5


MOVE_ACTIONS = tuple(a for a in Action if a is not Action.DONE)


class StepEvent(enum.Enum):
    MOVED = "moved"
    TURNED = "turned"
    BLOCKED = "blocked"
    EPISODE_END = "episode_end"


class WorldError(ValueError):
    pass


class InfeasibleWorld(WorldError):
    pass


class UnknownClass(WorldError):
    pass


class Unreachable(Exception):
    """No pose satisfies the success check for the requested target."""


@dataclass(frozen=True, order=True)
class Pose:
    x: int
    y: int
    heading: int = 0
    tilt: int = 0

    def __post_init__(self):
        if not 0 <= self.heading < 8:
            raise WorldError(f"heading must be in 0..7, got {self.heading}")
        if self.tilt not in (-1, 0, 1):
            raise WorldError(f"tilt must be -1, 0 or 1, got {self.tilt}")


@dataclass(frozen=True)
class PlacedObject:
    class_name: str
    x: int
    y: int
    height_band: int = 0
    size: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.size <= 1.0:
            raise WorldError(f"object size must be in (0, 1], got {self.size}")
        if self.height_band not in (-1, 0, 1):
            raise WorldError(f"height band must be -1, 0 or 1, got {self.height_band}")


@dataclass(frozen=True)
class Detection:
    class_name: str
    v: int = 0
    x_c: float = 0.0
    y_c: float = 0.0
    area: float = 0.0

    def as_row(self) -> tuple[float, float, float, float]:
        return (float(self.v), self.x_c, self.y_c, self.area)


@dataclass(frozen=True)
class WorldSpec:
    width: int = 10
    height: int = 10
    wall_density: float = 0.1
    objects_per_class: tuple[int, int] = (1, 1)
    co_location_bias: float = 0.0
    band_weights: tuple[float, float, float] = (0.2, 0.6, 0.2)
    size_range: tuple[float, float] = (0.3, 1.0)
    room_type: str = "room"
    max_retries: int = 100


@dataclass(frozen=True, eq=False)
class GridWorld:
    width: int
    height: int
    walls: frozenset
    objects: tuple
    room_type: str = "room"
    seed: int = 0
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "walls", frozenset((int(x), int(y)) for x, y in self.walls))
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.width < 1 or self.height < 1:
            raise WorldError("grid dimensions must be positive")
        for cell in self.walls:
            if not self.in_bounds(*cell):
                raise WorldError(f"wall {cell} out of bounds")
        seen = set()
        for obj in self.objects:
            if not self.is_free(obj.x, obj.y):
                raise WorldError(f"object {obj} on a wall or out of bounds")
            key = (obj.x, obj.y, obj.class_name)
            if key in seen:
                raise WorldError(f"two {obj.class_name!r} objects on cell ({obj.x}, {obj.y})")
            seen.add(key)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridWorld):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.walls == other.walls
            and self.objects == other.objects
            and self.room_type == other.room_type
            and self.seed == other.seed
        )

    def __hash__(self) -> int:
        return hash((self.width, self.height, self.walls, self.objects, self.room_type, self.seed))

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and (x, y) not in self.walls

    def free_cells(self) -> list[tuple[int, int]]:
        return [(x, y) for x in range(self.width) for y in range(self.height) if (x, y) not in self.walls]

    def poses(self) -> Iterable[Pose]:
        for x, y in self.free_cells():
            for h in range(8):
                for t in (-1, 0, 1):
                    yield Pose(x, y, h, t)

    def classes(self) -> set[str]:
        return {o.class_name for o in self.objects}

    def is_connected(self) -> bool:
        return is_connected(self.width, self.height, self.walls)


def is_connected(width: int, height: int, walls: frozenset | set) -> bool:
    free = [(x, y) for x in range(width) for y in range(height) if (x, y) not in walls]
    if not free:
        return False
    seen = {free[0]}
    queue = deque([free[0]])
    while queue:
        x, y = queue.popleft()
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nxt = (x + dx, y + dy)
            if 0 <= nxt[0] < width and 0 <= nxt[1] < height and nxt not in walls and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(free)


# ---------------------------------------------------------------- kinematics


def step(world: GridWorld, pose: Pose, action: Action | int) -> tuple[Pose, StepEvent]:
    action = Action(action)
    if action is Action.MOVE_AHEAD:
        dx, dy = HEADINGS[pose.heading]
        nx, ny = pose.x + dx, pose.y + dy
        if not world.is_free(nx, ny):
            return pose, StepEvent.BLOCKED
        return Pose(nx, ny, pose.heading, pose.tilt), StepEvent.MOVED
    if action is Action.ROTATE_LEFT:
        return Pose(pose.x, pose.y, (pose.heading - 1) % 8, pose.tilt), StepEvent.TURNED
    if action is Action.ROTATE_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading + 1) % 8, pose.tilt), StepEvent.TURNED
    if action in (Action.LOOK_UP, Action.LOOK_DOWN):
        tilt = pose.tilt + (1 if action is Action.LOOK_UP else -1)
        if tilt not in (-1, 0, 1):
            return pose, StepEvent.BLOCKED
        return Pose(pose.x, pose.y, pose.heading, tilt), StepEvent.TURNED
    return pose, StepEvent.EPISODE_END


# ---------------------------------------------------------------- visibility


def supercover(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Every cell the segment between two cell centers touches, corners included."""
    dx, dy = x1 - x0, y1 - y0
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    adx, ady = abs(dx), abs(dy)
    x, y = x0, y0
    cells = [(x, y)]
    if adx >= ady:
        ddx, ddy = 2 * adx, 2 * ady
        error = errorprev = adx
        for _ in range(adx):
            x += sx
            error += ddy
            if error > ddx:
                y += sy
                error -= ddx
                if error + errorprev < ddx:
                    cells.append((x, y - sy))
                elif error + errorprev > ddx:
                    cells.append((x - sx, y))
                else:
                    cells.append((x, y - sy))
                    cells.append((x - sx, y))
            cells.append((x, y))
            errorprev = error
    else:
        ddx, ddy = 2 * adx, 2 * ady
        error = errorprev = ady
        for _ in range(ady):
            y += sy
            error += ddx
            if error > ddy:
                x += sx
                error -= ddy
                if error + errorprev < ddy:
                    cells.append((x - sx, y))
                elif error + errorprev > ddy:
                    cells.append((x, y - sy))
                else:
                    cells.append((x - sx, y))
                    cells.append((x, y - sy))
            cells.append((x, y))
            errorprev = error
    return cells


def line_of_sight(world: GridWorld, x0: int, y0: int, x1: int, y1: int) -> bool:
    key = ("los", x0, y0, x1, y1)
    hit = world._cache.get(key)
    if hit is None:
        hit = not any(c in world.walls for c in supercover(x0, y0, x1, y1))
        world._cache[key] = hit
    return hit


def _bearing(heading: int, dx: int, dy: int) -> float:
    """Signed angle in degrees from the heading to (dx, dy), clockwise positive."""
    hx, hy = HEADINGS[heading]
    # clockwise-positive: cross of (h, d) is negative when d is to the right
    cross = hx * dy - hy * dx
    dot = hx * dx + hy * dy
    return -math.degrees(math.atan2(cross, dot))


def observe(world: GridWorld, obj: PlacedObject, pose: Pose, fov: float = FIELD_OF_VIEW) -> Detection | None:
    if obj.height_band != pose.tilt:
        return None
    dx, dy = obj.x - pose.x, obj.y - pose.y
    dist = math.hypot(dx, dy)
    if dist > VIEW_DISTANCE:
        return None
    bearing = 0.0 if dist == 0 else _bearing(pose.heading, dx, dy)
    if abs(bearing) > fov / 2 + 1e-9:
        return None
    if not line_of_sight(world, pose.x, pose.y, obj.x, obj.y):
        return None
    x_c = min(1.0, max(0.0, 0.5 + bearing / fov))
    area = min(1.0, obj.size / max(1.0, dist) ** 2)
    return Detection(obj.class_name, 1, x_c, 0.5, area)


def visible_objects(world: GridWorld, pose: Pose) -> list[tuple[PlacedObject, Detection]]:
    key = ("vis", pose)
    hit = world._cache.get(key)
    if hit is None:
        hit = []
        for obj in world.objects:
            det = observe(world, obj, pose)
            if det is not None:
                hit.append((obj, det))
        world._cache[key] = hit
    return list(hit)


def visible_classes(world: GridWorld, pose: Pose) -> list[str]:
    return [obj.class_name for obj, _ in visible_objects(world, pose)]


def detection_matrix(world: GridWorld, pose: Pose, split: ClassSplit) -> np.ndarray:
    """(n + k) x 4 array of [v, x_c, y_c, area] rows in ``split.model_classes`` order."""
    for cls in world.classes():
        if cls not in split:
            raise UnknownClass(cls)
    rows = {name: i for i, name in enumerate(split.model_classes)}
    out = np.zeros((len(rows), 4))
    best: dict[str, tuple[float, int, int]] = {}
    for obj, det in visible_objects(world, pose):
        i = rows.get(obj.class_name)
        if i is None:
            continue  # unseen classes have no row
        cur = best.get(obj.class_name)
        # larger area wins; exact ties go to the smaller (x, y)
        if cur is None or det.area > cur[0] or (det.area == cur[0] and (obj.x, obj.y) < cur[1:]):
            best[obj.class_name] = (det.area, obj.x, obj.y)
            out[i] = det.as_row()
    return out


def success_check(world: GridWorld, pose: Pose, target: str) -> bool:
    return any(obj.class_name == target for obj, _ in visible_objects(world, pose))


def shortest_path_length(world: GridWorld, start: Pose, target: str) -> int:
    """Fewest non-Done actions from ``start`` to a pose where the target is visible."""
    if success_check(world, start, target):
        return 0
    dist = {start: 0}
    queue = deque([start])
    while queue:
        pose = queue.popleft()
        d = dist[pose]
        for action in MOVE_ACTIONS:
            nxt, event = step(world, pose, action)
            if event is StepEvent.BLOCKED or nxt in dist:
                continue
            if success_check(world, nxt, target):
                return d + 1
            dist[nxt] = d + 1
            queue.append(nxt)
    raise Unreachable(f"no pose sees {target!r} from {start}")


# ---------------------------------------------------------------- generation


def gen_world(
    seed: int,
    spec: WorldSpec,
    split: ClassSplit,
    embeddings: EmbeddingTable | None = None,
) -> GridWorld:
    """Generate a connected world holding every class in ``split``.

    With probability ``co_location_bias`` an object is dropped within
    Chebyshev distance 2 of an instance of the most similar class already
    placed, and copies that instance's height band.
    """
    if spec.width < 5 or spec.height < 5:
        raise InfeasibleWorld("width and height must be >= 5")
    if spec.co_location_bias > 0 and embeddings is None:
        raise InfeasibleWorld("co-location needs embeddings")
    rng = np.random.default_rng(seed)
    lo, hi = spec.objects_per_class

    for _ in range(spec.max_retries):
        walls = {
            (x, y)
            for x in range(spec.width)
            for y in range(spec.height)
            if rng.random() < spec.wall_density
        }
        if is_connected(spec.width, spec.height, walls):
            break
    else:
        raise InfeasibleWorld(f"no connected layout after {spec.max_retries} retries")

    free = [(x, y) for x in range(spec.width) for y in range(spec.height) if (x, y) not in walls]
    classes = list(split.all_classes)
    counts = rng.integers(lo, hi + 1, size=len(classes))
    if max(counts, default=0) > len(free):
        raise InfeasibleWorld("more instances of one class than free cells")
    order = [name for name, n in zip(classes, counts) for _ in range(n)]
    order = [order[i] for i in rng.permutation(len(order))]

    band_p = np.asarray(spec.band_weights, dtype=float)
    band_p = band_p / band_p.sum()
    placed: list[PlacedObject] = []
    occupied: set[tuple[int, int, str]] = set()
    for name in order:
        options = [c for c in free if (c[0], c[1], name) not in occupied]
        cell = band = None
        others = [o for o in placed if o.class_name != name]
        if others and spec.co_location_bias > 0 and rng.random() < spec.co_location_bias:
            anchor_cls = max(
                sorted({o.class_name for o in others}),
                key=lambda c: cosine_similarity(embeddings[c], embeddings[name]),
            )
            anchors = [o for o in others if o.class_name == anchor_cls]
            anchor = anchors[int(rng.integers(len(anchors)))]
            near = [c for c in options if max(abs(c[0] - anchor.x), abs(c[1] - anchor.y)) <= 2]
            if near:
                cell = near[int(rng.integers(len(near)))]
                band = anchor.height_band
        if cell is None:
            cell = options[int(rng.integers(len(options)))]
            band = int(rng.choice(3, p=band_p)) - 1
        size = float(rng.uniform(*spec.size_range))
        obj = PlacedObject(name, cell[0], cell[1], band, size)
        placed.append(obj)
        occupied.add((cell[0], cell[1], name))

    return GridWorld(spec.width, spec.height, frozenset(walls), tuple(placed), spec.room_type, seed)


# ---------------------------------------------------------------- persistence


def dump_world(world: GridWorld) -> str:
    lines = [
        WORLD_HEADER,
        f"width = {world.width}",
        f"height = {world.height}",
        f"seed = {world.seed}",
        f"room_type = {world.room_type}",
    ]
    lines += [f"wall {x} {y}" for x, y in sorted(world.walls)]
    lines += [f"obj {o.class_name} {o.x} {o.y} {o.height_band} {o.size!r}" for o in world.objects]
    return "\n".join(lines) + "\n"


def parse_world(text: str) -> GridWorld:
    lines = text.splitlines()
    if not lines or lines[0].strip() != WORLD_HEADER:
        raise WorldError(f"expected header {WORLD_HEADER!r}")
    meta: dict[str, str] = {}
    walls, objects = [], []
    for lineno, raw in enumerate(lines[1:], 2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "wall":
                walls.append((int(parts[1]), int(parts[2])))
            elif parts[0] == "obj":
                objects.append(PlacedObject(parts[1], int(parts[2]), int(parts[3]), int(parts[4]), float(parts[5])))
            elif "=" in line:
                key, value = (s.strip() for s in line.split("=", 1))
                meta[key] = value
            else:
                raise WorldError(f"line {lineno}: unrecognised entry {line!r}")
        except (IndexError, ValueError) as exc:
            raise WorldError(f"line {lineno}: {exc}") from None
    try:
        return GridWorld(
            int(meta["width"]),
            int(meta["height"]),
            frozenset(walls),
            tuple(objects),
            meta.get("room_type", "room"),
            int(meta.get("seed", 0)),
        )
    except KeyError as exc:
        raise WorldError(f"missing key {exc}") from None


def save_world(world: GridWorld, path: str | Path) -> None:
    Path(path).write_text(dump_world(world), encoding="utf-8")


def load_world(path: str | Path) -> GridWorld:
    return parse_world(Path(path).read_text(encoding="utf-8"))


def render(world: GridWorld, pose: Pose | None = None, marks: Sequence[tuple[int, int]] = ()) -> str:
    """ASCII map, +y up. '#' wall, 'o' object, '*' marked cell, arrow = agent."""
    arrows = ["^", "/", ">", "\\", "v", "/", "<", "\\"]
    obj_cells = {(o.x, o.y) for o in world.objects}
    rows = []
    for y in reversed(range(world.height)):
        row = []
        for x in range(world.width):
            if pose is not None and (x, y) == (pose.x, pose.y):
                row.append(arrows[pose.heading])
            elif (x, y) in world.walls:
                row.append("#")
            elif (x, y) in marks:
                row.append("*")
            elif (x, y) in obj_cells:
                row.append("o")
            else:
                row.append(".")
        rows.append("".join(row))
    return "\n".join(rows)
