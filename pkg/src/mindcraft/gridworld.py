"""Deterministic multi-room grid world.

Cells are unit squares addressed by integer (x, y), x growing east and y growing
south. Rooms are axis-aligned rectangles; moving between two rooms is only
possible through a door (a pair of 4-adjacent cells in different rooms). Walls
are the unit edges between cells that cannot be crossed.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, asdict
from enum import IntEnum
from functools import cached_property

import numpy as np

from .vocab import CATEGORIES, COLORS, ROOM_TYPES


class InfeasibleLayout(Exception):
    pass


class Unreachable(Exception):
    pass


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


# forward unit vector and right unit vector per heading
FORWARD_VEC = {Heading.N: (0, -1), Heading.E: (1, 0), Heading.S: (0, 1), Heading.W: (-1, 0)}
RIGHT_VEC = {Heading.N: (1, 0), Heading.E: (0, 1), Heading.S: (-1, 0), Heading.W: (0, -1)}

DEFAULT_VIEW_DEPTH = 6

# categories that show up more often in a given room type
ROOM_PRIORS = {
    "kitchen": ("sink", "fridge", "oven", "table", "chair"),
    "bedroom": ("bed", "lamp", "cabinet", "shelf"),
    "living_room": ("sofa", "tv", "lamp", "plant", "table"),
    "bathroom": ("toilet", "sink", "bathtub", "cabinet"),
    "hallway": ("vase", "plant", "shelf"),
    "office": ("desk", "chair", "shelf", "lamp"),
}


@dataclass(frozen=True)
class Room:
    region_id: int
    room_type: str
    rect: tuple  # (x0, y0, x1, y1), inclusive cell bounds

    def contains(self, x, y):
        x0, y0, x1, y1 = self.rect
        return x0 <= x <= x1 and y0 <= y <= y1

    def cells(self):
        x0, y0, x1, y1 = self.rect
        return [(x, y) for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)]


@dataclass(frozen=True)
class ObjectInstance:
    object_id: int
    category: str
    attribute: str
    cell: tuple
    region_id: int


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: Heading

    def cell(self):
        return (self.x, self.y)


@dataclass(frozen=True)
class VisibleObject:
    object_id: int
    category: str
    attribute: str
    apparent_size: float
    bearing: str
    distance: int


@dataclass(frozen=True)
class Observation:
    t: int
    visible: tuple
    depth_profile: tuple
    region_id: int

    def to_dict(self):
        return {
            "t": self.t,
            "visible": [asdict(v) for v in self.visible],
            "depth_profile": list(self.depth_profile),
            "region_id": self.region_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            t=d["t"],
            visible=tuple(VisibleObject(**v) for v in d["visible"]),
            depth_profile=tuple(d["depth_profile"]),
            region_id=d["region_id"],
        )


@dataclass
class SceneConfig:
    width: int = 12
    height: int = 12
    n_rooms: int = 4
    min_room_size: int = 3
    objects_per_room: tuple = (1, 3)
    extra_door_prob: float = 0.3
    view_depth: int = DEFAULT_VIEW_DEPTH
    max_retries: int = 50

    def validate(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("grid must be at least 8x8")
        if self.n_rooms < 1:
            raise ValueError("need at least one room")
        if self.min_room_size < 1:
            raise ValueError("min_room_size must be positive")
        lo, hi = self.objects_per_room
        if lo < 0 or hi < lo:
            raise ValueError("bad objects_per_room")


@dataclass
class SceneGraph:
    grid_width: int
    grid_height: int
    rooms: list
    doors: list  # list of ((x, y), (x, y)) cell pairs
    objects: list
    seed: int
    view_depth: int = DEFAULT_VIEW_DEPTH

    # -- derived structure -------------------------------------------------
    @cached_property
    def region_map(self):
        grid = np.full((self.grid_height, self.grid_width), -1, dtype=np.int64)
        for room in self.rooms:
            x0, y0, x1, y1 = room.rect
            grid[y0:y1 + 1, x0:x1 + 1] = room.region_id
        return grid

    @cached_property
    def door_set(self):
        s = set()
        for a, b in self.doors:
            s.add((tuple(a), tuple(b)))
            s.add((tuple(b), tuple(a)))
        return s

    @cached_property
    def room_by_id(self):
        return {r.region_id: r for r in self.rooms}

    @cached_property
    def adjacency(self):
        adj = {r.region_id: set() for r in self.rooms}
        for a, b in self.doors:
            ra, rb = self.region_at(*a), self.region_at(*b)
            adj[ra].add(rb)
            adj[rb].add(ra)
        return adj

    @cached_property
    def wall_edges(self):
        """Blocking unit edges in doubled coordinates: ((X0, Y0), (X1, Y1))."""
        walls = []
        W, H = self.grid_width, self.grid_height
        for y in range(H):
            for x in range(W):
                if x + 1 < W and not self.passable((x, y), (x + 1, y)):
                    if self.region_at(x, y) >= 0 or self.region_at(x + 1, y) >= 0:
                        walls.append(((2 * x + 2, 2 * y), (2 * x + 2, 2 * y + 2)))
                if y + 1 < H and not self.passable((x, y), (x, y + 1)):
                    if self.region_at(x, y) >= 0 or self.region_at(x, y + 1) >= 0:
                        walls.append(((2 * x, 2 * y + 2), (2 * x + 2, 2 * y + 2)))
        return walls

    def region_at(self, x, y):
        if 0 <= x < self.grid_width and 0 <= y < self.grid_height:
            return int(self.region_map[y, x])
        return -1

    def in_room(self, x, y):
        return self.region_at(x, y) >= 0

    def passable(self, a, b):
        ra, rb = self.region_at(*a), self.region_at(*b)
        if ra < 0 or rb < 0:
            return False
        if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
            return False
        return ra == rb or (tuple(a), tuple(b)) in self.door_set

    def room_type_of(self, region_id):
        return self.room_by_id[region_id].room_type

    # -- serialization -----------------------------------------------------
    def to_dict(self):
        return {
            "seed": self.seed,
            "grid_width": self.grid_width,
            "grid_height": self.grid_height,
            "view_depth": self.view_depth,
            "rooms": [{"region_id": r.region_id, "room_type": r.room_type, "rect": list(r.rect)}
                      for r in self.rooms],
            "doors": [[list(a), list(b)] for a, b in self.doors],
            "objects": [{"object_id": o.object_id, "category": o.category,
                         "attribute": o.attribute, "cell": list(o.cell),
                         "region_id": o.region_id} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            grid_width=d["grid_width"],
            grid_height=d["grid_height"],
            rooms=[Room(r["region_id"], r["room_type"], tuple(r["rect"])) for r in d["rooms"]],
            doors=[(tuple(a), tuple(b)) for a, b in d["doors"]],
            objects=[ObjectInstance(o["object_id"], o["category"], o["attribute"],
                                    tuple(o["cell"]), o["region_id"]) for o in d["objects"]],
            seed=d["seed"],
            view_depth=d.get("view_depth", DEFAULT_VIEW_DEPTH),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# scene generation

def _split_rects(rng, W, H, n_rooms, min_size):
    rects = [(0, 0, W - 1, H - 1)]
    while len(rects) < n_rooms:
        options = []
        for i, (x0, y0, x1, y1) in enumerate(rects):
            w, h = x1 - x0 + 1, y1 - y0 + 1
            if w >= 2 * min_size:
                options.append((i, 0))
            if h >= 2 * min_size:
                options.append((i, 1))
        if not options:
            return None
        areas = np.array([(rects[i][2] - rects[i][0] + 1) * (rects[i][3] - rects[i][1] + 1)
                          for i, _ in options], dtype=float)
        i, axis = options[rng.choice(len(options), p=areas / areas.sum())]
        x0, y0, x1, y1 = rects.pop(i)
        if axis == 0:
            cut = int(rng.integers(x0 + min_size, x1 - min_size + 2))
            rects[i:i] = [(x0, y0, cut - 1, y1), (cut, y0, x1, y1)]
        else:
            cut = int(rng.integers(y0 + min_size, y1 - min_size + 2))
            rects[i:i] = [(x0, y0, x1, cut - 1), (x0, cut, x1, y1)]
    return rects


def _door_candidates(a, b):
    """Cell pairs across the shared boundary of two rectangles (may be empty)."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    pairs = []
    if ax1 + 1 == bx0 or bx1 + 1 == ax0:
        left, right = (a, b) if ax1 + 1 == bx0 else (b, a)
        for y in range(max(ay0, by0), min(ay1, by1) + 1):
            pairs.append(((left[2], y), (right[0], y)))
    if ay1 + 1 == by0 or by1 + 1 == ay0:
        top, bottom = (a, b) if ay1 + 1 == by0 else (b, a)
        for x in range(max(ax0, bx0), min(ax1, bx1) + 1):
            pairs.append(((x, top[3]), (x, bottom[1])))
    return pairs


def generate_scene(seed: int, config: SceneConfig | None = None) -> SceneGraph:
    config = config or SceneConfig()
    config.validate()
    W, H, n = config.width, config.height, config.n_rooms
    if n * config.min_room_size ** 2 > W * H:
        raise InfeasibleLayout(f"{n} rooms of size {config.min_room_size} do not fit in {W}x{H}")
    rng = np.random.default_rng(seed)
    rects = None
    for _ in range(config.max_retries):
        rects = _split_rects(rng, W, H, n, config.min_room_size)
        if rects is not None:
            break
    if rects is None:
        raise InfeasibleLayout(f"could not pack {n} rooms within {config.max_retries} attempts")

    if n <= len(ROOM_TYPES):
        types = [ROOM_TYPES[i] for i in rng.permutation(len(ROOM_TYPES))[:n]]
    else:
        types = [ROOM_TYPES[i] for i in rng.integers(0, len(ROOM_TYPES), size=n)]
    rooms = [Room(i, types[i], tuple(int(v) for v in r)) for i, r in enumerate(rects)]

    # random spanning tree over touching rooms, plus a few extra doors
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            cands = _door_candidates(rects[i], rects[j])
            if cands:
                pairs.append((i, j, cands))
    order = rng.permutation(len(pairs))
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    doors = []
    for k in order:
        i, j, cands = pairs[k]
        ri, rj = find(i), find(j)
        if ri != rj or rng.random() < config.extra_door_prob:
            parent[ri] = rj
            a, b = cands[int(rng.integers(len(cands)))]
            doors.append(((int(a[0]), int(a[1])), (int(b[0]), int(b[1]))))

    objects = []
    lo, hi = config.objects_per_room
    for room in rooms:
        cells = room.cells()
        count = min(int(rng.integers(lo, hi + 1)), len(cells))
        picks = rng.choice(len(cells), size=count, replace=False)
        for c in picks:
            prior = ROOM_PRIORS[room.room_type]
            if rng.random() < 0.7:
                category = prior[int(rng.integers(len(prior)))]
            else:
                category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
            attribute = COLORS[int(rng.integers(len(COLORS)))]
            x, y = cells[int(c)]
            objects.append(ObjectInstance(len(objects), category, attribute, (x, y), room.region_id))

    return SceneGraph(W, H, rooms, doors, objects, int(seed), view_depth=config.view_depth)


# ---------------------------------------------------------------------------
# perception

def apparent_size(distance):
    return 1.0 / (1.0 + distance)


def _orient(p, q, r):
    v = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    return (v > 0) - (v < 0)


def _on_segment(p, q, r):
    return min(p[0], r[0]) <= q[0] <= max(p[0], r[0]) and min(p[1], r[1]) <= q[1] <= max(p[1], r[1])


def segments_intersect(p1, p2, q1, q2):
    """Closed-segment intersection on integer coordinates."""
    o1, o2 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    o3, o4 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and _on_segment(p1, q1, p2):
        return True
    if o2 == 0 and _on_segment(p1, q2, p2):
        return True
    if o3 == 0 and _on_segment(q1, p1, q2):
        return True
    if o4 == 0 and _on_segment(q1, p2, q2):
        return True
    return False


def line_of_sight(scene: SceneGraph, a, b):
    """True when the segment between the centres of cells a and b touches no wall edge."""
    if tuple(a) == tuple(b):
        return True
    p = (2 * a[0] + 1, 2 * a[1] + 1)
    q = (2 * b[0] + 1, 2 * b[1] + 1)
    xmin, xmax = min(p[0], q[0]), max(p[0], q[0])
    ymin, ymax = min(p[1], q[1]), max(p[1], q[1])
    for w0, w1 in scene.wall_edges:
        if max(w0[0], w1[0]) < xmin or min(w0[0], w1[0]) > xmax:
            continue
        if max(w0[1], w1[1]) < ymin or min(w0[1], w1[1]) > ymax:
            continue
        if segments_intersect(p, q, w0, w1):
            return False
    return True


def egocentric(pose: Pose, cell):
    """(forward, lateral) offset of a cell in the agent frame; lateral > 0 is right."""
    dx, dy = cell[0] - pose.x, cell[1] - pose.y
    fx, fy = FORWARD_VEC[pose.heading]
    rx, ry = RIGHT_VEC[pose.heading]
    return dx * fx + dy * fy, dx * rx + dy * ry


def bearing_of(lateral):
    if lateral < 0:
        return "left"
    if lateral > 0:
        return "right"
    return "center"


def _ray_length(scene, pose, heading, depth):
    dx, dy = FORWARD_VEC[heading]
    x, y, n = pose.x, pose.y, 0
    while n < depth and scene.passable((x, y), (x + dx, y + dy)):
        x, y, n = x + dx, y + dy, n + 1
    return n


def observe(scene: SceneGraph, pose: Pose, t: int = 0) -> Observation:
    depth = scene.view_depth
    visible = []
    for obj in scene.objects:
        fwd, lat = egocentric(pose, obj.cell)
        if fwd < 0 or abs(lat) > fwd:
            continue
        dist = max(abs(obj.cell[0] - pose.x), abs(obj.cell[1] - pose.y))
        if dist > depth:
            continue
        if not line_of_sight(scene, pose.cell(), obj.cell):
            continue
        visible.append(VisibleObject(obj.object_id, obj.category, obj.attribute,
                                     apparent_size(dist), bearing_of(lat), dist))
    h = pose.heading
    rays = (Heading((h - 1) % 4), h, Heading((h + 1) % 4))
    depth_profile = tuple(_ray_length(scene, pose, r, depth) / depth for r in rays)
    return Observation(t, tuple(visible), depth_profile, scene.region_at(pose.x, pose.y))


# ---------------------------------------------------------------------------
# motion and planning

def step(scene: SceneGraph, pose: Pose, action: Action) -> Pose:
    action = Action(action)
    if action == Action.FORWARD:
        dx, dy = FORWARD_VEC[pose.heading]
        nxt = (pose.x + dx, pose.y + dy)
        if scene.passable(pose.cell(), nxt):
            return Pose(nxt[0], nxt[1], pose.heading)
        return pose
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, Heading((pose.heading - 1) % 4))
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, Heading((pose.heading + 1) % 4))
    return pose


_MOVES = (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)


def _state_index(scene, x, y, h):
    return (y * scene.grid_width + x) * 4 + int(h)


def _distance_to_goal(scene, goal):
    """Backward BFS over (cell, heading) states; -1 marks unreachable."""
    W, H = scene.grid_width, scene.grid_height
    n = W * H * 4
    rev = [[] for _ in range(n)]
    for y in range(H):
        for x in range(W):
            if not scene.in_room(x, y):
                continue
            for h in Heading:
                p = Pose(x, y, h)
                s = _state_index(scene, x, y, h)
                for a in _MOVES:
                    q = step(scene, p, a)
                    if q != p:
                        rev[_state_index(scene, q.x, q.y, q.heading)].append(s)
    dist = np.full(n, -1, dtype=np.int64)
    queue = deque()
    for h in Heading:
        s = _state_index(scene, goal[0], goal[1], h)
        dist[s] = 0
        queue.append(s)
    while queue:
        s = queue.popleft()
        for p in rev[s]:
            if dist[p] < 0:
                dist[p] = dist[s] + 1
                queue.append(p)
    return dist


def expert_path(scene: SceneGraph, start: Pose, goal) -> list:
    """Shortest action sequence to ``goal`` ending in STOP.

    Among shortest sequences, the one picking FORWARD < TURN_LEFT < TURN_RIGHT
    first at every step is returned.
    """
    goal = tuple(goal)
    if not scene.in_room(*goal):
        raise Unreachable(f"goal {goal} is not traversable")
    dist = _distance_to_goal(scene, goal)
    pose = start
    if dist[_state_index(scene, pose.x, pose.y, pose.heading)] < 0:
        raise Unreachable(f"no path from {start} to {goal}")
    actions = []
    while pose.cell() != goal:
        d = dist[_state_index(scene, pose.x, pose.y, pose.heading)]
        for a in _MOVES:
            q = step(scene, pose, a)
            if dist[_state_index(scene, q.x, q.y, q.heading)] == d - 1:
                actions.append(a)
                pose = q
                break
    actions.append(Action.STOP)
    return actions


def cell_distances(scene: SceneGraph, source):
    """Geodesic cell distance (4-connected moves through doors) from ``source``."""
    dist = {tuple(source): 0}
    queue = deque([tuple(source)])
    while queue:
        c = queue.popleft()
        for dx, dy in ((0, -1), (1, 0), (0, 1), (-1, 0)):
            n = (c[0] + dx, c[1] + dy)
            if n not in dist and scene.passable(c, n):
                dist[n] = dist[c] + 1
                queue.append(n)
    return dist


def rollout_poses(scene, start, actions):
    poses = [start]
    for a in actions:
        poses.append(step(scene, poses[-1], a))
    return poses


# ---------------------------------------------------------------------------
# instructions

def _nearest_object(scene, region_id, cells):
    best = None
    for obj in scene.objects:
        if obj.region_id != region_id:
            continue
        d = min(max(abs(obj.cell[0] - c[0]), abs(obj.cell[1] - c[1])) for c in cells)
        key = (d, obj.object_id)
        if best is None or key < best[0]:
            best = (key, obj)
    return None if best is None else best[1]


def make_instruction(scene: SceneGraph, path, start: Pose) -> list:
    poses = rollout_poses(scene, start, path)
    segments = []  # (region_id, cells visited in it)
    for p in poses:
        r = scene.region_at(p.x, p.y)
        if not segments or segments[-1][0] != r:
            segments.append((r, []))
        segments[-1][1].append(p.cell())
    if len(segments) == 1:
        lm = _nearest_object(scene, segments[0][0], [poses[-1].cell()])
        if lm is None:
            return "walk ahead and stop".split(" ")
        return f"walk to the {lm.attribute} {lm.category} and stop".split(" ")
    words = ["leave", "the", scene.room_type_of(segments[0][0])]
    for region, cells in segments[1:]:
        words += [",", "walk", "into", "the", scene.room_type_of(region)]
        lm = _nearest_object(scene, region, cells)
        if lm is not None:
            words += [",", "pass", "the", lm.attribute, lm.category]
    words += [",", "and", "stop"]
    return words
