"""Deterministic 2D apartment simulator.

Coordinates are metres with the origin at the lower-left corner of the map.
The occupancy grid is stored as ``occupied[iy, ix]`` with ``iy = 0`` at the
bottom; cell centres sit at ``((ix + .5) * res, (iy + .5) * res)``.  Furniture
is not part of the grid, only walls are.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from matplotlib.path import Path as PolyPath
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

SIZE_CLASSES = ("large", "mid", "small")
SQRT2 = math.sqrt(2.0)


class WorldError(ValueError):
    pass


class Unreachable(WorldError):
    pass


@dataclass(frozen=True)
class ViewPose:
    x: float
    y: float
    yaw: float
    utility: float = float("nan")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def direction(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw)])


@dataclass(frozen=True)
class Room:
    name: str
    type: str
    polygon: Tuple[Tuple[float, float], ...]


@dataclass
class WorldMap:
    occupied: np.ndarray   # bool (ny, nx)
    resolution: float
    rooms: List[Room] = field(default_factory=list)

    def __post_init__(self):
        self.occupied = np.asarray(self.occupied, dtype=bool)
        ny, nx = self.occupied.shape
        self.width = nx * self.resolution
        self.height = ny * self.resolution
        self._clearance = None
        self._graph = None
        self._room_index = None
        self._room_cells = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.occupied.shape

    def cell_of(self, points) -> Tuple[np.ndarray, np.ndarray]:
        p = np.asarray(points, dtype=float)
        ix = np.floor(p[..., 0] / self.resolution).astype(int)
        iy = np.floor(p[..., 1] / self.resolution).astype(int)
        return ix, iy

    def cell_center(self, ix, iy) -> np.ndarray:
        return np.stack([(np.asarray(ix) + 0.5) * self.resolution,
                         (np.asarray(iy) + 0.5) * self.resolution], axis=-1)

    def in_extent(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (p[..., 0] >= 0) & (p[..., 0] < self.width) & (p[..., 1] >= 0) & (p[..., 1] < self.height)

    def is_free(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        inside = self.in_extent(p)
        ix, iy = self.cell_of(p)
        ny, nx = self.occupied.shape
        ix = np.clip(ix, 0, nx - 1)
        iy = np.clip(iy, 0, ny - 1)
        return inside & ~self.occupied[iy, ix]

    def clearance(self, points) -> np.ndarray:
        """Distance (m) from the point's cell centre to the nearest occupied cell centre."""
        if self._clearance is None:
            self._clearance = ndimage.distance_transform_edt(~self.occupied) * self.resolution
        p = np.asarray(points, dtype=float)
        ix, iy = self.cell_of(p)
        ny, nx = self.occupied.shape
        ok = self.in_extent(p)
        out = np.zeros(ok.shape)
        out[ok] = self._clearance[iy[ok], ix[ok]]
        return out

    def room_index(self) -> np.ndarray:
        """Per-cell room id (-1 outside every room)."""
        if self._room_index is None:
            ny, nx = self.occupied.shape
            centers = self.cell_center(*np.meshgrid(np.arange(nx), np.arange(ny))).reshape(-1, 2)
            idx = np.full(centers.shape[0], -1)
            for r, room in enumerate(self.rooms):
                inside = PolyPath(room.polygon).contains_points(centers)
                if np.any(inside & (idx >= 0) & ~self.occupied.ravel()):
                    raise WorldError(f"room {room.name!r} overlaps another room on free cells")
                idx[inside & (idx < 0)] = r
            self._room_index = idx.reshape(ny, nx)
        return self._room_index

    def room_free_cells(self) -> np.ndarray:
        """Centres of free cells that lie inside some room, shape (C, 2)."""
        if self._room_cells is None:
            ri = self.room_index()
            iy, ix = np.nonzero((ri >= 0) & ~self.occupied)
            self._room_cells = self.cell_center(ix, iy)
        return self._room_cells

    def room_of(self, point) -> Optional[Room]:
        ix, iy = self.cell_of(point)
        if not self.in_extent(point):
            return None
        r = self.room_index()[iy, ix]
        return self.rooms[r] if r >= 0 else None

    # -- graph search -------------------------------------------------------

    def _cell_graph(self) -> csr_matrix:
        if self._graph is None:
            ny, nx = self.occupied.shape
            free = ~self.occupied
            ids = np.arange(nx * ny).reshape(ny, nx)
            rows, cols, data = [], [], []
            for dy, dx in _MOVES:
                cost = (SQRT2 if dx and dy else 1.0) * self.resolution
                ys = slice(max(0, -dy), ny - max(0, dy))
                xs = slice(max(0, -dx), nx - max(0, dx))
                ys2 = slice(max(0, dy), ny - max(0, -dy))
                xs2 = slice(max(0, dx), nx - max(0, -dx))
                ok = free[ys, xs] & free[ys2, xs2]
                rows.append(ids[ys, xs][ok])
                cols.append(ids[ys2, xs2][ok])
                data.append(np.full(int(ok.sum()), cost))
            self._graph = csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                                     shape=(nx * ny, nx * ny))
        return self._graph

    def distance_field(self, source) -> np.ndarray:
        """Shortest 8-connected path length (m) from ``source`` to every cell (inf if unreachable)."""
        ix, iy = self.cell_of(source)
        if not self.is_free(source):
            raise WorldError(f"source {tuple(source)} is not in free space")
        ny, nx = self.occupied.shape
        d = dijkstra(self._cell_graph(), indices=int(iy) * nx + int(ix))
        return d.reshape(ny, nx)


_MOVES = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def parse_grid(text: str) -> WorldMap:
    lines = [ln.rstrip("\n") for ln in text.splitlines()]
    if not lines or not lines[0].startswith("resolution"):
        raise WorldError("grid file must start with 'resolution <m>'")
    res = float(lines[0].split()[1])
    rows = [ln for ln in lines[1:] if ln]
    if not rows or len({len(r) for r in rows}) != 1:
        raise WorldError("grid rows must be non-empty and of equal width")
    bad = set("".join(rows)) - {"#", "."}
    if bad:
        raise WorldError(f"unexpected grid characters {sorted(bad)}")
    occ = np.array([[c == "#" for c in r] for r in rows], dtype=bool)[::-1]
    return WorldMap(occ, res)


def format_grid(m: WorldMap) -> str:
    rows = ["".join("#" if c else "." for c in row) for row in m.occupied[::-1]]
    return f"resolution {m.resolution:g}\n" + "\n".join(rows) + "\n"


# -- A* -----------------------------------------------------------------------

def _octile(a, b) -> float:
    dx = abs(a[0] - b[0])
    dy = abs(a[1] - b[1])
    return (max(dx, dy) - min(dx, dy)) + SQRT2 * min(dx, dy)


def astar_path(world_map: WorldMap, start, goal) -> Tuple[List[Tuple[int, int]], float]:
    """8-connected A* between the cells containing ``start`` and ``goal``.

    Returns the cell path as ``(ix, iy)`` tuples and its length in metres.
    The length is evaluated as ``(straight + sqrt2 * diagonal) * res`` from the
    step counts, so every optimal path reports the same float.
    """
    for name, p in (("start", start), ("goal", goal)):
        if not world_map.is_free(p):
            raise WorldError(f"{name} {tuple(np.round(p, 3))} is not in free space")
    occ = world_map.occupied
    ny, nx = occ.shape
    s = tuple(int(v) for v in world_map.cell_of(start))
    g = tuple(int(v) for v in world_map.cell_of(goal))
    best = {s: 0.0}
    came: Dict[Tuple[int, int], Tuple[int, int]] = {}
    heap = [(_octile(s, g), 0.0, s)]
    closed = set()
    while heap:
        _, cost, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == g:
            path = [cur]
            while path[-1] in came:
                path.append(came[path[-1]])
            path.reverse()
            return path, path_length(path, world_map.resolution)
        closed.add(cur)
        cx, cy = cur
        for dy, dx in _MOVES:
            x, y = cx + dx, cy + dy
            if not (0 <= x < nx and 0 <= y < ny) or occ[y, x]:
                continue
            nc = cost + (SQRT2 if dx and dy else 1.0)
            if nc < best.get((x, y), math.inf) - 1e-12:
                best[(x, y)] = nc
                came[(x, y)] = cur
                heapq.heappush(heap, (nc + _octile((x, y), g), nc, (x, y)))
    raise Unreachable(f"no path from {tuple(np.round(start, 3))} to {tuple(np.round(goal, 3))}")


def path_length(cells: Sequence[Tuple[int, int]], resolution: float) -> float:
    straight = diagonal = 0
    for (x0, y0), (x1, y1) in zip(cells, cells[1:]):
        if x0 != x1 and y0 != y1:
            diagonal += 1
        else:
            straight += 1
    return (straight + SQRT2 * diagonal) * resolution


def astar_distance(world_map: WorldMap, start, goal) -> float:
    return astar_path(world_map, start, goal)[1]


# -- objects, detector, robot -----------------------------------------------

@dataclass
class SimObject:
    name: str
    cls: str
    size_class: str
    footprint: float
    role: str = "landmark"
    candidates: List[Tuple[float, float]] = field(default_factory=list)
    position: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.size_class not in SIZE_CLASSES:
            raise WorldError(f"object {self.name!r}: unknown size class {self.size_class!r}")


@dataclass(frozen=True)
class DetectorModel:
    fov: float = math.radians(70.0)
    ranges: Tuple[Tuple[str, float], ...] = (("large", 5.0), ("mid", 4.0), ("small", 2.5))
    p_tp: float = 0.9
    p_fn: float = 0.1
    p_fp: float = 0.01
    p_tn: float = 0.99
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("p_tp", "p_fn", "p_fp", "p_tn"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise WorldError(f"detector {name}={v} outside [0, 1]")

    def range_for(self, size_class: str) -> float:
        return dict(self.ranges)[size_class]


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    heading: float
    time: float = 0.0
    path_length: float = 0.0
    leg: Tuple[Tuple[float, float], ...] = ()
    moved: bool = False

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def pose(self) -> ViewPose:
        return ViewPose(self.x, self.y, self.heading)


@dataclass(frozen=True)
class RobotLimits:
    max_speed: float = 1.0
    max_turn_rate: float = 1.7
    dwell: float = 1.0


@dataclass
class Observation:
    camera: ViewPose
    detections: Dict[int, Optional[np.ndarray]]
    true_positive: Dict[int, bool] = field(default_factory=dict)

    def __getitem__(self, i) -> Optional[np.ndarray]:
        return self.detections.get(i)


@dataclass
class World:
    map: WorldMap
    objects: List[SimObject]
    detector: DetectorModel
    start: RobotState
    limits: RobotLimits = RobotLimits()
    commonsense: Optional[Path] = None
    invalid_expressions: List[Tuple[str, str, str]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def index_of(self, cls: str) -> int:
        for i, o in enumerate(self.objects):
            if o.cls == cls or o.name == cls:
                return i
        raise KeyError(f"no object of class {cls!r}")

    @property
    def targets(self) -> List[str]:
        return [o.cls for o in self.objects if o.role == "target"]


def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def visible_points(world_map: Optional[WorldMap], camera: ViewPose, fov: float, points,
                   rng_m: float) -> np.ndarray:
    """Vectorised visibility of points: in range, inside the FOV, unoccluded ray.

    The ray is sampled at no more than a quarter cell spacing; every sampled
    cell (including both end cells) must be free.  Without a map only range
    and FOV are checked.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    d = p - np.array([camera.x, camera.y])
    dist = np.hypot(d[:, 0], d[:, 1])
    bearing = np.arctan2(d[:, 1], d[:, 0])
    ok = (dist <= rng_m) & (np.abs(_wrap(bearing - camera.yaw)) <= fov / 2 + 1e-12)
    if world_map is None:
        return ok
    ok &= world_map.in_extent(p)
    ok[dist == 0] = bool(world_map.is_free([camera.x, camera.y]))
    idx = np.flatnonzero(ok & (dist > 0))
    if idx.size:
        step = world_map.resolution / 4
        n = int(math.ceil(dist[idx].max() / step)) + 1
        t = np.linspace(0.0, 1.0, n)
        samples = np.array([camera.x, camera.y]) + t[None, :, None] * d[idx][:, None, :]
        ix, iy = world_map.cell_of(samples)
        nyy, nxx = world_map.occupied.shape
        inside = (ix >= 0) & (ix < nxx) & (iy >= 0) & (iy < nyy)
        blocked = np.zeros(inside.shape, dtype=bool)
        blocked[inside] = world_map.occupied[iy[inside], ix[inside]]
        blocked |= ~inside
        ok[idx] = ~blocked.any(axis=1)
    return ok


def visible(world_map: WorldMap, camera: ViewPose, fov: float, obj, rng_m: float) -> bool:
    """``obj`` is a SimObject or a bare point."""
    pos = obj.position if isinstance(obj, SimObject) else obj
    return bool(visible_points(world_map, camera, fov, [pos], rng_m)[0])


def simulate_detections(world: World, robot: RobotState, objects: Sequence[SimObject],
                        det: DetectorModel, rng: np.random.Generator) -> Observation:
    cam = robot.pose
    dets: Dict[int, Optional[np.ndarray]] = {}
    tp: Dict[int, bool] = {}
    for i, obj in enumerate(objects):
        rng_m = det.range_for(obj.size_class)
        # fixed number of draws per object keeps the stream aligned across outcomes
        u, noise, fp_r, fp_a = rng.random(), rng.normal(0.0, det.noise_sigma, 2), rng.random(), rng.random()
        if visible(world.map, cam, det.fov, obj, rng_m):
            if u < det.p_tp:
                dets[i] = np.asarray(obj.position, dtype=float) + noise
                tp[i] = True
            else:
                dets[i] = None
        elif u < det.p_fp:
            r = rng_m * math.sqrt(fp_r)
            a = cam.yaw + (fp_a - 0.5) * det.fov
            dets[i] = np.array([cam.x + r * math.cos(a), cam.y + r * math.sin(a)])
            tp[i] = False
        else:
            dets[i] = None
    return Observation(cam, dets, tp)


def _turn_time(headings: Sequence[float], rate: float) -> float:
    total = 0.0
    for a, b in zip(headings, headings[1:]):
        total += abs(float(_wrap(b - a)))
    return total / rate


def advance_robot(world: World, start: RobotState, to: ViewPose) -> RobotState:
    """Drive along the A* path to ``to`` and dwell there for one observation."""
    limits = world.limits
    cells, length = astar_path(world.map, start.position, to.position)
    pts = world.map.cell_center(np.array([c[0] for c in cells]), np.array([c[1] for c in cells]))
    headings = [start.heading]
    for a, b in zip(pts, pts[1:]):
        h = math.atan2(b[1] - a[1], b[0] - a[0])
        if abs(_wrap(h - headings[-1])) > 1e-12:
            headings.append(h)
    headings.append(to.yaw)
    turn = _turn_time(headings, limits.max_turn_rate)
    moved = length > 0 or turn > 0
    leg = tuple(map(tuple, pts)) if len(pts) > 1 else ()
    return RobotState(to.x, to.y, to.yaw,
                      time=start.time + turn + length / limits.max_speed + limits.dwell,
                      path_length=start.path_length + length, leg=leg, moved=moved)


# -- loading ------------------------------------------------------------------

def _detector_from(cfg: dict, seed: int) -> DetectorModel:
    ranges = dict(DetectorModel().ranges)
    ranges.update({k: float(v) for k, v in cfg.get("ranges", {}).items()})
    unknown = set(ranges) - set(SIZE_CLASSES)
    if unknown:
        raise WorldError(f"unknown size classes in detector ranges: {sorted(unknown)}")
    return DetectorModel(
        fov=math.radians(float(cfg.get("fov_deg", 70.0))),
        ranges=tuple((k, ranges[k]) for k in SIZE_CLASSES),
        p_tp=float(cfg.get("p_tp", 0.9)), p_fn=float(cfg.get("p_fn", 0.1)),
        p_fp=float(cfg.get("p_fp", 0.01)), p_tn=float(cfg.get("p_tn", 0.99)),
        noise_sigma=float(cfg.get("noise_sigma", 0.1)), seed=seed)


def load_world(config, seed: int = 0, overrides: Optional[dict] = None) -> World:
    """Load a world JSON; object placements are drawn from their candidate lists with ``seed``.

    ``overrides`` is merged shallowly into the top level of the config (and
    into ``detector``/``robot`` one level deeper).
    """
    path = Path(config)
    cfg = json.loads(path.read_text())
    for key, val in (overrides or {}).items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **val}
        else:
            cfg[key] = val
    grid_path = path.parent / cfg["grid"]
    if not grid_path.exists():
        raise WorldError(f"grid file {grid_path} not found")
    wmap = parse_grid(grid_path.read_text())
    wmap.rooms = [Room(r["name"], r.get("type", r["name"]), tuple(tuple(map(float, v)) for v in r["polygon"]))
                  for r in cfg.get("rooms", [])]
    wmap.room_index()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x57A7]))
    objects = []
    for o in cfg["objects"]:
        cands = [tuple(map(float, c)) for c in o.get("candidates", [])]
        obj = SimObject(o.get("name", o["class"]), o["class"], o["size"], float(o.get("footprint", 0.1)),
                        o.get("role", "landmark"), cands)
        if not cands:
            raise WorldError(f"object {obj.name!r} has no candidate placements")
        for c in cands:
            if not wmap.is_free(c):
                raise WorldError(f"object {obj.name!r}: candidate {c} is not in free space")
        obj.position = np.array(cands[int(rng.integers(len(cands)))])
        objects.append(obj)
    s = cfg.get("start", {})
    start = RobotState(float(s.get("x", 0.5)), float(s.get("y", 0.5)), math.radians(float(s.get("heading_deg", 0.0))))
    if not wmap.is_free(start.position):
        raise WorldError("start pose is not in free space")
    rb = cfg.get("robot", {})
    limits = RobotLimits(float(rb.get("max_speed", 1.0)), float(rb.get("max_turn_rate", 1.7)),
                         float(rb.get("dwell_s", 1.0)))
    cs = cfg.get("commonsense")
    return World(wmap, objects, _detector_from(cfg.get("detector", {}), seed), start, limits,
                 (path.parent / cs) if cs else None,
                 [tuple(e) for e in cfg.get("invalid_expressions", [])], cfg)
