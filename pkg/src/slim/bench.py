"""Search trials, benchmark aggregation, and CSV/SVG reporting."""

from __future__ import annotations

import csv
import functools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from . import belief as bl
from .relations import build_factor_graph, load_commonsense, run_belief_propagation, RelationBeliefs
from .simworld import (RobotState, Unreachable, ViewPose, World, WorldError, advance_robot, load_world,
                       simulate_detections)
from .strategy import GaussianMixture, UtilityParams, fit_gmm, select_next_view

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_CONFIG = DATA_DIR / "apartment.json"


@dataclass(frozen=True)
class MethodSpec:
    name: str
    use_context: bool
    prior_mode: str          # "none" | "noisy-known"
    landmarks_static: bool
    utility_mode: str        # "DS" | "HS"

    def __post_init__(self):
        if self.prior_mode not in ("none", "noisy-known"):
            raise ValueError(f"unknown prior mode {self.prior_mode!r}")
        if self.utility_mode not in ("DS", "HS"):
            raise ValueError(f"unknown utility mode {self.utility_mode!r}")
        if self.landmarks_static and self.prior_mode != "noisy-known":
            raise ValueError("static landmarks need a known prior")


METHODS: Dict[str, MethodSpec] = {m.name: m for m in (
    MethodSpec("UDS", False, "none", False, "DS"),
    MethodSpec("IDS-Known-Static", True, "noisy-known", True, "DS"),
    MethodSpec("IDS-Known-Dynamic", True, "noisy-known", False, "DS"),
    MethodSpec("IDS-Unknown", True, "none", False, "DS"),
    MethodSpec("IHS-Unknown", True, "none", False, "HS"),
)}
METHOD_ORDER = list(METHODS)


def get_method(name: str) -> MethodSpec:
    for key, m in METHODS.items():
        if key.lower() == name.lower():
            return m
    raise KeyError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


@dataclass(frozen=True)
class TrialConfig:
    world: Path = DEFAULT_CONFIG
    commonsense: Optional[Path] = None
    seed: int = 0
    trials: int = 6
    timeout: float = 300.0
    prior_offset: float = 1.0
    prior_sigma: float = 0.3
    particles: int = 100
    success_mass: float = 0.6

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def trial_seed(self, index: int) -> int:
        return int(self.seed) * 1000 + int(index)


_TRIAL_KEYS = ("seed", "trials", "timeout", "prior_offset", "prior_sigma", "particles", "success_mass")


def trial_config(world=DEFAULT_CONFIG, **overrides) -> TrialConfig:
    """Build a TrialConfig from the optional ``trial`` section of a world JSON.

    Keyword arguments that are not ``None`` override values from the file.
    """
    world = Path(world)
    section = json.loads(world.read_text()).get("trial", {})
    unknown = set(section) - set(_TRIAL_KEYS) - {"commonsense"}
    if unknown:
        raise ValueError(f"unknown trial settings: {sorted(unknown)}")
    values = {k: section[k] for k in _TRIAL_KEYS if k in section}
    if "commonsense" in section:
        values["commonsense"] = world.parent / section["commonsense"]
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("seed", "trials", "particles"):
        if key in values:
            values[key] = int(values[key])
    if values.get("commonsense") is not None:
        values["commonsense"] = Path(values["commonsense"])
    return TrialConfig(world=world, **values)


@dataclass
class TrialResult:
    method: str
    target: str
    seed: int
    views: int
    time_s: float
    path_m: float
    success: bool
    reason: str = ""


@dataclass
class TrialTrace:
    """Per-trial record used for snapshots and invariant checks."""
    robot: List[RobotState] = field(default_factory=list)
    poses: List[ViewPose] = field(default_factory=list)
    legs: List[float] = field(default_factory=list)
    context_evals: int = 0
    landmark_updates: int = 0
    selections: int = 0
    final_state: Optional[bl.BeliefState] = None
    final_gmm: Optional[GaussianMixture] = None
    world: Optional[World] = None


# -- setup --------------------------------------------------------------------

@functools.lru_cache(maxsize=32)
def _relation_beliefs(commonsense: str, invalid: Tuple[Tuple[str, str, str], ...],
                      classes: Tuple[str, ...]) -> RelationBeliefs:
    table = load_commonsense(commonsense, invalid)
    return run_belief_propagation(build_factor_graph(list(classes), table))


def object_set(world: World, target: str) -> List[int]:
    """World indices of the objects tracked in a search: every landmark, then the target."""
    ti = world.index_of(target)
    if world.objects[ti].role != "target":
        raise ValueError(f"{target!r} is not a target object")
    return [i for i, o in enumerate(world.objects) if o.role == "landmark"] + [ti]


def displaced_prior(world: World, point, offset: float, rng: np.random.Generator, tries: int = 64) -> np.ndarray:
    """``point`` moved ``offset`` metres in a random direction that lands in free space."""
    point = np.asarray(point, float)
    for _ in range(tries):
        a = rng.uniform(0.0, 2.0 * np.pi)
        cand = point + offset * np.array([math.cos(a), math.sin(a)])
        if world.map.is_free(cand) and world.map.room_of(cand) is not None:
            return cand
    return point


def initial_state(world: World, ids: Sequence[int], method: MethodSpec, config: TrialConfig,
                  beliefs: RelationBeliefs, rng: np.random.Generator) -> bl.BeliefState:
    objs = [world.objects[i] for i in ids]
    infos = [bl.ObjectInfo(o.cls, o.size_class, o.footprint,
                           bl.TARGET_MOTION_SIGMA if o.role == "target" else bl.LANDMARK_MOTION_SIGMA)
             for o in objs]
    sets = []
    for k, o in enumerate(objs):
        if o.role == "landmark" and method.prior_mode == "noisy-known":
            center = displaced_prior(world, o.position, config.prior_offset, rng)
            sets.append(bl.gaussian_particles(world.map, k, center, config.prior_sigma, config.particles, rng))
        else:
            sets.append(bl.uniform_particles(world.map, k, config.particles, rng))
    frozen = [method.landmarks_static and o.role == "landmark" for o in objs]
    return bl.make_belief_state(infos, sets, beliefs, frozen=frozen)


# -- trials -------------------------------------------------------------------

def run_trial(config: TrialConfig, method: MethodSpec, target: str, seed: int,
              trace: Optional[TrialTrace] = None, snapshot_dir: Optional[Path] = None,
              max_iterations: int = 1000) -> TrialResult:
    """Run one search episode until the target belief converges on a true detection or time runs out."""
    world = load_world(config.world, seed)
    ids = object_set(world, target)
    t_local = len(ids) - 1
    objs = [world.objects[i] for i in ids]
    cs = config.commonsense or world.commonsense
    if cs is None:
        raise WorldError("no commonsense table configured")
    beliefs = _relation_beliefs(str(cs), tuple(tuple(e) for e in world.invalid_expressions),
                                tuple(o.cls for o in objs))
    ss = np.random.SeedSequence([int(seed), 0x511])
    prior_rng, det_rng, pf_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    state = initial_state(world, ids, method, config, beliefs, prior_rng)
    params = bl.PotentialParams.from_detector(world.detector, use_context=method.use_context)
    uparams = UtilityParams()

    robot = world.start
    views = 1   # the observation taken at the start pose
    reason = ""
    success = False
    trace = trace if trace is not None else TrialTrace()
    trace.world = world
    trace.robot.append(robot)
    obs = simulate_detections(world, robot, objs, world.detector, det_rng)
    landmark_ids = [k for k, o in enumerate(objs) if o.role == "landmark"]
    for it in range(max_iterations):
        state = bl.step(state, robot.pose, obs, params, world.map, pf_rng)
        if snapshot_dir is not None:
            export_belief_csv(state, Path(snapshot_dir) / f"{method.name}_{target}_{seed}_step{it:03d}.csv")
        z = obs[t_local]
        if z is not None and obs.true_positive.get(t_local, False):
            if state.sets[t_local].mass_within(z, params.gate) >= config.success_mass:
                success = True
                break
        if robot.time >= config.timeout:
            reason = "timeout"
            break
        try:
            sel = _select(state, t_local, robot, world, method, uparams, seed * 7919 + it, pf_rng, params)
        except WorldError as exc:
            reason = f"dead end: {exc}"
            log.info("trial %s/%s/%d: %s", method.name, target, seed, reason)
            break
        trace.selections += 1
        trace.final_gmm = sel.target_gmm
        try:
            nxt = advance_robot(world, robot, sel.pose)
        except Unreachable as exc:
            reason = f"dead end: {exc}"
            break
        if nxt.time > config.timeout:
            robot = replace(nxt, time=config.timeout, path_length=robot.path_length, leg=())
            reason = "timeout"
            break
        trace.legs.append(nxt.path_length - robot.path_length)
        robot = nxt
        if robot.moved:
            views += 1
            trace.poses.append(sel.pose)
        trace.robot.append(robot)
        obs = simulate_detections(world, robot, objs, world.detector, det_rng)
    else:
        reason = "iteration limit"
    trace.context_evals = state.context_evals
    trace.landmark_updates = int(state.update_counts[landmark_ids].sum())
    trace.final_state = state
    time_s = config.timeout if reason == "timeout" else robot.time
    result = TrialResult(method.name, target, int(seed), views, float(time_s), float(robot.path_length),
                         success, "" if success else reason)
    if snapshot_dir is not None:
        emit_svg_snapshot(state, world, trace.robot, Path(snapshot_dir) / f"{method.name}_{target}_{seed}.svg",
                          poses=trace.poses, gmm=trace.final_gmm)
    return result


def _select(state, target, robot, world, method, uparams, seed, rng, params):
    try:
        return select_next_view(state, target, robot, world.map, world.detector, method.utility_mode,
                                uparams, seed=seed)
    except WorldError:
        # no reachable component: refresh the target set and try once more
        s = state.sets[target]
        state.sets[target] = bl.reinvigorate(s, world.map, state.sets, state.neighbors[target],
                                             state.relation_probs[target], state.objects,
                                             replace(params, reinvigorate_fraction=0.5), rng, force=True)
        return select_next_view(state, target, robot, world.map, world.detector, method.utility_mode,
                                uparams, seed=seed + 1)


# -- benchmark ----------------------------------------------------------------

@dataclass
class SummaryRow:
    method: str
    target: str
    n: int
    views: float
    time_s: float
    path_m: float
    success_rate: float


def _run_cell(args):
    config, method_name, target, seed = args
    return run_trial(config, METHODS[method_name], target, seed)


def run_benchmark(config: TrialConfig, methods: Sequence[str], targets: Sequence[str],
                  workers: int = 1) -> Tuple[List[TrialResult], List[SummaryRow]]:
    jobs = [(config, get_method(m).name, t, config.trial_seed(k))
            for t in targets for m in methods for k in range(config.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, jobs, chunksize=1))
    else:
        results = [_run_cell(j) for j in jobs]
    results = sort_results(results)
    return results, summarize(results)


def sort_results(results: Sequence[TrialResult]) -> List[TrialResult]:
    morder = {m: k for k, m in enumerate(METHOD_ORDER)}
    return sorted(results, key=lambda r: (r.target, morder.get(r.method, 99), r.method, r.seed))


def summarize(results: Sequence[TrialResult]) -> List[SummaryRow]:
    cells: Dict[Tuple[str, str], List[TrialResult]] = {}
    for r in results:
        cells.setdefault((r.method, r.target), []).append(r)
    out = []
    for (m, t), rs in cells.items():
        out.append(SummaryRow(m, t, len(rs), float(np.mean([r.views for r in rs])),
                              float(np.mean([r.time_s for r in rs])), float(np.mean([r.path_m for r in rs])),
                              float(np.mean([r.success for r in rs]))))
    morder = {m: k for k, m in enumerate(METHOD_ORDER)}
    return sorted(out, key=lambda s: (s.target, morder.get(s.method, 99), s.method))


# -- output -------------------------------------------------------------------

CSV_HEADER = ["method", "target", "seed", "views", "time_s", "path_m", "success"]


def emit_csv(results: Sequence[TrialResult], path) -> Path:
    """Per-trial rows, then one ``seed=MEAN`` row per (method, target)."""
    path = Path(path)
    results = sort_results(results)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in results:
            w.writerow([r.method, r.target, r.seed, r.views, repr(r.time_s), repr(r.path_m), int(r.success)])
        for s in summarize(results):
            w.writerow([s.method, s.target, "MEAN", repr(s.views), repr(s.time_s), repr(s.path_m),
                        repr(s.success_rate)])
    return path


def read_csv(path) -> Tuple[List[TrialResult], List[SummaryRow]]:
    trials, summary = [], []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        rows = list(reader)
    counts: Dict[Tuple[str, str], int] = {}
    for row in rows:
        if row["seed"] != "MEAN":
            trials.append(TrialResult(row["method"], row["target"], int(row["seed"]), int(row["views"]),
                                      float(row["time_s"]), float(row["path_m"]), row["success"] == "1"))
            counts[(row["method"], row["target"])] = counts.get((row["method"], row["target"]), 0) + 1
    for row in rows:
        if row["seed"] == "MEAN":
            summary.append(SummaryRow(row["method"], row["target"], counts.get((row["method"], row["target"]), 0),
                                      float(row["views"]), float(row["time_s"]), float(row["path_m"]),
                                      float(row["success"])))
    return trials, summary


def export_belief_csv(state: bl.BeliefState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object", "x", "y", "weight"])
        for info, s in zip(state.objects, state.sets):
            for (x, y), a in zip(s.positions, s.weights):
                w.writerow([info.cls, repr(float(x)), repr(float(y)), repr(float(a))])
    return path


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
            "#bcbd22", "#17becf"]


@dataclass(frozen=True)
class SvgTransform:
    """World metres to SVG pixels: ``px = margin + scale * x``, ``py = margin + scale * (height - y)``."""
    scale: float
    margin: float
    height: float

    def __call__(self, x, y):
        return self.margin + self.scale * x, self.margin + self.scale * (self.height - y)

    def inverse(self, px, py):
        return (px - self.margin) / self.scale, self.height - (py - self.margin) / self.scale


def emit_svg_snapshot(state: Optional[bl.BeliefState], world: World, trail: Sequence[RobotState], path,
                      poses: Sequence[ViewPose] = (), gmm: Optional[GaussianMixture] = None,
                      scale: float = 50.0, margin: float = 10.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wm = world.map
    tf = SvgTransform(scale, margin, wm.height)
    W = 2 * margin + scale * wm.width
    H = 2 * margin + scale * wm.height
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.1f}" height="{H:.1f}" '
           f'viewBox="0 0 {W:.1f} {H:.1f}" data-scale="{scale!r}" data-margin="{margin!r}" '
           f'data-height="{wm.height!r}">']
    out.append(f'<rect x="0" y="0" width="{W:.1f}" height="{H:.1f}" fill="white"/>')
    # occupancy
    out.append('<g id="grid" fill="#333">')
    res = wm.resolution
    for iy, ix in zip(*np.nonzero(wm.occupied)):
        px, py = tf(ix * res, (iy + 1) * res)
        out.append(f'<rect x="{px:.2f}" y="{py:.2f}" width="{scale * res:.2f}" height="{scale * res:.2f}"/>')
    out.append("</g>")
    out.append('<g id="rooms" fill="none" stroke="#999" stroke-dasharray="4 2">')
    for room in wm.rooms:
        pts = " ".join("{:.2f},{:.2f}".format(*tf(x, y)) for x, y in room.polygon)
        out.append(f'<polygon points="{pts}"><title>{escape(room.name)}</title></polygon>')
    out.append("</g>")
    if state is not None:
        out.append('<g id="particles">')
        for k, (info, s) in enumerate(zip(state.objects, state.sets)):
            color = _PALETTE[k % len(_PALETTE)]
            out.append(f'<g class="object" data-object="{escape(info.cls)}" fill="{color}">')
            for x, y in s.positions:
                px, py = tf(float(x), float(y))
                out.append(f'<circle class="particle" cx="{px!r}" cy="{py!r}" r="2"/>')
            out.append("</g>")
        out.append("</g>")
    if gmm is not None:
        out.append('<g id="gmm" fill="none" stroke="#d62728">')
        for mu, cov, w in gmm.components():
            vals, vecs = np.linalg.eigh(cov)
            ang = math.degrees(math.atan2(vecs[1, 1], vecs[0, 1]))
            cx, cy = tf(*mu)
            rx, ry = 2 * scale * math.sqrt(max(vals[1], 0)), 2 * scale * math.sqrt(max(vals[0], 0))
            out.append(f'<ellipse cx="{cx:.2f}" cy="{cy:.2f}" rx="{rx:.2f}" ry="{ry:.2f}" '
                       f'transform="rotate({-ang:.2f} {cx:.2f} {cy:.2f})" stroke-width="{1 + 3 * w:.2f}"/>')
        out.append("</g>")
    pts = []
    for r in trail:
        pts.extend(r.leg or ((r.x, r.y),))
    if len(pts) > 1:
        line = " ".join("{:.2f},{:.2f}".format(*tf(x, y)) for x, y in pts)
        out.append(f'<polyline id="path" points="{line}" fill="none" stroke="black" stroke-width="2"/>')
    out.append('<g id="views" fill="#2ca02c" fill-opacity="0.4">')
    for p in poses:
        half = math.radians(35)
        a = tf(p.x, p.y)
        b = tf(p.x + 0.6 * math.cos(p.yaw - half), p.y + 0.6 * math.sin(p.yaw - half))
        c = tf(p.x + 0.6 * math.cos(p.yaw + half), p.y + 0.6 * math.sin(p.yaw + half))
        out.append('<polygon class="view" points="{:.2f},{:.2f} {:.2f},{:.2f} {:.2f},{:.2f}"/>'.format(*a, *b, *c))
    out.append("</g>")
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")
    return path


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
