"""Particle-filter beliefs over object locations coupled by relation beliefs.

Each object keeps ``M`` weighted 2D particles.  One ``step`` resamples every
object's set, diffuses it with the prediction model, and reweights it by the
measurement potential times the relation-mixed context potential against the
previous-step particle sets of its neighbours.  Depleted sets are
reinvigorated with fresh particles from the rooms and around neighbours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .relations import N_LABELS, RelationBeliefs, RelationLabel
from .simworld import DetectorModel, Observation, ViewPose, WorldMap, visible_points

IN, ON, CONTAIN, SUPPORT, PROXIMITY, DISJOINT = (int(r) for r in RelationLabel)


@dataclass
class ParticleSet:
    obj: int
    positions: np.ndarray   # (M, 2)
    weights: np.ndarray     # (M,)

    def __len__(self):
        return len(self.weights)

    @property
    def ess(self) -> float:
        return 1.0 / float(np.sum(self.weights ** 2))

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.obj, self.positions.copy(), self.weights.copy())

    def mass_within(self, point, radius: float) -> float:
        d = np.hypot(*(self.positions - np.asarray(point)).T)
        return float(self.weights[d <= radius].sum())


@dataclass(frozen=True)
class ObjectInfo:
    cls: str
    size_class: str
    footprint: float
    motion_sigma: float


@dataclass(frozen=True)
class PotentialParams:
    p_tp: float = 0.9
    p_fn: float = 0.1
    p_fp: float = 0.01
    p_tn: float = 0.99
    fov: float = math.radians(70.0)
    ranges: Tuple[Tuple[str, float], ...] = (("large", 5.0), ("mid", 4.0), ("small", 2.5))
    gate: float = 0.5
    neighbor_threshold: float = 0.2
    use_context: bool = True
    reinvigorate_fraction: float = 0.1
    ess_trigger: float = 0.5
    room_share: float = 0.5
    # share of a detected object's particles redrawn around the detection before weighting
    detection_seed: float = 0.1
    # mean measurement potential below this share of P_TN (with no detection) forces a larger refresh
    collapse_trigger: float = 0.5
    collapse_fraction: float = 0.5

    @classmethod
    def from_detector(cls, det: DetectorModel, **kw) -> "PotentialParams":
        return cls(p_tp=det.p_tp, p_fn=det.p_fn, p_fp=det.p_fp, p_tn=det.p_tn, fov=det.fov,
                   ranges=det.ranges, **kw)

    def range_for(self, size_class: str) -> float:
        return dict(self.ranges)[size_class]


LANDMARK_MOTION_SIGMA = 0.03
TARGET_MOTION_SIGMA = 0.05


# -- potentials ---------------------------------------------------------------

def prediction_potential(prev, nxt, cov) -> np.ndarray:
    """``exp(-d^T cov^-1 d)`` for ``d = nxt - prev`` (broadcasts over leading axes)."""
    cov = np.asarray(cov, dtype=float)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("prediction covariance must be positive definite") from None
    d = np.asarray(nxt, dtype=float) - np.asarray(prev, dtype=float)
    q = np.einsum("...i,ij,...j->...", d, np.linalg.inv(cov), d)
    return np.exp(-q)


def measurement_potential(particles, camera: ViewPose, detection, params: PotentialParams,
                          size_class: str, world_map: Optional[WorldMap] = None) -> np.ndarray:
    p = np.atleast_2d(np.asarray(particles, dtype=float))
    if detection is not None:
        d = np.hypot(*(p - np.asarray(detection, dtype=float)).T)
        return np.where(d <= params.gate, params.p_tp, params.p_fp)
    rng_m = params.range_for(size_class)
    in_view = visible_points(world_map, camera, params.fov, p, rng_m) if len(p) else np.zeros(0, bool)
    return np.where(in_view, params.p_fn, params.p_tn)


def context_values(p_i, p_j, sizes) -> np.ndarray:
    """All six single-relation context values, stacked on a trailing axis of length 6.

    ``sizes = (footprint_i, footprint_j)``.  In/On hold when ``p_i`` lies inside
    j's footprint, Contain/Support when ``p_j`` lies inside i's footprint.
    """
    r_i, r_j = sizes
    d = np.hypot(*np.moveaxis(np.asarray(p_i, float) - np.asarray(p_j, float), -1, 0))
    return _context_from_distance(d, r_i, r_j)


def _context_from_distance(d, r_i, r_j) -> np.ndarray:
    inside_j = (d <= r_j).astype(float)
    inside_i = (d <= r_i).astype(float)
    sigma = r_i + r_j
    prox = np.exp(-d * d / (2.0 * sigma * sigma))
    disj = np.clip(1.0 - (2.0 * inside_j + 2.0 * inside_i + prox), 0.0, 1.0)
    return np.stack([inside_j, inside_j, inside_i, inside_i, prox, disj], axis=-1)


def context_potential_single(p_i, p_j, r, sizes) -> np.ndarray:
    return context_values(p_i, p_j, sizes)[..., int(r)]


def context_potential_mixture(p_i, neighbor_positions, neighbor_weights, belief, sizes) -> np.ndarray:
    """``sum_r sum_l B(r) w_l phi_r(p_i, q_l)`` for each row of ``p_i``."""
    p = np.atleast_2d(np.asarray(p_i, float))
    q = np.asarray(neighbor_positions, float)
    b = np.asarray(getattr(belief, "probs", belief), float)
    d = np.hypot(p[:, None, 0] - q[None, :, 0], p[:, None, 1] - q[None, :, 1])
    r_i, r_j = sizes
    inside_j = d <= r_j
    inside_i = d <= r_i
    sigma = r_i + r_j
    prox = np.exp(-d * d / (2.0 * sigma * sigma))
    disj = np.clip(1.0 - (2.0 * inside_j + 2.0 * inside_i + prox), 0.0, 1.0)
    phi = ((b[IN] + b[ON]) * inside_j + (b[CONTAIN] + b[SUPPORT]) * inside_i
           + b[PROXIMITY] * prox + b[DISJOINT] * disj)
    return phi @ np.asarray(neighbor_weights, float)


# -- state --------------------------------------------------------------------

@dataclass
class BeliefState:
    objects: List[ObjectInfo]
    sets: List[ParticleSet]
    relation_probs: np.ndarray            # (n, n, 6); [i, j] is B(R_ij)
    neighbors: List[np.ndarray]
    frozen: np.ndarray                    # bool (n,), sets never updated
    context_evals: int = 0
    update_counts: Optional[np.ndarray] = None   # weight updates per object

    def __post_init__(self):
        if self.update_counts is None:
            self.update_counts = np.zeros(len(self.sets), dtype=int)

    @property
    def n(self) -> int:
        return len(self.sets)

    @property
    def weight_updates(self) -> int:
        return int(self.update_counts.sum())

    def copy(self) -> "BeliefState":
        return replace(self, sets=[s.copy() for s in self.sets], update_counts=self.update_counts.copy())


def neighbor_sets(relation_probs: np.ndarray, threshold: float = 0.2) -> List[np.ndarray]:
    n = relation_probs.shape[0]
    related = 1.0 - relation_probs[..., DISJOINT] > threshold
    np.fill_diagonal(related, False)
    return [np.flatnonzero(related[i]) for i in range(n)]


def relation_array(beliefs: RelationBeliefs, n: int) -> np.ndarray:
    out = np.zeros((n, n, N_LABELS))
    out[..., DISJOINT] = 1.0
    for (i, j) in beliefs:
        if i < n and j < n:
            out[i, j] = beliefs[(i, j)].probs
    return out


def make_belief_state(objects: Sequence[ObjectInfo], sets: Sequence[ParticleSet],
                      beliefs: RelationBeliefs, threshold: float = 0.2,
                      frozen: Optional[Sequence[bool]] = None) -> BeliefState:
    n = len(objects)
    probs = relation_array(beliefs, n)
    fz = np.zeros(n, dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool)
    return BeliefState(list(objects), list(sets), probs, neighbor_sets(probs, threshold), fz)


def uniform_particles(world_map: WorldMap, obj: int, m: int, rng: np.random.Generator) -> ParticleSet:
    cells = world_map.room_free_cells()
    pick = cells[rng.integers(len(cells), size=m)]
    jitter = (rng.random((m, 2)) - 0.5) * world_map.resolution
    return ParticleSet(obj, pick + jitter, np.full(m, 1.0 / m))


def gaussian_particles(world_map: WorldMap, obj: int, center, sigma: float, m: int,
                       rng: np.random.Generator, max_tries: int = 50) -> ParticleSet:
    center = np.asarray(center, float)
    pos = center + rng.normal(0.0, sigma, (m, 2))
    for _ in range(max_tries):
        bad = ~world_map.is_free(pos)
        if not bad.any():
            break
        pos[bad] = center + rng.normal(0.0, sigma, (int(bad.sum()), 2))
    bad = ~world_map.is_free(pos)
    if bad.any():
        pos[bad] = uniform_particles(world_map, obj, int(bad.sum()), rng).positions
    return ParticleSet(obj, pos, np.full(m, 1.0 / m))


def systematic_resample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    u = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1)


# -- inference ----------------------------------------------------------------

def weigh(state: BeliefState, i: int, positions: np.ndarray, camera: ViewPose, detection,
          params: PotentialParams, world_map: Optional[WorldMap], prev_sets: Sequence[ParticleSet],
          measurement: Optional[np.ndarray] = None) -> np.ndarray:
    """Unnormalised weights for candidate positions of object ``i``."""
    info = state.objects[i]
    w = measurement
    if w is None:
        w = measurement_potential(positions, camera, detection, params, info.size_class, world_map)
    if params.use_context:
        m = len(positions)
        for j in state.neighbors[i]:
            nb = prev_sets[j]
            w = w * context_potential_mixture(positions, nb.positions, nb.weights, state.relation_probs[i, j],
                                              (info.footprint, state.objects[j].footprint))
            state.context_evals += m * len(nb)
    return w


def step(state: BeliefState, camera: ViewPose, observation: Observation, params: PotentialParams,
         world_map: WorldMap, rng: np.random.Generator, reinvigorate_sets: bool = True) -> BeliefState:
    """One filtering step for every non-frozen object.

    Neighbour context always reads the particle sets from before the step, so
    the result does not depend on the order objects are visited in.
    """
    prev = [s.copy() for s in state.sets]
    new = state.copy()
    for i in range(state.n):
        if state.frozen[i]:
            continue
        s = prev[i]
        m = len(s)
        idx = systematic_resample(s.weights, m, rng)
        old = s.positions[idx]
        sigma = state.objects[i].motion_sigma / math.sqrt(2.0)
        pos = old + rng.normal(0.0, sigma, old.shape)
        stuck = ~world_map.is_free(pos)
        pos[stuck] = old[stuck]
        z = observation[i]
        n_seed = int(round(params.detection_seed * m)) if z is not None else 0
        if n_seed:
            slots = rng.choice(m, n_seed, replace=False)
            pos[slots] = gaussian_particles(world_map, i, z, params.gate / 2, n_seed, rng).positions
        lik = measurement_potential(pos, camera, z, params, state.objects[i].size_class, world_map)
        # the whole cloud was in view and nothing was seen: the set contradicts the evidence
        collapsed = z is None and lik.mean() < params.collapse_trigger * params.p_tn
        w = weigh(new, i, pos, camera, z, params, world_map, prev, measurement=lik)
        new.update_counts[i] += 1
        total = w.sum()
        if total > 0 and np.isfinite(total):
            w = w / total
            fallback = False
        else:
            w = np.full(m, 1.0 / m)
            fallback = True
        ps = ParticleSet(s.obj, pos, w)
        if reinvigorate_sets:
            rp = replace(params, reinvigorate_fraction=params.collapse_fraction) if collapsed else params
            ps = reinvigorate(ps, world_map, prev, new.neighbors[i], new.relation_probs[i],
                              new.objects, rp, rng, force=fallback or collapsed)
        new.sets[i] = ps
    return new


def reinvigorate(ps: ParticleSet, world_map: WorldMap, neighbor_sets_: Sequence[ParticleSet],
                 neighbors: Sequence[int], relation_row: np.ndarray, objects: Sequence[ObjectInfo],
                 params: PotentialParams, rng: np.random.Generator, force: bool = False) -> ParticleSet:
    """Replace the lowest-weight particles when the effective sample size drops.

    The surviving particles are resampled by weight before all weights are
    reset to ``1/M``, so the reset does not discard their information.
    """
    m = len(ps)
    if not force and ps.ess >= params.ess_trigger * m:
        return ps
    n_new = int(round(params.reinvigorate_fraction * m))
    if n_new <= 0:
        return ps
    order = np.argsort(ps.weights, kind="stable")
    keep = order[n_new:]
    kw = ps.weights[keep]
    if kw.sum() > 0:
        kept = ps.positions[keep][systematic_resample(kw, m - n_new, rng)]
    else:
        kept = ps.positions[keep]
    n_nb = 0 if len(neighbors) == 0 else n_new - int(round(params.room_share * n_new))
    n_room = n_new - n_nb
    fresh = [uniform_particles(world_map, ps.obj, n_room, rng).positions] if n_room else []
    if n_nb:
        fresh.append(_around_neighbors(ps.obj, n_nb, world_map, neighbor_sets_, neighbors, relation_row,
                                       objects, rng))
    pos = np.concatenate([kept] + fresh, axis=0)
    return ParticleSet(ps.obj, pos, np.full(m, 1.0 / m))


def _around_neighbors(i: int, n: int, world_map: WorldMap, sets: Sequence[ParticleSet],
                      neighbors: Sequence[int], relation_row: np.ndarray, objects: Sequence[ObjectInfo],
                      rng: np.random.Generator) -> np.ndarray:
    nb = np.asarray(neighbors)
    pref = 1.0 - relation_row[nb, DISJOINT]
    pref = pref / pref.sum()
    out = np.empty((n, 2))
    for k in range(n):
        j = int(nb[systematic_resample(pref, 1, rng)[0]])
        s = sets[j]
        anchor = s.positions[systematic_resample(s.weights, 1, rng)[0]]
        sigma = objects[i].footprint + objects[j].footprint
        for _ in range(20):
            cand = anchor + rng.normal(0.0, sigma, 2)
            if world_map.is_free(cand):
                break
        else:
            cand = uniform_particles(world_map, i, 1, rng).positions[0]
        out[k] = cand
    return out
