"""Next-best-view selection from particle beliefs.

Particle sets are summarised by weighted Gaussian mixtures; each component
spawns camera candidates on a circle around its mean, all facing the mean.
Candidates are ranked by the direct-search utility (component weight plus a
navigation term) or the hybrid utility, which adds a bonus for also covering
landmark components that co-occur with the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .belief import DISJOINT, BeliefState, ParticleSet
from .simworld import DetectorModel, RobotState, ViewPose, WorldError, WorldMap, visible_points

REG_COVAR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianMixture:
    means: np.ndarray     # (k, 2)
    covs: np.ndarray      # (k, 2, 2)
    weights: np.ndarray   # (k,)
    bic: float = float("nan")

    @property
    def k(self) -> int:
        return len(self.weights)

    def components(self):
        return list(zip(self.means, self.covs, self.weights))

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        lp = _log_gauss(x, self.means[None], self.covs[None])[0] + np.log(np.maximum(self.weights, 1e-300))
        return _logsumexp(lp, axis=0)


@dataclass(frozen=True)
class UtilityParams:
    alpha: float = 0.1
    beta: float = 0.4
    sigma: float = 0.5
    clearance: float = 0.25
    n_candidates: int = 16
    radius_factors: Tuple[float, ...] = (0.8, 0.6, 0.4)
    min_nav: float = 0.1
    k_max: int = 5
    # a candidate this close to the current camera pose repeats the last view
    repeat_radius: float = 0.5
    repeat_yaw: float = float(np.radians(35.0))


# -- EM -----------------------------------------------------------------------

def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _log_gauss(x, means, covs):
    """log N(x | mean, cov) for batched 2x2 covariances.

    ``means`` (R, k, 2), ``covs`` (R, k, 2, 2), ``x`` (M, 2) -> (R, k, M).
    """
    a, b, d = covs[..., 0, 0], covs[..., 0, 1], covs[..., 1, 1]
    det = a * d - b * b
    dx = x[None, None, :, 0] - means[..., 0, None]
    dy = x[None, None, :, 1] - means[..., 1, None]
    maha = (d[..., None] * dx * dx - 2 * b[..., None] * dx * dy + a[..., None] * dy * dy) / det[..., None]
    return -0.5 * (maha + np.log(det)[..., None]) - LOG_2PI


@njit(cache=True)
def _em_run(x, w, means, var, iters, tol):
    """Weighted EM from one initialisation; returns (means, covs, pis, ll)."""
    m, k = x.shape[0], means.shape[0]
    means = means.copy()
    covs = np.zeros((k, 2, 2))
    for c in range(k):
        covs[c, 0, 0] = var
        covs[c, 1, 1] = var
    pis = np.full(k, 1.0 / k)
    lp = np.empty((k, m))
    coef = np.empty((k, 4))
    prev = -np.inf
    ll = -np.inf
    for it in range(iters + 1):
        # E step: lp ends up holding weighted responsibilities
        for c in range(k):
            a, b, d = covs[c, 0, 0], covs[c, 0, 1], covs[c, 1, 1]
            det = a * d - b * b
            coef[c, 0] = -0.5 * d / det
            coef[c, 1] = b / det
            coef[c, 2] = -0.5 * a / det
            coef[c, 3] = -0.5 * math.log(det) - LOG_2PI + math.log(max(pis[c], 1e-300))
        ll = 0.0
        for n in range(m):
            top = -np.inf
            for c in range(k):
                dx = x[n, 0] - means[c, 0]
                dy = x[n, 1] - means[c, 1]
                v = coef[c, 3] + coef[c, 0] * dx * dx + coef[c, 1] * dx * dy + coef[c, 2] * dy * dy
                lp[c, n] = v
                if v > top:
                    top = v
            acc = 0.0
            for c in range(k):
                e = math.exp(lp[c, n] - top)
                lp[c, n] = e
                acc += e
            ll += w[n] * (top + math.log(acc))
            scale = w[n] / acc
            for c in range(k):
                lp[c, n] *= scale
        if it == iters or abs(ll - prev) < tol:
            break
        prev = ll
        # M step
        tot = 0.0
        for c in range(k):
            nk = 1e-300
            sx = 0.0
            sy = 0.0
            for n in range(m):
                r = lp[c, n]
                nk += r
                sx += r * x[n, 0]
                sy += r * x[n, 1]
            mx, my = sx / nk, sy / nk
            cxx = 0.0
            cxy = 0.0
            cyy = 0.0
            for n in range(m):
                r = lp[c, n]
                dx = x[n, 0] - mx
                dy = x[n, 1] - my
                cxx += r * dx * dx
                cxy += r * dx * dy
                cyy += r * dy * dy
            means[c, 0], means[c, 1] = mx, my
            covs[c, 0, 0] = cxx / nk + REG_COVAR
            covs[c, 0, 1] = cxy / nk
            covs[c, 1, 0] = cxy / nk
            covs[c, 1, 1] = cyy / nk + REG_COVAR
            pis[c] = nk
            tot += nk
        for c in range(k):
            pis[c] /= tot
    return means, covs, pis, ll


@njit(cache=True)
def _pick(p, u):
    # inverse-CDF draw from unnormalised p
    s = 0.0
    for n in range(p.shape[0]):
        s += p[n]
    t = u * s
    acc = 0.0
    for n in range(p.shape[0]):
        acc += p[n]
        if acc > t:
            return n
    return p.shape[0] - 1


@njit(cache=True)
def _em_best(x, w, k, u, iters, tol):
    """EM from one weighted k-means++ seeding per row of ``u``; keeps the best run."""
    m = x.shape[0]
    var = 0.0
    mu0 = np.zeros(2)
    for n in range(m):
        mu0 += w[n] * x[n]
    for n in range(m):
        var += w[n] * ((x[n, 0] - mu0[0]) ** 2 + (x[n, 1] - mu0[1]) ** 2)
    var = var / 2.0 + REG_COVAR
    best_ll = -np.inf
    best = (np.zeros((k, 2)), np.zeros((k, 2, 2)), np.zeros(k), -np.inf)
    d2 = np.empty(m)
    p = np.empty(m)
    for r in range(u.shape[0]):
        init = np.empty((k, 2))
        j = _pick(w, u[r, 0])
        init[0] = x[j]
        for n in range(m):
            d2[n] = (x[n, 0] - x[j, 0]) ** 2 + (x[n, 1] - x[j, 1]) ** 2
        for c in range(1, k):
            tot = 0.0
            for n in range(m):
                p[n] = w[n] * d2[n]
                tot += p[n]
            j = _pick(p, u[r, c]) if tot > 0 else _pick(w, u[r, c])
            init[c] = x[j]
            for n in range(m):
                d2[n] = min(d2[n], (x[n, 0] - x[j, 0]) ** 2 + (x[n, 1] - x[j, 1]) ** 2)
        run = _em_run(x, w, init, var, iters, tol)
        if run[3] > best_ll:
            best_ll = run[3]
            best = run
    return best


def _em(x, w, k, rng, restarts, iters, tol):
    """Weighted EM from ``restarts`` k-means++ seedings; returns the best run."""
    mu, cov, pi, ll = _em_best(x, w, k, rng.random((restarts, k)), iters, tol)
    return mu, cov, pi, float(ll)


def fit_gmm(positions, weights=None, k_max: int = 5, seed: int = 0, restarts: int = 5,
            iters: int = 100, tol: float = 1e-6) -> GaussianMixture:
    """Weighted EM for k = 1..k_max, picking k by BIC.

    The log-likelihood is weight-averaged and scaled by the particle count, so
    BIC compares models as if each particle carried its share of ``M`` samples.
    """
    if isinstance(positions, ParticleSet):
        positions, weights = positions.positions, positions.weights
    x = np.asarray(positions, float)
    m = len(x)
    if m < 2:
        raise ValueError("need at least two particles to fit a mixture")
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    mean = w @ x
    if np.max(np.abs(x - mean)) < 1e-9:
        return GaussianMixture(mean[None], (np.eye(2) * REG_COVAR)[None], np.ones(1), float("nan"))
    rng = np.random.default_rng(seed)
    n_distinct = len(np.unique(np.round(x, 9), axis=0))
    best = None
    for k in range(1, min(k_max, n_distinct) + 1):
        mu, cov, pi, ll = _em(x, w, k, rng, restarts if k > 1 else 1, iters, tol)
        n_params = 6 * k - 1
        bic = -2.0 * m * ll + n_params * math.log(m)
        if best is None or bic < best.bic:
            best = GaussianMixture(mu, cov, pi / pi.sum(), bic)
    return best


# -- view poses ---------------------------------------------------------------

def generate_view_poses(mean, world_map: WorldMap, det: DetectorModel, size_class: str,
                        params: UtilityParams = UtilityParams()) -> List[ViewPose]:
    """Camera candidates around a component mean, each facing it exactly.

    Tries radii ``radius_factors * range`` in order and returns the first
    non-empty feasible set.  Raises ``WorldError`` when no radius works.
    """
    mean = np.asarray(mean, float)
    rng_m = det.range_for(size_class)
    angles = 2.0 * np.pi * np.arange(params.n_candidates) / params.n_candidates
    ring = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    for factor in params.radius_factors:
        cams = mean + factor * rng_m * ring
        yaws = np.arctan2(mean[1] - cams[:, 1], mean[0] - cams[:, 0])
        ok = world_map.in_extent(cams) & world_map.is_free(cams)
        ok &= world_map.clearance(cams) > params.clearance
        out = []
        for c, yaw, good in zip(cams, yaws, ok):
            if good:
                pose = ViewPose(float(c[0]), float(c[1]), float(yaw))
                if visible_points(world_map, pose, det.fov, [mean], rng_m)[0]:
                    out.append(pose)
        if out:
            return out
    raise WorldError(f"no feasible view pose around {tuple(np.round(mean, 2))}")


def view_objective(pose: ViewPose, mean) -> float:
    """``1 - v . (x - c) / |x - c|``; zero when the camera faces ``mean``."""
    d = np.asarray(mean, float) - pose.position
    return float(1.0 - pose.direction @ d / np.linalg.norm(d))


# -- utilities ----------------------------------------------------------------

def navigation_term(d_nav, params: UtilityParams = UtilityParams()):
    d = np.maximum(np.asarray(d_nav, float), params.min_nav)
    return params.alpha / np.arctan(params.sigma * d)


def utility_ds(pose: Optional[ViewPose], omega: float, d_nav: float,
               params: UtilityParams = UtilityParams()) -> float:
    if d_nav < 0:
        raise ValueError("navigation distance must be non-negative")
    return float(omega + navigation_term(d_nav, params))


def landmark_bonus(pose: ViewPose, landmark_gmms: Mapping[int, GaussianMixture], co_occur: Mapping[int, float],
                   det: DetectorModel, size_classes: Mapping[int, str], world_map: Optional[WorldMap] = None,
                   params: UtilityParams = UtilityParams()) -> float:
    """``beta * max_{j,n} CoOccur_j * omega^j_n * I^j_n``."""
    best = 0.0
    for j, gmm in landmark_gmms.items():
        c = co_occur.get(j, 0.0)
        if c <= 0:
            continue
        seen = visible_points(world_map, pose, det.fov, gmm.means, det.range_for(size_classes[j]))
        if seen.any():
            best = max(best, c * float(gmm.weights[seen].max()))
    return params.beta * best


def utility_hs(pose: ViewPose, omega: float, d_nav: float, landmark_gmms: Mapping[int, GaussianMixture],
               co_occur: Mapping[int, float], det: DetectorModel, size_classes: Mapping[int, str],
               world_map: Optional[WorldMap] = None, params: UtilityParams = UtilityParams()) -> float:
    return utility_ds(pose, omega, d_nav, params) + landmark_bonus(
        pose, landmark_gmms, co_occur, det, size_classes, world_map, params)


@dataclass
class Candidate:
    pose: ViewPose
    component: int
    omega: float
    d_nav: float
    utility: float


@dataclass
class Selection:
    pose: ViewPose
    candidates: List[Candidate]
    target_gmm: GaussianMixture
    landmark_gmms: Dict[int, GaussianMixture] = field(default_factory=dict)
    best: int = 0


def co_occurrence(state: BeliefState, target: int) -> Dict[int, float]:
    return {j: float(1.0 - state.relation_probs[target, j, DISJOINT]) for j in range(state.n) if j != target}


def _repeats(pose: ViewPose, robot: RobotState, params: UtilityParams) -> bool:
    dyaw = abs((pose.yaw - robot.heading + np.pi) % (2 * np.pi) - np.pi)
    return bool(np.hypot(pose.x - robot.x, pose.y - robot.y) < params.repeat_radius
                and dyaw < params.repeat_yaw)


def select_next_view(state: BeliefState, target: int, robot: RobotState, world_map: WorldMap,
                     det: DetectorModel, mode: str = "DS", params: UtilityParams = UtilityParams(),
                     seed: int = 0, distance=None) -> Selection:
    """Fit the target mixture, score every feasible candidate, return the argmax.

    Ties go to the smaller navigation distance, then to the earlier candidate.
    ``distance`` may be a precomputed distance field from the robot's cell.
    """
    mode = mode.upper()
    if mode not in ("DS", "HS"):
        raise ValueError(f"unknown utility mode {mode!r}")
    tset = state.sets[target]
    gmm = fit_gmm(tset, k_max=params.k_max, seed=seed)
    size = state.objects[target].size_class
    field_ = world_map.distance_field(robot.position) if distance is None else distance
    landmark_gmms: Dict[int, GaussianMixture] = {}
    co = {}
    if mode == "HS":
        co = co_occurrence(state, target)
        for j in range(state.n):
            if j != target and co[j] > 0:
                landmark_gmms[j] = fit_gmm(state.sets[j], k_max=params.k_max, seed=seed + 1 + j)
    sizes = {j: o.size_class for j, o in enumerate(state.objects)}
    cands: List[Candidate] = []
    for n, (mu, _, omega) in enumerate(gmm.components()):
        try:
            poses = generate_view_poses(mu, world_map, det, size, params)
        except WorldError:
            continue
        for pose in poses:
            ix, iy = world_map.cell_of(pose.position)
            d = float(field_[iy, ix])
            if not np.isfinite(d):
                continue
            u = utility_ds(pose, float(omega), d, params)
            if mode == "HS":
                u += landmark_bonus(pose, landmark_gmms, co, det, sizes, world_map, params)
            cands.append(Candidate(ViewPose(pose.x, pose.y, pose.yaw, u), n, float(omega), d, u))
    if not cands:
        raise WorldError("no feasible view pose for any target component")
    fresh = [c for c in cands if not _repeats(c.pose, robot, params)]
    if fresh:
        cands = fresh
    best = min(range(len(cands)), key=lambda c: (-cands[c].utility, cands[c].d_nav, c))
    return Selection(cands[best].pose, cands, gmm, landmark_gmms, best)
