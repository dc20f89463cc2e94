"""End-to-end rigid registration of a tracking image against a reference panorama.

Stages: (1) pyramids of both images, (2) exploration of the probe movement
model grid on the coarsest level, (3) 6-DOF Powell refinement of the best
few well-separated candidates on the coarsest level, (4) multi-level Powell
search from the best refined candidate down to the final level.

Transforms map tracking coordinates into the reference frame; the tracking
image is the fixed side and the reference is sampled at ``T(points)``.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .optimizer import OptimizerConfig, powell_minimize
from .probe_model import (ExplorationCache, ExplorationGrid, ProbeMovementModel, ProbePose,
                          build_model, generate_grid, grid_transforms, precompute_cache)
from .similarity import (Box, EvaluationDomain, energy_from_samples, moving_samples)
from .transform import DEFAULT_SCALE, RigidTransform, angular_error, euclidean_error, relative_angle
from .volume import (Grid, OrthoSlices, Volume, build_pyramid, extract_ortho_slices,
                     gradient_magnitude, pyramid_grids, sample_points)

log = logging.getLogger(__name__)

MODE_3D = "3D3D"
MODE_O2D = "3DO2D"
SUCCESS_MM = 2.0
SUCCESS_DEG = 5.0


class AllUndefined(RuntimeError):
    """Every exploration pose has undefined energy (no usable overlap)."""


class NoOverlap(ValueError):
    pass


@dataclass(frozen=True)
class GridParams:
    n_alpha: int = 20
    n_beta: int = 18
    n_lambda: int = 36
    tilt_limit_deg: float = 45.0


@dataclass(frozen=True)
class RegistrationConfig:
    """Registration settings; ``None`` fields take mode-dependent defaults.

    Levels are numbered from 0 (finest).  The attribute (gradient) term is
    used on levels ``>= attribute_level_cutoff``.
    """

    mode: str = MODE_3D
    pyramid_levels: Optional[int] = None
    final_level: Optional[int] = None
    grid: GridParams = field(default_factory=GridParams)
    candidate_count: int = 5
    candidate_min_distance: tuple = (5.0, 10.0)
    attribute_level_cutoff: Optional[int] = None
    min_overlap: float = 0.25
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    probe_axis: tuple = (0.0, 0.0, 1.0)
    fp_distance_mm: float = 45.0
    fp_rect: Optional[tuple] = None
    probe_origin: Optional[tuple] = None
    tracking_geometry: Optional[dict] = None

    def __post_init__(self):
        mode = self.mode.upper().replace("-", "")
        if mode not in (MODE_3D, MODE_O2D):
            raise ValueError(f"mode must be 3D3D or 3DO2D, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if isinstance(self.grid, dict):
            object.__setattr__(self, "grid", GridParams(**self.grid))
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerConfig(**self.optimizer))
        levels = self.pyramid_levels or (5 if mode == MODE_3D else 4)
        final = self.final_level if self.final_level is not None else (2 if mode == MODE_3D else 1)
        cutoff = self.attribute_level_cutoff
        object.__setattr__(self, "pyramid_levels", levels)
        object.__setattr__(self, "final_level", final)
        object.__setattr__(self, "attribute_level_cutoff", levels - 2 if cutoff is None else cutoff)
        object.__setattr__(self, "candidate_min_distance",
                           tuple(float(v) for v in self.candidate_min_distance))
        if not 1 <= final < levels:
            raise ValueError("need 1 <= final_level < pyramid_levels")
        if self.candidate_count < 1:
            raise ValueError("candidate_count must be >= 1")
        if not 0.0 < self.min_overlap <= 1.0:
            raise ValueError("min_overlap must lie in (0, 1]")
        if min(self.grid.n_alpha, self.grid.n_beta, self.grid.n_lambda) < 1:
            raise ValueError("grid counts must be >= 1")

    @property
    def coarsest(self) -> int:
        return self.pyramid_levels - 1

    def uses_attributes(self, level: int) -> bool:
        return level >= self.attribute_level_cutoff

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RegistrationConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def model_from_config(box: Box, config: RegistrationConfig) -> ProbeMovementModel:
    axis = np.asarray(config.probe_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    fp = (box.center - config.fp_distance_mm * axis if config.fp_rect is None
          else np.asarray(config.fp_rect, dtype=np.float64))
    origin = config.probe_origin
    if origin is None:
        origin = ProbeMovementModel(box.center, box.half_edges, fp, box.center, axis).pole
    return build_model(box, fp, origin, axis)


# --------------------------------------------------------------------------- fixed side

@dataclass(frozen=True, eq=False)
class FixedLevel:
    """Tracking-side evaluation domain at one pyramid level.

    ``lattice`` holds every lattice point of the level (planes concatenated
    in o2D mode); ``domain.index`` selects the points in use.
    """

    level: int
    lattice: np.ndarray
    domain: EvaluationDomain
    gradient_values: Optional[np.ndarray]

    @property
    def key(self) -> str:
        return hashlib.sha1(np.ascontiguousarray(self.lattice).tobytes()).hexdigest()


def _fixed_levels(images: Sequence[Volume], config: RegistrationConfig) -> list[FixedLevel]:
    pyramids = [build_pyramid(v, config.pyramid_levels) for v in images]
    out = []
    for lev in range(config.pyramid_levels):
        vols = [p[lev] for p in pyramids]
        lattice = np.concatenate([v.grid.lattice_points() for v in vols])
        vals = np.concatenate([v.data.ravel() for v in vols]).astype(np.float64)
        if config.uses_attributes(lev):
            grads = [gradient_magnitude(v) for v in vols]
            valid = np.concatenate([g.valid_mask.ravel() for g in grads])
            gvals = np.concatenate([g.data.ravel() for g in grads]).astype(np.float64)
        else:
            valid = np.concatenate([v.valid_mask.ravel() for v in vols])
            gvals = None
        idx = np.flatnonzero(valid)
        if len(idx) == 0:
            raise AllUndefined(f"tracking image has no valid voxels at level {lev}")
        dom = EvaluationDomain(lattice[idx], vals[idx], f"tracking level {lev}", idx)
        out.append(FixedLevel(lev, lattice, dom, None if gvals is None else gvals[idx]))
    return out


def central_slices(volume: Volume) -> OrthoSlices:
    """The three orthogonal planes through the volume center along its own axes."""
    return extract_ortho_slices(volume, volume.axes, volume.grid.center())


def prepare_tracking(tracking: Union[Volume, OrthoSlices], config: RegistrationConfig,
                     ) -> list[FixedLevel]:
    if config.mode == MODE_O2D:
        if isinstance(tracking, Volume):
            tracking = central_slices(tracking)
        return _fixed_levels(tracking.planes, config)
    if isinstance(tracking, OrthoSlices):
        raise ValueError("3D3D mode needs a tracking volume")
    return _fixed_levels([tracking], config)


def tracking_lattice(geometry: Union[Grid, dict], config: RegistrationConfig) -> np.ndarray:
    """Coarsest-level lattice of a tracking image of the given geometry (for caching)."""
    grid = Grid.from_dict(geometry) if isinstance(geometry, dict) else geometry
    dummy = Volume(np.zeros(grid.dims, dtype=np.float32), grid.spacing, grid.origin, grid.axes)
    if config.mode == MODE_O2D:
        vols = central_slices(dummy).planes
    else:
        vols = [dummy]
    return np.concatenate([pyramid_grids(v.grid, config.pyramid_levels)[-1].lattice_points()
                           for v in vols])


# --------------------------------------------------------------------------- reference side

@dataclass(eq=False)
class PreparedReference:
    """Reference pyramid, gradient pyramid, movement model and exploration caches."""

    volume: Volume
    box: Box
    config: RegistrationConfig
    model: ProbeMovementModel
    pyramid: list
    gradients: list
    grid: ExplorationGrid
    transforms: list
    caches: dict = field(default_factory=dict)

    @classmethod
    def build(cls, volume: Volume, box: Box, config: RegistrationConfig) -> "PreparedReference":
        model = model_from_config(box, config)
        pyr = build_pyramid(volume, config.pyramid_levels)
        grads = [gradient_magnitude(v) if config.uses_attributes(i) else None
                 for i, v in enumerate(pyr)]
        g = config.grid
        grid = generate_grid(model, g.n_alpha, g.n_beta, g.n_lambda, math.radians(g.tilt_limit_deg))
        return cls(volume, box, config, model, pyr, grads, grid, grid_transforms(model, grid))

    @property
    def center(self) -> np.ndarray:
        return self.box.center

    def gradient(self, level: int) -> Volume:
        if self.gradients[level] is None:
            self.gradients[level] = gradient_magnitude(self.pyramid[level])
        return self.gradients[level]

    def cache_for(self, lattice: np.ndarray) -> ExplorationCache:
        key = hashlib.sha1(np.ascontiguousarray(lattice).tobytes()).hexdigest()
        if key not in self.caches:
            lev = self.config.coarsest
            g = precompute_cache(self.grid, self.model, self.pyramid[lev], self.gradient(lev),
                                 lattice, self.box)
            self.caches[key] = g.cache
        return self.caches[key]

    def attach_cache(self, lattice: np.ndarray, cache: ExplorationCache) -> None:
        if cache.shape != (len(self.grid), len(lattice)):
            raise ValueError(f"cache shape {cache.shape} does not match "
                             f"{len(self.grid)} poses x {len(lattice)} points")
        key = hashlib.sha1(np.ascontiguousarray(lattice).tobytes()).hexdigest()
        self.caches[key] = cache


# --------------------------------------------------------------------------- energies

def box_share(ref: PreparedReference, fixed: FixedLevel, t: RigidTransform) -> int:
    """Number of tracking lattice points (valid or not) that ``t`` maps into the box.

    This is the denominator of the overlap fraction: the part of the gland
    box the tracking lattice spans at this pose.
    """
    return int(np.count_nonzero(ref.box.contains(t.apply(fixed.lattice))))


def level_energy(ref: PreparedReference, fixed: FixedLevel, t: RigidTransform,
                 ) -> Optional[float]:
    """Energy of ``t`` at one level: attribute energy on coarse levels, else 1 - CC."""
    lev = fixed.level
    cfg = ref.config
    total = box_share(ref, fixed, t)
    if total == 0:
        return None
    s_int = moving_samples(fixed.domain, ref.pyramid[lev], t, ref.box)
    if fixed.gradient_values is None:
        return energy_from_samples(fixed.domain.values, s_int, None, None, cfg.min_overlap,
                                   total)
    s_grad = moving_samples(fixed.domain, ref.gradient(lev), t, ref.box)
    return energy_from_samples(fixed.domain.values, s_int, fixed.gradient_values, s_grad,
                               cfg.min_overlap, total)


def exploration_energies(ref: PreparedReference, fixed: FixedLevel,
                         use_cache: bool = True) -> np.ndarray:
    """Energy at every grid pose (``inf`` where undefined)."""
    cfg = ref.config
    n = len(ref.grid)
    out = np.full(n, np.inf)
    if not use_cache:
        for i, t in enumerate(ref.transforms):
            e = level_energy(ref, fixed, t)
            out[i] = np.inf if e is None else e
        return out
    cache = ref.cache_for(fixed.lattice)
    idx = fixed.domain.index
    vi, vg = fixed.domain.values, fixed.gradient_values
    for i in range(n):
        total = box_share(ref, fixed, ref.transforms[i])
        if total == 0:
            continue
        si = cache.intensity[i, idx]
        if vg is None:
            e = energy_from_samples(vi, si, None, None, cfg.min_overlap, total)
        else:
            e = energy_from_samples(vi, si, vg, cache.gradient[i, idx], cfg.min_overlap, total)
        if e is not None:
            out[i] = e
    return out


def too_close(a: RigidTransform, b: RigidTransform, center: np.ndarray,
              min_distance: tuple) -> bool:
    """Both the gland-center displacement and the relative angle are below their limits."""
    c = np.asarray(center, dtype=np.float64)
    disp = float(np.linalg.norm(a.inverse().apply(c) - b.inverse().apply(c)))
    ang = math.degrees(relative_angle(a.rotation, b.rotation))
    return disp < min_distance[0] and ang < min_distance[1]


def select_candidates(energies: np.ndarray, transforms: Sequence[RigidTransform],
                      center, count: int, min_distance: tuple) -> list[int]:
    """Greedy pick of up to ``count`` pose indices in ascending energy, skipping
    poses too close to an already selected one.  Ties keep grid order."""
    order = np.argsort(energies, kind="stable")
    chosen: list[int] = []
    for i in order:
        if not np.isfinite(energies[i]):
            break
        if any(too_close(transforms[i], transforms[j], center, min_distance) for j in chosen):
            continue
        chosen.append(int(i))
        if len(chosen) == count:
            break
    return chosen


@dataclass
class Candidate:
    pose_index: int
    pose: ProbePose
    energy: float
    transform: RigidTransform
    refined_transform: Optional[RigidTransform] = None
    refined_energy: float = math.inf
    converged: bool = True

    def to_json(self) -> dict:
        return {
            "pose_index": self.pose_index,
            "pose_rad": [self.pose.alpha, self.pose.beta, self.pose.lam],
            "energy": _num(self.energy),
            "transform": self.transform.to_json(),
            "refined_transform": None if self.refined_transform is None
            else self.refined_transform.to_json(),
            "refined_energy": _num(self.refined_energy),
            "converged": self.converged,
        }


def _num(v: float):
    return float(v) if math.isfinite(v) else None


def systematic_exploration(ref: PreparedReference, fixed: FixedLevel,
                           use_cache: bool = True) -> list[Candidate]:
    """Ranked, pruned candidates from the exploration grid."""
    cfg = ref.config
    e = exploration_energies(ref, fixed, use_cache)
    if not np.any(np.isfinite(e)):
        raise AllUndefined("every exploration pose has undefined energy")
    chosen = select_candidates(e, ref.transforms, ref.center, cfg.candidate_count,
                               cfg.candidate_min_distance)
    return [Candidate(i, ref.grid.pose(i), float(e[i]), ref.transforms[i]) for i in chosen]


# --------------------------------------------------------------------------- local search

def local_transform(z: np.ndarray, base: RigidTransform, center: np.ndarray) -> RigidTransform:
    """``base`` followed by a small rigid motion about ``center`` (scaled units)."""
    v = np.asarray(z, dtype=np.float64) * DEFAULT_SCALE
    return RigidTransform.from_rotvec(v[:3], v[3:], center=center) @ base


def refine(ref: PreparedReference, fixed: FixedLevel, start: RigidTransform,
           ) -> tuple[RigidTransform, float, bool, int]:
    """6-DOF Powell search at one level; returns (transform, energy, converged, nfev)."""
    center = ref.center

    def f(z):
        if np.linalg.norm(z[:3] * DEFAULT_SCALE[:3]) >= math.pi:
            return math.inf
        return level_energy(ref, fixed, local_transform(z, start, center))

    res = powell_minimize(f, np.zeros(6), ref.config.optimizer)
    return local_transform(res.x, start, center), float(res.fun), res.converged, res.nfev


@dataclass
class CoarseSearch:
    """Outcome of stages 1-3, reusable for several final searches."""

    fixed: list
    candidates: list
    exploration_best: float
    timings_ms: dict
    converged: bool

    @property
    def best(self) -> Candidate:
        return self.candidates[0]


@dataclass
class RegistrationResult:
    transform: RigidTransform
    final_energy: float
    candidates: list
    stage_timings: dict
    converged: bool
    failure_reason: Optional[str] = None
    level_energies: dict = field(default_factory=dict)
    exploration_best: float = math.inf

    def to_json(self) -> dict:
        return {
            "transform": self.transform.to_json(),
            "final_energy": _num(self.final_energy),
            "exploration_best_energy": _num(self.exploration_best),
            "level_energies": {str(k): _num(v) for k, v in self.level_energies.items()},
            "candidates": [c.to_json() for c in self.candidates],
            "stage_timings_ms": self.stage_timings,
            "converged": self.converged,
            "failure_reason": self.failure_reason,
        }


def coarse_search(ref: PreparedReference, tracking: Union[Volume, OrthoSlices],
                  use_cache: bool = True) -> CoarseSearch:
    cfg = ref.config
    t0 = time.perf_counter()
    fixed = prepare_tracking(tracking, cfg)
    t1 = time.perf_counter()
    coarse = fixed[cfg.coarsest]
    cands = systematic_exploration(ref, coarse, use_cache)
    best_explored = cands[0].energy
    t2 = time.perf_counter()
    ok = True
    for c in cands:
        c.refined_transform, c.refined_energy, c.converged, _ = refine(ref, coarse, c.transform)
        ok &= c.converged
    cands.sort(key=lambda c: c.refined_energy)
    t3 = time.perf_counter()
    timings = {"pyramids": 1e3 * (t1 - t0), "exploration": 1e3 * (t2 - t1),
               "candidate_refinement": 1e3 * (t3 - t2)}
    return CoarseSearch(fixed, cands, best_explored, timings, ok)


def final_search(ref: PreparedReference, search: CoarseSearch,
                 start: Optional[RigidTransform] = None) -> RegistrationResult:
    """Stage 4: level-by-level refinement from ``start`` (default: best candidate)."""
    cfg = ref.config
    t0 = time.perf_counter()
    t = search.best.refined_transform if start is None else start
    ok = search.converged
    energies = {}
    e = math.inf
    for lev in range(cfg.coarsest, cfg.final_level - 1, -1):
        t, e, conv, _ = refine(ref, search.fixed[lev], t)
        energies[lev] = e
        ok &= conv
    timings = dict(search.timings_ms)
    timings["multilevel"] = 1e3 * (time.perf_counter() - t0)
    timings["total"] = sum(timings.values())
    reason = None
    if not math.isfinite(e):
        reason = "undefined_energy"
    elif not ok:
        reason = "non_converged"
    return RegistrationResult(t, e, list(search.candidates), timings, ok, reason, energies,
                              search.exploration_best)


def register(reference: Union[Volume, PreparedReference], bbox: Optional[Box],
             tracking: Union[Volume, OrthoSlices], config: Optional[RegistrationConfig] = None,
             use_cache: bool = True) -> RegistrationResult:
    """Full registration; ``reference`` may be prepared ahead of time (with caches)."""
    if isinstance(reference, PreparedReference):
        ref = reference
        if config is not None and config != ref.config:
            raise ValueError("config differs from the one the reference was prepared with")
    else:
        ref = PreparedReference.build(reference, bbox, config or RegistrationConfig())
    t0 = time.perf_counter()
    search = coarse_search(ref, tracking, use_cache)
    result = final_search(ref, search)
    result.stage_timings["wall"] = 1e3 * (time.perf_counter() - t0)
    return result


def classify_success(result: Union[RegistrationResult, RigidTransform], truth: RigidTransform,
                     center) -> tuple[bool, float, float]:
    """(success, eps_e mm, eps_a degrees); success needs eps_e < 2 mm and eps_a < 5 deg."""
    t = result.transform if isinstance(result, RegistrationResult) else result
    ee = euclidean_error(t, truth, center)
    ea = angular_error(t, truth)
    return (ee < SUCCESS_MM and ea < SUCCESS_DEG), ee, ea


# --------------------------------------------------------------------------- panorama

def _overlap_components(masks: list[np.ndarray]) -> int:
    n = len(masks)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for a in range(n):
        for b in range(a + 1, n):
            if np.any(masks[a] & masks[b]):
                parent[find(a)] = find(b)
    return len({find(i) for i in range(n)})


def compound_panorama(acquisitions: Sequence[Volume], poses: Sequence[RigidTransform],
                      chunk: int = 1 << 19) -> Volume:
    """Mean-compound acquisitions placed in the reference frame by ``poses``.

    The output lattice is aligned with the first acquisition's lattice (as
    placed by its pose), spans all placed volumes, and uses the finest
    input spacing.
    """
    if len(acquisitions) != len(poses) or not acquisitions:
        raise ValueError("need one pose per acquisition")
    g0 = acquisitions[0].grid
    axes = poses[0].rotation @ g0.axes
    base = poses[0].apply(g0.origin)
    spacing = np.min([a.spacing for a in acquisitions], axis=0)
    corners = np.concatenate([p.apply(a.grid.corners()) for a, p in zip(acquisitions, poses)])
    idx = ((corners - base) @ axes) / spacing
    lo = np.floor(idx.min(axis=0) + 1e-9)
    hi = np.ceil(idx.max(axis=0) - 1e-9)
    dims = tuple(int(v) for v in hi - lo + 1)
    grid = Grid(dims, spacing, base + axes @ (lo * spacing), axes)
    total = np.zeros(grid.size)
    count = np.zeros(grid.size, dtype=np.int32)
    contrib = [np.zeros(grid.size, dtype=bool) for _ in acquisitions]
    inverses = [p.inverse() for p in poses]
    ii, jj, kk = np.unravel_index(np.arange(grid.size), dims)
    for start in range(0, grid.size, chunk):
        sl = slice(start, min(start + chunk, grid.size))
        pts = grid.index_to_world(np.stack([ii[sl], jj[sl], kk[sl]], axis=1))
        for a, (vol, inv) in enumerate(zip(acquisitions, inverses)):
            s = sample_points(vol, inv.apply(pts))
            ok = ~np.isnan(s)
            contrib[a][sl] = ok
            total[sl][ok] += s[ok]
            count[sl][ok] += 1
    if len(acquisitions) > 1 and _overlap_components(contrib) > 1:
        raise NoOverlap("acquisitions do not overlap each other")
    mask = count > 0
    data = np.zeros(grid.size, dtype=np.float64)
    data[mask] = total[mask] / count[mask]
    return Volume(data.reshape(dims).astype(np.float32), grid.spacing, grid.origin, grid.axes,
                  mask.reshape(dims))
