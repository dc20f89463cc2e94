"""Anatomy-constrained 3-DOF probe movement model and its exploration grid.

The prostate is approximated by an ellipsoid aligned with its bounding box.
A pose ``(alpha, beta, lam)`` places the probe origin on the ellipsoid at
polar coordinates ``(alpha, beta)`` around the pole (the surface point
facing the rectal fixed point), keeps the probe axis through the fixed
point, and rolls the probe by ``lam`` about that axis.

Transforms returned here map tracking-image coordinates into the
reference frame (the probe placement expressed in reference coordinates).
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .similarity import Box, EvaluationDomain, moving_samples
from .transform import RigidTransform
from .volume import Volume

log = logging.getLogger(__name__)

CACHE_MAGIC = b"VTCACHE1"
DEFAULT_STEPS = (20, 18, 36)
DEFAULT_TILT_LIMIT = math.radians(45.0)


class FixedPointInside(ValueError):
    pass


class CacheFormatError(ValueError):
    pass


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _align(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit vector ``a`` onto unit vector ``b`` (not antiparallel)."""
    v = np.cross(a, b)
    c = float(a @ b)
    k = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + k + (k @ k) / (1.0 + c)


@dataclass(frozen=True, eq=False)
class ProbeMovementModel:
    ellipsoid_center: np.ndarray
    semi_axes: np.ndarray
    fp_rect: np.ndarray
    probe_origin_ref: np.ndarray
    probe_axis_ref: np.ndarray

    def __post_init__(self):
        for name in ("ellipsoid_center", "semi_axes", "fp_rect", "probe_origin_ref",
                     "probe_axis_ref"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if np.any(self.semi_axes <= 0):
            raise ValueError("semi-axes must be positive")
        if abs(np.linalg.norm(self.probe_axis_ref) - 1.0) > 1e-9:
            raise ValueError("probe axis must be a unit vector")
        if self.implicit(self.fp_rect) <= 0.0:
            raise FixedPointInside("rectal fixed point lies inside the prostate ellipsoid")

    def implicit(self, p) -> np.ndarray:
        """Ellipsoid implicit function: 0 on the surface, negative inside."""
        q = (np.asarray(p) - self.ellipsoid_center) / self.semi_axes
        return np.sum(q * q, axis=-1) - 1.0

    @property
    def pole_direction(self) -> np.ndarray:
        """Unit direction from the prostate center towards the rectal fixed point."""
        return _unit(self.fp_rect - self.ellipsoid_center)

    @property
    def tangent_frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d0 = self.pole_direction
        # seed with the world axis least parallel to the pole direction
        seed = np.eye(3)[int(np.argmin(np.abs(d0)))]
        e1 = _unit(seed - (seed @ d0) * d0)
        e2 = np.cross(d0, e1)
        return d0, e1, e2

    @property
    def pole(self) -> np.ndarray:
        return surface_point(self, 0.0, 0.0)

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("ellipsoid_center", "semi_axes", "fp_rect", "probe_origin_ref", "probe_axis_ref")}


def build_model(bbox: Box, fp_rect, probe_origin_ref, probe_axis_ref) -> ProbeMovementModel:
    """Model from the prostate bounding box and the probe geometry."""
    model = ProbeMovementModel(bbox.center, bbox.half_edges, fp_rect, probe_origin_ref,
                               probe_axis_ref)
    gap = float(np.linalg.norm(model.pole - model.probe_origin_ref))
    if gap > 1.0:
        log.warning("probe origin is %.1f mm from the model pole; poses are anchored at the pole",
                    gap)
    return model


@dataclass(frozen=True)
class ProbePose:
    alpha: float
    beta: float
    lam: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.lam])


def surface_point(model: ProbeMovementModel, alpha: float, beta: float) -> np.ndarray:
    d0, e1, e2 = model.tangent_frame
    d = (math.cos(alpha) * math.cos(beta) * d0 + math.sin(alpha) * math.cos(beta) * e1
         + math.sin(beta) * e2)
    r = 1.0 / math.sqrt(float(np.sum((d / model.semi_axes) ** 2)))
    return model.ellipsoid_center + r * d


def pose_to_transform(model: ProbeMovementModel, pose: ProbePose | tuple) -> RigidTransform:
    """Rigid placement of the probe for ``pose``; identity at (0, 0, 0).

    The reference pole maps onto ``surface_point(alpha, beta)``, the probe
    axis through the pole maps onto the line through that point and the
    rectal fixed point, and ``lam`` rolls about that line.
    """
    alpha, beta, lam = (pose.alpha, pose.beta, pose.lam) if isinstance(pose, ProbePose) else pose
    s0 = model.pole
    s = surface_point(model, alpha, beta)
    u0 = _unit(s0 - model.fp_rect)
    u = _unit(s - model.fp_rect)
    rot = _axis_rotation(u, lam) @ _align(u0, u)
    return RigidTransform(rot, s - rot @ s0)


@dataclass(frozen=True, eq=False)
class ExplorationCache:
    """Reference samples (intensity, gradient magnitude) per pose and lattice point.

    Absent samples are NaN.  Row ``i`` belongs to pose ``i`` of the grid.
    """

    intensity: np.ndarray
    gradient: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape


@dataclass(frozen=True, eq=False)
class ExplorationGrid:
    poses: np.ndarray  # (n, 3): alpha, beta, lam
    steps: tuple[int, int, int]
    cache: Optional[ExplorationCache] = None

    def __len__(self):
        return len(self.poses)

    def pose(self, i: int) -> ProbePose:
        return ProbePose(*(float(v) for v in self.poses[i]))


def generate_grid(model: ProbeMovementModel, n_alpha: int = DEFAULT_STEPS[0],
                  n_beta: int = DEFAULT_STEPS[1], n_lambda: int = DEFAULT_STEPS[2],
                  tilt_limit: float = DEFAULT_TILT_LIMIT) -> ExplorationGrid:
    """Equidistant product grid, lambda fastest, then beta, then alpha."""
    if min(n_alpha, n_beta, n_lambda) < 1:
        raise ValueError("grid counts must be >= 1")

    def tilt_axis(n):
        return np.zeros(1) if n == 1 else np.linspace(-tilt_limit, tilt_limit, n)

    lam = -math.pi + (np.arange(n_lambda) + 1) * (2.0 * math.pi / n_lambda)
    a, b, c = np.meshgrid(tilt_axis(n_alpha), tilt_axis(n_beta), lam, indexing="ij")
    poses = np.stack([a.ravel(), b.ravel(), c.ravel()], axis=1)
    return ExplorationGrid(poses, (n_alpha, n_beta, n_lambda))


def grid_transforms(model: ProbeMovementModel, grid: ExplorationGrid) -> list[RigidTransform]:
    return [pose_to_transform(model, tuple(p)) for p in grid.poses]


def precompute_cache(grid: ExplorationGrid, model: ProbeMovementModel, reference: Volume,
                     reference_grad: Volume, points: np.ndarray,
                     box: Optional[Box] = None) -> ExplorationGrid:
    """Sample the reference at every pose-transformed point ahead of time.

    ``points`` are the tracking-side lattice points of the exploration
    level.  The samples are produced by the same code path as uncached
    evaluation, so cached energies are bit-identical.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("evaluation domain is empty")
    dom = EvaluationDomain(points, np.zeros(len(points)))
    inten = np.empty((len(grid), len(points)))
    grad = np.empty_like(inten)
    for i, t in enumerate(grid_transforms(model, grid)):
        inten[i] = moving_samples(dom, reference, t, box)
        grad[i] = moving_samples(dom, reference_grad, t, box)
    return replace(grid, cache=ExplorationCache(inten, grad))


def write_cache(cache: ExplorationCache, path) -> None:
    """Sidecar layout: magic, u32 pose count, u32 point count, f64le intensity
    block, f64le gradient block (row-major, pose-major)."""
    n_pose, n_pts = cache.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", n_pose, n_pts))
        fh.write(np.ascontiguousarray(cache.intensity, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cache.gradient, dtype="<f8").tobytes())


def read_cache(path) -> ExplorationCache:
    raw = Path(path).read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise CacheFormatError("not a VTCACHE1 file")
    if len(raw) < 16:
        raise CacheFormatError("truncated cache header")
    n_pose, n_pts = struct.unpack("<II", raw[8:16])
    block = n_pose * n_pts * 8
    if len(raw) != 16 + 2 * block:
        raise CacheFormatError(f"cache payload is {len(raw) - 16} bytes, expected {2 * block}")
    inten = np.frombuffer(raw, dtype="<f8", count=n_pose * n_pts, offset=16)
    grad = np.frombuffer(raw, dtype="<f8", count=n_pose * n_pts, offset=16 + block)
    return ExplorationCache(inten.reshape(n_pose, n_pts).astype(np.float64),
                            grad.reshape(n_pose, n_pts).astype(np.float64))
