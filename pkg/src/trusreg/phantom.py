"""Synthetic TRUS-like prostate phantoms with exact ground truth.

A phantom is an analytic structure field defined in the reference frame
(gland ellipsoid, an off-center transition zone, urethra, calcifications,
needle tracks).  An acquisition at pose ``T`` (tracking -> reference)
evaluates the field at ``T(voxel)``, multiplies by correlated speckle,
attenuates shadow sectors and blanks everything outside the beam.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .pipeline import compound_panorama
from .probe_model import (ProbeMovementModel, ProbePose, build_model, pose_to_transform,
                          surface_point)
from .similarity import Box
from .transform import RigidTransform
from .volume import Grid, Volume

# default acquisition geometry: 128^3 voxels of 0.4 mm
DEFAULT_DIMS = (128, 128, 128)
DEFAULT_SPACING = 0.4
PROBE_ORIGIN = (25.4, 25.4, 6.0)
PROBE_AXIS = (0.0, 0.0, 1.0)
FP_DISTANCE = 45.0


class NoLandmarks(ValueError):
    pass


@dataclass
class Cone:
    """Beam support in acquisition coordinates.

    Without ``sweep_half_angle_deg`` the beam is a circular cone.  With it,
    the beam is a pyramid: ``half_angle_deg`` across ``fan_direction`` and
    ``sweep_half_angle_deg`` across the perpendicular direction.
    """

    apex: tuple = (25.4, 25.4, -6.0)
    axis: tuple = PROBE_AXIS
    half_angle_deg: float = 50.0
    depth_mm: float = 58.0
    sweep_half_angle_deg: Optional[float] = 40.0
    fan_direction: tuple = (1.0, 0.0, 0.0)

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ax = np.asarray(self.axis, dtype=np.float64)
        ax = ax / np.linalg.norm(ax)
        f = np.asarray(self.fan_direction, dtype=np.float64)
        f = f - (f @ ax) * ax
        f /= np.linalg.norm(f)
        return ax, f, np.cross(ax, f)

    def mask(self, pts: np.ndarray) -> np.ndarray:
        ax, f, s = self.frame()
        rel = pts - np.asarray(self.apex, dtype=np.float64)
        d = rel @ ax
        inside = (d > 0) & (d <= self.depth_mm)
        if self.sweep_half_angle_deg is None:
            cosang = d / np.maximum(np.linalg.norm(rel, axis=1), 1e-12)
            return inside & (cosang >= math.cos(math.radians(self.half_angle_deg)))
        a = np.abs(np.arctan2(rel @ f, d))
        b = np.abs(np.arctan2(rel @ s, d))
        return (inside & (a <= math.radians(self.half_angle_deg))
                & (b <= math.radians(self.sweep_half_angle_deg)))


@dataclass
class Calcification:
    center: tuple
    radius: float
    brightness: float


@dataclass
class NeedleTrack:
    entry: tuple
    direction: tuple
    length: float
    radius: float = 0.5


@dataclass
class ShadowSector:
    """Azimuth interval about the beam axis (degrees from the fan direction)."""

    phi_min_deg: float
    phi_max_deg: float
    attenuation: float
    start_depth_mm: float = 0.0


@dataclass
class PhantomSpec:
    gland_semi_axes: tuple = (20.0, 15.0, 19.0)
    gland_center: tuple = (25.4, 25.4, 25.0)
    zone_offset: tuple = (4.0, 3.0, 5.0)
    zone_semi_axes: tuple = (9.0, 7.0, 9.0)
    zone_delta: float = 18.0
    urethra_start: tuple = (13.4, 28.4, 32.0)
    urethra_end: tuple = (38.4, 30.4, 20.0)
    urethra_radius: float = 2.5
    calcifications: list = field(default_factory=list)
    needle_tracks: list = field(default_factory=list)
    interior_intensity: float = 55.0
    exterior_intensity: float = 100.0
    urethra_intensity: float = 25.0
    needle_intensity: float = 95.0
    texture_amplitude: float = 20.0
    texture_modes: int = 24
    texture_wavelengths_mm: tuple = (6.0, 16.0)
    texture_seed: int = 0
    speckle_sigma: float = 0.3
    speckle_correlation_voxels: float = 3.0
    cone: Cone = field(default_factory=Cone)
    shadow_sectors: list = field(default_factory=list)
    intensity_jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        self.calcifications = [c if isinstance(c, Calcification) else Calcification(**c)
                               for c in self.calcifications]
        self.needle_tracks = [n if isinstance(n, NeedleTrack) else NeedleTrack(**n)
                              for n in self.needle_tracks]
        self.shadow_sectors = [s if isinstance(s, ShadowSector) else ShadowSector(**s)
                               for s in self.shadow_sectors]
        if isinstance(self.cone, dict):
            self.cone = Cone(**self.cone)
        if min(self.gland_semi_axes) <= 0 or self.urethra_radius <= 0:
            raise ValueError("radii must be positive")
        if any(c.radius <= 0 for c in self.calcifications):
            raise ValueError("calcification radii must be positive")
        if any(n.length <= 0 or n.radius <= 0 for n in self.needle_tracks):
            raise ValueError("needle lengths and radii must be positive")
        if self.texture_amplitude < 0 or self.texture_modes < 0:
            raise ValueError("texture amplitude and mode count must be non-negative")
        if not 0.0 <= self.speckle_sigma < 1.0:
            raise ValueError("speckle_sigma must lie in [0, 1)")
        if not 0.0 < self.cone.half_angle_deg < 90.0:
            raise ValueError("cone half-angle must lie in (0, 90) degrees")

    @property
    def gland_box(self) -> Box:
        c = np.asarray(self.gland_center, dtype=np.float64)
        a = np.asarray(self.gland_semi_axes, dtype=np.float64)
        return Box(c - a, c + a)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        return cls(**_tuples(d))


@dataclass(frozen=True, eq=False)
class PhantomScene:
    """Ground truth of one acquisition.

    ``true_pose`` maps acquisition coordinates into the reference frame, so
    reference-frame landmarks equal ``true_pose`` applied to their
    acquisition-frame positions.
    """

    spec: PhantomSpec
    true_pose: RigidTransform
    calcifications_ref: np.ndarray
    calcifications_acq: np.ndarray
    needle_points_ref: np.ndarray
    needle_dirs_ref: np.ndarray
    needle_points_acq: np.ndarray
    needle_dirs_acq: np.ndarray

    def __post_init__(self):
        t = self.true_pose
        if len(self.calcifications_ref):
            assert np.allclose(t.apply(self.calcifications_acq), self.calcifications_ref,
                               atol=1e-9, rtol=0)
        if len(self.needle_points_ref):
            assert np.allclose(t.apply(self.needle_points_acq), self.needle_points_ref,
                               atol=1e-9, rtol=0)
            assert np.allclose(self.needle_dirs_acq @ t.rotation.T, self.needle_dirs_ref,
                               atol=1e-9, rtol=0)

    @classmethod
    def create(cls, spec: PhantomSpec, pose: RigidTransform) -> "PhantomScene":
        inv = pose.inverse()
        calc = np.array([c.center for c in spec.calcifications], dtype=np.float64).reshape(-1, 3)
        npts = np.array([n.entry for n in spec.needle_tracks], dtype=np.float64).reshape(-1, 3)
        ndir = np.array([_unit(n.direction) for n in spec.needle_tracks],
                        dtype=np.float64).reshape(-1, 3)
        return cls(spec, pose, calc, inv.apply(calc), npts, ndir, inv.apply(npts),
                   ndir @ inv.rotation.T)

    def to_json(self) -> dict:
        return {
            "spec": self.spec.to_json(),
            "true_pose": self.true_pose.to_json(),
            "calcifications_ref_mm": self.calcifications_ref.tolist(),
            "calcifications_acq_mm": self.calcifications_acq.tolist(),
            "needle_points_ref_mm": self.needle_points_ref.tolist(),
            "needle_dirs_ref": self.needle_dirs_ref.tolist(),
            "needle_points_acq_mm": self.needle_points_acq.tolist(),
            "needle_dirs_acq": self.needle_dirs_acq.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PhantomScene":
        def arr(k):
            return np.asarray(d[k], dtype=np.float64).reshape(-1, 3)
        return cls(PhantomSpec.from_json(d["spec"]), RigidTransform.from_json(d["true_pose"]),
                   arr("calcifications_ref_mm"), arr("calcifications_acq_mm"),
                   arr("needle_points_ref_mm"), arr("needle_dirs_ref"),
                   arr("needle_points_acq_mm"), arr("needle_dirs_acq"))


def _tuples(d):
    """JSON decoding helper: numeric lists back to tuples, recursively."""
    if isinstance(d, dict):
        return {k: _tuples(v) for k, v in d.items()}
    if isinstance(d, list):
        if all(isinstance(v, (int, float)) for v in d):
            return tuple(d)
        return [_tuples(v) for v in d]
    return d


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _inside_weight(signed_dist: np.ndarray, width: float) -> np.ndarray:
    """1 well inside, 0 well outside, smooth over ``width`` around the boundary."""
    return _smoothstep(0.5 - signed_dist / width)


def _ellipsoid_distance(x: np.ndarray, center, semi) -> np.ndarray:
    # first-order signed distance: (rho - 1) scaled by the radius along the ray
    rel = x - np.asarray(center)
    rho = np.sqrt(np.sum((rel / np.asarray(semi)) ** 2, axis=1))
    r = np.linalg.norm(rel, axis=1)
    return np.where(rho > 1e-12, (rho - 1.0) * r / np.maximum(rho, 1e-12), -np.min(semi))


def _segment_distance(x: np.ndarray, a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    ab = np.asarray(b, dtype=np.float64) - a
    t = np.clip(((x - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(x - a - t[:, None] * ab, axis=1)


def texture_field(spec: PhantomSpec, x: np.ndarray) -> np.ndarray:
    """Smooth tissue heterogeneity: a sum of random plane waves, zero mean,
    RMS ``texture_amplitude``, fixed by ``texture_seed``."""
    if spec.texture_modes == 0 or spec.texture_amplitude == 0:
        return np.zeros(len(x))
    rng = np.random.default_rng([spec.texture_seed, 3])
    n = spec.texture_modes
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lo, hi = spec.texture_wavelengths_mm
    k = 2.0 * math.pi / rng.uniform(lo, hi, n)
    phase = rng.uniform(0.0, 2.0 * math.pi, n)
    out = np.zeros(len(x))
    for d, kk, ph in zip(dirs, k, phase):
        out += np.cos(kk * (x @ d) + ph)
    return out * (spec.texture_amplitude * math.sqrt(2.0 / n))


def structure_field(spec: PhantomSpec, x: np.ndarray, edge: float) -> np.ndarray:
    """Noise-free intensity at reference-frame points ``x`` (N, 3)."""
    w_gland = _inside_weight(_ellipsoid_distance(x, spec.gland_center, spec.gland_semi_axes), edge)
    val = spec.exterior_intensity + (spec.interior_intensity - spec.exterior_intensity) * w_gland
    val += texture_field(spec, x)
    zc = np.asarray(spec.gland_center) + np.asarray(spec.zone_offset)
    w_zone = _inside_weight(_ellipsoid_distance(x, zc, spec.zone_semi_axes), edge)
    val += spec.zone_delta * w_zone * w_gland
    w = _inside_weight(_segment_distance(x, spec.urethra_start, spec.urethra_end)
                       - spec.urethra_radius, edge)
    val += (spec.urethra_intensity - val) * w
    for n in spec.needle_tracks:
        a = np.asarray(n.entry, dtype=np.float64)
        b = a + n.length * _unit(n.direction)
        w = _inside_weight(_segment_distance(x, a, b) - n.radius, edge)
        val += (spec.needle_intensity - val) * w
    for c in spec.calcifications:
        w = _inside_weight(np.linalg.norm(x - np.asarray(c.center), axis=1) - c.radius, edge)
        val = val * (1.0 - w) + c.brightness * w
    return val


def speckle_field(dims, seed: int, correlation_voxels: float) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian noise smoothed to the given correlation length."""
    rng = np.random.default_rng(seed)
    n = rng.standard_normal(dims)
    n = ndimage.gaussian_filter(n, correlation_voxels / 2.0, mode="wrap")
    n -= n.mean()
    n /= n.std()
    return n


def render_phantom(spec: PhantomSpec, pose: RigidTransform, geometry: Grid,
                   ) -> tuple[Volume, PhantomScene]:
    """Acquire the phantom with the probe placed at ``pose`` (tracking -> reference)."""
    y = geometry.lattice_points()
    x = pose.apply(y)
    val = structure_field(spec, x, float(np.min(geometry.spacing)))
    del x
    if spec.speckle_sigma > 0:
        n = speckle_field(geometry.dims, spec.seed, spec.speckle_correlation_voxels)
        val *= 1.0 + spec.speckle_sigma * n.ravel()
    ax, f, s = spec.cone.frame()
    rel = y - np.asarray(spec.cone.apex, dtype=np.float64)
    if spec.shadow_sectors:
        phi = np.degrees(np.arctan2(rel @ s, rel @ f))
        depth = np.linalg.norm(rel, axis=1)
        for sh in spec.shadow_sectors:
            hit = (phi >= sh.phi_min_deg) & (phi <= sh.phi_max_deg) & (depth >= sh.start_depth_mm)
            val[hit] *= 1.0 - sh.attenuation
    if spec.intensity_jitter:
        rng = np.random.default_rng([spec.seed, 1])
        val = rng.uniform(0.8, 1.2) * val + rng.uniform(-10.0, 10.0)
    np.maximum(val, 0.0, out=val)
    mask = spec.cone.mask(y)
    val[~mask] = 0.0
    vol = Volume(val.reshape(geometry.dims), geometry.spacing, geometry.origin, geometry.axes,
                 mask.reshape(geometry.dims))
    return vol, PhantomScene.create(spec, pose)


def default_geometry(dims=DEFAULT_DIMS, spacing: float = DEFAULT_SPACING) -> Grid:
    return Grid(dims, [spacing] * 3)


def phantom_model(spec: PhantomSpec, box: Optional[Box] = None) -> ProbeMovementModel:
    """Probe movement model of a phantom: fixed point 45 mm behind the gland center."""
    box = spec.gland_box if box is None else box
    axis = np.asarray(PROBE_AXIS, dtype=np.float64)
    return build_model(box, box.center - FP_DISTANCE * axis, PROBE_ORIGIN, axis)


def make_patient(seed: int, n_calcifications: int = 4, n_needles: int = 3) -> PhantomSpec:
    """Random but plausible gland: zone offset, urethra course, calcifications, needles."""
    rng = np.random.default_rng([seed, 7])
    base = PhantomSpec()
    c = np.asarray(base.gland_center)
    semi = np.asarray(base.gland_semi_axes) * rng.uniform(0.9, 1.1, 3)
    semi[2] = 19.0  # keeps the probe origin on the gland surface
    zone = rng.uniform([-5, -5, 2], [5, 5, 7])
    u0 = c + np.array([rng.uniform(-12, -8), rng.uniform(1, 5), rng.uniform(4, 9)])
    u1 = c + np.array([rng.uniform(8, 12), rng.uniform(3, 7), rng.uniform(-6, -2)])
    calcs = []
    while len(calcs) < n_calcifications:
        p = c + rng.uniform(-0.6, 0.6, 3) * semi
        if all(np.linalg.norm(p - np.asarray(q.center)) > 6.0 for q in calcs):
            calcs.append(Calcification(tuple(p), float(rng.uniform(1.2, 2.0)),
                                       float(rng.uniform(200, 240))))
    needles = []
    for _ in range(n_needles):
        entry = c + np.array([rng.uniform(-8, 8), rng.uniform(-6, 6), -semi[2] * 0.8])
        d = _unit([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 1.0])
        needles.append(NeedleTrack(tuple(entry), tuple(d), float(rng.uniform(18, 26))))
    return replace(base, gland_semi_axes=tuple(semi), zone_offset=tuple(zone),
                   urethra_start=tuple(u0), urethra_end=tuple(u1), calcifications=calcs,
                   needle_tracks=needles, texture_seed=int(seed), seed=int(seed))


def sample_plausible_pose(model: ProbeMovementModel, ranges=(math.pi, math.radians(40.0), 30.0),
                          seed: int = 0, perturbation: Optional[tuple] = (2.0, 2.0),
                          ) -> tuple[RigidTransform, ProbePose]:
    """Uniform probe pose within ``(lambda_max, tilt_max, slide_max_mm)``.

    ``perturbation = (mm, degrees)`` adds an off-model rigid error of at most
    that size about the gland center; ``None`` disables it.
    """
    lam_max, tilt_max, slide_max = ranges
    rng = np.random.default_rng([seed, 11])
    s0 = model.pole
    for _ in range(1000):
        alpha, beta = rng.uniform(-tilt_max, tilt_max, 2) if tilt_max > 0 else (0.0, 0.0)
        if np.linalg.norm(surface_point(model, alpha, beta) - s0) <= slide_max + 1e-12:
            break
    else:
        raise ValueError("no pose satisfies the slide limit")
    lam = rng.uniform(-lam_max, lam_max) if lam_max > 0 else 0.0
    pose = ProbePose(float(alpha), float(beta), float(lam))
    t = pose_to_transform(model, pose)
    if perturbation is not None and (perturbation[0] > 0 or perturbation[1] > 0):
        axis = _unit(rng.standard_normal(3))
        ang = math.radians(perturbation[1]) * rng.uniform(0.0, 1.0)
        shift = _unit(rng.standard_normal(3)) * perturbation[0] * rng.uniform(0.0, 1.0)
        pert = RigidTransform.from_rotvec(axis * ang, shift, center=model.ellipsoid_center)
        t = pert @ t
    return t, pose


def landmark_errors(scene: PhantomScene, estimated: RigidTransform,
                    ) -> tuple[list[float], list[float]]:
    """Calcification distances (mm) and needle direction angles (degrees)."""
    if len(scene.calcifications_ref) == 0 and len(scene.needle_points_ref) == 0:
        raise NoLandmarks("scene has no calcifications or needle tracks")
    calc = np.linalg.norm(estimated.apply(scene.calcifications_acq) - scene.calcifications_ref,
                          axis=1) if len(scene.calcifications_ref) else np.zeros(0)
    angles = []
    for d_acq, d_ref in zip(scene.needle_dirs_acq, scene.needle_dirs_ref):
        m = estimated.rotation @ d_acq
        c = float(np.clip(m @ d_ref, -1.0, 1.0))
        s = float(np.linalg.norm(np.cross(m, d_ref)))
        angles.append(math.degrees(math.atan2(s, c)))
    return calc.tolist(), angles


def derived_seed(*parts: int) -> int:
    """Independent 63-bit seed derived from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> 1)


PANORAMA_ANGLES_DEG = (-60.0, 0.0, 60.0)


def acquire_reference(spec: PhantomSpec, geometry: Optional[Grid] = None, panorama: bool = True,
                      angles_deg=PANORAMA_ANGLES_DEG) -> tuple[Volume, list[RigidTransform]]:
    """Reference image: a panorama of acquisitions rolled about the probe axis
    (compounded by their mean), or a single acquisition at the identity pose."""
    geometry = default_geometry() if geometry is None else geometry
    model = phantom_model(spec)
    angles = angles_deg if panorama else (0.0,)
    vols, poses = [], []
    for i, a in enumerate(angles):
        pose = pose_to_transform(model, (0.0, 0.0, math.radians(a)))
        acq = replace(spec, seed=derived_seed(spec.seed, 1, i), intensity_jitter=False)
        vols.append(render_phantom(acq, pose, geometry)[0])
        poses.append(pose)
    if not panorama:
        return vols[0], poses
    return compound_panorama(vols, poses), poses


def acquire_tracking(spec: PhantomSpec, index: int, geometry: Optional[Grid] = None,
                     ranges=(math.pi, math.radians(40.0), 30.0),
                     perturbation: Optional[tuple] = (2.0, 2.0),
                     ) -> tuple[Volume, PhantomScene, ProbePose]:
    """Tracking acquisition number ``index``: random plausible pose, fresh speckle,
    random intensity map."""
    geometry = default_geometry() if geometry is None else geometry
    model = phantom_model(spec)
    t, pose = sample_plausible_pose(model, ranges, derived_seed(spec.seed, 2, index), perturbation)
    acq = replace(spec, seed=derived_seed(spec.seed, 3, index), intensity_jitter=True)
    vol, scene = render_phantom(acq, t, geometry)
    return vol, scene, pose


__all__ = [
    "acquire_reference", "acquire_tracking", "derived_seed",
    "Calcification", "Cone", "NeedleTrack", "NoLandmarks", "PhantomScene", "PhantomSpec",
    "ShadowSector", "default_geometry", "landmark_errors", "make_patient", "phantom_model",
    "render_phantom", "sample_plausible_pose", "speckle_field", "structure_field",
]
