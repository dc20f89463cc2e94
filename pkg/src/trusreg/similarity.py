"""Similarity measures over the masked overlap of a fixed point set and a moving volume.

The fixed side is an :class:`EvaluationDomain` (world points with their
intensities); the moving volume is sampled at ``t(points)``.  Pairs whose
sample is out of support are dropped, and a measure is undefined (``None``)
when too few pairs survive.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .transform import RigidTransform
from .volume import Volume, sample_points

DEFAULT_MIN_OVERLAP = 0.25
_MIN_VARIANCE = 1e-12


@dataclass(frozen=True)
class Box:
    """Axis-aligned world box, inclusive."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(hi <= lo):
            raise ValueError(f"empty box {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def half_edges(self) -> np.ndarray:
        return (self.hi - self.lo) / 2.0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts).reshape(-1, 3)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    @classmethod
    def parse(cls, text: str) -> "Box":
        v = [float(x) for x in text.split(",")]
        if len(v) != 6:
            raise ValueError("bbox needs six comma-separated numbers x0,y0,z0,x1,y1,z1")
        return cls(v[:3], v[3:])


@dataclass(frozen=True, eq=False)
class EvaluationDomain:
    """Fixed-side points with their intensities.

    ``index`` optionally records each point's position in a larger lattice
    (used to look up precomputed samples).
    """

    points: np.ndarray
    values: np.ndarray
    source_description: str = ""
    index: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(pts) == 0:
            raise ValueError("evaluation domain is empty")
        if len(vals) != len(pts):
            raise ValueError("points and values differ in length")
        if not np.all(np.isfinite(vals)):
            raise ValueError("evaluation domain intensities must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)
        if self.index is not None:
            object.__setattr__(self, "index", np.asarray(self.index, dtype=np.intp))

    def __len__(self):
        return len(self.points)


def domain_from_volume(volume: Volume, box: Optional[Box] = None, description: str = "",
                       ) -> EvaluationDomain:
    """Every mask-valid voxel of ``volume`` (inside ``box`` if given)."""
    pts = volume.grid.lattice_points()
    keep = volume.valid_mask.ravel()
    if box is not None:
        keep = keep & box.contains(pts)
    idx = np.flatnonzero(keep)
    return EvaluationDomain(pts[idx], volume.data.ravel()[idx], description, idx)


@dataclass(frozen=True)
class OverlapStats:
    """Pair count and raw sums (extended precision) behind CC."""

    n: int
    sx: float
    sy: float
    sxx: float
    syy: float
    sxy: float
    overlap_fraction: float

    def merge(self, other: "OverlapStats", total_points: int) -> "OverlapStats":
        n = self.n + other.n
        return OverlapStats(n, self.sx + other.sx, self.sy + other.sy, self.sxx + other.sxx,
                            self.syy + other.syy, self.sxy + other.sxy,
                            n / total_points if total_points else 0.0)

    def variances(self) -> tuple[float, float]:
        if self.n == 0:
            return 0.0, 0.0
        vx = max(float(self.sxx - self.sx * self.sx / self.n), 0.0) / self.n
        vy = max(float(self.syy - self.sy * self.sy / self.n), 0.0) / self.n
        return vx, vy

    def correlation(self, min_overlap: float) -> Optional[float]:
        if self.n == 0 or self.overlap_fraction < min_overlap:
            return None
        vx, vy = self.variances()
        if vx < _MIN_VARIANCE or vy < _MIN_VARIANCE:
            return None
        cov = (self.sxy - self.sx * self.sy / self.n) / self.n
        return float(np.clip(float(cov) / np.sqrt(vx * vy), -1.0, 1.0))


def overlap_stats(fixed: np.ndarray, samples: np.ndarray,
                  total: Optional[int] = None) -> OverlapStats:
    """Sufficient statistics over pairs whose moving sample is defined.

    The overlap fraction is relative to ``total`` (default: the number of
    fixed points).
    """
    ok = ~np.isnan(samples)
    x = fixed[ok].astype(np.longdouble)
    y = samples[ok].astype(np.longdouble)
    n = int(x.size)
    total = len(fixed) if total is None else total
    return OverlapStats(n, x.sum(), y.sum(), (x * x).sum(), (y * y).sum(), (x * y).sum(),
                        min(n / total, 1.0) if total else 0.0)


def moving_samples(domain: EvaluationDomain, moving: Volume, t: RigidTransform,
                   box: Optional[Box] = None) -> np.ndarray:
    """Moving-volume samples at ``t(points)``; NaN when absent or outside ``box``."""
    pts = t.apply(domain.points)
    s = sample_points(moving, pts)
    if box is not None:
        s[~box.contains(pts)] = np.nan
    return s


def cc_from_samples(values: np.ndarray, samples: np.ndarray,
                    min_overlap: float = DEFAULT_MIN_OVERLAP,
                    total: Optional[int] = None) -> Optional[float]:
    return overlap_stats(values, samples, total).correlation(min_overlap)


def pearson_cc(domain: EvaluationDomain, moving: Volume, t: RigidTransform,
               min_overlap: float = DEFAULT_MIN_OVERLAP, box: Optional[Box] = None,
               ) -> Optional[float]:
    if not 0.0 < min_overlap <= 1.0:
        raise ValueError("min_overlap must lie in (0, 1]")
    return cc_from_samples(domain.values, moving_samples(domain, moving, t, box), min_overlap)


def energy_from_samples(values_int: np.ndarray, samples_int: np.ndarray,
                        values_grad: Optional[np.ndarray], samples_grad: Optional[np.ndarray],
                        min_overlap: float = DEFAULT_MIN_OVERLAP,
                        total: Optional[int] = None) -> Optional[float]:
    """(1 - CC_int) * (1 - CC_grad), or 1 - CC_int without gradient inputs."""
    cc_i = cc_from_samples(values_int, samples_int, min_overlap, total)
    if cc_i is None:
        return None
    if values_grad is None:
        return 1.0 - cc_i
    cc_g = cc_from_samples(values_grad, samples_grad, min_overlap, total)
    if cc_g is None:
        return None
    return (1.0 - cc_i) * (1.0 - cc_g)


def attribute_energy(domain_int: EvaluationDomain, domain_grad: EvaluationDomain,
                     moving: Volume, moving_grad: Volume, t: RigidTransform,
                     min_overlap: float = DEFAULT_MIN_OVERLAP, box: Optional[Box] = None,
                     ) -> Optional[float]:
    """Intensity/gradient-magnitude attribute-vector energy, in [0, 4].

    ``moving_grad`` must be ``gradient_magnitude(moving)`` and ``domain_grad``
    the gradient magnitude of the fixed image at the same level.
    """
    return energy_from_samples(
        domain_int.values, moving_samples(domain_int, moving, t, box),
        domain_grad.values, moving_samples(domain_grad, moving_grad, t, box),
        min_overlap)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _bin(v: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.intp)
    return np.minimum(((v - lo) / (hi - lo) * bins).astype(np.intp), bins - 1)


def nmi_from_samples(values: np.ndarray, samples: np.ndarray, bins: int = 64,
                     min_overlap: float = DEFAULT_MIN_OVERLAP) -> Optional[float]:
    ok = ~np.isnan(samples)
    if ok.sum() == 0 or ok.sum() / len(values) < min_overlap:
        return None
    a = _bin(values[ok], bins)
    b = _bin(samples[ok].astype(np.float64), bins)
    joint = np.bincount(a * bins + b, minlength=bins * bins).astype(np.float64)
    joint /= joint.sum()
    h_ab = _entropy(joint)
    if h_ab <= 0:
        return None
    joint = joint.reshape(bins, bins)
    return (_entropy(joint.sum(axis=1)) + _entropy(joint.sum(axis=0))) / h_ab


def nmi(domain: EvaluationDomain, moving: Volume, t: RigidTransform, bins: int = 64,
        min_overlap: float = DEFAULT_MIN_OVERLAP, box: Optional[Box] = None) -> Optional[float]:
    """(H(A) + H(B)) / H(A, B) with each image binned linearly over its overlap range."""
    if bins < 8:
        raise ValueError("nmi needs at least 8 bins")
    return nmi_from_samples(domain.values, moving_samples(domain, moving, t, box), bins,
                            min_overlap)


def ssd(domain: EvaluationDomain, moving: Volume, t: RigidTransform,
        min_overlap: float = DEFAULT_MIN_OVERLAP, box: Optional[Box] = None) -> Optional[float]:
    """Mean squared intensity difference over valid pairs."""
    s = moving_samples(domain, moving, t, box)
    ok = ~np.isnan(s)
    if ok.sum() == 0 or ok.sum() / len(domain) < min_overlap:
        return None
    d = domain.values[ok] - s[ok].astype(np.float64)
    return float(d @ d) / int(ok.sum())
