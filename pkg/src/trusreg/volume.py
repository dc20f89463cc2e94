"""Physical-space scalar volumes: sampling, reslicing, gradients, pyramids.

Voxel index ``(i, j, k)`` sits at world position
``origin + axes @ (spacing * (i, j, k))``.  Arrays are stored with shape
``(nx, ny, nz)`` so ``data[i, j, k]`` addresses voxel ``(i, j, k)``; the
on-disk order (x fastest) is handled by :mod:`trusreg.vvf`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .transform import RigidTransform

BINOMIAL_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0

# slack on the grid bounding box, in index units
_INDEX_TOL = 1e-6


class TooCoarse(ValueError):
    pass


class OutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Lattice geometry without data."""

    dims: tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        axes = np.asarray(self.axes, dtype=np.float64).reshape(3, 3)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {dims}")
        if np.any(spacing <= 0) or np.any(spacing > 10):
            raise ValueError(f"spacing must lie in (0, 10] mm, got {spacing}")
        gram = axes.T @ axes
        if np.max(np.abs(gram - np.eye(3))) > 1e-6:
            raise ValueError("axes must be orthonormal")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "axes", axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return (idx * self.spacing) @ self.axes.T + self.origin

    def world_to_index(self, pts: np.ndarray) -> np.ndarray:
        rel = np.asarray(pts, dtype=np.float64) - self.origin
        a = self.axes
        if rel.ndim == 1:
            return (rel @ a) / self.spacing
        # elementwise so a point's index never depends on its batch
        return (rel[:, 0:1] * a[0] + rel[:, 1:2] * a[1] + rel[:, 2:3] * a[2]) / self.spacing

    def lattice_points(self) -> np.ndarray:
        """World coordinates of every voxel center, C order over (i, j, k)."""
        ii, jj, kk = np.meshgrid(*(np.arange(n) for n in self.dims), indexing="ij")
        idx = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
        return self.index_to_world(idx)

    def center(self) -> np.ndarray:
        return self.index_to_world((np.array(self.dims) - 1) / 2.0)

    def corners(self) -> np.ndarray:
        hi = np.array(self.dims) - 1
        idx = np.array([[a, b, c] for a in (0, hi[0]) for b in (0, hi[1]) for c in (0, hi[2])],
                       dtype=np.float64)
        return self.index_to_world(idx)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": self.spacing.tolist(),
            "origin_mm": self.origin.tolist(),
            "axes": self.axes.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(tuple(d["dims"]), d["spacing_mm"], d.get("origin_mm", [0, 0, 0]),
                   np.reshape(d.get("axes", np.eye(3).ravel().tolist()), (3, 3)))


@dataclass(frozen=True, eq=False)
class Volume:
    """3D scalar image with world geometry and an optional validity mask.

    Treated as immutable: operations return new volumes.
    """

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axes: np.ndarray = field(default_factory=lambda: np.eye(3))
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        grid = Grid(data.shape, self.spacing, self.origin, self.axes)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", grid.spacing)
        object.__setattr__(self, "origin", grid.origin)
        object.__setattr__(self, "axes", grid.axes)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != data.shape:
                raise ValueError(f"mask shape {mask.shape} != data shape {data.shape}")
            object.__setattr__(self, "mask", mask)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @cached_property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing, self.origin, self.axes)

    @cached_property
    def valid_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.dims, dtype=bool)
        return self.mask

    @cached_property
    def _cell_valid(self) -> Optional[np.ndarray]:
        # cell (i,j,k) is usable when all voxels of its corner block are valid
        if self.mask is None:
            return None
        cv = self.mask
        for ax in range(3):
            if cv.shape[ax] > 1:
                lo = [slice(None)] * 3
                hi = [slice(None)] * 3
                lo[ax] = slice(0, -1)
                hi[ax] = slice(1, None)
                cv = cv[tuple(lo)] & cv[tuple(hi)]
        return cv

    def with_data(self, data: np.ndarray, mask: Optional[np.ndarray] = None) -> "Volume":
        return Volume(data, self.spacing, self.origin, self.axes, mask)


def sample_points(volume: Volume, pts: np.ndarray) -> np.ndarray:
    """Trilinear samples at world points, NaN where out of support.

    Out of support means outside the voxel grid, or any of the eight
    interpolation neighbors being mask-false.  Returns float64; no rounding
    back to the float32 storage precision.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(pts), np.nan)
    if len(pts) == 0:
        return out
    u = volume.grid.world_to_index(pts)
    n = np.array(volume.dims, dtype=np.float64)
    inside = np.all((u >= -_INDEX_TOL) & (u <= n - 1 + _INDEX_TOL), axis=1)
    if not inside.any():
        return out
    u = np.clip(u[inside], 0.0, n - 1)
    cells = volume._cell_valid
    if cells is not None:
        lower = np.floor(u).astype(np.intp)
        lower = np.minimum(lower, np.maximum(np.array(volume.dims) - 2, 0))
        ok = cells[lower[:, 0], lower[:, 1], lower[:, 2]]
        sel = np.flatnonzero(inside)
        inside[sel[~ok]] = False
        u = u[ok]
    if len(u):
        vals = ndimage.map_coordinates(volume.data, u.T, order=1, mode="nearest",
                                       prefilter=False, output=np.float64)
        out[inside] = vals
    return out


def sample_trilinear(volume: Volume, point: Sequence[float]) -> Optional[float]:
    """Trilinear value at one world point, or None outside support."""
    v = sample_points(volume, np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    return None if np.isnan(v) else float(v)


def reslice(source: Volume, transform: RigidTransform, target: Grid,
            chunk: int = 1 << 20) -> Volume:
    """Resample ``source`` onto ``target``: output(p) = source(transform(p))."""
    out = np.empty(target.size)
    # the lattice is walked in C order of (i, j, k), matching out.reshape(dims)
    ii, jj, kk = np.unravel_index(np.arange(target.size), target.dims)
    for start in range(0, target.size, chunk):
        stop = min(start + chunk, target.size)
        idx = np.stack([ii[start:stop], jj[start:stop], kk[start:stop]], axis=1)
        pts = transform.apply(target.index_to_world(idx))
        out[start:stop] = sample_points(source, pts)
    out = out.reshape(target.dims)
    mask = ~np.isnan(out)
    out[~mask] = 0.0
    return Volume(out, target.spacing, target.origin, target.axes, mask)


def gradient_magnitude(volume: Volume) -> Volume:
    """Per-mm gradient norm by central differences (one-sided at borders).

    Axes of length 1 contribute no derivative, so single-slice volumes get
    their in-plane gradient.  Voxels next to mask-false voxels are
    mask-false in the result.
    """
    data = volume.data.astype(np.float64)
    sq = np.zeros_like(data)
    for ax in range(3):
        if volume.dims[ax] >= 2:
            g = np.gradient(data, volume.spacing[ax], axis=ax)
            sq += g * g
    mag = np.sqrt(sq).astype(np.float32)
    mask = None
    if volume.mask is not None:
        struct = ndimage.generate_binary_structure(3, 1)
        for ax in range(3):
            if volume.dims[ax] < 2:
                for off in (0, 2):
                    s = [1, 1, 1]
                    s[ax] = off
                    struct[tuple(s)] = False
        mask = ndimage.binary_erosion(volume.mask, structure=struct, border_value=1)
        mag[~mask] = 0.0
    return volume.with_data(mag, mask)


def _smooth(arr: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    for ax in range(3):
        if dims[ax] >= 2:
            arr = ndimage.correlate1d(arr, BINOMIAL_KERNEL, axis=ax, mode="constant", cval=0.0)
    return arr


def downsample(volume: Volume) -> Volume:
    """One pyramid step: masked binomial smoothing then 2x decimation."""
    dims = volume.dims
    w = volume.valid_mask.astype(np.float64)
    num = _smooth(volume.data.astype(np.float64) * w, dims)
    den = _smooth(w, dims)
    with np.errstate(invalid="ignore", divide="ignore"):
        sm = np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), 0.0)
    new_dims = [n // 2 if n >= 2 else 1 for n in dims]
    sl = tuple(slice(0, 2 * m, 2) if n >= 2 else slice(None) for n, m in zip(dims, new_dims))
    data = sm[sl]
    step = np.array([2.0 if n >= 2 else 1.0 for n in dims])
    mask = None
    if volume.mask is not None:
        m = volume.mask
        count = np.zeros(new_dims, dtype=np.int32)
        offsets = [(0, 1) if n >= 2 else (0,) for n in dims]
        nchild = int(np.prod([len(o) for o in offsets]))
        for a in offsets[0]:
            for b in offsets[1]:
                for c in offsets[2]:
                    sub = m[tuple(slice(o, o + 2 * k, 2) if n >= 2 else slice(None)
                                  for o, k, n in zip((a, b, c), new_dims, dims))]
                    count += sub
        mask = 2 * count >= nchild
        data = np.where(mask, data, 0.0)
    return Volume(data.astype(np.float32), volume.spacing * step, volume.origin, volume.axes, mask)


def pyramid_grids(grid: Grid, levels: int) -> list[Grid]:
    """Geometry of each level of a pyramid built by :func:`build_pyramid`."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = [grid]
    for _ in range(levels - 1):
        g = out[-1]
        dims = tuple(n // 2 if n >= 2 else 1 for n in g.dims)
        if any(m < 4 for n, m in zip(g.dims, dims) if n >= 2):
            raise TooCoarse(f"pyramid of {levels} levels shrinks {grid.dims} below 4 voxels")
        step = np.array([2.0 if n >= 2 else 1.0 for n in g.dims])
        out.append(Grid(dims, g.spacing * step, g.origin, g.axes))
    return out


def build_pyramid(volume: Volume, levels: int) -> list[Volume]:
    """Level 0 is the input; each further level halves every non-singleton axis."""
    pyramid_grids(volume.grid, levels)  # validates level count
    out = [volume]
    for _ in range(levels - 1):
        out.append(downsample(out[-1]))
    return out


@dataclass(frozen=True)
class OrthoSlices:
    planes: tuple[Volume, ...]
    shared_origin: np.ndarray

    def __post_init__(self):
        if len(self.planes) not in (2, 3):
            raise ValueError("OrthoSlices holds two or three planes")
        normals = [p.axes[:, 2] for p in self.planes]
        for a in range(len(normals)):
            if self.planes[a].dims[2] != 1:
                raise ValueError("ortho planes must be single-slice volumes")
            for b in range(a + 1, len(normals)):
                if abs(normals[a] @ normals[b]) > 1e-6:
                    raise ValueError("plane normals must be orthogonal")
        object.__setattr__(self, "shared_origin", np.asarray(self.shared_origin, dtype=np.float64))


def _plane_grid(volume: Volume, origin: np.ndarray, u: np.ndarray, v: np.ndarray,
                normal: np.ndarray) -> Grid:
    grid = volume.grid

    def axis_spacing(d):
        return float(np.abs(grid.axes.T @ d) @ grid.spacing)

    su, sv, sn = axis_spacing(u), axis_spacing(v), axis_spacing(normal)
    rel = grid.corners() - origin
    pu, pv = rel @ u, rel @ v
    lo_u = int(np.floor(-pu.min() / su + 1e-9))
    hi_u = int(np.floor(pu.max() / su + 1e-9))
    lo_v = int(np.floor(-pv.min() / sv + 1e-9))
    hi_v = int(np.floor(pv.max() / sv + 1e-9))
    plane_origin = origin - lo_u * su * u - lo_v * sv * v
    return Grid((lo_u + hi_u + 1, lo_v + hi_v + 1, 1), [su, sv, sn], plane_origin,
                np.column_stack([u, v, normal]))


def extract_ortho_slices(volume: Volume, frame_axes: np.ndarray, frame_origin) -> OrthoSlices:
    """Three single-slice volumes through ``frame_origin``, normal to each frame axis.

    Plane ``k`` is normal to frame axis ``k``; its in-plane axes are the
    other two frame axes in increasing order, so for an axis-aligned frame
    the plane data are plain index slices of the input.
    """
    frame_axes = np.asarray(frame_axes, dtype=np.float64).reshape(3, 3)
    frame_origin = np.asarray(frame_origin, dtype=np.float64).reshape(3)
    u = volume.grid.world_to_index(frame_origin)
    if np.any(u < -_INDEX_TOL) or np.any(u > np.array(volume.dims) - 1 + _INDEX_TOL):
        raise OutOfBounds(f"frame origin {frame_origin} lies outside the volume")
    planes = []
    for k in range(3):
        a, b = (frame_axes[:, j] for j in range(3) if j != k)
        g = _plane_grid(volume, frame_origin, a, b, frame_axes[:, k])
        planes.append(reslice(volume, RigidTransform.identity(), g))
    return OrthoSlices(tuple(planes), frame_origin)
