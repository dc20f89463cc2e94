"""Rigid transforms, optimizer parameterization, averaging and error metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

# optimizer units: 0.04 rad of rotation ~ 1 mm of motion at 25 mm radius
DEFAULT_SCALE = np.array([0.04, 0.04, 0.04, 1.0, 1.0, 1.0])


class NonCanonical(ValueError):
    pass


class Dispersed(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> rotation @ x + translation, in mm."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0), center=None) -> "RigidTransform":
        """Rotation by ``rotvec`` (about ``center`` if given) followed by translation."""
        r = _exp_so3(np.asarray(rotvec, dtype=np.float64))
        t = np.asarray(translation, dtype=np.float64).copy()
        if center is not None:
            c = np.asarray(center, dtype=np.float64)
            t = t + c - r @ c
        return cls(r, t)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        # explicit per-row arithmetic: the result for a point never depends on
        # the batch it is part of (BLAS kernels may round differently)
        r, t = self.rotation, self.translation
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        return np.stack([x * r[0, 0] + y * r[0, 1] + z * r[0, 2] + t[0],
                         x * r[1, 0] + y * r[1, 1] + z * r[1, 2] + t[1],
                         x * r[2, 0] + y * r[2, 1] + z * r[2, 2] + t[2]], axis=1)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def to_json(self) -> dict:
        return {"rotation": self.rotation.ravel().tolist(),
                "translation_mm": self.translation.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "RigidTransform":
        return cls(np.reshape(d["rotation"], (3, 3)), d["translation_mm"])

    def __repr__(self):
        ang = math.degrees(rotation_angle(self.rotation))
        return f"RigidTransform(angle={ang:.3f}deg, t={np.round(self.translation, 4).tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first."""
    return RigidTransform(_orthonormalize(a.rotation @ b.rotation),
                          a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def apply(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    # long products drift; project back when the error becomes visible
    if np.max(np.abs(r @ r.T - np.eye(3))) < 1e-12:
        return r
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _exp_so3(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    k = _skew(w)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    return (np.eye(3) + math.sin(theta) / theta * k
            + (1.0 - math.cos(theta)) / theta**2 * k @ k)


def rotation_angle(r: np.ndarray) -> float:
    """Angle of rotation matrix ``r`` in radians, in [0, pi]."""
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * math.sqrt((r[2, 1] - r[1, 2]) ** 2 + (r[0, 2] - r[2, 0]) ** 2
                        + (r[1, 0] - r[0, 1]) ** 2)
    return math.atan2(s, c)


def relative_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Angle of ``ra^T rb`` in radians, symmetric in its arguments."""
    c = (float(np.sum(ra * rb)) - 1.0) / 2.0
    rel = ra.T @ rb
    sk = rel - rel.T
    s = 0.5 * math.sqrt(sk[2, 1] ** 2 + sk[0, 2] ** 2 + sk[1, 0] ** 2)
    return math.atan2(s, c)


@dataclass(frozen=True)
class RigidParams:
    """Rotation vector (rad) then translation (mm), with optimizer step scales."""

    values: np.ndarray
    scale: np.ndarray = field(default_factory=lambda: DEFAULT_SCALE.copy())

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(6)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(6))
        if np.linalg.norm(v[:3]) >= math.pi:
            raise NonCanonical("rotation vector norm must be below pi")

    @property
    def rotvec(self) -> np.ndarray:
        return self.values[:3]

    @property
    def translation(self) -> np.ndarray:
        return self.values[3:]

    def scaled(self) -> np.ndarray:
        return self.values / self.scale


def params_to_transform(p: RigidParams | Sequence[float]) -> RigidTransform:
    v = p.values if isinstance(p, RigidParams) else np.asarray(p, dtype=np.float64)
    return RigidTransform(_exp_so3(v[:3]), v[3:6])


def transform_to_params(t: RigidTransform, scale=None) -> RigidParams:
    angle = rotation_angle(t.rotation)
    if abs(angle - math.pi) < 1e-9:
        raise NonCanonical("rotation by pi has no unique axis")
    rv = Rotation.from_matrix(t.rotation).as_rotvec()
    scale = DEFAULT_SCALE if scale is None else scale
    return RigidParams(np.concatenate([rv, t.translation]), scale)


def _quat(r: np.ndarray) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(r).as_quat()
    return np.array([w, x, y, z])


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    # quadratic in q, so q and -q give bit-identical matrices
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def average_transforms(ts: Iterable[RigidTransform]) -> RigidTransform:
    """Mean translation and normalized sign-aligned quaternion sum.

    Sums use exactly rounded accumulation, so the result does not depend
    on the order of ``ts``.
    """
    ts = list(ts)
    if not ts:
        raise ValueError("cannot average an empty set of transforms")
    for i in range(len(ts)):
        for j in range(i + 1, len(ts)):
            if relative_angle(ts[i].rotation, ts[j].rotation) > math.pi / 2 + 1e-12:
                raise Dispersed("rotations differ by more than 90 degrees")
    if all(np.array_equal(t.rotation, ts[0].rotation)
           and np.array_equal(t.translation, ts[0].translation) for t in ts):
        return ts[0]  # the mean of identical transforms is exact
    quats = [_quat(t.rotation) for t in ts]
    ref = quats[0]
    aligned = [q if q @ ref >= 0 else -q for q in quats]
    qsum = np.array([math.fsum(q[k] for q in aligned) for k in range(4)])
    qsum /= math.sqrt(math.fsum(c * c for c in qsum))
    rot = _orthonormalize(_quat_to_matrix(qsum))
    n = len(ts)
    trans = np.array([math.fsum(t.translation[k] for t in ts) / n for k in range(3)])
    return RigidTransform(rot, trans)


def euclidean_error(t_i: RigidTransform, t_bar: RigidTransform, c) -> float:
    c = np.asarray(c, dtype=np.float64)
    return float(np.linalg.norm(t_i.apply(c) - t_bar.apply(c)))


def angular_error(t_i: RigidTransform, t_bar: RigidTransform) -> float:
    """Rotation angle of ``t_i^-1 ∘ t_bar``, in degrees."""
    return math.degrees(relative_angle(t_i.rotation, t_bar.rotation))


def rms(values: Sequence[float]) -> float:
    values = list(values)
    if not values:
        raise ValueError("rms of an empty list")
    return math.sqrt(math.fsum(v * v for v in values) / len(values))
