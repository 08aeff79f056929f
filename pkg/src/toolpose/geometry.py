"""Pinhole camera model and rigid transforms.

Conventions: millimetres everywhere; image u grows rightward, v downward,
and integer (u, v) is the centre of pixel (column u, row v).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
BEHIND_CAMERA_Z = 1e-6


class BehindCameraError(ValueError):
    """A point at or behind the camera plane was projected."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        """Raster shape as (rows, cols)."""
        return (self.height, self.width)

    @classmethod
    def from_K(cls, K, width: int, height: int) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=np.float64).reshape(3, 3)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]), int(width), int(height))


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair sharing one set of intrinsics."""

    intrinsics: CameraIntrinsics
    baseline: float

    def __post_init__(self):
        if not self.baseline > 0:
            raise ValueError(f"baseline must be positive, got {self.baseline}")


def orthonormality_error(R: np.ndarray) -> tuple[float, float]:
    """Max entry deviation of R^T R from I, and |det R - 1|."""
    R = np.asarray(R, dtype=np.float64)
    return float(np.abs(R.T @ R - np.eye(3)).max()), abs(float(np.linalg.det(R)) - 1.0)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation mapping model-frame points into the camera frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"expected 3x3 rotation and 3-vector, got {R.shape} and {t.shape}")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("non-finite pose entries")
        ortho, det = orthonormality_error(R)
        if ortho > ORTHO_TOL or det > ORTHO_TOL:
            raise ValueError(
                f"rotation is not orthonormal (|R^T R - I| = {ortho:.3g}, |det - 1| = {det:.3g})"
            )
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_approx(cls, rotation, translation, tol: float = 1e-5) -> "RigidTransform":
        """Build from a rotation that is orthonormal only up to `tol` (e.g. parsed from text)."""
        R = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        ortho, det = orthonormality_error(R)
        if ortho > tol or det > tol:
            raise ValueError(
                f"rotation is not orthonormal (|R^T R - I| = {ortho:.3g}, |det - 1| = {det:.3g})"
            )
        if ortho > ORTHO_TOL or det > ORTHO_TOL:
            R = orthonormalize(R)
        return cls(R, translation)

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying `b` first, then `a`."""
    R = a.rotation @ b.rotation
    ortho, det = orthonormality_error(R)
    if ortho > ORTHO_TOL or det > ORTHO_TOL:
        R = orthonormalize(R)
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(np.asarray(R)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def geodesic_distance(R1, R2) -> float:
    return rotation_angle(np.asarray(R1) @ np.asarray(R2).T)


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rotation matrix about `axis` by `angle` radians (Rodrigues)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    Kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * Kx + (1.0 - math.cos(angle)) * (Kx @ Kx)


def rot_z(degrees: float) -> np.ndarray:
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    # exact quarter turns keep identity laws testable bit-for-bit
    return np.round(R, 15) + 0.0


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    frame: str = "camera"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def transform_points(pose: RigidTransform, pts: PointCloud, frame: str | None = None) -> PointCloud:
    return PointCloud(pose.apply(pts.points), frame or pts.frame)


def project(intr: CameraIntrinsics, p_cam) -> tuple[float, float]:
    """Pinhole projection of one camera-frame point to (u, v).

    Raises BehindCameraError for z <= 1e-6 mm. The result may lie outside
    the image; bounds are the caller's business.
    """
    x, y, z = (float(c) for c in p_cam)
    if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
        raise ValueError(f"non-finite point {p_cam}")
    if z <= BEHIND_CAMERA_Z:
        raise BehindCameraError(f"point {tuple(p_cam)} is behind the camera (z={z})")
    return intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy


def project_points(intr: CameraIntrinsics, pts) -> np.ndarray:
    """Vectorised projection; (N, 3) -> (N, 2). Raises if any z <= 1e-6."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    if (z <= BEHIND_CAMERA_Z).any():
        bad = int(np.argmax(z <= BEHIND_CAMERA_Z))
        raise BehindCameraError(f"point {pts[bad].tolist()} is behind the camera")
    return np.stack(
        [intr.fx * pts[:, 0] / z + intr.cx, intr.fy * pts[:, 1] / z + intr.cy], axis=1
    )


def back_project(intr: CameraIntrinsics, u, v, z):
    """Lift pixel (u, v) at depth z to a camera-frame point.

    Accepts scalars (returns a 3-vector) or equal-shape arrays (returns (N, 3)).
    """
    z_arr = np.asarray(z, dtype=np.float64)
    if not (z_arr > 0).all():
        raise ValueError("back-projection needs positive depth")
    u_arr = np.asarray(u, dtype=np.float64)
    v_arr = np.asarray(v, dtype=np.float64)
    out = np.stack(
        np.broadcast_arrays((u_arr - intr.cx) * z_arr / intr.fx, (v_arr - intr.cy) * z_arr / intr.fy, z_arr),
        axis=-1,
    )
    return out
