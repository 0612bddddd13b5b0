"""Camera poses, positional encoding, and reference-feature warping.

Pose convention used throughout the package: a ``Pose`` is world-from-camera,
i.e. it maps points expressed in the camera frame into the world frame via
``x_world = R @ x_cam + t``. The camera center in world coordinates is ``t``.

``relative_pose(reference, candidate)`` therefore returns
``inverse(candidate) ∘ reference``: the transform taking points in the
reference camera frame into the candidate camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-6


class GeometryError(ValueError):
    """Invalid geometric input (non-orthonormal rotation, bad shapes...)."""


def _check_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got shape {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > ORTHONORMAL_TOL:
        raise GeometryError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > ORTHONORMAL_TOL:
        raise GeometryError(f"rotation determinant is {det:.6f}, expected +1")
    return R


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"pose matrix must be 4x4, got {m.shape}")
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Return the pose applying ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def distance_to(self, other: "Pose") -> float:
        """Euclidean distance between camera centers."""
        return float(np.linalg.norm(self.translation - other.translation))


def relative_pose(reference: Pose, candidate: Pose) -> Pose:
    """Transform taking reference-camera-frame points into the candidate frame."""
    return candidate.inverse().compose(reference)


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return np.eye(3)
    k = axis / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose with +z looking from ``eye`` toward ``target``.

    Camera axes: +x right, +y down, +z forward (OpenCV convention).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise GeometryError("look_at: eye and target coincide")
    forward = forward / fn
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # forward parallel to up; pick another up vector
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=1)
    return Pose(R, eye)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics on a pixel grid."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def scaled(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics for the same camera resampled to a new grid size."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                          width, height)

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Perspective-project camera-frame points (..., 3) to pixels (..., 2)."""
        pts = np.asarray(points_cam, dtype=np.float64)
        z = pts[..., 2]
        u = self.fx * pts[..., 0] / z + self.cx
        v = self.fy * pts[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_dict(d: dict) -> "Intrinsics":
        return Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]),
                          float(d["cy"]), int(d["width"]), int(d["height"]))


def encode_position(p: np.ndarray, bands: int) -> np.ndarray:
    """Sinusoidal multi-band encoding of a 3-vector.

    Layout: per axis, per band b in [0, bands): sin(2^b * pi * p), cos(2^b * pi * p).
    Output length is 6 * bands.
    """
    if bands < 1:
        raise GeometryError("bands must be >= 1")
    p = np.asarray(p, dtype=np.float64).reshape(3)
    freqs = (2.0 ** np.arange(bands)) * np.pi
    args = p[:, None] * freqs[None, :]          # (3, bands)
    enc = np.stack([np.sin(args), np.cos(args)], axis=-1)  # (3, bands, 2)
    return enc.reshape(-1)


@dataclass(frozen=True)
class PoseFeature:
    """Encoded relative pose fed to the fusion MLP."""

    encoded_translation: np.ndarray
    rotation_rep: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.encoded_translation, self.rotation_rep])


def _quaternion_from_rotation(R: np.ndarray) -> np.ndarray:
    # w-first unit quaternion, w >= 0
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def pose_feature(rel: Pose, bands: int = 10, rotation_rep: str = "matrix") -> PoseFeature:
    """Build the pose feature of a relative transform.

    ``rotation_rep`` is "matrix" (flattened 3x3, 9 values) or "quaternion"
    (unit, w-first, 4 values).
    """
    enc = encode_position(rel.translation, bands)
    if rotation_rep == "matrix":
        rot = rel.rotation.reshape(-1).copy()
    elif rotation_rep == "quaternion":
        rot = _quaternion_from_rotation(rel.rotation)
    else:
        raise GeometryError(f"unknown rotation representation {rotation_rep!r}")
    return PoseFeature(enc, rot)


def pose_feature_length(bands: int, rotation_rep: str = "matrix") -> int:
    return 6 * bands + (9 if rotation_rep == "matrix" else 4)


def project_feature_grid(T_ic: Pose, intrinsics: Intrinsics, grid_height: int,
                         grid_width: int, plane_depth: float = 1.0):
    """Warp the reference feature-plane lattice into the candidate view.

    Each lattice point (u, v) is lifted to depth ``plane_depth`` in the
    reference camera frame, transformed by ``T_ic`` and perspective-projected
    back with the (grid-resolution) intrinsics. Returns an (H, W, 2) pixel
    coordinate field and an (H, W) bool validity mask; points with
    non-positive projected depth or landing outside [0, W) x [0, H) are
    masked out.
    """
    if plane_depth <= 0:
        raise GeometryError("plane_depth must be positive")
    u, v = np.meshgrid(np.arange(grid_width, dtype=np.float64),
                       np.arange(grid_height, dtype=np.float64))
    x = (u - intrinsics.cx) / intrinsics.fx * plane_depth
    y = (v - intrinsics.cy) / intrinsics.fy * plane_depth
    pts = np.stack([x, y, np.full_like(x, plane_depth)], axis=-1)
    warped = T_ic.apply(pts)
    z = warped[..., 2]
    valid = z > 1e-9
    coords = np.zeros((grid_height, grid_width, 2))
    safe_z = np.where(valid, z, 1.0)
    coords[..., 0] = intrinsics.fx * warped[..., 0] / safe_z + intrinsics.cx
    coords[..., 1] = intrinsics.fy * warped[..., 1] / safe_z + intrinsics.cy
    valid &= ((coords[..., 0] >= 0) & (coords[..., 0] < grid_width)
              & (coords[..., 1] >= 0) & (coords[..., 1] < grid_height))
    return coords, valid


def bilinear_sample(features: np.ndarray, coords: np.ndarray,
                    mask: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) feature grid at pixel coordinates (H', W', 2).

    Masked-out locations yield zero vectors. Valid coordinates must be finite
    and inside [0, W-1] x [0, H-1]; out-of-range valid coordinates are clamped
    to the border.
    """
    features = np.asarray(features, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if features.ndim != 3:
        raise GeometryError(f"features must be (H, W, C), got shape {features.shape}")
    if coords.shape[-1] != 2 or coords.shape[:-1] != mask.shape:
        raise GeometryError("coords must be (..., 2) aligned with mask")
    H, W, C = features.shape
    u = np.clip(np.where(mask, coords[..., 0], 0.0), 0, W - 1)
    v = np.clip(np.where(mask, coords[..., 1], 0.0), 0, H - 1)
    x0 = np.floor(u).astype(int)
    y0 = np.floor(v).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (u - x0)[..., None]
    fy = (v - y0)[..., None]
    out = (features[y0, x0] * (1 - fx) * (1 - fy)
           + features[y0, x1] * fx * (1 - fy)
           + features[y1, x0] * (1 - fx) * fy
           + features[y1, x1] * fx * fy)
    out[~mask] = 0.0
    return out
