"""SE(3) pose algebra and the geometric solvers used across the pipeline.

Poses are 7-vectors (unit quaternion w,x,y,z + translation), camera-to-world:
``apply_pose(pose, p_local) = R @ p_local + t`` maps camera-frame points into
the frame the pose lives in.  Quaternions are kept canonical (|q| = 1, w >= 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUAT_NORM_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric input."""


class DegenerateGeometryError(GeometryError):
    """The input does not constrain the requested quantity (rank-deficient)."""


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise GeometryError("quaternion has zero or non-finite norm")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True)
class Pose7:
    """Rigid pose: unit quaternion (w,x,y,z) plus translation in meters."""

    q: tuple[float, float, float, float]
    t: tuple[float, float, float]

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
            raise GeometryError(f"quaternion not unit within {QUAT_NORM_TOL}: {self.q}")
        if q[0] < 0:
            raise GeometryError("quaternion sign not canonical (w must be >= 0)")

    @staticmethod
    def create(q, t) -> "Pose7":
        """Normalize and canonicalize, then construct."""
        q = _canonical_quat(q)
        t = np.asarray(t, dtype=np.float64)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise GeometryError(f"translation must be a finite 3-vector, got {t}")
        return Pose7(q=tuple(q.tolist()), t=tuple(t.tolist()))

    @staticmethod
    def identity() -> "Pose7":
        return Pose7(q=(1.0, 0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0))

    @staticmethod
    def from_matrix(rot: np.ndarray, t) -> "Pose7":
        return Pose7.create(quat_from_matrix(rot), t)

    @property
    def rotation(self) -> np.ndarray:
        return matrix_from_quat(np.asarray(self.q))

    @property
    def translation(self) -> np.ndarray:
        return np.asarray(self.t, dtype=np.float64)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.t]).astype(np.float64)

    def rotation_angle(self) -> float:
        """Magnitude of the rotation in radians."""
        w = min(1.0, abs(self.q[0]))
        return 2.0 * float(np.arccos(w))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive: {self}")

    def validate_for(self, h: int, w: int) -> None:
        if not (0 < self.cx < w and 0 < self.cy < h):
            raise GeometryError(f"principal point {self.cx, self.cy} outside {w}x{h}")

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (w,x,y,z), not yet canonicalized."""
    m = np.asarray(rot, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        return np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    i = int(np.argmax([m[0, 0], m[1, 1], m[2, 2]]))
    if i == 0:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        return np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    if i == 1:
        s = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2
        return np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    s = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2
    return np.array(
        [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    )


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def apply_pose(pose: Pose7, points: np.ndarray) -> np.ndarray:
    """R @ p + t for each point; accepts (..., 3) arrays."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise GeometryError(f"points must have a trailing dim of 3, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("non-finite input coordinates")
    return pts @ pose.rotation.T + pose.translation


def compose(a: Pose7, b: Pose7) -> Pose7:
    """Pose such that apply_pose(compose(a, b), p) == apply_pose(a, apply_pose(b, p))."""
    q = quat_mul(np.asarray(a.q), np.asarray(b.q))
    t = a.rotation @ b.translation + a.translation
    return Pose7.create(q, t)


def inverse(pose: Pose7) -> Pose7:
    q = np.asarray(pose.q) * np.array([1.0, -1.0, -1.0, -1.0])
    rot_inv = pose.rotation.T
    return Pose7.create(q, -rot_inv @ pose.translation)


def rotate_about_axis(v: np.ndarray, axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation of vector(s) v about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return v * c + np.cross(axis, v) * s + axis * np.dot(axis, v) * (1 - c)


def register_pointmaps(
    local: np.ndarray,
    global_: np.ndarray,
    conf: np.ndarray,
    valid: np.ndarray | None = None,
) -> Pose7:
    """Recover the rigid pose mapping a local pointmap onto a global one.

    Solves argmin over (R, t) of sum(conf * ||R p_local + t - p_global||^2)
    by confidence-weighted centroiding, a 3x3 weighted cross-covariance, and
    an SVD with the det(U V^T) reflection guard.  No scale: pointmaps are
    metric.

    Raises DegenerateGeometryError when fewer than 3 valid pixels remain or
    the cross-covariance has rank < 2 (collinear or coincident points).
    """
    local = np.asarray(local, dtype=np.float64).reshape(-1, 3)
    glob = np.asarray(global_, dtype=np.float64).reshape(-1, 3)
    conf = np.asarray(conf, dtype=np.float64).reshape(-1)
    if valid is None:
        mask = np.ones(len(local), dtype=bool)
    else:
        mask = np.asarray(valid, dtype=bool).reshape(-1)
    if local.shape != glob.shape or len(conf) != len(local) or len(mask) != len(local):
        raise GeometryError("local/global/conf/valid shapes disagree")
    mask = mask & np.isfinite(local).all(axis=1) & np.isfinite(glob).all(axis=1)
    if mask.sum() < 3:
        raise DegenerateGeometryError(f"only {int(mask.sum())} valid pixels, need >= 3")
    p = local[mask]
    g = glob[mask]
    w = conf[mask]
    if np.any(w <= 0):
        raise GeometryError("confidence must be positive on valid pixels")

    wsum = w.sum()
    mu_l = (w[:, None] * p).sum(axis=0) / wsum
    mu_g = (w[:, None] * g).sum(axis=0) / wsum
    pc = p - mu_l
    gc = g - mu_g
    # weighted cross-covariance, target (global) first
    cov = (w[:, None] * gc).T @ pc
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= max(s[0], 1.0) * 1e-12:
        raise DegenerateGeometryError(
            f"cross-covariance rank < 2 (singular values {s}); pose unrecoverable"
        )
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    t = mu_g - rot @ mu_l
    return Pose7.from_matrix(rot, t)


def estimate_focal(
    local: np.ndarray,
    principal: tuple[float, float],
    valid: np.ndarray | None = None,
    min_pixels: int = 16,
) -> float:
    """Estimate a shared focal length (fx = fy) from a camera-frame pointmap.

    Per valid pixel with z > 0 and radial pixel offset > 1 from the principal
    point, the pinhole model gives f = r_pix * z / r_cam with
    r_pix = sqrt((u-cx)^2 + (v-cy)^2) and r_cam = sqrt(x^2 + y^2); the
    estimate is the median over those pixels (exact on noise-free data).
    """
    pm = np.asarray(local, dtype=np.float64)
    if pm.ndim != 3 or pm.shape[2] != 3:
        raise GeometryError(f"pointmap must be HxWx3, got {pm.shape}")
    h, w = pm.shape[:2]
    cx, cy = principal
    if valid is None:
        mask = np.ones((h, w), dtype=bool)
    else:
        mask = np.asarray(valid, dtype=bool)
    mask = mask & np.isfinite(pm).all(axis=2)

    z = pm[:, :, 2]
    if not np.any(mask & (z > 0)):
        raise DegenerateGeometryError("no valid pixels with z > 0 (all behind camera)")

    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    r_pix = np.hypot(uu - cx, vv - cy)
    r_cam = np.hypot(pm[:, :, 0], pm[:, :, 1])
    ok = mask & (z > 0) & (r_pix > 1.0) & (r_cam > 1e-12)
    n_ok = int(ok.sum())
    if n_ok < min_pixels:
        raise DegenerateGeometryError(
            f"only {n_ok} valid off-axis pixels, need >= {min_pixels}"
        )
    return float(np.median(r_pix[ok] * z[ok] / r_cam[ok]))


def fit_trajectory_line(poses: list[Pose7]) -> tuple[np.ndarray, np.ndarray]:
    """Fit the straight path used for novel-view sampling.

    Returns (origin, direction): a total-least-squares line through the pose
    translations (principal axis of the centered covariance), with direction
    oriented so that (t_last - t_first) . direction >= 0 and origin at the
    last pose.  A single pose, or coincident translations, fall back to the
    last pose's camera-forward axis (+z of its rotation).
    """
    if not poses:
        raise GeometryError("empty pose list")
    ts = np.stack([p.translation for p in poses])
    origin = ts[-1].copy()
    centered = ts - ts.mean(axis=0)
    if len(poses) == 1 or np.linalg.norm(centered) < 1e-12:
        direction = poses[-1].rotation @ np.array([0.0, 0.0, 1.0])
        return origin, direction / np.linalg.norm(direction)
    cov = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(cov)
    direction = eigvecs[:, np.argmax(eigvals)]
    span = ts[-1] - ts[0]
    if span @ direction < 0:
        direction = -direction
    return origin, direction / np.linalg.norm(direction)
