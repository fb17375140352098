"""Camera model, rigid poses, point-set registration and depth calibration.

All geometry lives in the camera frame: x right, y down (image rows),
z along the optical axis.  The shipped scenes use a top-down camera, so
larger z means *lower* (closer to the table).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

ORTHO_TOL = 1e-9
DEPTH_VALID_MAX = 10.0


class GeometryError(ValueError):
    pass


class InvalidPoseError(GeometryError):
    pass


class InvalidDepthError(GeometryError):
    pass


class OutOfBoundsError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


class CalibrationError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotvec_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues formula, batched over leading axes."""
    r = np.asarray(rotvec, dtype=float)
    theta2 = np.sum(r * r, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    safe = np.where(small, 1.0, theta)
    # Taylor expansions keep both coefficients accurate near zero.
    a = np.where(small, 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
                 (1.0 - np.cos(safe)) / (safe * safe))
    K = skew(r)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def _canonical_axis(axis: np.ndarray) -> np.ndarray:
    for c in axis:
        if abs(c) > 1e-12:
            return axis if c > 0 else -axis
    return axis


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotvec_to_matrix` with angle in [0, pi].

    At exactly pi the axis is chosen with its first nonzero component
    positive.
    """
    R = np.asarray(R, dtype=float)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = 0.5 * math.sqrt(float(w @ w))
    c = 0.5 * (float(np.trace(R)) - 1.0)
    theta = math.atan2(s, c)
    if theta < 1e-4:
        t2 = theta * theta
        return 0.5 * w * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    if theta < math.pi - 1e-4:
        return 0.5 * w * theta / math.sin(theta)
    # near pi: recover the axis from the symmetric part
    S = 0.5 * (R + R.T) - c * np.eye(3)
    i = int(np.argmax(np.diag(S)))
    axis = S[:, i] / math.sqrt(max(S[i, i], 1e-300))
    axis = axis / np.linalg.norm(axis)
    if s > 1e-12:
        if axis @ w < 0:
            axis = -axis
    else:
        axis = _canonical_axis(axis)
        theta = math.pi
    return axis * theta


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    q = np.array([w, x, y, z])
    return -q if q[0] < 0 else q


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    w, x, y, z = np.asarray(q, dtype=float)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return rotvec_to_matrix(axis / np.linalg.norm(axis) * angle)


def rotation_angle_between(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, accurate near zero."""
    d = np.linalg.norm(np.asarray(Ra) - np.asarray(Rb))
    return 2.0 * math.asin(min(1.0, d / (2.0 * math.sqrt(2.0))))


# ---------------------------------------------------------------------------
# poses


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidPoseError("pose contains non-finite values")
        if np.linalg.norm(R @ R.T - np.eye(3)) > ORTHO_TOL:
            raise InvalidPoseError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvalidPoseError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation) -> "Pose":
        return cls(rotvec_to_matrix(np.asarray(rotvec, dtype=float)), translation)

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quaternion(cls, q_wxyz, translation) -> "Pose":
        return cls(quaternion_to_matrix(q_wxyz), translation)

    @classmethod
    def translation_only(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def rotvec(self) -> np.ndarray:
        return matrix_to_rotvec(self.rotation)

    def quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)

    def as_vector7(self) -> np.ndarray:
        return np.concatenate([self.translation, self.quaternion()])

    def compose(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return invert(self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return apply(self, points)

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return (rotation_angle_between(self.rotation, other.rotation) <= tol
                and float(np.linalg.norm(self.translation - other.translation)) <= tol)

    def __repr__(self) -> str:
        return f"Pose(rotvec={self.rotvec().round(6).tolist()}, translation={self.translation.round(6).tolist()})"


def _renormalize(R: np.ndarray) -> np.ndarray:
    # SVD projection back onto SO(3) removes drift from repeated products.
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def compose(a: Pose, b: Pose) -> Pose:
    """a . b : apply b first, then a."""
    R = a.rotation @ b.rotation
    if np.linalg.norm(R @ R.T - np.eye(3)) > 1e-12:
        R = _renormalize(R)
    return Pose(R, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def apply(a: Pose, points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return p @ a.rotation.T + a.translation


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")

    def in_bounds(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return ((px[..., 0] >= 0) & (px[..., 0] < self.width)
                & (px[..., 1] >= 0) & (px[..., 1] < self.height))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


def project(p, intr: Intrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p[..., 2] <= 0):
        raise InvalidDepthError("point at or behind the camera plane")
    return np.stack([intr.fx * p[..., 0] / p[..., 2] + intr.cx,
                     intr.fy * p[..., 1] / p[..., 2] + intr.cy], axis=-1)


def back_project(px, depth, intr: Intrinsics, check_bounds: bool = True) -> np.ndarray:
    """Pixel plus metric depth to a camera-frame point; batched over leading axes."""
    px = np.asarray(px, dtype=float)
    d = np.asarray(depth, dtype=float)
    if np.any(~(d > 0)):
        raise InvalidDepthError("depth must be positive")
    if check_bounds and not np.all(intr.in_bounds(px)):
        raise OutOfBoundsError("pixel outside the image")
    return np.stack([(px[..., 0] - intr.cx) * d / intr.fx,
                     (px[..., 1] - intr.cy) * d / intr.fy,
                     d * np.ones_like(px[..., 0])], axis=-1)


# ---------------------------------------------------------------------------
# registration


def fit_rigid(src, dst, weights=None) -> Tuple[Pose, float]:
    """Weighted least-squares rigid transform (no scale) mapping src onto dst.

    Returns the pose and the weighted RMS residual in the input units.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise GeometryError(f"expected matching Kx3 arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {src.shape[0]}")
    if weights is None:
        w = np.full(src.shape[0], 1.0 / src.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (src.shape[0],) or np.any(w < 0) or w.sum() <= 0:
            raise GeometryError("weights must be non-negative with positive sum")
        w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    A = src - mu_s
    B = dst - mu_d
    sv = np.linalg.svd(A * np.sqrt(w)[:, None], compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfigurationError("source points are coincident or collinear")
    H = (A * w[:, None]).T @ B
    U, _, Vt = np.linalg.svd(H)
    d = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mu_d - R @ mu_s
    pose = Pose(R, t)
    r = src @ R.T + t - dst
    residual = math.sqrt(float(w @ np.sum(r * r, axis=1)))
    return pose, residual


# ---------------------------------------------------------------------------
# depth calibration


@dataclass(frozen=True)
class DepthCalibration:
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise CalibrationError("depth scale must be positive")

    def apply(self, estimated):
        return self.alpha * np.asarray(estimated, dtype=float) + self.beta


def default_valid_mask(reference) -> np.ndarray:
    ref = np.asarray(reference, dtype=float)
    return np.isfinite(ref) & (ref > 0) & (ref <= DEPTH_VALID_MAX)


def calibrate_depth(estimated, reference, valid_mask=None) -> DepthCalibration:
    """Least-squares scale and shift with alpha * estimated + beta ~ reference."""
    est = np.asarray(estimated, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if est.shape != ref.shape:
        raise CalibrationError(f"shape mismatch {est.shape} vs {ref.shape}")
    mask = default_valid_mask(ref) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    mask = mask & np.isfinite(est)
    if not mask.any():
        raise CalibrationError("no valid pixels")
    x = est[mask]
    y = ref[mask]
    if x.size < 2:
        raise CalibrationError("need at least two valid pixels")
    mx = x.mean()
    my = y.mean()
    dx = x - mx
    sxx = float(dx @ dx)
    if sxx <= 1e-24 * max(1.0, mx * mx) * x.size:
        raise CalibrationError("estimated depth is constant over valid pixels")
    alpha = float(dx @ (y - my)) / sxx
    if not alpha > 0:
        raise CalibrationError(f"least-squares scale is non-positive ({alpha:.6g})")
    return DepthCalibration(alpha, float(my - alpha * mx))


# ---------------------------------------------------------------------------
# mask keypoints


def mask_extrema(mask) -> np.ndarray:
    """min-x, max-x, min-y, max-y pixels as (x, y); ties go to the lower other coordinate."""
    m = np.asarray(mask).astype(bool)
    ys, xs = np.nonzero(m)
    if xs.size == 0:
        raise GeometryError("mask is empty")

    def pick(primary, secondary, take_max):
        target = primary.max() if take_max else primary.min()
        sel = primary == target
        return target, secondary[sel].min()

    x0, y0 = pick(xs, ys, False)
    x1, y1 = pick(xs, ys, True)
    y2, x2 = pick(ys, xs, False)
    y3, x3 = pick(ys, xs, True)
    return np.array([[x0, y0], [x1, y1], [x2, y2], [x3, y3]], dtype=float)


def interior_pixels(mask) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    inner = (m & padded[:-2, 1:-1] & padded[2:, 1:-1]
             & padded[1:-1, :-2] & padded[1:-1, 2:])
    ys, xs = np.nonzero(inner)
    return np.stack([xs, ys], axis=1).astype(float)


def sample_keypoints(mask, n_interior: int, seed: Optional[int] = 0) -> np.ndarray:
    """Four axis extrema followed by ``n_interior`` seeded interior samples, as (x, y) rows."""
    extrema = mask_extrema(mask)
    if n_interior <= 0:
        return extrema
    interior = interior_pixels(mask)
    if interior.shape[0] == 0:
        raise GeometryError("mask has no interior pixels")
    rng = np.random.default_rng(seed)
    replace = n_interior > interior.shape[0]
    idx = rng.choice(interior.shape[0], size=n_interior, replace=replace)
    return np.concatenate([extrema, interior[idx]], axis=0)
