"""Object motion to end-effector poses under a fixed grasp transform."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .geometry import DegenerateConfigurationError, Pose, apply, compose, fit_rigid, invert
from .selection import KeypointTrajectory
from .tensorio.documents import SceneDoc


class RetargetError(ValueError):
    def __init__(self, message: str, frame: int = None):
        super().__init__(message if frame is None else f"{message} (frame {frame})")
        self.frame = frame


@dataclass(eq=False)
class RetargetResult:
    initial_trajectory: List[Pose]
    residuals: np.ndarray
    object_poses: List[Pose]

    def __post_init__(self):
        self.residuals = np.asarray(self.residuals, dtype=float)
        n = len(self.initial_trajectory)
        if len(self.object_poses) != n or self.residuals.shape != (n,):
            raise RetargetError("trajectory, residuals and object poses differ in length")

    @property
    def T(self) -> int:
        return len(self.initial_trajectory)


def retarget(lifted, scene: SceneDoc) -> RetargetResult:
    """Fit frame-1 -> frame-t rigid motion of the grasped entity and attach the gripper."""
    if not isinstance(lifted, KeypointTrajectory):
        lifted = KeypointTrajectory.fully_visible(lifted)
    sl = scene.grasped_slice
    pts = lifted.points[:, sl]
    vis = lifted.visibility[:, sl]
    if vis[0].sum() < 3:
        raise RetargetError("grasped entity has fewer than 3 visible keypoints", 1)
    obj, res = [Pose.identity()], [0.0]
    for t in range(1, lifted.T):
        joint = vis[0] & vis[t]
        if joint.sum() < 3:
            raise RetargetError(f"only {int(joint.sum())} grasped keypoints visible", t + 1)
        try:
            P, r = fit_rigid(pts[0, joint], pts[t, joint])
        except DegenerateConfigurationError as exc:
            raise RetargetError(str(exc), t + 1) from None
        obj.append(P)
        res.append(r)
    xi = [compose(P, scene.grasp_transform) for P in obj]
    return RetargetResult(xi, np.array(res), obj)


def gripper_keypoints(xi: Pose, scene: SceneDoc) -> np.ndarray:
    """Keypoint configuration induced by an end-effector pose (others held at frame 1)."""
    out = scene.keypoints.copy()
    sl = scene.grasped_slice
    out[sl] = apply(compose(xi, invert(scene.grasp_transform)), out[sl])
    return out


def trajectory_keypoints(traj: Sequence[Pose], scene: SceneDoc) -> np.ndarray:
    return np.stack([gripper_keypoints(xi, scene) for xi in traj])


def trajectory_to_tensor(traj: Sequence[Pose]) -> np.ndarray:
    """T x 7 rows of translation xyz then unit quaternion wxyz."""
    return np.stack([p.as_vector7() for p in traj])


def trajectory_from_tensor(arr) -> List[Pose]:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 7:
        raise RetargetError(f"expected a T x 7 tensor, got {arr.shape}")
    out = []
    for row in arr:
        q = row[3:]
        out.append(Pose.from_quaternion(q / np.linalg.norm(q), row[:3]))
    return out
