import numpy as np
import pytest

from kpalign.geometry import Pose, compose, rotation_angle_between
from kpalign.retarget import (RetargetError, gripper_keypoints, retarget, trajectory_from_tensor,
                              trajectory_keypoints, trajectory_to_tensor)
from kpalign.rollout import NoiseModel, generate_rollout
from kpalign.selection import KeypointTrajectory, lift_to_3d
from kpalign.tasks import TASK_NAMES, build_scene

from conftest import random_pose


@pytest.mark.parametrize("task", TASK_NAMES)
def test_noiseless_round_trip(task):
    scene = build_scene(task)
    v, gt = generate_rollout(scene, task, noise=NoiseModel.zero(2.0, 0.5), seed=1)
    res = retarget(lift_to_3d(v, scene), scene)
    assert res.initial_trajectory[0].almost_equal(scene.grasp_transform, 0.0) or \
        np.allclose(res.initial_trajectory[0].as_vector7(), scene.grasp_transform.as_vector7(), atol=1e-15)
    for got, want in zip(res.initial_trajectory, gt.ee_poses):
        assert np.linalg.norm(got.translation - want.translation) < 1e-6
        assert rotation_angle_between(got.rotation, want.rotation) < 1e-6
    assert res.residuals.max() < 1e-9


def test_first_frame_object_pose_is_identity():
    scene = build_scene("pour")
    v, _ = generate_rollout(scene, "pour", seed=3)
    res = retarget(lift_to_3d(v, scene), scene)
    assert np.array_equal(res.object_poses[0].rotation, np.eye(3))
    assert np.array_equal(res.object_poses[0].translation, np.zeros(3))


def test_gripper_keypoints_inverts_retarget(rng):
    scene = build_scene("stack")
    traj = [scene.grasp_transform] + [compose(random_pose(rng, 0.05), scene.grasp_transform) for _ in range(5)]
    kps = trajectory_keypoints(traj, scene)
    np.testing.assert_allclose(kps[0], scene.keypoints, atol=1e-12)
    res = retarget(kps, scene)
    for got, want in zip(res.initial_trajectory, traj):
        assert got.almost_equal(want, 1e-9)
    np.testing.assert_allclose(trajectory_keypoints(res.initial_trajectory, scene), kps, atol=1e-9)


def test_only_visible_points_are_used():
    scene = build_scene("stack")
    v, gt = generate_rollout(scene, "stack", noise=NoiseModel.zero(), seed=0)
    lifted = lift_to_3d(v, scene)
    gi = scene.grasped_indices
    vis = lifted.visibility.copy()
    pts = lifted.points.copy()
    vis[5:, gi[0]] = False
    pts[5:, gi[0]] += 1.0  # garbage where hidden
    res = retarget(KeypointTrajectory(pts, vis), scene)
    for got, want in zip(res.initial_trajectory, gt.ee_poses):
        assert np.linalg.norm(got.translation - want.translation) < 1e-6


def test_too_few_visible_points():
    scene = build_scene("stack")
    v, _ = generate_rollout(scene, "stack", seed=0)
    lifted = lift_to_3d(v, scene)
    gi = scene.grasped_indices
    lifted.visibility[7, gi[: len(gi) - 2]] = False
    with pytest.raises(RetargetError) as info:
        retarget(lifted, scene)
    assert info.value.frame == 8


def test_tensor_round_trip(rng):
    traj = [random_pose(rng) for _ in range(6)]
    back = trajectory_from_tensor(trajectory_to_tensor(traj))
    for a, b in zip(traj, back):
        assert a.almost_equal(b, 1e-12)
    with pytest.raises(RetargetError):
        trajectory_from_tensor(np.zeros((3, 6)))
