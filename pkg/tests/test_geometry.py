import math

import numpy as np
import pytest

from kpalign.geometry import (CalibrationError, DegenerateConfigurationError, DepthCalibration,
                              GeometryError, Intrinsics, InvalidDepthError, InvalidPoseError,
                              OutOfBoundsError, Pose, apply, back_project, calibrate_depth, compose,
                              fit_rigid, interior_pixels, invert, mask_extrema, matrix_to_rotvec,
                              project, rotation_about, rotation_angle_between, rotvec_to_matrix,
                              sample_keypoints)

from conftest import random_pose, random_rotation


def test_pose_rejects_non_orthonormal():
    with pytest.raises(InvalidPoseError):
        Pose(np.diag([1.0, 1.0, 1.01]), np.zeros(3))
    with pytest.raises(InvalidPoseError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_pose_arrays_are_read_only():
    p = Pose.identity()
    with pytest.raises(ValueError):
        p.translation[0] = 1.0


def test_compose_identity():
    I = Pose.identity()
    assert compose(I, I).almost_equal(I, 0.0)


def test_apply_quarter_turn_about_z():
    p = Pose(rotation_about([0, 0, 1], math.pi / 2), np.zeros(3))
    np.testing.assert_allclose(apply(p, np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 0.0], atol=1e-15)


def test_group_laws_on_random_poses():
    rng = np.random.default_rng(0)
    I = Pose.identity()
    for _ in range(1000):
        a, b, c = (random_pose(rng) for _ in range(3))
        assert compose(a, invert(a)).almost_equal(I, 1e-12)
        assert compose(invert(a), a).almost_equal(I, 1e-12)
        assert compose(compose(a, b), c).almost_equal(compose(a, compose(b, c)), 1e-10)
        assert compose(a, I).almost_equal(a, 1e-15)


def test_compose_applies_right_operand_first():
    rng = np.random.default_rng(1)
    a, b = random_pose(rng), random_pose(rng)
    p = rng.normal(size=(5, 3))
    np.testing.assert_allclose(apply(compose(a, b), p), apply(a, apply(b, p)), atol=1e-12)


def test_rotvec_round_trip_and_small_angles():
    rng = np.random.default_rng(2)
    for _ in range(500):
        R = random_rotation(rng)
        np.testing.assert_allclose(rotvec_to_matrix(matrix_to_rotvec(R)), R, atol=1e-10)
    tiny = np.array([1e-9, -2e-9, 3e-9])
    np.testing.assert_allclose(matrix_to_rotvec(rotvec_to_matrix(tiny)), tiny, rtol=1e-6, atol=1e-20)


def test_rotvec_at_pi_uses_positive_first_component():
    R = rotvec_to_matrix(np.array([-math.pi, 0.0, 0.0]))
    r = matrix_to_rotvec(R)
    np.testing.assert_allclose(r, [math.pi, 0.0, 0.0], atol=1e-9)
    R2 = rotvec_to_matrix(np.array([0.0, -math.pi / math.sqrt(2), math.pi / math.sqrt(2)]))
    r2 = matrix_to_rotvec(R2)
    assert r2[1] > 0
    np.testing.assert_allclose(rotvec_to_matrix(r2), R2, atol=1e-9)


def test_quaternion_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(100):
        p = random_pose(rng)
        q = p.quaternion()
        assert q[0] >= 0
        assert Pose.from_quaternion(q, p.translation).almost_equal(p, 1e-12)


# ---------------------------------------------------------------------------
# camera

INTR = Intrinsics(fx=500.0, fy=480.0, cx=320.0, cy=240.0, width=640, height=480)


def test_back_project_principal_point():
    np.testing.assert_allclose(back_project([320.0, 240.0], 1.5, INTR), [0.0, 0.0, 1.5])


def test_back_project_substitution():
    intr = Intrinsics(100.0, 100.0, 0.0, 0.0, 200, 200)
    np.testing.assert_allclose(back_project([100.0, 0.0], 2.0, intr), [2.0, 0.0, 2.0])


def test_project_examples():
    np.testing.assert_allclose(project([0.0, 0.0, 1.0], INTR), [320.0, 240.0])
    intr = Intrinsics(100.0, 100.0, 0.0, 0.0, 200, 200)
    assert project([1.0, 0.0, 2.0], intr)[0] == pytest.approx(50.0)


def test_project_back_project_round_trip():
    rng = np.random.default_rng(4)
    px = np.column_stack([rng.uniform(0, 640, 1000), rng.uniform(0, 480, 1000)])
    d = rng.uniform(0.2, 5.0, 1000)
    np.testing.assert_allclose(project(back_project(px, d, INTR), INTR), px, atol=1e-9)
    p = np.column_stack([rng.normal(size=50), rng.normal(size=50), rng.uniform(0.5, 3, 50)])
    uv = project(p, INTR)
    np.testing.assert_allclose(back_project(uv, p[:, 2], INTR, check_bounds=False), p, atol=1e-12)


def test_camera_errors():
    with pytest.raises(InvalidDepthError):
        back_project([1.0, 1.0], 0.0, INTR)
    with pytest.raises(OutOfBoundsError):
        back_project([640.0, 1.0], 1.0, INTR)
    with pytest.raises(InvalidDepthError):
        project([0.0, 0.0, -1.0], INTR)
    with pytest.raises(GeometryError):
        Intrinsics(0.0, 1.0, 0.0, 0.0, 10, 10)
    with pytest.raises(GeometryError):
        Intrinsics(1.0, 1.0, 10.0, 0.0, 10, 10)


# ---------------------------------------------------------------------------
# rigid fit


def _oracle_rigid(src, dst):
    """Textbook Kabsch via an independent covariance convention."""
    a = src - src.mean(0)
    b = dst - dst.mean(0)
    U, _, Vt = np.linalg.svd(b.T @ a)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt))
    R = U @ S @ Vt
    return R, dst.mean(0) - R @ src.mean(0)


def test_fit_rigid_identity():
    src = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    pose, res = fit_rigid(src, src)
    assert pose.almost_equal(Pose.identity(), 1e-12)
    assert res < 1e-12


def test_fit_rigid_quarter_turn_and_lift():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(6, 3))
    truth = Pose(rotation_about([0, 0, 1], math.pi / 2), [0.0, 0.0, 0.1])
    pose, res = fit_rigid(src, apply(truth, src))
    assert pose.almost_equal(truth, 1e-9)
    assert res < 1e-9


def test_fit_rigid_noisy_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        truth = random_pose(rng)
        src = rng.normal(size=(10, 3))
        dst = apply(truth, src + rng.normal(scale=1e-3, size=src.shape))
        pose, _ = fit_rigid(src, dst)
        R, t = _oracle_rigid(src, dst)
        assert rotation_angle_between(pose.rotation, truth.rotation) < 1e-2
        np.testing.assert_allclose(pose.rotation, R, atol=1e-9)
        np.testing.assert_allclose(pose.translation, t, atol=1e-9)


def test_fit_rigid_mirrored_input_still_proper_rotation():
    rng = np.random.default_rng(7)
    for _ in range(200):
        src = rng.normal(size=(5, 3))
        dst = src * np.array([1.0, 1.0, -1.0])
        pose, _ = fit_rigid(src, dst)
        assert np.linalg.det(pose.rotation) == pytest.approx(1.0, abs=1e-9)


def test_fit_rigid_weights():
    rng = np.random.default_rng(8)
    src = rng.normal(size=(6, 3))
    truth = random_pose(rng)
    dst = apply(truth, src)
    dst[5] += 10.0  # outlier with zero weight is ignored
    pose, res = fit_rigid(src, dst, weights=[1, 1, 1, 1, 1, 0])
    assert pose.almost_equal(truth, 1e-9)
    assert res < 1e-9


def test_fit_rigid_degenerate():
    with pytest.raises(DegenerateConfigurationError):
        fit_rigid(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfigurationError):
        fit_rigid(line, line)
    with pytest.raises(DegenerateConfigurationError):
        fit_rigid(np.ones((4, 3)), np.ones((4, 3)))


# ---------------------------------------------------------------------------
# depth calibration


def test_calibrate_identity_and_exact_affine():
    rng = np.random.default_rng(9)
    ref = rng.uniform(0.5, 3.0, (20, 30))
    c = calibrate_depth(ref, ref)
    assert c.alpha == pytest.approx(1.0, abs=1e-12) and c.beta == pytest.approx(0.0, abs=1e-12)
    c = calibrate_depth((ref - 1.0) / 2.0, ref)
    assert c.alpha == pytest.approx(2.0, abs=1e-12) and c.beta == pytest.approx(1.0, abs=1e-12)


def test_calibrate_matches_closed_form():
    rng = np.random.default_rng(10)
    est = rng.uniform(0.5, 3.0, 10_000)
    ref = 1.7 * est + 0.3 + rng.normal(0, 0.01, est.shape)
    c = calibrate_depth(est, ref)
    A = np.column_stack([est, np.ones_like(est)])
    (a, b), *_ = np.linalg.lstsq(A, ref, rcond=None)
    assert c.alpha == pytest.approx(a, rel=1e-12)
    assert c.beta == pytest.approx(b, rel=1e-10)
    assert abs(c.alpha - 1.7) < 0.02 and abs(c.beta - 0.3) < 0.02


def test_calibrate_respects_mask_and_default_range():
    est = np.array([1.0, 2.0, 3.0, 4.0])
    ref = np.array([2.0, 4.0, 6.0, 50.0])  # last pixel beyond the default 10 m range
    c = calibrate_depth(est, ref)
    assert c.alpha == pytest.approx(2.0) and c.beta == pytest.approx(0.0, abs=1e-12)
    c = calibrate_depth(est, ref, valid_mask=[True, True, False, False])
    assert c.alpha == pytest.approx(2.0)


def test_calibrate_errors():
    with pytest.raises(CalibrationError):
        calibrate_depth(np.ones(4), np.ones(4), valid_mask=np.zeros(4, bool))
    with pytest.raises(CalibrationError):
        calibrate_depth(np.ones(4), np.arange(1.0, 5.0))
    with pytest.raises(CalibrationError):
        calibrate_depth(np.arange(1.0, 5.0), np.arange(4.0, 0.0, -1.0))
    with pytest.raises(CalibrationError):
        DepthCalibration(0.0, 1.0)


# ---------------------------------------------------------------------------
# mask keypoints


def test_square_extrema():
    m = np.zeros((20, 20), bool)
    m[5:15, 3:13] = True
    ex = sample_keypoints(m, 0, seed=0)
    np.testing.assert_array_equal(ex, [[3, 5], [12, 5], [3, 5], [3, 14]])


def test_single_pixel_extrema():
    m = np.zeros((5, 5), bool)
    m[2, 3] = True
    np.testing.assert_array_equal(mask_extrema(m), [[3, 2]] * 4)
    with pytest.raises(GeometryError):
        sample_keypoints(m, 1)


def test_ring_interior_samples():
    yy, xx = np.mgrid[:40, :40]
    r = np.hypot(xx - 20, yy - 20)
    m = (r >= 8) & (r <= 15)
    pts = sample_keypoints(m, 5, seed=3)
    assert pts.shape == (9, 2)
    for x, y in pts[4:].astype(int):
        assert m[y, x] and m[y - 1, x] and m[y + 1, x] and m[y, x - 1] and m[y, x + 1]
    np.testing.assert_array_equal(pts, sample_keypoints(m, 5, seed=3))


def test_empty_mask_errors():
    with pytest.raises(GeometryError):
        mask_extrema(np.zeros((4, 4)))
    assert interior_pixels(np.ones((1, 1))).shape == (0, 2)
