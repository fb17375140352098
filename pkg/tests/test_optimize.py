import math
import warnings

import numpy as np
import pytest

from kpalign import dsl
from kpalign.geometry import Intrinsics, Pose, rotation_about, rotvec_to_matrix
from kpalign.harness import load_task, RunConfig
from kpalign.optimize import (BoundsError, OptimizationError, OptProblem, SolverParams, decode_variables,
                              encode_variables, objective, solve, write_trace_csv)
from kpalign.retarget import trajectory_keypoints
from kpalign.rollout import NoiseModel, generate_rollout
from kpalign.tasks import TASK_NAMES
from kpalign.tensorio.documents import Entity, SceneDoc

from oracles import double_loop_cost


def sphere_scene():
    kp0 = [0.0, 0.0, 1.0]
    # the grasp frame sits on keypoint 0, so only translation moves it
    return SceneDoc(intrinsics=Intrinsics(100, 100, 2, 1.5, 4, 3),
                    entities=(Entity("block", np.array([kp0, [0.05, 0, 1.0], [0, 0.05, 1.0]])),),
                    grasped_entity="block", grasp_transform=Pose(np.eye(3), kp0),
                    workspace_aabb=np.array([[-1, -1, 0.2], [1, 1, 1.8]]), depth=np.ones((3, 4)))


GOAL = np.array([0.3, 0.4, 1.0])
SPHERE = dsl.ConstraintSet((dsl.Constraint("near_goal", dsl.parse(
    "(sub (norm (vsub (kp 0) (const3 0.3 0.4 1.0))) 0.1)")),))


def noisy_init(task, seed, scale=1.0):
    cfg = RunConfig(task=task)
    scene, cs = load_task(cfg)
    _, gt = generate_rollout(scene, task, noise=NoiseModel.zero(), jitter=0, goal_jitter=0)
    rng = np.random.default_rng(seed)
    traj = [Pose(P.rotation @ rotvec_to_matrix(rng.normal(0, 0.05 * scale, 3)),
                 P.translation + rng.normal(0, 0.005 * scale, 3)) for P in gt.ee_poses]
    return scene, cs, traj


# ---------------------------------------------------------------------------
# variables


def test_midpoint_encoding():
    scene = sphere_scene()
    z = encode_variables([Pose(np.eye(3), [0.5, 0.5, 0.5])], [[0, 0, 0], [1, 1, 1]])
    np.testing.assert_allclose(z, 0.5)
    assert scene  # keep helper exercised


def test_encode_decode_round_trip(rng):
    bounds = np.array([[-0.5, -0.4, 0.3], [0.6, 0.5, 1.4]])
    for _ in range(1000):
        t = rng.uniform(bounds[0], bounds[1])
        axis = rng.normal(size=3)
        R = rotation_about(axis, rng.uniform(0, math.pi * 0.999))
        p = Pose(R, t)
        q = decode_variables(encode_variables([p], bounds), bounds)[0]
        assert p.almost_equal(q, 1e-9)


def test_rotation_by_pi():
    bounds = [[0, 0, 0], [1, 1, 1]]
    for axis in ([0, -1, 0], [0, 1, 0], [-1, 1, 0], [0, 0, -1]):
        p = Pose(rotation_about(axis, math.pi), [0.2, 0.3, 0.4])
        z = encode_variables([p], bounds)
        r = -math.pi + z[3:] * 2 * math.pi
        first = r[np.flatnonzero(np.abs(r) > 1e-12)[0]]
        assert first > 0
        assert p.almost_equal(decode_variables(z, bounds)[0], 1e-9)


def test_bounds_handling():
    bounds = [[0, 0, 0], [1, 1, 1]]
    with pytest.warns(RuntimeWarning):
        z = encode_variables([Pose(np.eye(3), [1.005, 0.5, 0.5])], bounds)
    assert z[0] == 1.0
    with pytest.raises(BoundsError):
        encode_variables([Pose(np.eye(3), [1.02, 0.5, 0.5])], bounds)
    with pytest.raises(BoundsError):
        encode_variables([Pose.identity()], [[0, 0, 0], [0, 1, 1]])


def test_problem_validation():
    with pytest.raises(OptimizationError):
        OptProblem([], SPHERE, sphere_scene())
    with pytest.raises(OptimizationError):
        OptProblem([Pose.identity()], SPHERE, sphere_scene(), lam=-1)
    with pytest.raises(OptimizationError):
        SolverParams(grad_step=0)


# ---------------------------------------------------------------------------
# objective


def naive_objective(z, prob):
    z = np.asarray(z).reshape(-1, 6)
    b = prob.bounds
    traj = decode_variables(z, b)
    kps = trajectory_keypoints(traj, prob.scene)
    items = [(dsl.pretty(c.expr), c.window) for c in prob.constraints]
    hinge = double_loop_cost(items, kps)
    fid = 0.0
    for t in range(len(z)):
        tr = b[0] + z[t, :3] * (b[1] - b[0])
        rv = -math.pi + z[t, 3:] * 2 * math.pi
        t0 = prob.initial_trajectory[t].translation
        from kpalign.geometry import matrix_to_rotvec
        r0 = matrix_to_rotvec(prob.initial_trajectory[t].rotation)
        fid += float(np.sum((tr - t0) ** 2)) + prob.rot_weight * float(np.sum((rv - r0) ** 2))
    return hinge + prob.lam * fid


@pytest.mark.parametrize("task", TASK_NAMES)
def test_objective_matches_naive(task):
    rng = np.random.default_rng(11)
    scene, cs, traj = noisy_init(task, 1)
    for lam in (0.0, 0.3, 2.0):
        prob = OptProblem(traj, cs, scene, lam=lam, rot_weight=float(rng.uniform(0.5, 2)))
        z = np.clip(encode_variables(traj, prob.bounds) + rng.normal(0, 0.003, 6 * len(traj)), 0, 1)
        assert objective(z, prob) == pytest.approx(naive_objective(z, prob), rel=1e-12)


def test_objective_zero_at_feasible_init():
    scene, cs, _ = noisy_init("press", 0)
    _, gt = generate_rollout(scene, "press", noise=NoiseModel.zero(), jitter=0, goal_jitter=0)
    prob = OptProblem(gt.ee_poses, cs, scene)
    assert dsl.aggregate_cost(cs, trajectory_keypoints(gt.ee_poses, scene)) == 0.0
    assert objective(encode_variables(gt.ee_poses, prob.bounds), prob) == 0.0


def test_gradient_richardson():
    scene = sphere_scene()
    init = [Pose(np.eye(3), [0.0, 0.0, 1.0])]
    prob = OptProblem(init, SPHERE, scene, params=SolverParams(grad_step=1e-5))
    half = OptProblem(init, SPHERE, scene, params=SolverParams(grad_step=5e-6))
    z = encode_variables([Pose(rotation_about([1, 2, 3], 0.3), [0.05, 0.1, 0.95])], prob.bounds)
    _, g1 = objective(z, prob, with_gradient=True)
    _, g2 = objective(z, half, with_gradient=True)
    big = np.abs(g2) > 1e-6
    np.testing.assert_allclose(g1[big], g2[big], rtol=1e-4)


# ---------------------------------------------------------------------------
# solver


def test_feasible_init_is_a_fixed_point():
    scene, cs, _ = noisy_init("hammer", 0)
    _, gt = generate_rollout(scene, "hammer", noise=NoiseModel.zero(), jitter=0, goal_jitter=0)
    res = solve(OptProblem(gt.ee_poses, cs, scene))
    assert res.converged and res.iterations == 0
    for a, b in zip(res.trajectory, gt.ee_poses):
        assert np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)


def line_oracle(lam):
    # radial symmetry: the optimum moves s metres straight toward the goal
    s = np.arange(0.0, 0.5 + 1e-12, 1e-6)
    f = np.maximum(0.0, 0.5 - s - 0.1) ** 2 + lam * s ** 2
    return s[np.argmin(f)]


def test_sphere_goal_matches_line_oracle():
    scene = sphere_scene()
    start = np.array([0.0, 0.0, 1.0])
    res = solve(OptProblem([Pose(np.eye(3), start)], SPHERE, scene, lam=1.0))
    s = line_oracle(1.0)
    want = start + s * (GOAL - start) / np.linalg.norm(GOAL - start)
    assert np.linalg.norm(res.trajectory[0].translation - want) < 1e-4
    assert np.allclose(res.trajectory[0].rotation, np.eye(3), atol=1e-6)


def test_lambda_monotonicity():
    scene, cs, traj = noisy_init("stack", 3)
    fids = []
    for lam in (0.01, 0.1, 1.0, 10.0, 100.0):
        res = solve(OptProblem(traj, cs, scene, lam=lam))
        fids.append(res.trace[-1].fidelity)
    assert all(b <= a + 1e-9 for a, b in zip(fids, fids[1:]))


def test_huge_lambda_barely_moves():
    scene, cs, traj = noisy_init("stack", 4)

    def displacement(lam):
        res = solve(OptProblem(traj, cs, scene, lam=lam))
        return math.sqrt(sum(float(np.sum((a.translation - b.translation) ** 2))
                             for a, b in zip(res.trajectory, traj)))

    assert displacement(1e6) <= 1e-3 * displacement(1.0)


@pytest.mark.parametrize("task", TASK_NAMES)
def test_trace_monotone_and_in_bounds(task):
    scene, cs, traj = noisy_init(task, 7)
    prob = OptProblem(traj, cs, scene)
    res = solve(prob)
    objs = [r.objective for r in res.trace]
    assert all(b <= a for a, b in zip(objs, objs[1:]))
    assert res.violation <= 0.1 * dsl.aggregate_cost(cs, trajectory_keypoints(traj, scene))
    for p in res.trajectory:
        assert np.all(p.translation >= prob.bounds[0]) and np.all(p.translation <= prob.bounds[1])


def test_coupled_constraints_are_solved_jointly():
    scene, cs, traj = noisy_init("place", 2)
    assert cs.uses_previous
    # exaggerate one jump so the kpprev constraint is active
    traj[10] = Pose(traj[10].rotation, traj[10].translation + [0.09, 0.0, 0.0])
    before = dsl.aggregate_cost(cs, trajectory_keypoints(traj, scene))
    res = solve(OptProblem(traj, cs, scene))
    assert res.violation < 0.1 * before


def test_restarts_are_deterministic():
    scene, cs, traj = noisy_init("pour", 5)
    p = SolverParams(restarts=2, restart_seed=9)
    a = solve(OptProblem(traj, cs, scene, params=p))
    b = solve(OptProblem(traj, cs, scene, params=p))
    assert [r.objective for r in a.trace] == [r.objective for r in b.trace]


def test_trace_csv(tmp_path):
    scene, cs, traj = noisy_init("open", 0)
    res = solve(OptProblem(traj, cs, scene))
    write_trace_csv(res, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,objective,constraint,fidelity,max_violation"
    assert len(lines) == len(res.trace) + 1
