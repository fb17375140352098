import itertools
import math

import numpy as np
import pytest

from kpalign import dsl
from kpalign.geometry import CalibrationError
from kpalign.rollout import HallucinationSpec, NoiseModel, ToyWorldModel, generate_rollout
from kpalign.selection import (KeypointTrajectory, LiftError, SelectionConfig, SelectionError,
                               lift_to_3d, select, select_from_scores, spatial_score, visit_order)
from kpalign.tasks import build_constraints, build_scene


def enumerate_selection(s_vis, s_spatial, eps):
    """Direct reading of the rule: the most plausible candidate among those under eps."""
    order = sorted(range(len(s_vis)), key=lambda i: (s_vis[i], i))
    for rank, i in enumerate(order):
        if s_spatial[i] <= eps:
            return i, rank + 1
    return None, len(s_vis)


class Counter:
    def __init__(self, table):
        self.table = table
        self.calls = []

    def __call__(self, i):
        self.calls.append(i)
        return self.table[i]


def test_worked_example():
    f = Counter([0.0, 9.0, 0.0])
    res = select_from_scores([0.3, 0.1, 0.2], f, SelectionConfig(epsilon=0.5))
    assert res.selected_index == 2 and not res.fallback
    assert f.calls == [1, 2] and res.evaluations == 2
    assert [r.accepted for r in res.records] == [False, False, True]
    assert res.records[0].s_spatial is None


def test_randomized_tables_match_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(1, 12))
        s_vis = np.round(rng.uniform(0, 2, n), int(rng.integers(1, 3))).tolist()  # rounding creates ties
        s_sp = rng.exponential(1.0, n).tolist()
        eps = float(rng.uniform(0, 1.5))
        f = Counter(s_sp)
        want, j = enumerate_selection(s_vis, s_sp, eps)
        res = select_from_scores(s_vis, f, SelectionConfig(epsilon=eps))
        assert len(f.calls) == j == res.evaluations
        assert sum(r.accepted for r in res.records) == 1
        if want is None:
            assert res.fallback
            assert s_sp[res.selected_index] == min(s_sp)
        else:
            assert res.selected_index == want and not res.fallback


def test_visit_order_ties_by_index():
    assert visit_order([0.2, 0.1, 0.2, 0.1]) == [1, 3, 0, 2]


def test_fallback_best_spatial():
    res = select_from_scores([0.1, 0.2, 0.3], lambda i: [5.0, 1.0, 3.0][i], SelectionConfig(epsilon=0.5))
    assert res.fallback and res.selected_index == 1 and res.records[1].accepted


def test_fallback_error_is_strict():
    with pytest.raises(SelectionError) as info:
        select_from_scores([0.1, 0.2], lambda i: 5.0, SelectionConfig(epsilon=0.5, fallback="error"))
    assert len(info.value.records) == 2


def test_max_evaluated_caps_the_scan():
    f = Counter([3.0, 2.0, 0.0])
    res = select_from_scores([0.1, 0.2, 0.3], f, SelectionConfig(epsilon=0.5, max_evaluated=2))
    assert f.calls == [0, 1] and res.fallback and res.selected_index == 1


def test_lift_failures_count_as_infinite():
    def spatial(i):
        if i == 0:
            raise LiftError("no depth")
        return 0.0
    res = select_from_scores([0.1, 0.2], spatial, SelectionConfig())
    assert res.selected_index == 1
    assert math.isinf(res.records[0].s_spatial) and res.records[0].to_record()["s_spatial"] is None


def test_empty_batch_and_bad_config():
    with pytest.raises(SelectionError):
        select_from_scores([], lambda i: 0.0)
    with pytest.raises(ValueError):
        SelectionConfig(epsilon=-1)
    with pytest.raises(ValueError):
        SelectionConfig(fallback="random")


# ---------------------------------------------------------------------------
# lifting


SCENE = build_scene("stack")
CS = dsl.bind(build_constraints("stack"), SCENE)


def test_noiseless_lift_recovers_ground_truth():
    v, gt = generate_rollout(SCENE, "stack", noise=NoiseModel.zero(2.0, 0.5), seed=4)
    lifted = lift_to_3d(v, SCENE)
    assert lifted.calibration.alpha == pytest.approx(2.0, abs=1e-9)
    assert lifted.calibration.beta == pytest.approx(0.5, abs=1e-9)
    np.testing.assert_allclose(lifted.points, gt.keypoints, atol=1e-9)


def test_lift_freezes_invisible_points():
    v, _ = generate_rollout(SCENE, "stack", HallucinationSpec("disappearance", 0, 0.5, 0),
                            noise=NoiseModel.zero(), seed=0)
    lifted = lift_to_3d(v, SCENE)
    gi = SCENE.grasped_indices
    hidden = np.flatnonzero(~v.visibility[:, gi[0]])
    assert hidden.size
    first = hidden[0]
    assert np.array_equal(lifted.points[-1, gi], lifted.points[first - 1, gi])


def test_lift_rejects_mismatched_depth():
    v, _ = generate_rollout(SCENE, "stack", seed=0)
    v.depth_first = v.depth_first[:-1]
    with pytest.raises(LiftError):
        lift_to_3d(v, SCENE)


def test_lift_rejects_flat_depth():
    v, _ = generate_rollout(SCENE, "stack", seed=0)
    v.depth_first = np.ones_like(v.depth_first)
    with pytest.raises(CalibrationError):
        lift_to_3d(v, SCENE)


def test_keypoint_trajectory_validation():
    with pytest.raises(LiftError):
        KeypointTrajectory(np.zeros((3, 4, 2)), np.ones((3, 4)))
    kt = KeypointTrajectory.fully_visible(np.zeros((3, 4, 3)))
    assert kt.T == 3 and np.asarray(kt).shape == (3, 4, 3)


def test_clean_rollouts_pass_and_hallucinations_fail_spatially():
    clean = [spatial_score(generate_rollout(SCENE, "stack", seed=s)[0], SCENE, CS) for s in range(5)]
    bad = [spatial_score(generate_rollout(SCENE, "stack", HallucinationSpec("misplacement", 0.08, 0.5, s),
                                          seed=s)[0], SCENE, CS) for s in range(5)]
    assert np.median(clean) < 1e-2 < min(bad)


def test_select_end_to_end_prefers_clean():
    wm = ToyWorldModel()
    specs = [HallucinationSpec(m, mag, 0.5, i) for i, (m, mag) in
             enumerate(itertools.islice(itertools.cycle([("wrong_object", 0.0), ("misplacement", 0.08),
                                                         ("none", 0.0), ("deformation", 0.02)]), 8))]
    batch = [generate_rollout(SCENE, "stack", s, seed=10 + i)[0] for i, s in enumerate(specs)]
    res = select(batch, SCENE, CS, wm)
    assert batch[res.selected_index].injected_mode == "none"
    assert res.records[res.selected_index].lifted is not None
