import json

import numpy as np
import pytest

from kpalign import dsl
from kpalign.geometry import Pose
from kpalign.harness import (FAILURE_CATEGORIES, VARIANTS, AblationTable, ConfigError, EpisodeOutcome,
                             RunConfig, ablate, build_report, derive_seed, evaluate_success,
                             generate_batch, goal_constraints, load_task, run_episode, run_pipeline,
                             run_variant, straight_line, wilson_interval)
from kpalign.rollout import NoiseModel, generate_rollout
from kpalign.tensorio import dumps_report, report_from_json


def test_derive_seed_is_stable_and_split():
    assert derive_seed(0, "stack/specs", 0) == derive_seed(0, "stack/specs", 0)
    seeds = {derive_seed(m, t, i) for m in range(3) for t in ("a", "b") for i in range(5)}
    assert len(seeds) == 30
    # pinned value guards against accidental changes to the scheme
    assert derive_seed(7, "x", 1) == int.from_bytes(
        __import__("hashlib").sha256(b"7/x/1").digest()[:4], "little")


def test_config_round_trip_and_validation():
    cfg = RunConfig(task="pour", n_rollouts=4, modes=("deformation",))
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig(hallucination_rate=2.0)
    with pytest.raises(ConfigError):
        RunConfig(modes=("none",))
    with pytest.raises(ValueError):
        RunConfig(epsilon=-1.0)


def test_batch_is_deterministic_per_episode():
    cfg = RunConfig(task="stack", n_rollouts=3)
    scene, _ = load_task(cfg)
    a = generate_batch(cfg, scene, 0)
    b = generate_batch(cfg, scene, 0)
    c = generate_batch(cfg, scene, 1)
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))
    assert not np.array_equal(a[0].frames, c[0].frames)


def test_success_rule():
    cfg = RunConfig(task="stack")
    scene, cs = load_task(cfg)
    _, gt = generate_rollout(scene, "stack", noise=NoiseModel.zero(), jitter=0, goal_jitter=0)
    ok, v = evaluate_success(gt.ee_poses, cs, scene)
    assert ok and v == 0.0
    stuck = [scene.grasp_transform] * len(gt.ee_poses)
    ok, v = evaluate_success(stuck, cs, scene)
    assert not ok and v > 1e-3
    assert all(c.window[1] == 1.0 for c in goal_constraints(cs))


def test_straight_line_endpoints():
    a = Pose.identity()
    b = Pose.from_rotvec([0, 0, 1.0], [0.1, 0.2, 0.3])
    line = straight_line(a, b, 5)
    assert line[0].almost_equal(a, 1e-12) and line[-1].almost_equal(b, 1e-12)


def test_wilson_interval():
    lo, hi = wilson_interval(50, 100)
    assert lo == pytest.approx(0.4038, abs=1e-4) and hi == pytest.approx(0.5962, abs=1e-4)
    assert wilson_interval(0, 10)[0] == 0.0 and wilson_interval(10, 10)[1] == 1.0
    assert wilson_interval(0, 0) == (0.0, 1.0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_each_variant_produces_an_outcome(variant):
    cfg = RunConfig(task="press")
    scene, cs = load_task(cfg)
    batch = generate_batch(cfg, scene, 0)
    out = run_variant(cfg, variant, scene, cs, batch).outcome
    assert out.variant == variant
    assert out.success or out.failure in FAILURE_CATEGORIES


def test_unknown_variant():
    cfg = RunConfig()
    scene, cs = load_task(cfg)
    with pytest.raises(ConfigError):
        run_variant(cfg, "magic", scene, cs, [])


def test_pipeline_report_is_valid_and_deterministic():
    cfg = RunConfig(task="stack", seed=3)
    _, rep1 = run_pipeline(cfg)
    _, rep2 = run_pipeline(cfg)
    text = dumps_report(rep1)
    assert text == dumps_report(rep2)
    back = report_from_json(json.loads(text))
    assert back.selected_index == rep1.selected_index
    assert sum(r["accepted"] for r in back.records) == 1


def test_episode_shares_batch_across_variants():
    cfg = RunConfig()
    outs = run_episode(cfg, "stack", 0, ("video_only", "plus_selection"))
    assert outs[0].selected_index == 0
    assert [o.variant for o in outs] == ["video_only", "plus_selection"]


def test_ablation_table_shapes_and_parallel_equivalence():
    cfg = RunConfig(n_rollouts=4)
    serial = ablate(cfg, ("video_only", "plus_opt"), episodes=2, tasks=("stack", "press"), jobs=1)
    parallel = ablate(cfg, ("video_only", "plus_opt"), episodes=2, tasks=("stack", "press"), jobs=2)
    assert json.dumps(serial.to_json()) == json.dumps(parallel.to_json())
    assert serial.to_csv() == parallel.to_csv()
    rows = serial.rows()
    assert [r["variant"] for r in rows] == ["video_only", "plus_opt"]
    assert set(serial.failure_breakdown()) == set(FAILURE_CATEGORIES)
    with pytest.raises(ConfigError):
        ablate(cfg, ("nope",), episodes=1)
    with pytest.raises(ConfigError):
        ablate(cfg, episodes=0)


def test_table_rates():
    outs = [EpisodeOutcome("t", "v", e, e < 3, 0.0) for e in range(4)]
    tab = AblationTable(("v",), ("t",), 4, outs)
    assert tab.rate("v") == 0.75
    assert tab.failure_breakdown("v")["constraint_violation"] == 1
