"""Synthetic episodes, pipeline variants, success rule, and the ablation table."""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dsl
from .geometry import CalibrationError, GeometryError, Pose, matrix_to_rotvec, rotvec_to_matrix
from .optimize import OptProblem, OptResult, SolverParams, solve
from .retarget import RetargetError, RetargetResult, retarget, trajectory_keypoints, trajectory_to_tensor
from .rollout import (DEFAULT_MAGNITUDE, HALLUCINATED_MODES, HallucinationSpec, NoiseModel, Rollout,
                      ToyWorldModel, generate_rollout, sample_specs)
from .selection import LiftError, SelectionConfig, SelectionError, SelectionResult, lift_to_3d, select
from .tasks import TASK_NAMES, build_constraints, build_scene
from .tensorio.documents import ReportDoc, SceneDoc, load_constraints, load_scene

VARIANTS = ("constraints_only", "video_only", "plus_selection", "plus_opt")
FAILURE_CATEGORIES = ("selection_miss", "retarget_residual", "optimizer_nonconverged",
                      "calibration_error", "constraint_violation")
RESIDUAL_LIMIT = 0.01


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "stack"
    scene_path: Optional[str] = None
    constraints_path: Optional[str] = None
    n_rollouts: int = 8
    hallucination_rate: float = 0.5
    modes: Tuple[str, ...] = HALLUCINATED_MODES
    magnitudes: Dict[str, float] = field(default_factory=dict)
    frames: int = 24
    track_sigma_px: float = 0.5
    depth_alpha: float = 1.5
    depth_beta: float = 0.2
    depth_sigma: float = 0.002
    epsilon: float = 1e-2
    max_evaluated: Optional[int] = None
    fallback: str = "best_spatial"
    lam: float = 1.0
    rot_weight: float = 1.0
    max_iters: int = 60
    grad_step: float = 1e-6
    tol_obj: float = 1e-12
    tol_violation: float = 1e-9
    restarts: int = 0
    context: int = 4
    horizon: int = 2
    stride: int = 1
    latent_dim: int = 32
    wm_seed: int = 0
    success_threshold: float = 1e-3
    goal_tolerance: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        self.modes = tuple(self.modes)
        if self.n_rollouts < 1:
            raise ConfigError("n_rollouts must be at least 1")
        if not 0.0 <= self.hallucination_rate <= 1.0:
            raise ConfigError("hallucination_rate must lie in [0, 1]")
        bad = [m for m in self.modes if m not in HALLUCINATED_MODES]
        if bad or not self.modes:
            raise ConfigError(f"mode mix must be a non-empty subset of {HALLUCINATED_MODES}")
        SelectionConfig(self.epsilon, self.max_evaluated, self.fallback)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        return d

    @property
    def noise(self) -> NoiseModel:
        return NoiseModel(self.track_sigma_px, self.depth_alpha, self.depth_beta, self.depth_sigma)

    @property
    def selection(self) -> SelectionConfig:
        return SelectionConfig(self.epsilon, self.max_evaluated, self.fallback)

    @property
    def solver(self) -> SolverParams:
        return SolverParams(max_iters=self.max_iters, grad_step=self.grad_step, tol_obj=self.tol_obj,
                            tol_violation=self.tol_violation, restarts=self.restarts,
                            restart_seed=self.seed)

    def world_model(self) -> ToyWorldModel:
        return ToyWorldModel(self.latent_dim, self.wm_seed, self.context, self.horizon, self.stride)


def derive_seed(master: int, tag: str, index: int = 0) -> int:
    """Split a master seed by stage tag and index (stable across processes and platforms)."""
    h = hashlib.sha256(f"{int(master)}/{tag}/{int(index)}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def load_task(cfg: RunConfig) -> Tuple[SceneDoc, dsl.ConstraintSet]:
    scene = load_scene(cfg.scene_path) if cfg.scene_path else build_scene(cfg.task)
    cs = load_constraints(cfg.constraints_path) if cfg.constraints_path else build_constraints(cfg.task)
    return scene, dsl.bind(cs, scene)


def generate_batch(cfg: RunConfig, scene: SceneDoc, episode: int = 0) -> List[Rollout]:
    rng = np.random.default_rng(derive_seed(cfg.seed, f"{cfg.task}/specs", episode))
    specs = sample_specs(cfg.n_rollouts, cfg.hallucination_rate, rng, cfg.modes, cfg.magnitudes)
    batch = []
    for i, spec in enumerate(specs):
        seed = derive_seed(cfg.seed, f"{cfg.task}/rollout/{episode}", i)
        batch.append(generate_rollout(scene, cfg.task, spec, cfg.noise, cfg.frames, seed)[0])
    return batch


# ---------------------------------------------------------------------------
# success rule


def goal_constraints(cs: dsl.ConstraintSet) -> List[dsl.Constraint]:
    return [c for c in cs if c.window[1] == 1.0]


def evaluate_success(traj: Sequence[Pose], cs: dsl.ConstraintSet, scene: SceneDoc,
                     threshold: float = 1e-3, goal_tolerance: float = 1e-2) -> Tuple[bool, float]:
    """Aggregate violation under threshold and every goal constraint met at the last frame."""
    kps = trajectory_keypoints(traj, scene)
    violation = dsl.aggregate_cost(cs, kps)
    final_ok = all(c.expr.evaluate_batch(kps[-1], kps[-2] if len(kps) > 1 else kps[-1]) <= goal_tolerance
                   for c in goal_constraints(cs))
    return bool(violation <= threshold and final_ok), violation


@dataclass
class EpisodeOutcome:
    task: str
    variant: str
    episode: int
    success: bool
    violation: Optional[float]
    failure: Optional[str] = None
    selected_index: Optional[int] = None
    selected_mode: Optional[str] = None
    fallback: bool = False
    timing: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# pipeline stages shared by the CLI and the variants


@dataclass(eq=False)
class PipelineRun:
    selection: Optional[SelectionResult] = None
    retarget: Optional[RetargetResult] = None
    optimization: Optional[OptResult] = None
    trajectory: Optional[List[Pose]] = None
    outcome: Optional[EpisodeOutcome] = None


def straight_line(start: Pose, goal: Pose, T: int) -> List[Pose]:
    r = matrix_to_rotvec(start.rotation.T @ goal.rotation)
    out = []
    for s in np.linspace(0.0, 1.0, T):
        R = start.rotation @ rotvec_to_matrix(s * r)
        out.append(Pose(R, (1 - s) * start.translation + s * goal.translation))
    return out


def constraint_only_plan(scene: SceneDoc, cs: dsl.ConstraintSet, cfg: RunConfig) -> Tuple[List[Pose], OptResult]:
    """Plan with no rollout: solve the goal frame, interpolate, then refine."""
    start = scene.grasp_transform
    goal_cs = dsl.ConstraintSet(tuple(dsl.Constraint(c.name, c.expr, (0.0, 1.0), c.description)
                                      for c in goal_constraints(cs)), cs.num_keypoints)
    goal = solve(OptProblem([start], goal_cs, scene, lam=1e-3, params=cfg.solver)).trajectory[0]
    init = straight_line(start, goal, cfg.frames)
    result = solve(OptProblem(init, cs, scene, lam=cfg.lam, rot_weight=cfg.rot_weight, params=cfg.solver))
    return init, result


def _classify(run: PipelineRun, batch: Optional[Sequence[Rollout]], variant: str) -> str:
    sel = run.selection
    if sel is not None and batch is not None and batch[sel.selected_index].injected_mode != "none":
        return "selection_miss"
    if run.retarget is not None and float(np.max(run.retarget.residuals)) > RESIDUAL_LIMIT:
        return "retarget_residual"
    if run.optimization is not None and not run.optimization.converged:
        return "optimizer_nonconverged"
    return "constraint_violation"


def run_variant(cfg: RunConfig, variant: str, scene: SceneDoc, cs: dsl.ConstraintSet,
                batch: Optional[Sequence[Rollout]], episode: int = 0) -> PipelineRun:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    run = PipelineRun()
    timing: Dict[str, float] = {}
    out = EpisodeOutcome(cfg.task, variant, episode, False, None, timing=timing)
    run.outcome = out
    clock = time.perf_counter
    try:
        if variant == "constraints_only":
            t0 = clock()
            _, run.optimization = constraint_only_plan(scene, cs, cfg)
            timing["optimize"] = clock() - t0
            run.trajectory = run.optimization.trajectory
        else:
            t0 = clock()
            if variant == "video_only":
                index = 0
                lifted = lift_to_3d(batch[0], scene)
            else:
                run.selection = select(batch, scene, cs, cfg.world_model(), cfg.selection)
                index = run.selection.selected_index
                rec = run.selection.records[index]
                lifted = rec.lifted if rec.lifted is not None else lift_to_3d(batch[index], scene)
                out.fallback = run.selection.fallback
            out.selected_index = index
            out.selected_mode = batch[index].injected_mode
            timing["select"] = clock() - t0
            t0 = clock()
            run.retarget = retarget(lifted, scene)
            timing["retarget"] = clock() - t0
            run.trajectory = run.retarget.initial_trajectory
            if variant == "plus_opt":
                t0 = clock()
                run.optimization = solve(OptProblem(run.trajectory, cs, scene, lam=cfg.lam,
                                                    rot_weight=cfg.rot_weight, params=cfg.solver))
                timing["optimize"] = clock() - t0
                run.trajectory = run.optimization.trajectory
    except CalibrationError:
        out.failure = "calibration_error"
        return run
    except (LiftError, GeometryError, RetargetError):
        out.failure = "retarget_residual" if out.selected_mode in (None, "none") else "selection_miss"
        return run
    except SelectionError:
        out.failure = "selection_miss"
        return run
    out.success, out.violation = evaluate_success(run.trajectory, cs, scene, cfg.success_threshold,
                                                  cfg.goal_tolerance)
    if not out.success:
        out.failure = _classify(run, batch, variant)
    return run


def build_report(cfg: RunConfig, run: PipelineRun) -> ReportDoc:
    rep = ReportDoc(task=cfg.task)
    if run.selection is not None:
        rep.records = [r.to_record() for r in run.selection.records]
        rep.selected_index = run.selection.selected_index
        rep.fallback = run.selection.fallback
        rec = run.selection.records[run.selection.selected_index]
        if rec.lifted is not None and rec.lifted.calibration is not None:
            rep.calibration = {"alpha": rec.lifted.calibration.alpha, "beta": rec.lifted.calibration.beta}
    if run.retarget is not None:
        rep.retarget = {"residuals": [float(r) for r in run.retarget.residuals],
                        "max_residual": float(np.max(run.retarget.residuals))}
    if run.optimization is not None:
        rep.optimization = optimization_json(run.optimization)
    if run.trajectory is not None:
        rep.trajectory = trajectory_to_tensor(run.trajectory).tolist()
    if run.outcome is not None:
        o = run.outcome.to_dict()
        o.pop("timing")  # wall-clock times would break byte-identical reports
        rep.outcome = o
    return rep


def optimization_json(res: OptResult) -> dict:
    return {"trace": [{"iteration": r.iteration, "objective": r.objective, "constraint_term": r.constraint,
                       "fidelity_term": r.fidelity, "max_violation": r.max_violation} for r in res.trace],
            "converged": res.converged, "iterations": res.iterations}


def run_pipeline(cfg: RunConfig, episode: int = 0) -> Tuple[PipelineRun, ReportDoc]:
    scene, cs = load_task(cfg)
    batch = generate_batch(cfg, scene, episode)
    run = run_variant(cfg, "plus_opt", scene, cs, batch, episode)
    return run, build_report(cfg, run)


# ---------------------------------------------------------------------------
# ablation


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> Tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return lo, hi


def run_episode(cfg: RunConfig, task: str, episode: int, variants: Sequence[str]) -> List[EpisodeOutcome]:
    """All requested variants on one episode; rollout variants share the same batch."""
    cfg = replace(cfg, task=task, scene_path=None, constraints_path=None)
    scene, cs = load_task(cfg)
    batch = generate_batch(cfg, scene, episode) if any(v != "constraints_only" for v in variants) else None
    return [run_variant(cfg, v, scene, cs, batch, episode).outcome for v in variants]


def _episode_job(args):
    return run_episode(*args)


@dataclass
class AblationTable:
    variants: Tuple[str, ...]
    tasks: Tuple[str, ...]
    episodes: int
    outcomes: List[EpisodeOutcome]

    def successes(self, variant: str, task: str) -> int:
        return sum(o.success for o in self.outcomes if o.variant == variant and o.task == task)

    def rate(self, variant: str, task: Optional[str] = None) -> float:
        tasks = self.tasks if task is None else (task,)
        return sum(self.successes(variant, t) for t in tasks) / (self.episodes * len(tasks))

    def failure_breakdown(self, variant: Optional[str] = None) -> Dict[str, int]:
        counts = {c: 0 for c in FAILURE_CATEGORIES}
        for o in self.outcomes:
            if not o.success and (variant is None or o.variant == variant):
                counts[o.failure or "constraint_violation"] += 1
        return counts

    def rows(self) -> List[dict]:
        out = []
        for v in self.variants:
            row = {"variant": v}
            for t in self.tasks:
                k = self.successes(v, t)
                lo, hi = wilson_interval(k, self.episodes)
                row[t] = {"successes": k, "rate": k / self.episodes, "ci95": [lo, hi]}
            total = sum(self.successes(v, t) for t in self.tasks)
            n = self.episodes * len(self.tasks)
            lo, hi = wilson_interval(total, n)
            row["average"] = {"successes": total, "rate": total / n, "ci95": [lo, hi]}
            out.append(row)
        return out

    def to_json(self) -> dict:
        return {"episodes": self.episodes, "tasks": list(self.tasks), "variants": list(self.variants),
                "table": self.rows(),
                "failures": {v: self.failure_breakdown(v) for v in self.variants},
                "outcomes": [{k: v for k, v in o.to_dict().items() if k != "timing"} for o in self.outcomes]}

    def to_csv(self) -> str:
        head = ["variant"] + [f"{t}_rate" for t in self.tasks] + ["average_rate", "average_ci95_lo",
                                                                  "average_ci95_hi"]
        lines = [",".join(head)]
        for row in self.rows():
            cells = [row["variant"]] + [f"{row[t]['rate']:.4f}" for t in self.tasks]
            avg = row["average"]
            cells += [f"{avg['rate']:.4f}", f"{avg['ci95'][0]:.4f}", f"{avg['ci95'][1]:.4f}"]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def ablate(cfg: RunConfig, variants: Sequence[str] = VARIANTS, episodes: int = 100,
           tasks: Sequence[str] = TASK_NAMES, jobs: int = 1) -> AblationTable:
    if episodes < 1:
        raise ConfigError("episodes must be at least 1")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    jobs_list = [(cfg, t, e, tuple(variants)) for t in tasks for e in range(episodes)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_episode_job, jobs_list, chunksize=4))
    else:
        results = [_episode_job(j) for j in jobs_list]
    outcomes = [o for group in results for o in group]
    return AblationTable(tuple(variants), tuple(tasks), episodes, outcomes)
