"""Lifting rollout tracks to 3-D and lazy plausibility-then-constraint selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from . import dsl
from .geometry import DepthCalibration, GeometryError, back_project, calibrate_depth
from .rollout import LatentWorldModel, Rollout, visual_plausibility
from .tensorio.documents import SceneDoc

FALLBACKS = ("best_spatial", "error")


class LiftError(ValueError):
    pass


class SelectionError(RuntimeError):
    """No candidate passed the spatial threshold and the fallback is strict."""

    def __init__(self, message: str, records: Sequence["ScoredRollout"] = ()):
        super().__init__(message)
        self.records = list(records)


@dataclass(eq=False)
class KeypointTrajectory:
    """Lifted T x K x 3 keypoints plus the visibility they were lifted under."""

    points: np.ndarray
    visibility: np.ndarray
    calibration: Optional[DepthCalibration] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise LiftError(f"expected T x K x 3 points, got {self.points.shape}")
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.visibility.shape != self.points.shape[:2]:
            raise LiftError("visibility shape does not match points")

    @classmethod
    def fully_visible(cls, points) -> "KeypointTrajectory":
        points = np.asarray(points, dtype=float)
        return cls(points, np.ones(points.shape[:2], dtype=bool))

    @property
    def T(self) -> int:
        return self.points.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)


def lift_to_3d(v: Rollout, scene: SceneDoc) -> KeypointTrajectory:
    """Calibrate the rollout's depth against the scene and back-project its tracks.

    Points that are not visible are frozen at their last visible 3-D
    position, or at the scene's frame-1 keypoint if never seen.
    """
    if scene.depth is None:
        raise LiftError("scene has no reference depth")
    if v.depth_first.shape != scene.depth.shape:
        raise LiftError(f"rollout depth {v.depth_first.shape} does not match scene depth {scene.depth.shape}")
    if v.K != scene.num_keypoints:
        raise LiftError(f"rollout tracks K={v.K} keypoints, scene has {scene.num_keypoints}")
    calib = calibrate_depth(v.depth_first, scene.depth)
    depth = calib.apply(v.depth)
    vis = v.visibility
    dead = np.flatnonzero(~vis.any(axis=1))
    if dead.size:
        raise LiftError(f"no visible keypoints at frame {int(dead[0]) + 1}")
    safe = np.where(vis, depth, 1.0)
    if np.any(safe <= 0):
        t = int(np.argwhere(safe <= 0)[0, 0])
        raise LiftError(f"calibrated depth is non-positive at frame {t + 1}")
    pts = back_project(v.tracks, safe, scene.intrinsics, check_bounds=False)
    last = scene.keypoints.copy()
    for t in range(v.T):
        last = np.where(vis[t][:, None], pts[t], last)
        pts[t] = last
    return KeypointTrajectory(pts, vis, calib)


def spatial_score(v: Rollout, scene: SceneDoc, cs: dsl.ConstraintSet) -> float:
    return dsl.aggregate_cost(cs, lift_to_3d(v, scene).points)


@dataclass
class ScoredRollout:
    index: int
    s_vis: float
    s_spatial: Optional[float] = None
    lifted: Optional[KeypointTrajectory] = None
    accepted: bool = False
    error: Optional[str] = None

    @property
    def evaluated(self) -> bool:
        return self.s_spatial is not None

    def to_record(self) -> dict:
        rec = {"index": self.index, "s_vis": float(self.s_vis), "accepted": self.accepted}
        if self.s_spatial is not None:
            rec["s_spatial"] = float(self.s_spatial) if math.isfinite(self.s_spatial) else None
        if self.error:
            rec["error"] = self.error
        return rec


@dataclass(frozen=True)
class SelectionConfig:
    epsilon: float = 1e-2
    max_evaluated: Optional[int] = None
    fallback: str = "best_spatial"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.max_evaluated is not None and self.max_evaluated < 1:
            raise ValueError("max_evaluated must be at least 1")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")


class SelectionResult(NamedTuple):
    records: List[ScoredRollout]
    selected_index: int
    fallback: bool

    @property
    def evaluations(self) -> int:
        return sum(r.evaluated for r in self.records)


def visit_order(s_vis: Sequence[float]) -> List[int]:
    """Ascending plausibility score, ties broken by original index."""
    return sorted(range(len(s_vis)), key=lambda i: (s_vis[i], i))


def select_from_scores(s_vis: Sequence[float], spatial: Callable[[int], "float | tuple"],
                       cfg: SelectionConfig = SelectionConfig()) -> SelectionResult:
    """Sequential acceptance over precomputed plausibility scores.

    ``spatial(i)`` returns either a score or a ``(score, lifted)`` pair and
    is called lazily, in visit order, until a candidate passes.
    """
    if len(s_vis) == 0:
        raise SelectionError("empty batch")
    records = [ScoredRollout(i, float(s)) for i, s in enumerate(s_vis)]
    budget = len(records) if cfg.max_evaluated is None else min(cfg.max_evaluated, len(records))
    for i in visit_order(s_vis)[:budget]:
        rec = records[i]
        try:
            out = spatial(i)
        except (GeometryError, LiftError, dsl.EvaluationError) as exc:
            rec.s_spatial, rec.error = math.inf, f"{type(exc).__name__}: {exc}"
            continue
        rec.s_spatial, rec.lifted = (float(out[0]), out[1]) if isinstance(out, tuple) else (float(out), None)
        if rec.s_spatial <= cfg.epsilon:
            rec.accepted = True
            return SelectionResult(records, i, False)
    evaluated = [r for r in records if r.evaluated]
    if cfg.fallback == "error":
        listing = ", ".join(f"{r.index}:{r.s_spatial:.4g}" for r in evaluated)
        raise SelectionError(f"no candidate within epsilon={cfg.epsilon}; evaluated {listing}", records)
    rank = {i: k for k, i in enumerate(visit_order(s_vis))}
    best = min(evaluated, key=lambda r: (r.s_spatial, rank[r.index]))
    best.accepted = True
    return SelectionResult(records, best.index, True)


def select(batch: Sequence[Rollout], scene: SceneDoc, cs: dsl.ConstraintSet, wm: LatentWorldModel,
           cfg: SelectionConfig = SelectionConfig()) -> SelectionResult:
    s_vis = [visual_plausibility(v, wm) for v in batch]

    def spatial(i):
        lifted = lift_to_3d(batch[i], scene)
        return dsl.aggregate_cost(cs, lifted.points), lifted

    return select_from_scores(s_vis, spatial, cfg)
