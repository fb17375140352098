"""Candidate rollouts: synthetic generation, on-disk layout, and latent plausibility scoring.

A rollout stands in for a generated video.  Frames are abstracted to
feature vectors (flattened keypoints plus mean depth), which is all the
latent world-model score needs; tracks and per-keypoint estimated depth
feed the 3-D lifting in :mod:`kpalign.selection`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Pose, apply, compose, project
from .tasks import TaskTemplate, Waypoint, get_template, motion_pose
from .tensorio.documents import SceneDoc
from .tensorio.eatn import load_tensor, save_tensor

MODES = ("none", "deformation", "disappearance", "misplacement", "wrong_object")
HALLUCINATED_MODES = MODES[1:]
DEFAULT_MAGNITUDE = {"none": 0.0, "deformation": 0.02, "disappearance": 0.0,
                     "misplacement": 0.08, "wrong_object": 0.0}
MIN_DEPTH = 0.05


class RolloutError(ValueError):
    pass


@dataclass(frozen=True)
class HallucinationSpec:
    mode: str = "none"
    magnitude: float = 0.0
    onset_frac: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise RolloutError(f"unknown hallucination mode {self.mode!r}")
        if not self.magnitude >= 0:
            raise RolloutError("magnitude must be non-negative")
        if not 0.0 <= self.onset_frac <= 1.0:
            raise RolloutError("onset_frac must lie in [0, 1]")

    def onset_index(self, T: int) -> int:
        return min(int(math.ceil(self.onset_frac * T - 1e-9)), T - 1)


@dataclass(frozen=True)
class NoiseModel:
    track_sigma_px: float = 0.5
    depth_alpha: float = 1.5
    depth_beta: float = 0.2
    depth_sigma: float = 0.002

    @classmethod
    def zero(cls, alpha: float = 1.0, beta: float = 0.0) -> "NoiseModel":
        return cls(0.0, alpha, beta, 0.0)


@dataclass(eq=False)
class Rollout:
    frames: np.ndarray        # T x F latent features, F = 3K + 1
    tracks: np.ndarray        # T x K x 2 pixels
    depth: np.ndarray         # T x K estimated (affine-distorted) depth at each track
    depth_first: np.ndarray   # H x W estimated depth of the first frame
    visibility: np.ndarray    # T x K bool
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        T, K = self.visibility.shape
        if self.frames.shape != (T, 3 * K + 1):
            raise RolloutError(f"frames shape {self.frames.shape} inconsistent with T={T}, K={K}")
        if self.tracks.shape != (T, K, 2) or self.depth.shape != (T, K):
            raise RolloutError("tracks/depth shapes inconsistent with visibility")
        self.visibility = self.visibility.astype(bool)

    @property
    def T(self) -> int:
        return self.visibility.shape[0]

    @property
    def K(self) -> int:
        return self.visibility.shape[1]

    @property
    def injected_mode(self) -> str:
        return self.meta.get("injected_mode", "none")


@dataclass(eq=False)
class GroundTruth:
    keypoints: np.ndarray         # T x K x 3, what the rollout depicts
    object_poses: List[Pose]      # nominal rigid motion of the grasped entity
    ee_poses: List[Pose]


# ---------------------------------------------------------------------------
# generation


def _jittered(waypoints: Sequence[Waypoint], jitter: float, goal_jitter: float,
              rng: np.random.Generator) -> List[Waypoint]:
    """Perturb intermediate waypoints, and shift the final (held) pose by one common offset."""
    wps = list(waypoints)
    final = wps[-1]
    offset = rng.normal(0.0, goal_jitter, 3) if goal_jitter > 0 else np.zeros(3)
    out = [wps[0]]
    for w in wps[1:]:
        t = np.asarray(w.translation, dtype=float)
        if w.translation == final.translation and w.rotvec == final.rotvec:
            t = t + offset
        elif jitter > 0:
            t = t + rng.normal(0.0, jitter, 3)
        out.append(Waypoint(w.u, tuple(t.tolist()), w.rotvec))
    return out


def _frame_features(kps: np.ndarray, present: np.ndarray) -> np.ndarray:
    T, K, _ = kps.shape
    shown = np.where(present[..., None], kps, 0.0)
    counts = np.maximum(present.sum(axis=1), 1)
    mean_depth = np.where(present, kps[..., 2], 0.0).sum(axis=1) / counts
    return np.concatenate([shown.reshape(T, 3 * K), mean_depth[:, None]], axis=1)


def generate_rollout(scene: SceneDoc, task_template, spec: HallucinationSpec = HallucinationSpec(),
                     noise: NoiseModel = NoiseModel(), T: int = 24, seed: int = 0,
                     jitter: Optional[float] = None,
                     goal_jitter: Optional[float] = None) -> Tuple[Rollout, GroundTruth]:
    """Synthesize one candidate rollout and the keypoint motion it depicts."""
    tpl = get_template(task_template) if isinstance(task_template, str) else task_template
    if T < 8:
        raise RolloutError("rollouts need at least 8 frames")
    rng = np.random.default_rng(seed)
    hrng = np.random.default_rng(spec.seed)
    K0 = scene.keypoints
    K = K0.shape[0]
    gs = scene.grasped_slice
    wps = _jittered(tpl.waypoints, tpl.jitter if jitter is None else jitter,
                    tpl.goal_jitter if goal_jitter is None else goal_jitter, rng)
    us = np.linspace(0.0, 1.0, T)
    obj_poses = [motion_pose(tpl.pivot, wps, float(u)) for u in us]
    obj_poses[0] = Pose.identity()

    kps = np.repeat(K0[None], T, axis=0)
    for i, P in enumerate(obj_poses):
        kps[i, gs] = apply(P, K0[gs])
    present = np.ones((T, K), dtype=bool)
    o = spec.onset_index(T)
    mode = spec.mode

    if mode == "deformation":
        n = gs.stop - gs.start
        steps = hrng.normal(0.0, spec.magnitude / math.sqrt(3.0), (T, n, 3))
        steps[: o] = 0.0
        kps[:, gs] += np.cumsum(steps, axis=0)
    elif mode == "misplacement":
        phi = hrng.uniform(0.0, 2.0 * math.pi)
        direction = np.array([math.cos(phi), math.sin(phi), 0.0])
        span = max(T - 1 - o, 1)
        for i in range(o, T):
            s = float(np.clip((i - o) / span, 0.0, 1.0))
            kps[i, gs] += spec.magnitude * (s * s * (3 - 2 * s)) * direction
    elif mode == "wrong_object":
        others = [e.id for e in scene.entities if e.id != scene.grasped_entity]
        if not others:
            raise RolloutError("wrong_object needs a non-grasped entity")
        victim = scene.entity_slice(others[int(hrng.integers(len(others)))])
        pivot = np.asarray(tpl.pivot, dtype=float)
        ref = obj_poses[o]
        centroid = K0[victim].mean(axis=0)
        for i in range(o, T):
            P = obj_poses[i]
            shift = apply(P, pivot) - apply(ref, pivot)
            R = P.rotation @ ref.rotation.T
            kps[i, victim] = (K0[victim] - centroid) @ R.T + centroid + shift
            kps[i, gs] = apply(ref, K0[gs])
    elif mode == "disappearance":
        present[o:, gs] = False

    if np.any(kps[..., 2] <= MIN_DEPTH):
        raise RolloutError("hallucination pushes keypoints behind the camera")

    intr = scene.intrinsics
    tracks = project(kps, intr)
    if noise.track_sigma_px > 0:
        tracks = tracks + rng.normal(0.0, noise.track_sigma_px, tracks.shape)
    est = (kps[..., 2] - noise.depth_beta) / noise.depth_alpha
    if noise.depth_sigma > 0:
        est = est + rng.normal(0.0, noise.depth_sigma, est.shape)
    first = (scene.depth - noise.depth_beta) / noise.depth_alpha
    if noise.depth_sigma > 0:
        first = first + rng.normal(0.0, noise.depth_sigma, first.shape)

    visibility = present & intr.in_bounds(tracks)
    # lost tracks stay frozen at their last visible value
    for i in range(1, T):
        lost = ~present[i]
        tracks[i, lost] = tracks[i - 1, lost]
        est[i, lost] = est[i - 1, lost]

    frames = _frame_features(kps, present)
    ee = [compose(P, scene.grasp_transform) for P in obj_poses]
    meta = {"seed": int(seed), "injected_mode": mode, "magnitude": float(spec.magnitude),
            "onset_frac": float(spec.onset_frac), "hallucination_seed": int(spec.seed),
            "task": tpl.name, "depth_alpha": noise.depth_alpha, "depth_beta": noise.depth_beta}
    rollout = Rollout(frames, tracks, est, first, visibility, meta)
    return rollout, GroundTruth(kps, obj_poses, ee)


def sample_specs(n: int, rate: float, rng: np.random.Generator,
                 modes: Sequence[str] = HALLUCINATED_MODES,
                 magnitudes: Optional[Dict[str, float]] = None,
                 onset_range: Tuple[float, float] = (0.3, 0.7)) -> List[HallucinationSpec]:
    """Per-candidate hallucination draws for a batch of ``n`` rollouts."""
    if not 0.0 <= rate <= 1.0:
        raise RolloutError("hallucination rate must lie in [0, 1]")
    mags = dict(DEFAULT_MAGNITUDE)
    mags.update(magnitudes or {})
    specs = []
    for _ in range(n):
        hallucinate = rng.random() < rate
        mode = modes[int(rng.integers(len(modes)))] if hallucinate else "none"
        onset = float(rng.uniform(*onset_range))
        specs.append(HallucinationSpec(mode, mags[mode], onset, int(rng.integers(2**31))))
    return specs


# ---------------------------------------------------------------------------
# latent world model


class LatentWorldModel:
    """Interface: a frame encoder plus a latent forecaster.

    ``encode`` maps a window of frames to one latent vector; ``predict``
    maps ``context`` frames to the latent expected for the window that
    extends them by ``horizon`` frames.  A learned model can implement
    this interface directly.
    """

    context: int = 4
    horizon: int = 2
    stride: int = 1

    def encode(self, frames: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, context_frames: np.ndarray, horizon: int) -> np.ndarray:
        raise NotImplementedError


class ToyWorldModel(LatentWorldModel):
    """Seeded linear encoder with constant-velocity latent extrapolation."""

    def __init__(self, d: int = 32, seed: int = 0, context: int = 4, horizon: int = 2, stride: int = 1):
        if d < 4:
            raise RolloutError("latent dimension must be at least 4")
        if context < 2 or horizon < 1 or stride < 1:
            raise RolloutError("need context >= 2, horizon >= 1, stride >= 1")
        self.d = d
        self.seed = seed
        self.context = context
        self.horizon = horizon
        self.stride = stride
        self._maps: Dict[int, np.ndarray] = {}

    def projection(self, F: int) -> np.ndarray:
        """Fixed F x d map with orthonormal rows (F <= d) or columns (F > d)."""
        if F not in self._maps:
            rng = np.random.default_rng([self.seed, F])
            A = rng.normal(size=(max(F, self.d), min(F, self.d)))
            Q, R = np.linalg.qr(A)
            Q = Q * np.sign(np.diag(R))
            self._maps[F] = Q if F >= self.d else Q.T
        return self._maps[F]

    def _embed(self, frames: np.ndarray) -> np.ndarray:
        frames = np.atleast_2d(np.asarray(frames, dtype=float))
        return frames @ self.projection(frames.shape[1])

    def encode(self, frames: np.ndarray) -> np.ndarray:
        return self._embed(frames).mean(axis=0)

    def predict(self, context_frames: np.ndarray, horizon: int) -> np.ndarray:
        e = self._embed(context_frames)
        if e.shape[0] < 2:
            raise RolloutError("prediction needs at least two context frames")
        velocity = e[-1] - e[-2]
        future = e[-1] + velocity * np.arange(1, horizon + 1)[:, None]
        return np.concatenate([e, future], axis=0).mean(axis=0)


def anchor_set(T: int, context: int, horizon: int, stride: int) -> List[int]:
    """1-based anchors C, C + stride, ..., T - M."""
    return list(range(context, T - horizon + 1, stride))


def visual_plausibility(v, wm: LatentWorldModel) -> float:
    """Mean cosine discrepancy between forecast and encoded windows (lower is better)."""
    frames = v.frames if isinstance(v, Rollout) else np.asarray(v, dtype=float)
    T = frames.shape[0]
    C, M = wm.context, wm.horizon
    anchors = anchor_set(T, C, M, wm.stride)
    if not anchors:
        raise RolloutError(f"rollout of {T} frames is too short for context {C} + horizon {M}")
    total = 0.0
    for s in anchors:
        z_hat = wm.predict(frames[s - C:s], M)
        z = wm.encode(frames[s - C:s + M])
        denom = float(np.linalg.norm(z_hat) * np.linalg.norm(z))
        if denom == 0.0:
            total += 1.0
        else:
            cos = float(z_hat @ z) / denom
            total += 1.0 - min(1.0, max(-1.0, cos))
    return total / len(anchors)


# ---------------------------------------------------------------------------
# on-disk layout: rollout_{i}/frames.eatn, tracks.eatn, depth.eatn,
# depth_first.eatn, visibility.eatn, meta.json


def save_rollout(v: Rollout, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "frames.eatn", v.frames)
    save_tensor(d / "tracks.eatn", v.tracks)
    save_tensor(d / "depth.eatn", v.depth)
    save_tensor(d / "depth_first.eatn", v.depth_first)
    save_tensor(d / "visibility.eatn", v.visibility.astype(np.float32))
    (d / "meta.json").write_text(json.dumps(v.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def load_rollout(directory) -> Rollout:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RolloutError(f"cannot read rollout metadata in {d}: {exc}") from None
    vis = load_tensor(d / "visibility.eatn")
    return Rollout(frames=load_tensor(d / "frames.eatn").astype(float),
                   tracks=load_tensor(d / "tracks.eatn").astype(float),
                   depth=load_tensor(d / "depth.eatn").astype(float),
                   depth_first=load_tensor(d / "depth_first.eatn").astype(float),
                   visibility=vis > 0.5, meta=meta)


def rollout_dirs(root) -> List[Path]:
    root = Path(root)
    dirs = [p for p in root.iterdir() if p.is_dir() and p.name.startswith("rollout_")]
    return sorted(dirs, key=lambda p: int(p.name.split("_", 1)[1]))
