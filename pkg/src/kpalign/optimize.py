"""Penalty-objective refinement of an end-effector trajectory.

The objective is the squared-hinge constraint cost of the keypoints the
trajectory induces, plus ``lam`` times a fidelity term pulling each pose
toward the retargeted initialisation.  Decision variables are the per-frame
translation and rotation vector, each mapped affinely onto [0, 1].

With no constraint reading the previous frame the objective is a sum of
independent per-frame terms, so every frame is solved as its own 6-variable
block (all blocks advance together, vectorised).  Otherwise the whole
trajectory is one block and gradients use a two-colouring of the frames.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import dsl
from .geometry import Pose, matrix_to_rotvec, rotvec_to_matrix
from .tensorio.documents import SceneDoc

ROT_LO, ROT_HI = -math.pi, math.pi
MARGIN = 0.01


class OptimizationError(ValueError):
    pass


class BoundsError(OptimizationError):
    pass


@dataclass(frozen=True)
class SolverParams:
    max_iters: int = 60
    grad_step: float = 1e-6
    tol_obj: float = 1e-12
    tol_violation: float = 1e-9
    tol_grad: float = 1e-8
    line_search_tries: int = 30
    restarts: int = 0
    restart_seed: int = 0

    def __post_init__(self):
        if self.max_iters < 0 or self.grad_step <= 0 or self.line_search_tries < 1:
            raise OptimizationError("invalid solver parameters")


def _check_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    if b.shape != (2, 3) or not np.all(np.isfinite(b)) or not np.all(b[1] > b[0]):
        raise BoundsError(f"bounds must be a finite, non-degenerate 2 x 3 box, got {b.tolist()}")
    return b


@dataclass(eq=False)
class OptProblem:
    initial_trajectory: Sequence[Pose]
    constraints: dsl.ConstraintSet
    scene: SceneDoc
    lam: float = 1.0
    bounds: Optional[np.ndarray] = None
    rot_weight: float = 1.0
    params: SolverParams = field(default_factory=SolverParams)

    def __post_init__(self):
        if not self.lam >= 0 or not self.rot_weight >= 0:
            raise OptimizationError("lambda and rotation weight must be non-negative")
        if len(self.initial_trajectory) < 1:
            raise OptimizationError("empty initial trajectory")
        self.initial_trajectory = list(self.initial_trajectory)
        self.bounds = _check_bounds(self.scene.workspace_aabb if self.bounds is None else self.bounds)
        if not self.constraints.bound:
            self.constraints = dsl.bind(self.constraints, self.scene)

    @property
    def T(self) -> int:
        return len(self.initial_trajectory)


@dataclass
class TraceRow:
    iteration: int
    objective: float
    constraint: float
    fidelity: float
    max_violation: float


@dataclass(eq=False)
class OptResult:
    trajectory: List[Pose]
    trace: List[TraceRow]
    converged: bool
    iterations: int

    @property
    def objective(self) -> float:
        return self.trace[-1].objective

    @property
    def violation(self) -> float:
        return self.trace[-1].constraint


# ---------------------------------------------------------------------------
# variable normalisation


def encode_variables(traj: Sequence[Pose], bounds) -> np.ndarray:
    """Flat vector in [0, 1]^(6T): per frame (tx, ty, tz, rx, ry, rz)."""
    b = _check_bounds(bounds)
    lo, width = b[0], b[1] - b[0]
    rows = []
    for i, p in enumerate(traj):
        x = (p.translation - lo) / width
        if np.any(x < -MARGIN) or np.any(x > 1 + MARGIN):
            raise BoundsError(f"pose {i} translation {p.translation.tolist()} lies outside the workspace")
        if np.any(x < 0) or np.any(x > 1):
            warnings.warn(f"pose {i} clamped into the workspace", RuntimeWarning, stacklevel=2)
            x = np.clip(x, 0.0, 1.0)
        r = (matrix_to_rotvec(p.rotation) - ROT_LO) / (ROT_HI - ROT_LO)
        rows.append(np.concatenate([x, np.clip(r, 0.0, 1.0)]))
    return np.concatenate(rows)


def _decode_arrays(z: np.ndarray, bounds: np.ndarray):
    """(..., T, 6) normalised -> translations (..., T, 3), rotvecs (..., T, 3)."""
    t = bounds[0] + z[..., :3] * (bounds[1] - bounds[0])
    r = ROT_LO + z[..., 3:] * (ROT_HI - ROT_LO)
    return t, r


def decode_variables(vars_, bounds) -> List[Pose]:
    b = _check_bounds(bounds)
    z = np.asarray(vars_, dtype=float).reshape(-1, 6)
    t, r = _decode_arrays(z, b)
    return [Pose(rotvec_to_matrix(ri), ti) for ti, ri in zip(t, r)]


# ---------------------------------------------------------------------------
# objective


class _Evaluator:
    """Per-frame constraint and fidelity terms for batches of normalised trajectories."""

    def __init__(self, prob: OptProblem):
        self.prob = prob
        scene = prob.scene
        self.K0 = scene.keypoints
        self.sl = scene.grasped_slice
        G = scene.grasp_transform
        self.G_R, self.G_t = G.rotation, G.translation
        self.T = prob.T
        # fidelity is measured from the encoded start so that z == z0 gives exactly zero
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            self.z0 = encode_variables(prob.initial_trajectory, prob.bounds).reshape(self.T, 6)
        self.scale = np.concatenate([prob.bounds[1] - prob.bounds[0], np.full(3, ROT_HI - ROT_LO)])
        self.weight = np.array([1.0, 1.0, 1.0] + [prob.rot_weight] * 3)
        self.ranges = [c.frame_range(self.T) for c in prob.constraints]
        self.uses_previous = prob.constraints.uses_previous

    def keypoints(self, z: np.ndarray) -> np.ndarray:
        t, r = _decode_arrays(z, self.prob.bounds)
        R = rotvec_to_matrix(r)
        R_obj = R @ self.G_R.T
        t_obj = t - np.einsum("...ij,j->...i", R_obj, self.G_t)
        kps = np.broadcast_to(self.K0, z.shape[:-1] + self.K0.shape).copy()
        kps[..., self.sl, :] = np.einsum("...ij,kj->...ki", R_obj, self.K0[self.sl]) + t_obj[..., None, :]
        return kps

    def terms(self, z: np.ndarray):
        """z: (..., T, 6) -> hinge cost, fidelity, max violation, each (..., T)."""
        kps = self.keypoints(z)
        prev = np.concatenate([kps[..., :1, :, :], kps[..., :-1, :, :]], axis=-3)
        hinge = np.zeros(z.shape[:-1])
        worst = np.zeros(z.shape[:-1])
        for c, (lo, hi) in zip(self.prob.constraints, self.ranges):
            if lo > hi:
                continue
            v = c.expr.evaluate_batch(kps[..., lo:hi + 1, :, :], prev[..., lo:hi + 1, :, :])
            h = np.maximum(v, 0.0)
            hinge[..., lo:hi + 1] += h * h
            worst[..., lo:hi + 1] = np.maximum(worst[..., lo:hi + 1], h)
        fid = np.sum(self.weight * ((z - self.z0) * self.scale) ** 2, axis=-1)
        return hinge, fid, worst

    def frame_objective(self, z: np.ndarray) -> np.ndarray:
        hinge, fid, _ = self.terms(z)
        return hinge + self.prob.lam * fid


def objective(vars_, prob: OptProblem, with_gradient: bool = False):
    """Total penalty objective at a flat normalised vector (optionally with its gradient)."""
    ev = _Evaluator(prob)
    z = np.asarray(vars_, dtype=float).reshape(prob.T, 6)
    f = float(np.sum(ev.frame_objective(z)))
    if not with_gradient:
        return f
    return f, _gradient(ev, z, prob.params.grad_step).reshape(-1)


def _gradient(ev: _Evaluator, z: np.ndarray, h: float) -> np.ndarray:
    """Central differences in normalised coordinates, one-sided at the box faces."""
    T = z.shape[0]
    colours = [np.arange(T) % 2 == k for k in range(2)] if ev.uses_previous else [np.ones(T, bool)]
    batch, steps = [], []
    for mask in colours:
        for j in range(6):
            zp, zm = z.copy(), z.copy()
            zp[mask, j] = np.minimum(z[mask, j] + h, 1.0)
            zm[mask, j] = np.maximum(z[mask, j] - h, 0.0)
            batch += [zp, zm]
            steps.append(zp[:, j] - zm[:, j])
    f = ev.frame_objective(np.stack(batch))
    g = np.zeros_like(z)
    for k, mask in enumerate(colours):
        for j in range(6):
            idx = k * 6 + j
            df = f[2 * idx] - f[2 * idx + 1]
            if ev.uses_previous:
                # frame t's variables also enter frame t + 1's term
                df = df + np.concatenate([df[1:], [0.0]])
            step = steps[idx]
            safe = np.where(step > 0, step, 1.0)
            g[mask, j] = np.where(step > 0, df / safe, 0.0)[mask]
    return g


# ---------------------------------------------------------------------------
# solver


def _projected(g: np.ndarray, z: np.ndarray) -> np.ndarray:
    pg = g.copy()
    pg[(z <= 0.0) & (g > 0)] = 0.0
    pg[(z >= 1.0) & (g < 0)] = 0.0
    return pg


def _block_view(a: np.ndarray, separable: bool) -> np.ndarray:
    return a if separable else a.reshape(1, -1)


def _run(ev: _Evaluator, z0: np.ndarray, params: SolverParams, lam: float):
    separable = not ev.uses_previous
    T = z0.shape[0]
    B, n = (T, 6) if separable else (1, 6 * T)

    def block_f(z):
        f = ev.frame_objective(z)
        return f if separable else f.sum(axis=-1, keepdims=True)

    def record(it, z):
        hinge, fid, worst = ev.terms(z)
        return TraceRow(it, float(np.sum(hinge + lam * fid)), float(np.sum(hinge)),
                        float(np.sum(fid)), float(np.max(worst)))

    z = z0.copy()
    f = block_f(z)
    g = _block_view(_gradient(ev, z, params.grad_step), separable)
    H = np.broadcast_to(np.eye(n), (B, n, n)).copy()
    active = np.ones(B, dtype=bool)
    stalled = np.zeros(B, dtype=bool)
    trace = [record(0, z)]
    it = 0
    while it < params.max_iters and active.any():
        if trace[-1].max_violation < params.tol_violation and lam == 0.0:
            break
        zb = _block_view(z, separable)
        pg = _projected(g, zb)
        gnorm = np.linalg.norm(pg, axis=1)
        active &= gnorm > params.tol_grad
        if not active.any():
            break
        d = -np.einsum("bij,bj->bi", H, g)
        d[(zb <= 0.0) & (d < 0)] = 0.0
        d[(zb >= 1.0) & (d > 0)] = 0.0
        bad = np.einsum("bi,bi->b", d, g) >= 0
        if bad.any():
            H[bad] = np.eye(n)
            d[bad] = -pg[bad]
        a = np.ones(B)
        todo = active.copy()
        z_new = zb.copy()
        f_new = f.copy()
        for _ in range(params.line_search_tries):
            trial = zb.copy()
            trial[todo] = np.clip(zb[todo] + a[todo, None] * d[todo], 0.0, 1.0)
            ft = block_f(trial.reshape(z.shape))
            ok = todo & (ft <= f + 1e-4 * np.einsum("bi,bi->b", g, trial - zb)) & (ft <= f)
            z_new[ok] = trial[ok]
            f_new[ok] = ft[ok]
            todo &= ~ok
            if not todo.any():
                break
            a[todo] *= 0.5
        failed = todo
        stalled |= failed
        active &= ~failed
        moved = active.copy()
        it += 1
        improvement = f - f_new
        z = z_new.reshape(z.shape)
        g_new = _block_view(_gradient(ev, z, params.grad_step), separable)
        s = z_new - zb
        y = g_new - g
        sy = np.einsum("bi,bi->b", s, y)
        upd = moved & (sy > 1e-16)
        for b in np.flatnonzero(upd):
            rho = 1.0 / sy[b]
            V = np.eye(n) - rho * np.outer(s[b], y[b])
            H[b] = V @ H[b] @ V.T + rho * np.outer(s[b], s[b])
        f, g = f_new, g_new
        active &= ~(moved & (improvement <= params.tol_obj * np.maximum(1.0, np.abs(f))))
        trace.append(record(it, z))
    converged = not stalled.any() or trace[-1].max_violation < params.tol_violation
    return z, trace, converged, it


def solve(prob: OptProblem) -> OptResult:
    """Projected quasi-Newton descent from the initial trajectory."""
    ev = _Evaluator(prob)
    params = prob.params
    z0 = encode_variables(prob.initial_trajectory, prob.bounds).reshape(prob.T, 6)
    hinge0, _, _ = ev.terms(z0)
    if float(np.sum(hinge0)) == 0.0:
        fid0 = float(np.sum(ev.terms(z0)[1]))
        return OptResult(list(prob.initial_trajectory),
                         [TraceRow(0, prob.lam * fid0, 0.0, fid0, 0.0)], True, 0)
    best = _run(ev, z0, params, prob.lam)
    if params.restarts:
        rng = np.random.default_rng(params.restart_seed)
        for _ in range(params.restarts):
            start = np.clip(z0 + rng.uniform(-MARGIN, MARGIN, z0.shape), 0.0, 1.0)
            cand = _run(ev, start, params, prob.lam)
            if cand[1][-1].objective < best[1][-1].objective:
                best = cand
    z, trace, converged, it = best
    return OptResult(decode_variables(z, prob.bounds), trace, converged, it)


def write_trace_csv(result: OptResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "constraint", "fidelity", "max_violation"])
        for row in result.trace:
            w.writerow([row.iteration, repr(row.objective), repr(row.constraint),
                        repr(row.fidelity), repr(row.max_violation)])
