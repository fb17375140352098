"""Six synthetic manipulation archetypes: scenes, motion templates, constraints.

Coordinates are camera-frame metres from a top-down camera; the table
plane sits at depth ``TABLE_DEPTH`` so an object's height above the table
is ``TABLE_DEPTH - z``.  Every constraint carries a gain of ``GAIN`` so its
value reads in decimetres; that keeps the fidelity weight of the trajectory
objective from swamping the constraint term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dsl
from .geometry import Intrinsics, Pose, project, rotation_about, rotvec_to_matrix
from .tensorio.documents import Entity, SceneDoc

TASK_NAMES = ("stack", "press", "hammer", "place", "open", "pour")

TABLE_DEPTH = 1.0
FLOOR_DEPTH = 1.6
GAIN = 10.0
INTRINSICS = Intrinsics(fx=300.0, fy=300.0, cx=160.0, cy=120.0, width=320, height=240)
WORKSPACE = np.array([[-0.35, -0.28, 0.62], [0.35, 0.28, 1.0]])


def _pt(x: float, y: float, h: float) -> List[float]:
    """Point at table position (x, y) and height h above the table."""
    return [x, y, TABLE_DEPTH - h]


def box_top(cx: float, cy: float, h: float, half: float, yaw: float = 0.0) -> List[List[float]]:
    """Top-face centre followed by its four corners."""
    c, s = math.cos(yaw), math.sin(yaw)
    pts = [_pt(cx, cy, h)]
    for dx, dy in ((half, half), (-half, half), (-half, -half), (half, -half)):
        pts.append(_pt(cx + c * dx - s * dy, cy + s * dx + c * dy, h))
    return pts


# ---------------------------------------------------------------------------
# constraint expression helpers


def kp(i: int) -> str:
    return f"(kp {i})"


def gained(expr: str) -> str:
    return f"(mul {GAIN!r} {expr})"


def c3(x: float, y: float, z: float) -> str:
    return f"(const3 {float(x)!r} {float(y)!r} {float(z)!r})"


def hdiff(a: str, b: str) -> str:
    """Horizontal (x, y) part of a - b."""
    d = f"(vsub {a} {b})"
    return f"(vsub {d} (vscale (z {d}) {c3(0, 0, 1)}))"


def hdist(a: str, b: str) -> str:
    return f"(norm {hdiff(a, b)})"


def hbox(a: str, b: str) -> str:
    """Chebyshev horizontal distance max(|dx|, |dy|)."""
    d = f"(vsub {a} {b})"
    return f"(max (abs (x {d})) (abs (y {d})))"


def height_above(a: str, b: str) -> str:
    """Height of a above b (z grows downward)."""
    return f"(sub (z {b}) (z {a}))"


def tilt(a: str, b: str) -> str:
    """Vertical drop from a to b per unit length, i.e. sin of the a->b pitch."""
    return f"(div (sub (z {b}) (z {a})) (norm (vsub {b} {a})))"


def within(value: str, target: float, tol: float) -> str:
    return gained(f"(sub (abs (sub {value} {float(target)!r})) {float(tol)!r})")


def at_most(value: str, bound: float) -> str:
    return gained(f"(sub {value} {float(bound)!r})")


def at_least(value: str, bound: float) -> str:
    return gained(f"(sub {float(bound)!r} {value})")


def stays_near(index: int, point: Sequence[float], tol: float) -> str:
    return gained(f"(sub (norm (vsub {kp(index)} {c3(*point)})) {float(tol)!r})")


# ---------------------------------------------------------------------------
# templates


@dataclass(frozen=True)
class Waypoint:
    u: float
    translation: Tuple[float, float, float]
    rotvec: Tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TaskTemplate:
    name: str
    description: str
    entities: Tuple[Tuple[str, Tuple[Tuple[float, float, float], ...]], ...]
    grasped: str
    grasp_transform: Pose
    pivot: Tuple[float, float, float]
    waypoints: Tuple[Waypoint, ...]
    constraints: Tuple[Tuple[str, str, Tuple[float, float], str], ...]
    jitter: float = 0.008
    goal_jitter: float = 0.006

    def constraint_set(self) -> dsl.ConstraintSet:
        return dsl.ConstraintSet(tuple(dsl.Constraint(n, dsl.parse(e), w, d)
                                       for n, e, w, d in self.constraints))

    def object_pose(self, u: float, waypoints: Optional[Sequence[Waypoint]] = None) -> Pose:
        return motion_pose(self.pivot, waypoints or self.waypoints, u)


def ease(s):
    """Cubic ease-in/out on [0, 1]."""
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def motion_pose(pivot, waypoints: Sequence[Waypoint], u: float) -> Pose:
    """Rigid object pose (relative to frame 1) along an eased piecewise waypoint path."""
    from .geometry import matrix_to_rotvec

    u = float(np.clip(u, 0.0, 1.0))
    wps = list(waypoints)
    for i in range(len(wps) - 1):
        if u <= wps[i + 1].u or i == len(wps) - 2:
            a, b = wps[i], wps[i + 1]
            break
    s = float(ease((u - a.u) / (b.u - a.u)))
    d = (1 - s) * np.asarray(a.translation) + s * np.asarray(b.translation)
    Ra = rotvec_to_matrix(np.asarray(a.rotvec, dtype=float))
    Rb = rotvec_to_matrix(np.asarray(b.rotvec, dtype=float))
    R = Ra @ rotvec_to_matrix(s * matrix_to_rotvec(Ra.T @ Rb))
    p = np.asarray(pivot, dtype=float)
    return Pose(R, p + d - R @ p)


def _settle(waypoints, at: float = 0.82) -> Tuple[Waypoint, ...]:
    """Compress the motion into [0, at] and hold the final pose afterwards."""
    wps = [Waypoint(w.u * at, w.translation, w.rotvec) for w in waypoints]
    last = wps[-1]
    return tuple(wps) + (Waypoint(1.0, last.translation, last.rotvec),)


def _grasp(point, yaw: float) -> Pose:
    return Pose(rotation_about([0, 0, 1], yaw), point)


def _stack() -> TaskTemplate:
    green = box_top(-0.14, 0.06, 0.04, 0.02)
    red = box_top(0.10, -0.04, 0.05, 0.025)
    g, r = 0, 5
    cons = (
        ("lift_first", at_least(f"(sub {TABLE_DEPTH!r} (z {kp(g)}))", 0.12), (0.25, 0.35),
         "green block lifted clear of the table before carrying"),
        ("vertical_approach", at_most(hbox(kp(g), kp(r)), 0.015), (0.7, 1.0),
         "descend onto the red block from directly above"),
        ("align", at_most(hbox(kp(g), kp(r)), 0.006), (0.85, 1.0),
         "green block centred on the red block"),
        ("rest_on_top", within(height_above(kp(g), kp(r)), 0.04, 0.005), (0.85, 1.0),
         "green block resting on the red block"),
        ("red_static", stays_near(r, red[0], 0.01), (0.0, 1.0), "red block is not disturbed"),
    )
    return TaskTemplate(
        "stack", "place the green block on top of the red block",
        (("green_block", tuple(map(tuple, green))), ("red_block", tuple(map(tuple, red)))),
        "green_block", _grasp(green[0], 0.1), tuple(green[0]),
        _settle((Waypoint(0.0, (0, 0, 0)),
         Waypoint(0.3, (0.0, 0.0, -0.12)),
         Waypoint(0.7, (0.24, -0.10, -0.12), (0, 0, 0.25)),
         Waypoint(1.0, (0.24, -0.10, -0.05), (0, 0, 0.25)))),
        cons, goal_jitter=0.006)


def _press() -> TaskTemplate:
    arm = [_pt(-0.05, 0.0, 0.05), _pt(0.025, 0.0, 0.052), _pt(0.10, 0.0, 0.055),
           _pt(0.09, -0.012, 0.055), _pt(0.09, 0.012, 0.055)]
    base = [_pt(-0.05, 0.0, 0.015), _pt(0.025, 0.0, 0.015), _pt(0.10, 0.0, 0.015)]
    hinge, front, base_front = 0, 2, 7
    cons = (
        ("pressed", at_most(height_above(kp(front), kp(base_front)), 0.013), (0.9, 1.0),
         "stapler arm pressed down to the base"),
        ("no_crush", at_least(height_above(kp(front), kp(base_front)), 0.004), (0.0, 1.0),
         "arm never driven through the base"),
        ("hinge_fixed", stays_near(hinge, arm[hinge], 0.006), (0.0, 1.0),
         "arm rotates about its hinge"),
        ("press_vertical", at_most(hbox(kp(front), c3(*arm[front])), 0.012), (0.0, 1.0),
         "press straight down"),
        ("base_static", stays_near(base_front, base[2], 0.01), (0.0, 1.0), "base stays put"),
    )
    return TaskTemplate(
        "press", "press the stapler",
        (("stapler_arm", tuple(map(tuple, arm))), ("stapler_base", tuple(map(tuple, base)))),
        "stapler_arm", _grasp(_pt(0.08, 0.0, 0.06), 0.0), tuple(arm[hinge]),
        (Waypoint(0.0, (0, 0, 0)),
         Waypoint(0.35, (0, 0, 0), (0, -0.03, 0)),
         Waypoint(1.0, (0, 0, 0), (0, -0.2, 0))),
        cons, jitter=0.0, goal_jitter=0.003)


def _hammer() -> TaskTemplate:
    hammer = [_pt(-0.13, 0.10, 0.025), _pt(-0.20, 0.10, 0.02), _pt(-0.04, 0.10, 0.03),
              _pt(-0.04, 0.085, 0.03), _pt(-0.04, 0.115, 0.03)]
    block = box_top(0.12, -0.06, 0.05, 0.025)
    head, blk = 2, 5
    cons = (
        ("clear_table", at_least(f"(sub {TABLE_DEPTH!r} (z {kp(head)}))", 0.01), (0.0, 1.0),
         "hammer head never scrapes the table"),
        ("raised_before_strike", at_least(height_above(kp(head), kp(blk)), 0.06), (0.45, 0.6),
         "head raised above the block before the strike"),
        ("strike_aligned", at_most(hbox(kp(head), kp(blk)), 0.01), (0.9, 1.0),
         "head lands on the block centre"),
        ("strike_contact", within(height_above(kp(head), kp(blk)), 0.02, 0.005), (0.9, 1.0),
         "head in contact with the block top"),
        ("block_static", stays_near(blk, block[0], 0.01), (0.0, 0.85), "block untouched before the strike"),
    )
    return TaskTemplate(
        "hammer", "hammer the block",
        (("hammer", tuple(map(tuple, hammer))), ("block", tuple(map(tuple, block)))),
        "hammer", _grasp(hammer[0], 0.0), tuple(hammer[0]),
        _settle((Waypoint(0.0, (0, 0, 0)),
         Waypoint(0.3, (0.0, 0.0, -0.15)),
         Waypoint(0.65, (0.16, -0.16, -0.10), (0, 0.3, 0)),
         Waypoint(1.0, (0.16, -0.16, -0.04)))),
        cons, goal_jitter=0.006)


def _place() -> TaskTemplate:
    block = box_top(-0.20, 0.01, 0.04, 0.02)
    pad = [_pt(0.20, 0.01, 0.005), _pt(0.23, 0.01, 0.005), _pt(0.17, 0.01, 0.005)]
    bottle = [_pt(0.0, 0.0, 0.22), _pt(0.02, 0.0, 0.22), _pt(0.0, 0.02, 0.22)]
    b, p, bt = 0, 5, 8
    cons = (
        ("bottle_clearance", at_least(hdist(kp(b), kp(bt)), 0.08), (0.0, 1.0),
         "keep the block away from the water bottle"),
        ("keep_off_shelf", at_most(f"(y {kp(b)})", 0.065), (0.0, 1.0),
         "stay clear of the shelf edge behind the bottle"),
        ("carry_height", at_least(f"(sub {TABLE_DEPTH!r} (z {kp(b)}))", 0.06), (0.2, 0.65),
         "carry the block above the table"),
        ("on_target", at_most(hbox(kp(b), kp(p)), 0.008), (0.85, 1.0), "block centred on the target pad"),
        ("resting", within(height_above(kp(b), kp(p)), 0.04, 0.005), (0.9, 1.0),
         "block set down on the pad"),
        ("bottle_static", stays_near(bt, bottle[0], 0.01), (0.0, 1.0), "bottle neither moved nor tipped"),
        ("smooth_carry", at_most(f"(norm (vsub {kp(b)} (kpprev {b})))", 0.075), (0.0, 1.0),
         "no jumps: bounded block displacement between frames"),
    )
    return TaskTemplate(
        "place", "place the block on the pad without touching the bottle",
        (("block", tuple(map(tuple, block))), ("pad", tuple(map(tuple, pad))),
         ("bottle", tuple(map(tuple, bottle)))),
        "block", _grasp(block[0], 0.0), tuple(block[0]),
        _settle((Waypoint(0.0, (0, 0, 0)),
         Waypoint(0.25, (0.03, -0.05, -0.06)),
         Waypoint(0.5, (0.20, -0.13, -0.06)),
         Waypoint(0.75, (0.37, -0.05, -0.06)),
         Waypoint(1.0, (0.40, 0.0, -0.005)))),
        cons, goal_jitter=0.006)


def _open() -> TaskTemplate:
    lid = [_pt(0.0, 0.0, 0.10), _pt(0.05, 0.0, 0.09), _pt(-0.05, 0.0, 0.09),
           _pt(0.0, 0.05, 0.09), _pt(0.0, -0.05, 0.09)]
    box = [_pt(0.0, 0.0, 0.08), _pt(0.06, 0.0, 0.08), _pt(-0.06, 0.0, 0.08),
           _pt(0.0, 0.06, 0.08), _pt(0.0, -0.06, 0.08)]
    h, c = 0, 5
    target = (-0.18, 0.10)
    cons = (
        ("lift_vertical", at_most(hbox(kp(h), kp(c)), 0.012), (0.0, 0.35), "lift the lid straight up"),
        ("level_x", at_most(f"(abs {tilt(kp(1), kp(2))})", 0.15), (0.0, 1.0), "keep the lid level"),
        ("level_y", at_most(f"(abs {tilt(kp(3), kp(4))})", 0.15), (0.0, 1.0), "keep the lid level"),
        ("clear_of_rim", at_least(height_above(kp(h), kp(c)), 0.05), (0.35, 1.0),
         "lid held clear of the container"),
        ("set_aside", at_most(hbox(kp(h), c3(target[0], target[1], 0.0)), 0.008), (0.85, 1.0),
         "lid moved to the set-aside spot"),
        ("hold_height", within(f"(sub {TABLE_DEPTH!r} (z {kp(h)}))", 0.16, 0.006), (0.85, 1.0),
         "lid held at the hand-over height"),
        ("container_static", stays_near(c, box[0], 0.01), (0.0, 1.0), "container stays put"),
    )
    return TaskTemplate(
        "open", "open the container lid",
        (("lid", tuple(map(tuple, lid))), ("container", tuple(map(tuple, box)))),
        "lid", _grasp(lid[0], 0.0), tuple(lid[0]),
        _settle((Waypoint(0.0, (0, 0, 0)),
         Waypoint(0.4, (0.0, 0.0, -0.10)),
         Waypoint(1.0, (target[0], target[1], -0.06), (0, 0, 0.4)))),
        cons, goal_jitter=0.004)


def _pour() -> TaskTemplate:
    cx, cy = -0.15, -0.05
    cup = [_pt(cx + 0.035, cy, 0.10), _pt(cx - 0.035, cy, 0.10), _pt(cx, cy - 0.035, 0.10),
           _pt(cx, cy + 0.035, 0.10), _pt(cx, cy, 0.01)]
    bowl = [_pt(0.12, 0.06, 0.06), _pt(0.19, 0.06, 0.06), _pt(0.05, 0.06, 0.06),
            _pt(0.12, 0.13, 0.06), _pt(0.12, -0.01, 0.06)]
    spout, back, rim = 0, 1, 5
    pivot = _pt(cx, cy, 0.10)
    phi = -1.75
    spout_rel_x = 0.035 * math.cos(phi)
    final = (0.12 - spout_rel_x - cx, 0.06 - cy, -0.06)
    cons = (
        ("upright_while_carrying", at_most(f"(abs {tilt(kp(back), kp(spout))})", 0.1), (0.0, 0.6),
         "cup kept upright until it is over the bowl"),
        ("above_bowl_rim", at_least(height_above(kp(spout), kp(rim)), 0.03), (0.6, 1.0),
         "spout kept above the bowl rim"),
        ("spout_over_bowl", at_most(hbox(kp(spout), kp(rim)), 0.012), (0.9, 1.0),
         "spout over the bowl centre"),
        ("tilted", at_least(tilt(kp(back), kp(spout)), 0.7), (0.9, 1.0), "cup tipped to pour"),
        ("bowl_static", stays_near(rim, bowl[0], 0.01), (0.0, 1.0), "bowl stays put"),
    )
    return TaskTemplate(
        "pour", "pour the cup into the bowl",
        (("cup", tuple(map(tuple, cup))), ("bowl", tuple(map(tuple, bowl)))),
        "cup", _grasp(pivot, 0.0), tuple(pivot),
        (Waypoint(0.0, (0, 0, 0)),
         Waypoint(0.35, (0.0, 0.0, -0.12)),
         Waypoint(0.65, (0.235, 0.11, -0.12)),
         Waypoint(1.0, final, (0.0, phi, 0.0))),
        cons, goal_jitter=0.01)


_BUILDERS = {"stack": _stack, "press": _press, "hammer": _hammer, "place": _place,
             "open": _open, "pour": _pour}


class UnknownTaskError(KeyError):
    pass


def get_template(name: str) -> TaskTemplate:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise UnknownTaskError(f"unknown task template {name!r}; expected one of {TASK_NAMES}") from None


def render_depth(entities: Sequence[Tuple[str, np.ndarray]], intr: Intrinsics = INTRINSICS) -> np.ndarray:
    """Synthetic reference depth: floor, table, and a footprint per entity."""
    H, W = intr.height, intr.width
    depth = np.full((H, W), FLOOR_DEPTH)
    table = project(np.array([[-0.4, -0.3, TABLE_DEPTH], [0.4, 0.3, TABLE_DEPTH]]), intr)
    (u0, v0), (u1, v1) = np.floor(table[0]).astype(int), np.ceil(table[1]).astype(int)
    depth[max(v0, 0):min(v1, H), max(u0, 0):min(u1, W)] = TABLE_DEPTH
    for _, kps in entities:
        kps = np.asarray(kps, dtype=float)
        px = project(kps, intr)
        lo = np.floor(px.min(axis=0)).astype(int) - 3
        hi = np.ceil(px.max(axis=0)).astype(int) + 4
        z = float(np.min(kps[:, 2]))
        region = depth[max(lo[1], 0):min(hi[1], H), max(lo[0], 0):min(hi[0], W)]
        np.minimum(region, z, out=region)
    # round through float32 so a scene saved to disk reloads bit-identically
    return depth.astype(np.float32).astype(float)


def build_scene(name: str) -> SceneDoc:
    tpl = get_template(name)
    ents = [(eid, np.array(kps, dtype=float)) for eid, kps in tpl.entities]
    return SceneDoc(
        intrinsics=INTRINSICS,
        entities=tuple(Entity(eid, kps) for eid, kps in ents),
        grasped_entity=tpl.grasped,
        grasp_transform=tpl.grasp_transform,
        workspace_aabb=WORKSPACE.copy(),
        depth=render_depth(ents),
        depth_path=f"{name}_depth.eatn",
        name=name,
        task=name,
    )


def build_constraints(name: str) -> dsl.ConstraintSet:
    return get_template(name).constraint_set()


def data_dir() -> "Path":
    """Directory holding the shipped scene and constraint files."""
    from pathlib import Path

    return Path(__file__).resolve().parent / "data"


def write_task_files(directory=None) -> None:
    """Write ``scenes/<task>.json`` (+ depth) and ``constraints/<task>.json`` for every archetype."""
    from pathlib import Path

    from .tensorio.documents import save_constraints, save_scene

    root = Path(directory) if directory is not None else data_dir()
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    (root / "constraints").mkdir(parents=True, exist_ok=True)
    for name in TASK_NAMES:
        save_scene(build_scene(name), root / "scenes" / f"{name}.json")
        save_constraints(build_constraints(name), root / "constraints" / f"{name}.json", task=name)
