"""JSON documents: scenes, constraint sets and run reports.

Every loader validates fully and raises a :class:`DocumentError` subclass
carrying the offending field path; malformed input never escapes as a bare
``KeyError``/``TypeError``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import jsonschema
import numpy as np

from .. import dsl
from ..geometry import (DegenerateConfigurationError, GeometryError, Intrinsics, Pose,
                        rotvec_to_matrix)
from .eatn import TensorFormatError, load_tensor

PathLike = Union[str, os.PathLike]


class DocumentError(ValueError):
    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class SchemaError(DocumentError):
    pass


class DanglingReferenceError(DocumentError):
    pass


class DuplicateIdError(SchemaError):
    pass


class ConstraintDocError(DocumentError):
    pass


# ---------------------------------------------------------------------------
# schemas

_NUM = {"type": "number"}
_VEC3 = {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3}
_POSE = {
    "type": "object",
    "properties": {
        "rotation": {"type": "array", "items": _VEC3, "minItems": 3, "maxItems": 3},
        "rotvec": _VEC3,
        "translation": _VEC3,
    },
    "required": ["translation"],
    "oneOf": [{"required": ["rotation"]}, {"required": ["rotvec"]}],
    "additionalProperties": False,
}

SCENE_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "task": {"type": "string"},
        "intrinsics": {
            "type": "object",
            "properties": {k: _NUM for k in ("fx", "fy", "cx", "cy")}
            | {"width": {"type": "integer", "minimum": 1}, "height": {"type": "integer", "minimum": 1}},
            "required": ["fx", "fy", "cx", "cy", "width", "height"],
            "additionalProperties": False,
        },
        "entities": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "keypoints_3d": {"type": "array", "items": _VEC3, "minItems": 1},
                    "mask_path": {"type": "string"},
                },
                "required": ["id", "keypoints_3d"],
                "additionalProperties": False,
            },
        },
        "grasped_entity": {"type": "string"},
        "grasp_transform": _POSE,
        "workspace_aabb": {"type": "array", "items": _VEC3, "minItems": 2, "maxItems": 2},
        "depth_path": {"type": "string"},
    },
    "required": ["intrinsics", "entities", "grasped_entity", "grasp_transform",
                 "workspace_aabb", "depth_path"],
    "additionalProperties": False,
}

CONSTRAINTS_SCHEMA = {
    "type": "object",
    "properties": {
        "task": {"type": "string"},
        "constraints": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "expr": {"type": "string"},
                    "window": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                    "description": {"type": "string"},
                },
                "required": ["name", "expr"],
                "additionalProperties": False,
            },
        },
    },
    "required": ["constraints"],
    "additionalProperties": False,
}

_OPT_NUM = {"type": ["number", "null"]}
REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"const": 1},
        "task": {"type": ["string", "null"]},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "index": {"type": "integer", "minimum": 0},
                    "s_vis": _NUM,
                    "s_spatial": _OPT_NUM,
                    "accepted": {"type": "boolean"},
                    "error": {"type": ["string", "null"]},
                },
                "required": ["index", "s_vis", "accepted"],
                "additionalProperties": False,
            },
        },
        "selected_index": {"type": ["integer", "null"]},
        "fallback": {"type": "boolean"},
        "calibration": {"type": ["object", "null"]},
        "retarget": {"type": ["object", "null"]},
        "optimization": {
            "type": ["object", "null"],
            "properties": {
                "trace": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "iteration": {"type": "integer"},
                            "objective": _NUM,
                            "constraint_term": _NUM,
                            "fidelity_term": _NUM,
                            "max_violation": _NUM,
                        },
                        "required": ["iteration", "objective", "max_violation"],
                    },
                },
                "converged": {"type": "boolean"},
                "iterations": {"type": "integer"},
            },
            "required": ["trace", "converged"],
        },
        "trajectory": {
            "type": ["array", "null"],
            "items": {"type": "array", "items": _NUM, "minItems": 7, "maxItems": 7},
        },
        "outcome": {"type": ["object", "null"]},
    },
    "required": ["version", "records", "selected_index", "fallback"],
    "additionalProperties": False,
}


def _json_path(error: jsonschema.ValidationError) -> str:
    out = "$"
    for p in error.absolute_path:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def _reject_constant(name):
    raise SchemaError(f"non-finite number {name} is not allowed", "$")


def _loads(text: str, what: str) -> Any:
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON in {what}: {exc.msg} (line {exc.lineno})", "$") from None
    except RecursionError:
        raise SchemaError(f"nesting too deep in {what}", "$") from None


def _read_text(path: PathLike, what: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DocumentError(f"cannot read {what}: {exc}", str(path)) from None


def _validate(doc: Any, schema: dict, what: str) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise SchemaError(f"{what} schema violation: {err.message}", _json_path(err))


# ---------------------------------------------------------------------------
# poses


def pose_to_json(p: Pose) -> dict:
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def pose_from_json(obj: dict, path: str = "$") -> Pose:
    try:
        if "rotation" in obj:
            return Pose(np.array(obj["rotation"], dtype=float), obj["translation"])
        return Pose(rotvec_to_matrix(np.array(obj["rotvec"], dtype=float)), obj["translation"])
    except GeometryError as exc:
        raise SchemaError(str(exc), path) from None


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class Entity:
    id: str
    keypoints_3d: np.ndarray
    mask_path: Optional[str] = None


@dataclass(frozen=True, eq=False)
class SceneDoc:
    intrinsics: Intrinsics
    entities: Tuple[Entity, ...]
    grasped_entity: str
    grasp_transform: Pose
    workspace_aabb: np.ndarray
    depth: np.ndarray
    depth_path: str = "depth.eatn"
    name: str = ""
    task: str = ""
    base_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(self.entities))
        aabb = np.asarray(self.workspace_aabb, dtype=float).reshape(2, 3)
        object.__setattr__(self, "workspace_aabb", aabb)
        object.__setattr__(self, "depth", np.asarray(self.depth, dtype=float))
        validate_scene(self)

    @property
    def num_keypoints(self) -> int:
        return sum(len(e.keypoints_3d) for e in self.entities)

    @property
    def keypoints(self) -> np.ndarray:
        """Global K x 3 configuration, entities concatenated in file order."""
        return np.concatenate([np.asarray(e.keypoints_3d, dtype=float) for e in self.entities], axis=0)

    def entity_slice(self, entity_id: str) -> slice:
        start = 0
        for e in self.entities:
            n = len(e.keypoints_3d)
            if e.id == entity_id:
                return slice(start, start + n)
            start += n
        raise KeyError(entity_id)

    @property
    def grasped_slice(self) -> slice:
        return self.entity_slice(self.grasped_entity)

    @property
    def grasped_indices(self) -> np.ndarray:
        s = self.grasped_slice
        return np.arange(s.start, s.stop)

    def entity_ids(self) -> List[str]:
        return [e.id for e in self.entities]


def validate_scene(scene: SceneDoc) -> None:
    ids = [e.id for e in scene.entities]
    for i, e in enumerate(scene.entities):
        kp = np.asarray(e.keypoints_3d, dtype=float)
        if kp.ndim != 2 or kp.shape[1] != 3 or not np.all(np.isfinite(kp)):
            raise SchemaError("keypoints must be a finite Kx3 array", f"$.entities[{i}].keypoints_3d")
        if ids.count(e.id) > 1:
            raise DuplicateIdError(f"duplicate entity id {e.id!r}", f"$.entities[{i}].id")
    if scene.grasped_entity not in ids:
        raise DanglingReferenceError(f"grasped_entity {scene.grasped_entity!r} names no entity",
                                     "$.grasped_entity")
    aabb = scene.workspace_aabb
    if not np.all(np.isfinite(aabb)) or not np.all(aabb[0] < aabb[1]):
        raise SchemaError("workspace_aabb min must be < max componentwise", "$.workspace_aabb")
    grasped = scene.keypoints[scene.grasped_slice]
    if grasped.shape[0] < 3:
        raise SchemaError("grasped entity needs at least 3 keypoints", "$.entities")
    centered = grasped - grasped.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise SchemaError("grasped entity keypoints are collinear", "$.entities")
    intr = scene.intrinsics
    if scene.depth.shape != (intr.height, intr.width):
        raise SchemaError(f"depth shape {scene.depth.shape} does not match intrinsics "
                          f"{(intr.height, intr.width)}", "$.depth_path")


def scene_from_json(doc: Any, base_dir: Optional[PathLike] = None, depth: Optional[np.ndarray] = None) -> SceneDoc:
    _validate(doc, SCENE_SCHEMA, "scene")
    try:
        intr = Intrinsics(**doc["intrinsics"])
    except GeometryError as exc:
        raise SchemaError(str(exc), "$.intrinsics") from None
    entities = []
    for e in doc["entities"]:
        entities.append(Entity(e["id"], np.array(e["keypoints_3d"], dtype=float), e.get("mask_path")))
    pose = pose_from_json(doc["grasp_transform"], "$.grasp_transform")
    if depth is None:
        dpath = Path(doc["depth_path"])
        if not dpath.is_absolute() and base_dir is not None:
            dpath = Path(base_dir) / dpath
        try:
            depth = load_tensor(dpath)
        except OSError as exc:
            raise DocumentError(f"cannot read depth tensor: {exc}", "$.depth_path") from None
        except TensorFormatError as exc:
            raise DocumentError(f"bad depth tensor: {exc}", "$.depth_path") from None
        if depth.ndim != 2:
            raise SchemaError(f"depth tensor must be 2-D, got {depth.ndim}-D", "$.depth_path")
    return SceneDoc(intrinsics=intr, entities=tuple(entities), grasped_entity=doc["grasped_entity"],
                    grasp_transform=pose, workspace_aabb=np.array(doc["workspace_aabb"], dtype=float),
                    depth=depth, depth_path=doc["depth_path"], name=doc.get("name", ""),
                    task=doc.get("task", ""), base_dir=None if base_dir is None else str(base_dir))


def scene_to_json(scene: SceneDoc) -> dict:
    out: Dict[str, Any] = {}
    if scene.name:
        out["name"] = scene.name
    if scene.task:
        out["task"] = scene.task
    out["intrinsics"] = scene.intrinsics.to_dict()
    ents = []
    for e in scene.entities:
        item: Dict[str, Any] = {"id": e.id, "keypoints_3d": np.asarray(e.keypoints_3d).tolist()}
        if e.mask_path:
            item["mask_path"] = e.mask_path
        ents.append(item)
    out["entities"] = ents
    out["grasped_entity"] = scene.grasped_entity
    out["grasp_transform"] = pose_to_json(scene.grasp_transform)
    out["workspace_aabb"] = scene.workspace_aabb.tolist()
    out["depth_path"] = scene.depth_path
    return out


def load_scene(path: PathLike) -> SceneDoc:
    doc = _loads(_read_text(path, "scene"), "scene")
    return scene_from_json(doc, base_dir=Path(path).parent)


def save_scene(scene: SceneDoc, path: PathLike, write_depth: bool = True) -> None:
    from .eatn import save_tensor

    path = Path(path)
    path.write_text(json.dumps(scene_to_json(scene), indent=2) + "\n", encoding="utf-8")
    if write_depth:
        save_tensor(path.parent / scene.depth_path, scene.depth)


# ---------------------------------------------------------------------------
# constraint sets


def constraints_from_json(doc: Any) -> dsl.ConstraintSet:
    _validate(doc, CONSTRAINTS_SCHEMA, "constraints")
    items = []
    seen = set()
    for i, c in enumerate(doc["constraints"]):
        path = f"$.constraints[{i}]"
        if c["name"] in seen:
            raise DuplicateIdError(f"duplicate constraint name {c['name']!r}", path + ".name")
        seen.add(c["name"])
        try:
            expr = dsl.parse(c["expr"])
        except dsl.ParseError as exc:
            raise ConstraintDocError(f"cannot parse expression: {exc}", path + ".expr") from exc
        try:
            items.append(dsl.Constraint(c["name"], expr, tuple(c.get("window", (0.0, 1.0))),
                                        c.get("description", "")))
        except dsl.ConstraintSetError as exc:
            raise SchemaError(str(exc), path + ".window") from None
    return dsl.ConstraintSet(tuple(items))


def constraints_to_json(cs: dsl.ConstraintSet, task: Optional[str] = None) -> dict:
    out: Dict[str, Any] = {}
    if task:
        out["task"] = task
    items = []
    for c in cs.constraints:
        item: Dict[str, Any] = {"name": c.name, "expr": dsl.pretty(c.expr)}
        if c.window != (0.0, 1.0):
            item["window"] = list(c.window)
        if c.description:
            item["description"] = c.description
        items.append(item)
    out["constraints"] = items
    return out


def load_constraints(path: PathLike) -> dsl.ConstraintSet:
    return constraints_from_json(_loads(_read_text(path, "constraints"), "constraints"))


def save_constraints(cs: dsl.ConstraintSet, path: PathLike, task: Optional[str] = None) -> None:
    Path(path).write_text(json.dumps(constraints_to_json(cs, task), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# reports


@dataclass
class ReportDoc:
    records: List[dict] = field(default_factory=list)
    selected_index: Optional[int] = None
    fallback: bool = False
    task: Optional[str] = None
    calibration: Optional[dict] = None
    retarget: Optional[dict] = None
    optimization: Optional[dict] = None
    trajectory: Optional[List[List[float]]] = None
    outcome: Optional[dict] = None

    def to_json(self) -> dict:
        return {
            "version": 1,
            "task": self.task,
            "records": self.records,
            "selected_index": self.selected_index,
            "fallback": self.fallback,
            "calibration": self.calibration,
            "retarget": self.retarget,
            "optimization": self.optimization,
            "trajectory": self.trajectory,
            "outcome": self.outcome,
        }


def _check_finite_tree(obj: Any, path: str = "$") -> None:
    if isinstance(obj, float) and not math.isfinite(obj):
        raise SchemaError("non-finite number", path)
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite_tree(v, f"{path}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite_tree(v, f"{path}[{i}]")


def report_from_json(doc: Any) -> ReportDoc:
    _validate(doc, REPORT_SCHEMA, "report")
    records = doc["records"]
    indices = [r["index"] for r in records]
    if len(set(indices)) != len(indices):
        raise DuplicateIdError("duplicate record index", "$.records")
    accepted = [r["index"] for r in records if r["accepted"]]
    if records and len(accepted) != 1:
        raise SchemaError(f"expected exactly one accepted record, found {len(accepted)}", "$.records")
    sel = doc["selected_index"]
    if sel is not None and sel not in indices:
        raise DanglingReferenceError(f"selected_index {sel} has no record", "$.selected_index")
    if accepted and sel != accepted[0]:
        raise SchemaError("selected_index disagrees with the accepted record", "$.selected_index")
    return ReportDoc(records=records, selected_index=sel, fallback=doc["fallback"],
                     task=doc.get("task"), calibration=doc.get("calibration"),
                     retarget=doc.get("retarget"), optimization=doc.get("optimization"),
                     trajectory=doc.get("trajectory"), outcome=doc.get("outcome"))


def dumps_report(report: ReportDoc) -> str:
    doc = report.to_json()
    _check_finite_tree(doc)
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def save_report(report: ReportDoc, path: PathLike) -> None:
    Path(path).write_text(dumps_report(report), encoding="utf-8")


def load_report(path: PathLike) -> ReportDoc:
    return report_from_json(_loads(_read_text(path, "report"), "report"))
