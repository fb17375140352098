"""Binary tensor container and JSON document schemas."""

from .eatn import (BadMagicError, DimsOverflowError, InvalidHeaderError, TensorFormatError,
                   TrailingDataError, TruncatedError, UnsupportedVersionError, decode_tensor,
                   encode_tensor, load_tensor, read_tensor, save_tensor, write_tensor)
from .documents import (ConstraintDocError, DanglingReferenceError, DocumentError,
                        DuplicateIdError, Entity, ReportDoc, SceneDoc, SchemaError,
                        constraints_from_json, constraints_to_json, dumps_report,
                        load_constraints, load_report, load_scene, pose_from_json, pose_to_json,
                        report_from_json, save_constraints, save_report, save_scene,
                        scene_from_json, scene_to_json)

__all__ = [name for name in dir() if not name.startswith("_")]
