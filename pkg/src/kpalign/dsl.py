"""S-expression constraint language over keypoint configurations.

A constraint maps a K x 3 keypoint configuration to a scalar; values <= 0
mean satisfied.  Grammar::

    scalar := FLOAT | (add s s) | (sub s s) | (mul s s) | (div s s) | (neg s)
            | (abs s) | (min s s) | (max s s) | (norm v) | (dot v v)
            | (x v) | (y v) | (z v) | (sq s)
    vec    := (kp INT) | (kpprev INT) | (vsub v v) | (vadd v v)
            | (vscale s v) | (const3 FLOAT FLOAT FLOAT)

``kpprev`` reads the previous frame; at the first frame callers pass the
current configuration as the previous one.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

SCALAR = "scalar"
VEC = "vec"


class ParseError(ValueError):
    def __init__(self, message: str, position: Optional[int] = None):
        self.position = position
        if position is not None:
            message = f"{message} (at offset {position})"
        super().__init__(message)


class LexError(ParseError):
    pass


class UnknownOperatorError(ParseError):
    pass


class ArityError(ParseError):
    pass


class TypeMismatchError(ParseError):
    pass


class TopLevelTypeError(ParseError):
    pass


class LiteralRequiredError(ParseError):
    pass


class EvaluationError(ArithmeticError):
    def __init__(self, message: str, constraint: Optional[str] = None,
                 timestep: Optional[int] = None):
        self.constraint = constraint
        self.timestep = timestep
        where = []
        if constraint is not None:
            where.append(f"constraint {constraint!r}")
        if timestep is not None:
            where.append(f"t={timestep}")
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)


class BindError(ValueError):
    pass


class ConstraintSetError(ValueError):
    pass


# operator -> (argument kinds, result kind); "lit" is a numeric literal
OPERATORS = {
    "add": ((SCALAR, SCALAR), SCALAR),
    "sub": ((SCALAR, SCALAR), SCALAR),
    "mul": ((SCALAR, SCALAR), SCALAR),
    "div": ((SCALAR, SCALAR), SCALAR),
    "min": ((SCALAR, SCALAR), SCALAR),
    "max": ((SCALAR, SCALAR), SCALAR),
    "neg": ((SCALAR,), SCALAR),
    "abs": ((SCALAR,), SCALAR),
    "sq": ((SCALAR,), SCALAR),
    "norm": ((VEC,), SCALAR),
    "dot": ((VEC, VEC), SCALAR),
    "x": ((VEC,), SCALAR),
    "y": ((VEC,), SCALAR),
    "z": ((VEC,), SCALAR),
    "kp": (("int",), VEC),
    "kpprev": (("int",), VEC),
    "vsub": ((VEC, VEC), VEC),
    "vadd": ((VEC, VEC), VEC),
    "vscale": ((SCALAR, VEC), VEC),
    "const3": (("lit", "lit", "lit"), VEC),
}


# ---------------------------------------------------------------------------
# syntax tree


@dataclass(frozen=True)
class Num:
    value: float
    kind: str = field(default=SCALAR, init=False)


@dataclass(frozen=True)
class Keypoint:
    index: int
    previous: bool = False
    kind: str = field(default=VEC, init=False)


@dataclass(frozen=True)
class Call:
    op: str
    args: Tuple["Node", ...]

    @property
    def kind(self) -> str:
        return OPERATORS[self.op][1]


Node = Union[Num, Keypoint, Call]


# ---------------------------------------------------------------------------
# lexer / reader

_TOKEN = re.compile(r"\s*(?:(\()|(\))|([^\s()]+))")
_INT = re.compile(r"[0-9]+\Z")


def _tokenize(text: str) -> List[Tuple[str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN.match(text, pos)
        if m is None:
            # only trailing whitespace can fail to match
            break
        if m.group(1):
            tokens.append(("(", m.start(1)))
        elif m.group(2):
            tokens.append((")", m.start(2)))
        elif m.group(3):
            tokens.append((m.group(3), m.start(3)))
        else:
            break
        pos = m.end()
    return tokens


def _read(tokens: List[Tuple[str, int]], i: int):
    tok, pos = tokens[i]
    if tok == "(":
        items = []
        i += 1
        while True:
            if i >= len(tokens):
                raise LexError("unterminated list", pos)
            if tokens[i][0] == ")":
                return (items, pos), i + 1
            item, i = _read(tokens, i)
            items.append(item)
    if tok == ")":
        raise LexError("unexpected ')'", pos)
    return (tok, pos), i + 1


def _atom_number(tok: str, pos: int) -> float:
    try:
        value = float(tok)
    except ValueError:
        raise LexError(f"invalid atom {tok!r}", pos) from None
    if not math.isfinite(value):
        raise LexError(f"non-finite literal {tok!r}", pos)
    return value


def _build(sexp) -> Node:
    body, pos = sexp
    if isinstance(body, str):
        return Num(_atom_number(body, pos))
    if not body:
        raise ArityError("empty expression", pos)
    head, head_pos = body[0]
    if not isinstance(head, str):
        raise UnknownOperatorError("operator position must be a symbol", head_pos)
    if head not in OPERATORS:
        raise UnknownOperatorError(f"unknown operator {head!r}", head_pos)
    arg_kinds, _ = OPERATORS[head]
    args = body[1:]
    if len(args) != len(arg_kinds):
        raise ArityError(f"{head} expects {len(arg_kinds)} argument(s), got {len(args)}", pos)
    if head in ("kp", "kpprev"):
        tok, tpos = args[0]
        if not isinstance(tok, str) or not _INT.match(tok):
            raise TypeMismatchError(f"{head} expects a non-negative integer index", tpos)
        return Keypoint(int(tok), head == "kpprev")
    if head == "const3":
        values = []
        for tok, tpos in args:
            if not isinstance(tok, str):
                raise LiteralRequiredError("const3 arguments must be numeric literals", tpos)
            values.append(Num(_atom_number(tok, tpos)))
        return Call(head, tuple(values))
    built = []
    for want, arg in zip(arg_kinds, args):
        node = _build(arg)
        if node.kind != want:
            raise TypeMismatchError(f"{head} expects a {want} argument, got {node.kind}", arg[1])
        built.append(node)
    return Call(head, tuple(built))


def parse_node(text: str) -> Node:
    tokens = _tokenize(text)
    if not tokens:
        raise LexError("empty input", 0)
    sexp, i = _read(tokens, 0)
    if i != len(tokens):
        raise LexError("trailing input after expression", tokens[i][1])
    return _build(sexp)


def pretty(node) -> str:
    if isinstance(node, ConstraintExpr):
        node = node.root
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Keypoint):
        return f"({'kpprev' if node.previous else 'kp'} {node.index})"
    return "(" + " ".join([node.op] + [pretty(a) for a in node.args]) + ")"


def _walk(node: Node) -> Iterable[Node]:
    yield node
    if isinstance(node, Call):
        for a in node.args:
            yield from _walk(a)


# ---------------------------------------------------------------------------
# evaluation


def _check_finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"non-finite value produced by {what}")
    return value


def _ev(node: Node, cur: np.ndarray, prev: np.ndarray):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Keypoint):
        src = prev if node.previous else cur
        return src[..., node.index, :]
    op = node.op
    a = node.args
    if op == "const3":
        return np.array([a[0].value, a[1].value, a[2].value])
    if op == "add":
        return _ev(a[0], cur, prev) + _ev(a[1], cur, prev)
    if op == "sub":
        return _ev(a[0], cur, prev) - _ev(a[1], cur, prev)
    if op == "mul":
        return _ev(a[0], cur, prev) * _ev(a[1], cur, prev)
    if op == "div":
        num = _ev(a[0], cur, prev)
        den = _ev(a[1], cur, prev)
        if np.any(np.asarray(den) == 0.0):
            raise EvaluationError("division by zero")
        return _check_finite(num / den, "div")
    if op == "min":
        return np.minimum(_ev(a[0], cur, prev), _ev(a[1], cur, prev))
    if op == "max":
        return np.maximum(_ev(a[0], cur, prev), _ev(a[1], cur, prev))
    if op == "neg":
        return -_ev(a[0], cur, prev)
    if op == "abs":
        return np.abs(_ev(a[0], cur, prev))
    if op == "sq":
        v = _ev(a[0], cur, prev)
        return v * v
    if op == "norm":
        v = _ev(a[0], cur, prev)
        return np.sqrt(v[..., 0] * v[..., 0] + v[..., 1] * v[..., 1] + v[..., 2] * v[..., 2])
    if op == "dot":
        u = _ev(a[0], cur, prev)
        v = _ev(a[1], cur, prev)
        return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]
    if op in ("x", "y", "z"):
        return _ev(a[0], cur, prev)[..., "xyz".index(op)]
    if op == "vsub":
        return _ev(a[0], cur, prev) - _ev(a[1], cur, prev)
    if op == "vadd":
        return _ev(a[0], cur, prev) + _ev(a[1], cur, prev)
    if op == "vscale":
        s = _ev(a[0], cur, prev)
        return np.asarray(s)[..., None] * _ev(a[1], cur, prev)
    raise UnknownOperatorError(f"unknown operator {op!r}")  # pragma: no cover


@dataclass(frozen=True)
class ConstraintExpr:
    root: Node
    text: str = ""

    @property
    def indices(self) -> Tuple[int, ...]:
        return tuple(sorted({n.index for n in _walk(self.root) if isinstance(n, Keypoint)}))

    @property
    def max_index(self) -> int:
        idx = self.indices
        return idx[-1] if idx else -1

    @property
    def uses_previous(self) -> bool:
        return any(isinstance(n, Keypoint) and n.previous for n in _walk(self.root))

    def evaluate_batch(self, current: np.ndarray, previous: Optional[np.ndarray] = None) -> np.ndarray:
        """Evaluate over leading batch axes: (..., K, 3) -> (...)."""
        cur = np.asarray(current, dtype=float)
        prev = cur if previous is None else np.asarray(previous, dtype=float)
        if cur.shape[-1] != 3 or prev.shape != cur.shape:
            raise EvaluationError(f"bad configuration shapes {cur.shape} / {prev.shape}")
        if self.max_index >= cur.shape[-2]:
            raise EvaluationError(f"keypoint {self.max_index} out of range for K={cur.shape[-2]}")
        out = _ev(self.root, cur, prev)
        out = np.broadcast_to(np.asarray(out, dtype=float), cur.shape[:-2])
        return _check_finite(out, "expression")

    def __call__(self, current, previous=None) -> float:
        return evaluate(self, current, previous)

    def __str__(self) -> str:
        return pretty(self.root)


def parse(text: str) -> ConstraintExpr:
    """Parse a scalar-valued constraint expression."""
    if not isinstance(text, str):
        raise LexError("expression must be a string", 0)
    root = parse_node(text)
    if root.kind != SCALAR:
        raise TopLevelTypeError("top-level expression must be scalar-valued", 0)
    return ConstraintExpr(root, text)


def evaluate(expr: ConstraintExpr, current, previous=None) -> float:
    cur = np.asarray(current, dtype=float)
    if cur.ndim != 2:
        raise EvaluationError(f"expected a K x 3 configuration, got shape {cur.shape}")
    return float(expr.evaluate_batch(cur, previous))


# ---------------------------------------------------------------------------
# constraint sets


@dataclass(frozen=True)
class Constraint:
    name: str
    expr: ConstraintExpr
    window: Tuple[float, float] = (0.0, 1.0)
    description: str = ""

    def __post_init__(self):
        a, b = (float(v) for v in self.window)
        if not (0.0 <= a <= b <= 1.0):
            raise ConstraintSetError(f"constraint {self.name!r}: window must satisfy 0 <= t0 <= t1 <= 1")
        object.__setattr__(self, "window", (a, b))

    def frame_range(self, T: int) -> Tuple[int, int]:
        return window_frames(self.window, T)

    @property
    def is_goal(self) -> bool:
        """Windowed to the end of the horizon but not the whole of it."""
        return self.window[1] == 1.0 and self.window[0] > 0.0


def window_frames(window: Tuple[float, float], T: int) -> Tuple[int, int]:
    """Zero-based inclusive frame range for a fractional window; may be empty (lo > hi)."""
    a, b = window
    span = T - 1
    # guard against float products like 0.7 * 10 = 7.000000000000001
    lo = math.ceil(a * span - 1e-9)
    hi = math.floor(b * span + 1e-9)
    return max(lo, 0), min(hi, span)


@dataclass(frozen=True)
class ConstraintSet:
    constraints: Tuple[Constraint, ...] = ()
    num_keypoints: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))
        names = [c.name for c in self.constraints]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ConstraintSetError(f"duplicate constraint names: {sorted(dup)}")

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    @property
    def uses_previous(self) -> bool:
        return any(c.expr.uses_previous for c in self.constraints)

    @property
    def bound(self) -> bool:
        return self.num_keypoints is not None

    def window_mask(self, T: int) -> np.ndarray:
        mask = np.zeros((len(self.constraints), T), dtype=bool)
        for i, c in enumerate(self.constraints):
            lo, hi = c.frame_range(T)
            if lo <= hi:
                mask[i, lo:hi + 1] = True
        return mask

    @classmethod
    def from_pairs(cls, items: Sequence[Tuple[str, str]], **kw) -> "ConstraintSet":
        return cls(tuple(Constraint(n, parse(e)) for n, e in items), **kw)


def bind(cs: ConstraintSet, scene) -> ConstraintSet:
    """Check keypoint indices against a scene (or a keypoint count)."""
    K = scene if isinstance(scene, (int, np.integer)) else scene.num_keypoints
    for c in cs.constraints:
        if c.expr.max_index >= K:
            raise BindError(f"constraint {c.name!r} references keypoint {c.expr.max_index} "
                            f"but the scene has K={K}")
    return ConstraintSet(cs.constraints, int(K))


def previous_frames(traj: np.ndarray) -> np.ndarray:
    traj = np.asarray(traj, dtype=float)
    return np.concatenate([traj[:1], traj[:-1]], axis=0)


def _check_trajectory(cs: ConstraintSet, traj: np.ndarray) -> np.ndarray:
    traj = np.asarray(traj, dtype=float)
    if traj.ndim != 3 or traj.shape[2] != 3 or traj.shape[0] < 1:
        raise EvaluationError(f"expected a T x K x 3 trajectory, got shape {traj.shape}")
    if not np.all(np.isfinite(traj)):
        raise EvaluationError("trajectory contains non-finite values")
    if cs.num_keypoints is not None and traj.shape[1] != cs.num_keypoints:
        raise EvaluationError(f"trajectory has K={traj.shape[1]} but the set is bound to K={cs.num_keypoints}")
    return traj


def _evaluate_window(c: Constraint, cur: np.ndarray, prev: np.ndarray, lo: int) -> np.ndarray:
    try:
        return c.expr.evaluate_batch(cur, prev)
    except EvaluationError:
        # locate the first failing frame for the report
        for j in range(cur.shape[0]):
            try:
                c.expr.evaluate_batch(cur[j], prev[j])
            except EvaluationError as exc:
                raise EvaluationError(str(exc).split(" [")[0], c.name, lo + j + 1) from None
        raise


def constraint_values(cs: ConstraintSet, traj) -> np.ndarray:
    """C x T matrix of constraint values; NaN outside each window."""
    traj = _check_trajectory(cs, traj)
    T = traj.shape[0]
    prev = previous_frames(traj)
    out = np.full((len(cs.constraints), T), np.nan)
    for i, c in enumerate(cs.constraints):
        lo, hi = c.frame_range(T)
        if lo > hi:
            continue
        out[i, lo:hi + 1] = _evaluate_window(c, traj[lo:hi + 1], prev[lo:hi + 1], lo)
    return out


def aggregate_cost(cs: ConstraintSet, traj) -> float:
    """Sum over constraints and in-window frames of squared hinge violations."""
    traj = _check_trajectory(cs, traj)
    T = traj.shape[0]
    prev = previous_frames(traj)
    total = 0.0
    for c in cs.constraints:
        lo, hi = c.frame_range(T)
        if lo > hi:
            continue
        v = _evaluate_window(c, traj[lo:hi + 1], prev[lo:hi + 1], lo)
        h = np.maximum(v, 0.0)
        total += float(np.sum(h * h))
    return total
