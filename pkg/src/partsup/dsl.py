"""Operation-tree programs over part-aware feature matrices.

A tree is built from operation cells. A leaf cell applies a unary operator to
an operant (a k x d matrix of neighbor features); a mid cell combines one or
two child cells, reduces the resulting k x d matrix with a grouping operator
and applies a unary operator to the grouped vector.

Evaluation is vectorized over a leading batch axis so that all points of a
shape are processed in one call: set-level values have shape ``(B, k, d)``
and grouped values ``(B, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

GROUPING_OPS = ("sum", "mean", "max", "svd")
UNARY_OPS = ("identity", "square", "double", "neg", "orth", "inv", "centralize")
BINARY_OPS = ("add", "minus", "mul", "cross", "cartesian", "matvec")

PINV_RCOND = 1e-9


class DSLError(ValueError):
    pass


class ShapeError(DSLError):
    def __init__(self, node_path: str, reason: str):
        super().__init__(f"{node_path}: {reason}")
        self.node_path = node_path
        self.reason = reason


class ParseError(DSLError):
    def __init__(self, offset: int, expected: str, text: str = ""):
        super().__init__(f"at offset {offset}: expected {expected}")
        self.offset = offset
        self.expected = expected
        self.text = text


class NumericalError(DSLError):
    pass


class EmptyBaseSet(DSLError):
    pass


# ---------------------------------------------------------------------------
# tree types


@dataclass(frozen=True)
class Leaf:
    unary: str
    operant: str


@dataclass(frozen=True)
class Single:
    child: "Cell"


@dataclass(frozen=True)
class Pair:
    binary: str
    left: "Cell"
    right: "Cell"


@dataclass(frozen=True)
class Mid:
    level: int
    unary: str
    grouping: str
    conn: Union[Single, Pair]


Cell = Union[Leaf, Mid]
OperationTree = Mid


def height(cell: Cell) -> int:
    """Number of stacked cells on the longest root-to-leaf path."""
    if isinstance(cell, Leaf):
        return 1
    if isinstance(cell.conn, Single):
        return 1 + height(cell.conn.child)
    return 1 + max(height(cell.conn.left), height(cell.conn.right))


def check_structure(tree: Mid, max_height: int = 3) -> None:
    """Raise DSLError if ``tree`` violates the cell-composition rules."""
    if not isinstance(tree, Mid):
        raise DSLError("root must be a mid cell")
    if height(tree) > max_height:
        raise DSLError(f"tree height {height(tree)} exceeds {max_height}")
    _check_cell(tree, "root")


def _check_cell(cell: Cell, path: str) -> None:
    if isinstance(cell, Leaf):
        if cell.unary not in UNARY_OPS:
            raise DSLError(f"{path}: unknown unary {cell.unary!r}")
        return
    if cell.unary not in UNARY_OPS:
        raise DSLError(f"{path}: unknown unary {cell.unary!r}")
    if cell.grouping not in GROUPING_OPS:
        raise DSLError(f"{path}: unknown grouping {cell.grouping!r}")
    if cell.level < 2:
        raise DSLError(f"{path}: mid cell below level 2")
    conn = cell.conn
    if isinstance(conn, Single):
        if not isinstance(conn.child, Leaf):
            raise DSLError(f"{path}: a single connection must hold a leaf cell")
        return
    if conn.binary not in BINARY_OPS:
        raise DSLError(f"{path}: unknown binary {conn.binary!r}")
    for side, child in (("left", conn.left), ("right", conn.right)):
        if isinstance(child, Mid):
            if child.level != cell.level - 1:
                raise DSLError(f"{path}.{side}: level {child.level} under level {cell.level}")
            _check_cell(child, f"{path}.{side}")
    if isinstance(conn.left, Mid) and isinstance(conn.right, Mid):
        raise DSLError(f"{path}: a pair needs at least one leaf child")


def operants_of(cell: Cell) -> list[str]:
    if isinstance(cell, Leaf):
        return [cell.operant]
    if isinstance(cell.conn, Single):
        return operants_of(cell.conn.child)
    return operants_of(cell.conn.left) + operants_of(cell.conn.right)


# ---------------------------------------------------------------------------
# operant sets


def operant_names(base_names: list[str]) -> list[str]:
    """Names of the expanded operant set derived from one or two base features."""
    if not base_names:
        raise EmptyBaseSet("no base features")
    if len(base_names) == 1:
        (a,) = base_names
        return [a, f"dbl_{a}", f"sq_{a}", f"neg_{a}"]
    if len(base_names) == 2:
        a, b = base_names
        return [a, b, f"{a}_mul_{b}", f"{a}_add_{b}", f"{a}_minus_{b}", f"{b}_minus_{a}", f"cross_{b}_{a}"]
    raise DSLError("at most two base features are supported")


def build_operant_set(base: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Expand named ``(..., k, 3)`` base matrices into the operant set.

    Two bases A, B give {A, B, A*B, A+B, A-B, B-A, cross(B, A)}; a single base
    A gives {A, 2A, A^2, -A}.
    """
    names = list(base)
    out_names = operant_names(names)
    if len(names) == 1:
        a = base[names[0]]
        values = [a, 2.0 * a, a * a, -a]
    else:
        a, b = base[names[0]], base[names[1]]
        values = [a, b, a * b, a + b, a - b, b - a, np.cross(b, a)]
    return dict(zip(out_names, values))


# ---------------------------------------------------------------------------
# shape inference


@dataclass(frozen=True)
class FeatureShape:
    grouped: bool
    dim: int
    rows: int | None = None  # k for set-level shapes, when known


def _isqrt_exact(d: int) -> int | None:
    s = math.isqrt(d)
    return s if s * s == d else None


def _unary_shape(op: str, dim: int, path: str) -> int:
    if op == "orth":
        s = _isqrt_exact(dim)
        if s is None or dim < 4:
            raise ShapeError(path, f"orth needs a perfect-square dim >= 4, got {dim}")
    return dim


def _binary_shape(op: str, d1: int, d2: int, path: str) -> int:
    if op in ("add", "minus", "mul"):
        if d1 != d2:
            raise ShapeError(path, f"{op} on mismatched dims {d1} and {d2}")
        return d1
    if op == "cross":
        if d1 != 3 or d2 != 3:
            raise ShapeError(path, f"cross needs dim 3 on both sides, got {d1} and {d2}")
        return 3
    if op == "cartesian":
        return d1 * d2
    if op == "matvec":
        if d1 != d2 * d2:
            raise ShapeError(path, f"matvec needs left dim {d2 * d2}, got {d1}")
        return d2
    raise ShapeError(path, f"unknown binary {op!r}")


def infer_shape(tree: Cell, operant_dims: Mapping[str, int], n_rows: int | None = None) -> FeatureShape:
    """Static output shape of ``tree``; raises ShapeError naming the bad node."""
    return _infer(tree, operant_dims, n_rows, "root")


def _infer(cell: Cell, dims: Mapping[str, int], k: int | None, path: str) -> FeatureShape:
    if isinstance(cell, Leaf):
        if cell.operant not in dims:
            raise ShapeError(path, f"unknown operant {cell.operant!r}")
        d = _unary_shape(cell.unary, dims[cell.operant], path)
        return FeatureShape(False, d, k)
    conn = cell.conn
    if isinstance(conn, Single):
        inner = _infer(conn.child, dims, k, path + ".child")
        d = inner.dim
    else:
        left = _infer(conn.left, dims, k, path + ".left")
        right = _infer(conn.right, dims, k, path + ".right")
        d = _binary_shape(conn.binary, left.dim, right.dim, path)
    if cell.grouping == "svd" and k is not None and k < d:
        raise ShapeError(path, f"svd grouping needs k >= dim, got k={k}, dim={d}")
    d = _unary_shape(cell.unary, d, path)
    return FeatureShape(True, d)


# ---------------------------------------------------------------------------
# evaluation


def _sign_normalize(v: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(v), axis=-1)
    pick = np.take_along_axis(v, idx[..., None], axis=-1)
    sign = np.where(pick < 0, -1.0, 1.0)
    return v * sign


def smallest_right_singular(m: np.ndarray) -> np.ndarray:
    """Sign-normalized right singular vector of the smallest singular value."""
    try:
        _, _, vh = np.linalg.svd(m, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"svd did not converge: {exc}") from exc
    return _sign_normalize(vh[..., -1, :])


def _orth(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    s = math.isqrt(d)
    m = x.reshape(x.shape[:-1] + (s, s))
    try:
        u, _, vh = np.linalg.svd(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"svd did not converge: {exc}") from exc
    return (u @ vh).reshape(x.shape)


def _pinv_t(m: np.ndarray) -> np.ndarray:
    # (M^+)^T for a stack of matrices; zero matrices map to zero
    try:
        return np.swapaxes(np.linalg.pinv(m, rcond=PINV_RCOND), -1, -2)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"pinv did not converge: {exc}") from exc


def apply_unary(op: str, x: np.ndarray, grouped: bool) -> np.ndarray:
    if op == "identity":
        return x
    if op == "square":
        return x * x
    if op == "double":
        return 2.0 * x
    if op == "neg":
        return -x
    if op == "orth":
        return _orth(x)
    if op == "inv":
        if grouped:
            return _pinv_t(x[..., None, :])[..., 0, :]
        return _pinv_t(x)
    if op == "centralize":
        if grouped:
            return x - x.mean(axis=-1, keepdims=True)
        return x - x.mean(axis=-2, keepdims=True)
    raise DSLError(f"unknown unary {op!r}")


def apply_grouping(op: str, x: np.ndarray) -> np.ndarray:
    if op == "sum":
        return x.sum(axis=-2)
    if op == "mean":
        return x.mean(axis=-2)
    if op == "max":
        return x.max(axis=-2)
    if op == "svd":
        return smallest_right_singular(x)
    raise DSLError(f"unknown grouping {op!r}")


def apply_binary(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if op == "add":
        return a + b
    if op == "minus":
        return a - b
    if op == "mul":
        return a * b
    if op == "cross":
        return np.cross(a, b)
    if op == "cartesian":
        out = a[..., :, None] * b[..., None, :]
        return out.reshape(out.shape[:-2] + (a.shape[-1] * b.shape[-1],))
    if op == "matvec":
        s = b.shape[-1]
        m = a.reshape(a.shape[:-1] + (s, s))
        return np.einsum("...ij,...j->...i", m, b)
    raise DSLError(f"unknown binary {op!r}")


def _eval_cell(cell: Cell, operants: Mapping[str, np.ndarray]) -> tuple[np.ndarray, bool]:
    if isinstance(cell, Leaf):
        return apply_unary(cell.unary, operants[cell.operant], grouped=False), False
    conn = cell.conn
    if isinstance(conn, Single):
        x, _ = _eval_cell(conn.child, operants)
    else:
        a, ga = _eval_cell(conn.left, operants)
        b, gb = _eval_cell(conn.right, operants)
        # a grouped child is broadcast across the k rows of its sibling
        if ga:
            a = np.broadcast_to(a[..., None, :], b.shape[:-1] + a.shape[-1:])
        if gb:
            b = np.broadcast_to(b[..., None, :], a.shape[:-1] + b.shape[-1:])
        x = apply_binary(conn.binary, a, b)
    g = apply_grouping(cell.grouping, x)
    return apply_unary(cell.unary, g, grouped=True), True


def evaluate_batch(tree: Mid, operants: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate ``tree`` on ``(B, k, d)`` operant stacks; returns ``(B, out_dim)``."""
    for name in operants_of(tree):
        if not np.all(np.isfinite(operants[name])):
            raise NumericalError(f"non-finite values in operant {name!r}")
    with np.errstate(all="ignore"):
        out, _ = _eval_cell(tree, operants)
    if not np.all(np.isfinite(out)):
        raise NumericalError("tree produced non-finite values")
    return out


@dataclass(frozen=True)
class PartContext:
    """Part-aware neighborhood of one target point: ordered operant matrices."""

    neighbor_indices: np.ndarray
    operants: Mapping[str, np.ndarray]

    @property
    def dims(self) -> dict[str, int]:
        return {k: v.shape[-1] for k, v in self.operants.items()}


def evaluate_tree(tree: Mid, ctx: PartContext) -> np.ndarray:
    """Supervision feature vector for a single context."""
    batched = {k: np.asarray(v, dtype=np.float64)[None] for k, v in ctx.operants.items()}
    return evaluate_batch(tree, batched)[0]


# ---------------------------------------------------------------------------
# neighbor sampling


def sample_part_neighbors(
    positions: np.ndarray,
    part_labels: np.ndarray,
    point: int,
    radius: float,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Indices of same-part points within ``radius`` of ``point``.

    Sampled without replacement when enough candidates exist, otherwise with
    replacement. The target itself always qualifies.
    """
    if radius <= 0 or n_samples < 1:
        raise ValueError("radius must be > 0 and n_samples >= 1")
    same = np.flatnonzero(part_labels == part_labels[point])
    d = np.linalg.norm(positions[same] - positions[point], axis=1)
    cands = same[d <= radius]
    return rng.choice(cands, size=n_samples, replace=len(cands) < n_samples)


def part_neighbor_table(
    positions: np.ndarray,
    part_labels: np.ndarray,
    radius: float,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """``(n, n_samples)`` neighbor indices for every point of a shape."""
    n = len(positions)
    out = np.empty((n, n_samples), dtype=np.int64)
    for label in np.unique(part_labels):
        members = np.flatnonzero(part_labels == label)
        pts = positions[members]
        dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        for row, i in enumerate(members):
            cands = members[dist[row] <= radius]
            out[i] = rng.choice(cands, size=n_samples, replace=len(cands) < n_samples)
    return out


# ---------------------------------------------------------------------------
# text form


def print_tree(cell: Cell) -> str:
    if isinstance(cell, Leaf):
        return f"{cell.unary}({cell.operant})"
    conn = cell.conn
    if isinstance(conn, Single):
        inner = print_tree(conn.child)
    else:
        inner = f"{conn.binary}({print_tree(conn.left)},{print_tree(conn.right)})"
    return f"{cell.unary}({cell.grouping}({inner}))"


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _ident(self, expected: str) -> tuple[str, int]:
        self._skip()
        start = self.pos
        while self.pos < len(self.text) and (self.text[self.pos].isalnum() or self.text[self.pos] == "_"):
            self.pos += 1
        if start == self.pos:
            raise ParseError(start, expected, self.text)
        return self.text[start:self.pos], start

    def _expect(self, ch: str) -> None:
        self._skip()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            raise ParseError(self.pos, repr(ch), self.text)
        self.pos += 1

    def cell(self, level: int) -> Cell:
        unary, at = self._ident("unary operator")
        if unary not in UNARY_OPS:
            raise ParseError(at, f"unary operator, got {unary!r}", self.text)
        self._expect("(")
        name, at = self._ident("grouping operator or operant")
        if name in GROUPING_OPS:
            if level < 2:
                raise ParseError(at, "operant (tree too deep)", self.text)
            self._expect("(")
            conn = self.conn(level)
            self._expect(")")
            self._expect(")")
            return Mid(level, unary, name, conn)
        self._expect(")")
        return Leaf(unary, name)

    def conn(self, level: int) -> Union[Single, Pair]:
        self._skip()
        save = self.pos
        name, at = self._ident("binary operator or cell")
        self._skip()
        if name in BINARY_OPS:
            self._expect("(")
            left = self.cell(level - 1)
            self._expect(",")
            right = self.cell(level - 1)
            self._expect(")")
            return Pair(name, left, right)
        self.pos = save
        return Single(self.cell(level - 1))


def parse_tree(text: str, root_level: int = 3) -> Mid:
    """Parse DSL text into a tree; whitespace-insensitive."""
    p = _Parser(text)
    tree = p.cell(root_level)
    p._skip()
    if p.pos != len(text):
        raise ParseError(p.pos, "end of input", text)
    if not isinstance(tree, Mid):
        raise ParseError(0, "grouping operator at the root", text)
    try:
        check_structure(tree, max_height=root_level)
    except DSLError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(0, f"structurally valid tree ({exc})", text) from exc
    return tree
