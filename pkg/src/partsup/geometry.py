"""Closed-form geometric features of point-cloud parts.

These are direct implementations used as reference values for DSL trees and
for checking generated data. Unit-vector outputs are sign-normalized so the
largest-magnitude component is positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsl import _sign_normalize

RANK_TOL = 1e-8

PLANE, SPHERE, CYLINDER, CONE = 0, 1, 2, 3
RIGID = 4
KIND_NAMES = {PLANE: "plane", SPHERE: "sphere", CYLINDER: "cylinder", CONE: "cone", RIGID: "rigid"}


class DegenerateInput(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("R must be a 3x3 orthogonal matrix")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R must be a proper rotation")

    def apply(self, p: np.ndarray) -> np.ndarray:
        return p @ np.asarray(self.R).T + self.t


@dataclass(frozen=True)
class PrimitiveParams:
    """Ground-truth parameters of one primitive patch.

    ``vec_a``/``vec_b``/``scalar`` are interpreted per kind:
    plane: normal, -, offset (n.x = offset); sphere: center, -, radius;
    cylinder: axis, axis point, radius; cone: apex, axis, half-angle.
    """

    kind: int
    vec_a: np.ndarray
    vec_b: np.ndarray
    scalar: float

    def to_array(self) -> np.ndarray:
        out = np.zeros(10)
        out[0:3] = self.vec_a
        out[3:6] = self.vec_b
        out[6] = self.scalar
        return out

    @classmethod
    def from_array(cls, kind: int, a: np.ndarray) -> "PrimitiveParams":
        a = np.asarray(a, dtype=np.float64)
        return cls(int(kind), a[0:3].copy(), a[3:6].copy(), float(a[6]))


def rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _svd(m: np.ndarray):
    return np.linalg.svd(m, full_matrices=True)


def _require_rank(s: np.ndarray, rank: int, what: str) -> None:
    if s[0] == 0.0 or s[rank - 1] / s[0] < RANK_TOL:
        raise DegenerateInput(f"{what}: rank below {rank}")


def procrustes_rotation(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """Orthogonal R = U V^T from the SVD of sum_i a_i b_i^T on centered points.

    No reflection correction is applied.
    """
    a = after - after.mean(axis=0)
    b = before - before.mean(axis=0)
    h = a.T @ b
    u, s, vh = _svd(h)
    _require_rank(s, 2, "procrustes")
    return u @ vh


def cylinder_axis(normals: np.ndarray) -> np.ndarray:
    centered = normals - normals.mean(axis=0)
    _, s, vh = _svd(centered)
    _require_rank(s, 2, "cylinder axis")
    return _sign_normalize(vh[-1])


def plane_normal(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    _, s, vh = _svd(centered)
    _require_rank(s, 2, "plane normal")
    return _sign_normalize(vh[-1])


def cone_apex(normals: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Least-squares point a with n_i . a = n_i . p_i for every i."""
    s = np.linalg.svd(normals, compute_uv=False)
    _require_rank(s, 3, "cone apex")
    rhs = np.einsum("ij,ij->i", normals, points)
    return np.linalg.pinv(normals) @ rhs


def sphere_fit(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Algebraic sphere fit: 2 (p_i - mean p) . c = |p_i|^2 - mean |p|^2."""
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    _require_rank(s, 3, "sphere fit")
    sq = np.einsum("ij,ij->i", points, points)
    center = np.linalg.lstsq(2.0 * centered, sq - sq.mean(), rcond=None)[0]
    radius = float(np.sqrt(np.mean(np.sum((points - center) ** 2, axis=1))))
    return center, radius


# residuals used to check generated patches against their own parameters


def primitive_residual(params: PrimitiveParams, points: np.ndarray, normals: np.ndarray | None = None) -> float:
    """Max distance of points from the surface described by ``params``."""
    a, b, r = params.vec_a, params.vec_b, params.scalar
    if params.kind == PLANE:
        res = np.abs(points @ a - r)
    elif params.kind == SPHERE:
        res = np.abs(np.linalg.norm(points - a, axis=1) - r)
    elif params.kind == CYLINDER:
        d = points - b
        radial = d - np.outer(d @ a, a)
        res = np.abs(np.linalg.norm(radial, axis=1) - r)
    elif params.kind == CONE:
        d = points - a
        along = d @ b
        radial = np.linalg.norm(d - np.outer(along, b), axis=1)
        res = np.abs(radial * np.cos(r) - along * np.sin(r))
    else:
        raise ValueError(f"no residual for kind {params.kind}")
    return float(res.max())
