"""Hand-crafted geometric features written as operation trees, checked against direct formulas.

Each feature pairs a canonical tree with a readout of its grouped output
(most are the identity) and a closed-form oracle from :mod:`geometry`.
Contexts are full parts: every point of the part is a neighbor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dsl, geometry
from .synthgen import _cone_patch, _cylinder_patch, _plane_patch, _sphere_patch

TOL = 1e-6


@dataclass(frozen=True)
class Part:
    positions: np.ndarray
    channel: np.ndarray  # normals, or flow for the rotation feature
    channel_name: str
    truth: object = None


@dataclass(frozen=True)
class Feature:
    name: str
    tree: str
    channel: str
    readout: Callable[[np.ndarray], np.ndarray]
    oracle: Callable[[Part], np.ndarray]
    axis: bool = False  # compare up to sign


def run_tree(tree: str | dsl.Mid, part: Part) -> np.ndarray:
    if isinstance(tree, str):
        tree = dsl.parse_tree(tree)
    base = {"P": part.positions[None], part.channel_name: part.channel[None]}
    return dsl.evaluate_batch(tree, dsl.build_operant_set(base))[0]


def _rowsum3(v: np.ndarray) -> np.ndarray:
    return v.reshape(3, 3).sum(axis=1)


def _skew_vec(v: np.ndarray) -> np.ndarray:
    m = v.reshape(3, 3)
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


SPHERE_CENTER_TREE = "identity(sum(cartesian(inv(N),identity(cross_N_P))))"


def _sphere_radius_dsl(part: Part) -> np.ndarray:
    c = _skew_vec(run_tree(SPHERE_CENTER_TREE, part))
    return np.array([np.sqrt(np.mean(np.sum((part.positions - c) ** 2, axis=1)))])


def _rotation_oracle(part: Part) -> np.ndarray:
    return geometry.procrustes_rotation(part.positions, part.positions + part.channel).ravel()


FEATURES: tuple[Feature, ...] = (
    Feature("rotation", "orth(sum(cartesian(identity(P_add_F),identity(P))))", "F", lambda v: v, _rotation_oracle),
    Feature("cone_apex", "identity(sum(cartesian(inv(N),identity(P_mul_N))))", "N", _rowsum3,
            lambda p: geometry.cone_apex(p.channel, p.positions)),
    Feature("cylinder_axis", "identity(svd(centralize(N)))", "N", lambda v: v,
            lambda p: geometry.cylinder_axis(p.channel), axis=True),
    Feature("sphere_center", SPHERE_CENTER_TREE, "N", _skew_vec, lambda p: geometry.sphere_fit(p.positions)[0]),
    Feature("sphere_radius", SPHERE_CENTER_TREE, "N", lambda v: v,
            lambda p: np.array([geometry.sphere_fit(p.positions)[1]])),
    Feature("plane_normal", "identity(svd(centralize(P)))", "N", lambda v: v,
            lambda p: geometry.plane_normal(p.positions), axis=True),
)


def make_part(feature: str, rng: np.random.Generator, n: int = 200) -> Part:
    """An exact synthetic part suited to ``feature``."""
    anchor = rng.uniform(-0.5, 0.5, size=3)
    if feature == "rotation":
        pts = rng.normal(size=(n, 3)) * 0.3 + anchor
        R = geometry.rotation_from_axis_angle(rng.normal(size=3), rng.uniform(0.1, np.pi / 2))
        # pure rotation: the uncentered and centered cross-covariances share the polar factor R
        return Part(pts, pts @ R.T - pts, "F", R)
    make = {"cone_apex": _cone_patch, "cylinder_axis": _cylinder_patch, "sphere_center": _sphere_patch,
            "sphere_radius": _sphere_patch, "plane_normal": _plane_patch}[feature]
    pts, nrm, params = make(rng, n, anchor)
    return Part(pts, nrm, "N", params)


def feature_error(feat: Feature, part: Part) -> float:
    if feat.name == "sphere_radius":
        got = _sphere_radius_dsl(part)
    else:
        got = feat.readout(run_tree(feat.tree, part))
    want = feat.oracle(part)
    err = float(np.max(np.abs(got - want)))
    if feat.axis:
        err = min(err, float(np.max(np.abs(got + want))))
    return err


@dataclass(frozen=True)
class CheckRow:
    name: str
    tree: str
    max_error: float
    passed: bool


def oracle_check(seed: int = 0, trials: int = 5, tol: float = TOL) -> list[CheckRow]:
    """Worst-case DSL-vs-oracle error per feature over ``trials`` random parts."""
    rng = np.random.default_rng(seed)
    rows = []
    for feat in FEATURES:
        worst = max(feature_error(feat, make_part(feat.name, rng)) for _ in range(trials))
        rows.append(CheckRow(feat.name, feat.tree, worst, worst <= tol))
    return rows


def format_table(rows: list[CheckRow], elapsed: float | None = None) -> str:
    lines = [f"{'feature':<14} {'max_error':>10}  result  tree"]
    for r in rows:
        lines.append(f"{r.name:<14} {r.max_error:>10.2e}  {'pass' if r.passed else 'FAIL':<6}  {r.tree}")
    n_pass = sum(r.passed for r in rows)
    tail = f"{n_pass}/{len(rows)} formulas pass"
    if elapsed is not None:
        tail += f" ({elapsed:.2f}s)"
    lines.append(tail)
    return "\n".join(lines)


if __name__ == "__main__":
    t0 = time.perf_counter()
    rows = oracle_check()
    print(format_table(rows, time.perf_counter() - t0))
