import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from partsup import geometry as geo
from partsup.features import FEATURES, feature_error, make_part, oracle_check


def random_rotation(rng):
    return geo.rotation_from_axis_angle(rng.normal(size=3), rng.uniform(0.05, np.pi - 0.05))


def cylinder(rng, axis, n=200, r=0.4):
    f = np.linalg.qr(np.column_stack([axis, rng.normal(size=(3, 2))]))[0]
    phi = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(-1, 1, n)
    radial = np.outer(np.cos(phi), f[:, 1]) + np.outer(np.sin(phi), f[:, 2])
    return np.outer(z, f[:, 0]) + r * radial, radial


def cone(rng, apex, n=300, alpha=0.5):
    phi = rng.uniform(0, 2 * np.pi, n)
    h = rng.uniform(0.2, 1.0, n)
    radial = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(n)])
    axis = np.array([0, 0, 1.0])
    pts = apex + h[:, None] * (axis + np.tan(alpha) * radial)
    nrm = np.cos(alpha) * radial - np.sin(alpha) * axis
    return pts, nrm


def sphere(rng, c, r, n=100):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return c + r * d


def test_rigid_transform_validation():
    with pytest.raises(ValueError):
        geo.RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        geo.RigidTransform(2 * np.eye(3), np.zeros(3))
    R = random_rotation(np.random.default_rng(0))
    T = geo.RigidTransform(R, np.ones(3))
    np.testing.assert_allclose(T.apply(np.zeros((1, 3))), np.ones((1, 3)))


def test_primitive_params_array_roundtrip():
    p = geo.PrimitiveParams(geo.CONE, np.array([1.0, 2, 3]), np.array([0, 0, 1.0]), 0.4)
    q = geo.PrimitiveParams.from_array(geo.CONE, p.to_array())
    assert q.kind == p.kind and q.scalar == p.scalar
    np.testing.assert_array_equal(q.vec_a, p.vec_a)


def test_procrustes_identity():
    pts = np.random.default_rng(0).normal(size=(20, 3))
    np.testing.assert_allclose(geo.procrustes_rotation(pts, pts), np.eye(3), atol=1e-12)


def test_procrustes_recovers_rotation():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(50, 3))
    R = random_rotation(rng)
    assert np.linalg.norm(geo.procrustes_rotation(pts, pts @ R.T) - R) < 1e-8


def test_procrustes_degenerate():
    with pytest.raises(geo.DegenerateInput):
        geo.procrustes_rotation(np.ones((10, 3)), np.ones((10, 3)))


@given(st.integers(0, 10**6))
def test_procrustes_is_orthogonal(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    R = geo.procrustes_rotation(a, b)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)


def test_cylinder_axis_z():
    pts, nrm = cylinder(np.random.default_rng(2), np.array([0, 0, 1.0]))
    assert abs(geo.cylinder_axis(nrm) @ np.array([0, 0, 1.0])) > 1 - 1e-9


def test_cylinder_axis_rotated():
    rng = np.random.default_rng(3)
    R = random_rotation(rng)
    _, nrm = cylinder(rng, np.array([0, 0, 1.0]))
    assert abs(geo.cylinder_axis(nrm @ R.T) @ R[:, 2]) > 1 - 1e-9


def test_cylinder_axis_degenerate():
    with pytest.raises(geo.DegenerateInput):
        geo.cylinder_axis(np.tile([0, 0, 1.0], (10, 1)))


def test_plane_normal():
    rng = np.random.default_rng(4)
    pts = np.column_stack([rng.normal(size=(30, 2)), np.zeros(30)])
    np.testing.assert_allclose(geo.plane_normal(pts), [0, 0, 1], atol=1e-12)
    R = random_rotation(rng)
    n = geo.plane_normal(pts @ R.T + 0.3)
    assert min(np.abs(n - R[:, 2]).max(), np.abs(n + R[:, 2]).max()) < 1e-9
    with pytest.raises(geo.DegenerateInput):
        geo.plane_normal(np.outer(np.linspace(0, 1, 10), [1, 2, 3]))


@pytest.mark.parametrize("apex", [np.zeros(3), np.array([1.0, 2.0, 3.0])])
def test_cone_apex(apex):
    pts, nrm = cone(np.random.default_rng(5), apex)
    assert np.linalg.norm(geo.cone_apex(nrm, pts) - apex) < 1e-8


def test_cone_apex_degenerate_on_cylinder():
    pts, nrm = cylinder(np.random.default_rng(6), np.array([0, 0, 1.0]))
    with pytest.raises(geo.DegenerateInput):
        geo.cone_apex(nrm, pts)


def test_sphere_fit():
    rng = np.random.default_rng(7)
    c, r = geo.sphere_fit(sphere(rng, np.zeros(3), 1.0))
    assert np.linalg.norm(c) < 1e-8 and abs(r - 1) < 1e-8
    center = np.array([0.3, -0.2, 0.5])
    c, r = geo.sphere_fit(sphere(rng, center, 0.7))
    assert np.linalg.norm(c - center) < 1e-8 and abs(r - 0.7) < 1e-8


def test_sphere_fit_coplanar():
    t = np.linspace(0, 2 * np.pi, 20, endpoint=False)
    with pytest.raises(geo.DegenerateInput):
        geo.sphere_fit(np.column_stack([np.cos(t), np.sin(t), np.zeros(20)]))


@given(st.integers(0, 10**6))
def test_equivariance_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    R, t = random_rotation(rng), rng.normal(size=3)

    def move(p):
        return p @ R.T + t

    pts, nrm = cylinder(rng, np.array([0, 0, 1.0]))
    a = geo.cylinder_axis(nrm @ R.T)
    b = R @ geo.cylinder_axis(nrm)
    assert min(np.abs(a - b).max(), np.abs(a + b).max()) < 1e-8

    plane = np.column_stack([rng.normal(size=(30, 2)), np.zeros(30)])
    a, b = geo.plane_normal(move(plane)), R @ geo.plane_normal(plane)
    assert min(np.abs(a - b).max(), np.abs(a + b).max()) < 1e-8

    cp, cn = cone(rng, rng.normal(size=3))
    np.testing.assert_allclose(geo.cone_apex(cn @ R.T, move(cp)), move(geo.cone_apex(cn, cp)), atol=1e-8)

    sp = sphere(rng, rng.normal(size=3), 0.5)
    c0, r0 = geo.sphere_fit(sp)
    c1, r1 = geo.sphere_fit(move(sp))
    np.testing.assert_allclose(c1, move(c0), atol=1e-8)
    assert abs(r1 - r0) < 1e-8


def test_primitive_residual_on_patches():
    rng = np.random.default_rng(8)
    for name in ("plane_normal", "sphere_center", "cylinder_axis", "cone_apex"):
        part = make_part(name, rng)
        assert geo.primitive_residual(part.truth, part.positions) < 1e-9


@pytest.mark.parametrize("feat", FEATURES, ids=[f.name for f in FEATURES])
def test_dsl_feature_matches_oracle(feat):
    rng = np.random.default_rng(9)
    for _ in range(5):
        assert feature_error(feat, make_part(feat.name, rng)) < 1e-6


def test_dsl_features_recover_ground_truth():
    rng = np.random.default_rng(10)
    part = make_part("rotation", rng)
    np.testing.assert_allclose(FEATURES[0].oracle(part).reshape(3, 3), part.truth, atol=1e-9)
    part = make_part("cone_apex", rng)
    np.testing.assert_allclose(FEATURES[1].oracle(part), part.truth.vec_a, atol=1e-8)


def test_oracle_check_all_pass():
    rows = oracle_check(seed=1)
    assert len(rows) == 6 and all(r.passed for r in rows)
