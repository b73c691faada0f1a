import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from partsup import geometry as geo
from partsup import synthgen as sg
from partsup.synthgen import DomainSpec, FormatError, SpecError


@pytest.fixture(scope="module")
def prim():
    return sg.gen_primitive_dataset(sg.default_primitive_specs(shapes_count=8, points_per_shape=256), seed=5)


@pytest.fixture(scope="module")
def mob():
    return sg.gen_mobility_dataset(sg.default_mobility_specs(shapes_count=6, points_per_shape=128), seed=5)


def test_spec_validation():
    with pytest.raises(SpecError):
        DomainSpec("a", (0.5, 0.5, 0.5, 0.5))
    with pytest.raises(SpecError):
        DomainSpec("a", (1.0, 0, 0, 0), shapes_count=0)
    with pytest.raises(SpecError):
        DomainSpec("a", (1.0, 0, 0, 0), parts_per_shape=(3, 2))
    with pytest.raises(SpecError):
        DomainSpec("a", (1.0, 0, 0, 0), points_per_shape=8)
    with pytest.raises(SpecError):
        sg.gen_primitive_dataset([DomainSpec("a", (1.0, 0, 0, 0))], 0)


def test_shapes_satisfy_their_own_parameters(prim):
    for shapes in prim.domains.values():
        for s in shapes:
            for part in range(s.n_parts):
                mask = s.part_labels == part
                assert geo.primitive_residual(s.primitive(part), s.positions[mask]) < 1e-7


def test_normalization(prim, mob):
    for ds in (prim, mob):
        for shapes in ds.domains.values():
            for s in shapes:
                r = np.linalg.norm(s.positions - s.positions.mean(0), axis=1).max()
                assert 0.999 < r <= 1.0 + 1e-9
                np.testing.assert_allclose(np.linalg.norm(s.normals, axis=1), 1.0, atol=1e-12)


def test_labels_and_types(prim):
    for shapes in prim.domains.values():
        for s in shapes:
            assert s.n_points == 256
            np.testing.assert_array_equal(s.prim_types, s.part_kinds[s.part_labels])


def test_domain_shift_is_real(prim):
    hists = {k: sg.type_histogram(v) for k, v in prim.domains.items()}
    for a, b in itertools.combinations(hists.values(), 2):
        assert np.abs(a - b).sum() >= 0.5


def test_mobility_flow_matches_transforms(mob):
    for shapes in mob.domains.values():
        for s in shapes:
            assert s.flow is not None
            np.testing.assert_array_equal(s.flow[s.part_labels == 0], 0.0)
            mags = []
            for part in range(1, s.n_parts):
                mask = s.part_labels == part
                T = s.transform(part)
                np.testing.assert_allclose(T.apply(s.positions[mask]) - s.positions[mask], s.flow[mask], atol=1e-15)
                mags.append(np.linalg.norm(T.t))
            assert mags == sorted(mags)


def test_determinism_bytes():
    specs = sg.default_primitive_specs(shapes_count=3, points_per_shape=64)
    a = sg.dataset_bytes(sg.gen_primitive_dataset(specs, 1))
    b = sg.dataset_bytes(sg.gen_primitive_dataset(specs, 1))
    c = sg.dataset_bytes(sg.gen_primitive_dataset(specs, 2))
    assert a == b and a != c


def test_file_roundtrip(prim, mob, tmp_path):
    for ds in (prim, mob):
        path = tmp_path / "d.agpd"
        sg.write_dataset(ds, path)
        back = sg.read_dataset(path)
        assert back == ds.quantized()
        assert sg.dataset_bytes(back) == path.read_bytes()


def test_header_layout(prim):
    data = sg.dataset_bytes(prim)
    assert data[:4] == b"AGPD"
    assert int.from_bytes(data[4:8], "little") == 1
    assert data[8] == 0
    assert int.from_bytes(data[9:13], "little") == 4


def test_bad_magic(prim):
    data = bytearray(sg.dataset_bytes(prim))
    data[0:4] = b"XXXX"
    with pytest.raises(FormatError) as info:
        sg.parse_dataset(bytes(data))
    assert info.value.offset == 0


def test_bad_version(prim):
    data = bytearray(sg.dataset_bytes(prim))
    data[4] = 9
    with pytest.raises(FormatError, match="version"):
        sg.parse_dataset(bytes(data))


@given(st.integers(1, 10**6))
def test_truncation_rejected_with_offset(cut):
    data = sg.dataset_bytes(sg.gen_primitive_dataset(sg.default_primitive_specs(2, 32), 0))
    cut = cut % (len(data) - 1) + 1
    with pytest.raises(FormatError) as info:
        sg.parse_dataset(data[: len(data) - cut])
    assert info.value.offset <= len(data) - cut


def test_trailing_bytes_rejected(prim):
    data = sg.dataset_bytes(prim)
    with pytest.raises(FormatError, match="trailing"):
        sg.parse_dataset(data + b"\0")


def test_noise_option():
    clean = DomainSpec("a", (1.0, 0, 0, 0), 2, (2, 2), 64)
    noisy = DomainSpec("a", (1.0, 0, 0, 0), 2, (2, 2), 64, noise=0.01)
    a = sg.gen_primitive_shape(clean, np.random.default_rng(0))
    b = sg.gen_primitive_shape(noisy, np.random.default_rng(0))
    d = np.abs(a.positions - b.positions)
    assert 0 < d.max() < 0.1


def test_kmeans_pp_separates_blobs():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(c, 0.05, size=(30, 2)) for c in ((0, 0), (3, 0), (0, 3))])
    labels, centers = sg.kmeans_pp(x, 3, np.random.default_rng(1))
    for block in range(3):
        assert len(set(labels[30 * block: 30 * (block + 1)])) == 1
    assert len(set(labels)) == 3


def test_kmeanspp_domain_split(prim):
    shapes = [s for v in prim.domains.values() for s in v]
    groups = sg.kmeanspp_domain_split(shapes, 7, 4, seed=0)
    assert groups.shape == (len(shapes),)
    assert set(groups) == {0, 1, 2, 3}
    again = sg.kmeanspp_domain_split(shapes, 7, 4, seed=0)
    np.testing.assert_array_equal(groups, again)
    with pytest.raises(SpecError):
        sg.kmeanspp_domain_split(shapes[:3], 7, 4)
