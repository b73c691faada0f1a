import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from partsup import dsl, grammar
from partsup.dsl import Leaf, Mid, Pair, Single


def ops(k=12, b=2, seed=0):
    r = np.random.default_rng(seed)
    return dsl.build_operant_set({"P": r.normal(size=(b, k, 3)), "N": r.normal(size=(b, k, 3))})


def random_tree(seed, config=None):
    config = config or grammar.GrammarConfig(n_rows=12)
    return grammar.sample_tree(grammar.new_space(config), np.random.default_rng(seed))[0]


def test_operant_expansion_names():
    assert dsl.operant_names(["P", "N"]) == ["P", "N", "P_mul_N", "P_add_N", "P_minus_N", "N_minus_P", "cross_N_P"]
    assert dsl.operant_names(["P"]) == ["P", "dbl_P", "sq_P", "neg_P"]
    with pytest.raises(dsl.EmptyBaseSet):
        dsl.operant_names([])


def test_operant_values():
    P = np.array([[[1.0, 2.0, 3.0]]])
    N = np.array([[[0.0, 0.0, 1.0]]])
    o = dsl.build_operant_set({"P": P, "N": N})
    np.testing.assert_array_equal(o["P_mul_N"], [[[0, 0, 3]]])
    np.testing.assert_array_equal(o["N_minus_P"], N - P)
    np.testing.assert_array_equal(o["cross_N_P"], np.cross(N, P))
    single = dsl.build_operant_set({"P": P})
    np.testing.assert_array_equal(single["sq_P"], P * P)
    np.testing.assert_array_equal(single["neg_P"], -P)


DIMS = {"P": 3, "N": 3, "P_mul_N": 3, "M9": 9}


@pytest.mark.parametrize("text,dim", [
    ("identity(sum(identity(P)))", 3),
    ("identity(sum(cartesian(identity(P),identity(N))))", 9),
    ("orth(sum(cartesian(identity(P),identity(N))))", 9),
    ("identity(mean(matvec(identity(M9),identity(P))))", 3),
    ("identity(max(cross(identity(P),identity(mean(identity(N))))))", 3),
])
def test_infer_shape_valid(text, dim):
    shape = dsl.infer_shape(dsl.parse_tree(text), DIMS, 16)
    assert shape.grouped and shape.dim == dim


@pytest.mark.parametrize("text", [
    "orth(sum(identity(P)))",
    "identity(sum(cross(identity(M9),identity(P))))",
    "identity(sum(add(identity(M9),identity(P))))",
    "identity(sum(matvec(identity(P),identity(P))))",
    "identity(svd(cartesian(identity(P),identity(N))))",
    "identity(sum(identity(Q)))",
])
def test_infer_shape_errors(text):
    with pytest.raises(dsl.ShapeError):
        dsl.infer_shape(dsl.parse_tree(text), DIMS, 8)


def test_structure_rules():
    with pytest.raises(dsl.DSLError):
        dsl.check_structure(Mid(3, "identity", "sum", Single(Mid(2, "identity", "sum", Single(Leaf("identity", "P"))))))
    two_mids = Pair("add", Mid(2, "identity", "sum", Single(Leaf("identity", "P"))),
                    Mid(2, "identity", "sum", Single(Leaf("identity", "P"))))
    with pytest.raises(dsl.DSLError):
        dsl.check_structure(Mid(3, "identity", "sum", two_mids))


def test_grouping_semantics():
    o = ops()
    P = o["P"]
    np.testing.assert_allclose(dsl.evaluate_batch(dsl.parse_tree("identity(sum(identity(P)))"), o), P.sum(1))
    np.testing.assert_allclose(dsl.evaluate_batch(dsl.parse_tree("identity(mean(square(P)))"), o), (P * P).mean(1))
    np.testing.assert_allclose(dsl.evaluate_batch(dsl.parse_tree("neg(max(double(P)))"), o), -(2 * P).max(1))


def test_svd_grouping_smallest_singular_vector():
    o = ops(k=20)
    out = dsl.evaluate_batch(dsl.parse_tree("identity(svd(identity(P)))"), o)
    for b in range(2):
        _, s, vh = np.linalg.svd(o["P"][b])
        v = vh[-1] * np.sign(vh[-1][np.argmax(np.abs(vh[-1]))])
        np.testing.assert_allclose(out[b], v, atol=1e-12)
        assert abs(np.linalg.norm(out[b]) - 1) < 1e-12
        assert out[b][np.argmax(np.abs(out[b]))] > 0


def test_unary_semantics():
    x = np.random.default_rng(1).normal(size=(2, 5, 9))
    orth = dsl.apply_unary("orth", x, grouped=False)
    for m in orth.reshape(-1, 3, 3):
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
    inv = dsl.apply_unary("inv", x, grouped=False)
    for b in range(2):
        np.testing.assert_allclose(inv[b], np.linalg.pinv(x[b]).T, atol=1e-12)
    c = dsl.apply_unary("centralize", x, grouped=False)
    np.testing.assert_allclose(c.mean(axis=1), 0, atol=1e-12)
    g = dsl.apply_unary("centralize", x[:, 0], grouped=True)
    np.testing.assert_allclose(g.mean(axis=1), 0, atol=1e-12)


def test_binary_semantics():
    r = np.random.default_rng(2)
    a, b = r.normal(size=(1, 4, 3)), r.normal(size=(1, 4, 3))
    cart = dsl.apply_binary("cartesian", a, b)
    np.testing.assert_allclose(cart[0, 1].reshape(3, 3), np.outer(a[0, 1], b[0, 1]))
    m = r.normal(size=(1, 4, 9))
    mv = dsl.apply_binary("matvec", m, a)
    np.testing.assert_allclose(mv[0, 2], m[0, 2].reshape(3, 3) @ a[0, 2])
    np.testing.assert_allclose(dsl.apply_binary("cross", a, b), np.cross(a, b))


def test_grouped_child_broadcasts_in_pair():
    o = ops()
    out = dsl.evaluate_batch(dsl.parse_tree("identity(sum(minus(identity(P),identity(mean(identity(P))))))"), o)
    np.testing.assert_allclose(out, 0, atol=1e-12)


def test_nonfinite_input_rejected():
    o = ops()
    o["P"][0, 0, 0] = np.nan
    with pytest.raises(dsl.NumericalError):
        dsl.evaluate_batch(dsl.parse_tree("identity(sum(identity(P)))"), o)


def test_evaluate_tree_on_context():
    o = {k: v[0] for k, v in ops().items()}
    ctx = dsl.PartContext(np.arange(12), o)
    out = dsl.evaluate_tree(dsl.parse_tree("identity(sum(identity(N)))"), ctx)
    np.testing.assert_allclose(out, o["N"].sum(0))
    assert ctx.dims["cross_N_P"] == 3


def test_shape_soundness_1000_trees():
    o = ops(k=12)
    dims = {k: v.shape[-1] for k, v in o.items()}
    rng = np.random.default_rng(7)
    space = grammar.new_space(grammar.GrammarConfig(n_rows=12))
    for _ in range(1000):
        tree, _ = grammar.sample_tree(space, rng)
        expected = dsl.infer_shape(tree, dims, 12)
        out = dsl.evaluate_batch(tree, o)
        assert out.shape == (2, expected.dim)
        assert np.all(np.isfinite(out))


@given(st.integers(0, 10**6))
def test_determinism(seed):
    tree = random_tree(seed)
    o = ops(seed=seed % 97)
    a = dsl.evaluate_batch(tree, o)
    b = dsl.evaluate_batch(tree, o)
    assert a.tobytes() == b.tobytes()


SAFE = grammar.GrammarConfig(unary=("identity", "square", "double", "neg", "centralize"),
                             grouping=("sum", "mean", "max"), binary=("add", "minus", "mul", "cross"), n_rows=12)


@given(st.integers(0, 10**6))
def test_row_permutation_invariance(seed):
    tree = random_tree(seed, SAFE)
    o = ops(seed=seed % 89)
    perm = np.random.default_rng(seed).permutation(12)
    permuted = {k: v[:, perm] for k, v in o.items()}
    a, b = dsl.evaluate_batch(tree, o), dsl.evaluate_batch(tree, permuted)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9 * (1 + np.abs(a).max()))


@given(st.integers(0, 10**6))
def test_svd_root_row_permutation_up_to_sign(seed):
    o = ops(k=16, seed=seed % 31)
    perm = np.random.default_rng(seed).permutation(16)
    tree = dsl.parse_tree("identity(svd(centralize(N)))")
    a = dsl.evaluate_batch(tree, o)
    b = dsl.evaluate_batch(tree, {k: v[:, perm] for k, v in o.items()})
    for x, y in zip(a, b):
        assert min(np.abs(x - y).max(), np.abs(x + y).max()) < 1e-9


def test_parse_print_roundtrip_1000():
    rng = np.random.default_rng(11)
    space = grammar.new_space(grammar.GrammarConfig(n_rows=None))
    for _ in range(1000):
        tree, _ = grammar.sample_tree(space, rng)
        text = dsl.print_tree(tree)
        assert dsl.parse_tree(text) == tree
        assert dsl.print_tree(dsl.parse_tree(text)) == text


def test_parse_whitespace_insensitive():
    a = dsl.parse_tree("identity(sum(cartesian(identity(P),identity(N))))")
    b = dsl.parse_tree("  identity ( sum ( cartesian ( identity(P) ,\n identity( N ) ) ) ) ")
    assert a == b


@pytest.mark.parametrize("text,offset", [
    ("identity(sum(P))", 13),
    ("foo(sum(identity(P)))", 0),
    ("identity(sum(identity(P))", 25),
    ("identity(sum(identity(P))))", 26),
    ("identity(identity(P))", 17),
])
def test_parse_errors_report_offset(text, offset):
    with pytest.raises(dsl.ParseError) as info:
        dsl.parse_tree(text)
    assert info.value.offset == offset


def test_neighbor_sampling_contract():
    r = np.random.default_rng(0)
    pos = r.uniform(-1, 1, size=(200, 3))
    labels = (pos[:, 0] > 0).astype(int)
    idx = dsl.sample_part_neighbors(pos, labels, 5, 0.5, 32, np.random.default_rng(1))
    assert len(idx) == 32
    assert np.all(labels[idx] == labels[5])
    assert np.all(np.linalg.norm(pos[idx] - pos[5], axis=1) <= 0.5)
    again = dsl.sample_part_neighbors(pos, labels, 5, 0.5, 32, np.random.default_rng(1))
    np.testing.assert_array_equal(idx, again)


def test_neighbor_sampling_small_part_with_replacement():
    pos = np.zeros((3, 3))
    idx = dsl.sample_part_neighbors(pos, np.zeros(3, int), 0, 0.5, 10, np.random.default_rng(0))
    assert len(idx) == 10 and set(idx) <= {0, 1, 2}


def test_neighbor_sampling_without_replacement_when_enough():
    pos = np.zeros((50, 3))
    idx = dsl.sample_part_neighbors(pos, np.zeros(50, int), 0, 0.5, 20, np.random.default_rng(0))
    assert len(set(idx)) == 20


def test_neighbor_table():
    r = np.random.default_rng(0)
    pos = r.uniform(-1, 1, size=(100, 3))
    labels = r.integers(0, 3, size=100)
    table = dsl.part_neighbor_table(pos, labels, 0.5, 8, np.random.default_rng(0))
    assert table.shape == (100, 8)
    for i in range(100):
        assert np.all(labels[table[i]] == labels[i])
        assert np.all(np.linalg.norm(pos[table[i]] - pos[i], axis=1) <= 0.5)
