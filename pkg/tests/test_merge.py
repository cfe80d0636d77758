import numpy as np
import pytest

from splitmerge import autodiff as ad
from splitmerge.autodiff import Tape, Tensor
from splitmerge.merge import (
    ChainLevel, MergePair, PtrNetMerge, StochasticChain, binarize_rows,
    chain_nll, chain_product, recursive_merge, regularized_binarize,
)
from splitmerge.split import normalize_input, sample_tree

from conftest import assert_grads_close, finite_diff, tape_grads
from test_split import StubSplitter, himove


def make_merge(in_dim=2, hidden=4, seed=0):
    return PtrNetMerge(in_dim, hidden, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# encoder


def test_encode_empty_second_input(rng):
    m = make_merge()
    pair = MergePair(rng.normal(size=(3, 2)), np.zeros((0, 2)))
    enc, d0 = m.encode(pair)
    assert enc.data.shape == (3, m.hidden)
    # recompute d0 by hand: relu(e0_last @ A0), no A1 term
    e_last = enc.data[-1]
    np.testing.assert_allclose(d0.data, np.maximum(e_last @ m.params["A0"].data, 0.0),
                               atol=1e-12)


def test_encode_rejects_empty_first_input():
    with pytest.raises(ValueError):
        MergePair(np.zeros((0, 2)), np.zeros((0, 2)))


def test_encode_zero_weights_constant_encodings(rng):
    m = make_merge()
    for p in m.params.values():
        p.data[...] = 0.0
    enc, d0 = m.encode(MergePair(rng.normal(size=(4, 2)), rng.normal(size=(2, 2))))
    np.testing.assert_array_equal(enc.data, 0.0)   # fixed point of the zero cell
    np.testing.assert_array_equal(d0.data, 0.0)


def test_gru_scalar_hand_trace():
    m = PtrNetMerge(1, 1, np.random.default_rng(0))
    p = m.params
    p["enc_Wz"].data[...] = 1.0
    p["enc_Uz"].data[...] = 0.0
    p["enc_bz"].data[...] = 0.0
    p["enc_Wr"].data[...] = 0.0
    p["enc_Ur"].data[...] = 0.0
    p["enc_br"].data[...] = 10.0
    p["enc_Wh"].data[...] = 1.0
    p["enc_Uh"].data[...] = 1.0
    p["enc_bh"].data[...] = 0.0

    def sig(x):
        return 1 / (1 + np.exp(-x))

    x1, x2 = 0.5, -0.3
    z1 = sig(x1)
    h1 = z1 * np.tanh(x1 + sig(10.0) * 0.0)
    z2 = sig(x2)
    h2 = (1 - z2) * h1 + z2 * np.tanh(x2 + sig(10.0) * h1)

    enc, _ = m.encode(MergePair(np.array([[x1], [x2]]), np.zeros((0, 1))))
    np.testing.assert_allclose(enc.data[:, 0], [h1, h2], atol=1e-12)


# ---------------------------------------------------------------------------
# attention


def test_attention_uniform_when_value_vector_zero(rng):
    m = make_merge()
    m.params["att_v"].data[...] = 0.0
    pair = MergePair(rng.normal(size=(3, 2)), rng.normal(size=(2, 2)))
    enc, d0 = m.encode(pair)
    row = m.attention_row(m._enc_keys(enc), d0)
    np.testing.assert_allclose(row.data, 1.0 / 6.0, atol=1e-12)   # 5 inputs + terminal


def test_attention_row_is_stochastic(rng):
    m = make_merge(seed=3)
    pair = MergePair(rng.normal(size=(4, 2)), rng.normal(size=(3, 2)))
    enc, d0 = m.encode(pair)
    row = m.attention_row(m._enc_keys(enc), d0)
    assert row.data.shape == (8,)
    np.testing.assert_allclose(row.data.sum(), 1.0, atol=1e-12)
    assert (row.data > 0).all()


def test_attention_hand_softmax_values():
    # craft logits (1, 0, -1) over three encodings; the content part of the
    # row renormalizes to the plain softmax of those logits
    m = PtrNetMerge(1, 1, np.random.default_rng(0))
    m.params["att_e"].data[...] = 1.0
    m.params["att_d"].data[...] = 0.0
    m.params["att_v"].data[...] = 1.0 / np.tanh(1.0)
    enc = Tensor(np.array([[1.0], [0.0], [-1.0]]))
    row = m.attention_row(m._enc_keys(enc), Tensor(np.zeros(1))).data
    content = row[:3] / row[:3].sum()
    np.testing.assert_allclose(content, [0.66524096, 0.24472847, 0.09003057], atol=1e-6)


# ---------------------------------------------------------------------------
# teacher-forced decoding


def test_teacher_forced_rows_stochastic(rng):
    m = make_merge(seed=5)
    pair = MergePair(rng.normal(size=(4, 2)), rng.normal(size=(2, 2)))
    gamma = m.teacher_forced(pair, [0, 5, 2, 6])   # 6 == terminal, last position
    assert gamma.data.shape == (4, 7)
    np.testing.assert_allclose(gamma.data.sum(axis=1), 1.0, atol=1e-9)


def test_teacher_forced_empty_targets(rng):
    m = make_merge()
    gamma = m.teacher_forced(MergePair(rng.normal(size=(3, 2)), np.zeros((0, 2))), [])
    assert gamma.data.shape == (0, 4)


def test_teacher_forced_rejects_bad_targets(rng):
    m = make_merge()
    pair = MergePair(rng.normal(size=(3, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        m.teacher_forced(pair, [4])
    with pytest.raises(ValueError):
        m.teacher_forced(pair, [3, 1])   # terminal index not in last position


def test_teacher_forced_loglik_gradient(rng):
    m = make_merge(in_dim=2, hidden=3, seed=9)
    pair = MergePair(rng.normal(size=(3, 2)), np.zeros((0, 2)))
    targets = [2, 0, 3]   # two content steps then stop

    def build():
        gamma = m.teacher_forced(pair, targets)
        picked = ad.pick(gamma, np.arange(3), np.array(targets))
        return ad.neg(ad.sum_all(ad.log(picked)))

    analytic = tape_grads(build, m.params)
    numeric = finite_diff(lambda: build().item(), m.params)
    assert_grads_close(analytic, numeric)


# ---------------------------------------------------------------------------
# generative decoding


def test_generative_single_element(rng):
    m = make_merge(seed=11)
    picks, gamma, rows = m.generative(MergePair(rng.normal(size=(1, 2)), np.zeros((0, 2))))
    assert picks == [0]           # only candidate; first step never stops
    assert gamma.data.shape == (1, 2)


def test_generative_binarized_rows_one_hot(rng):
    m = make_merge(seed=13)
    pair = MergePair(rng.normal(size=(4, 2)), rng.normal(size=(3, 2)))
    picks, gamma, rows = m.generative(pair)
    bar = binarize_rows(gamma.data)
    assert ((bar == 0) | (bar == 1)).all()
    np.testing.assert_array_equal(bar.sum(axis=1), 1.0)
    # every pick is its row's content argmax; beyond the forced first step it
    # is the full-row argmax (terminal included)
    for s, p in enumerate(picks):
        assert p == int(np.argmax(gamma.data[s, :7]))
        if s >= 1:
            assert p == int(np.argmax(gamma.data[s]))


def test_generative_monotone_hand_construction():
    """Rigged shift-register weights walk the input left to right then stop.

    Elements are basis vectors b1, b2, b3 of R^6. The encoder writes each
    element onto its own component; the decoder maps the previous pick's
    basis to the next component; attention keys subtract a from the matching
    component so tanh saturation makes the matched logit tanh(c-a) beat the
    unmatched tanh(c)-tanh(a). The terminal key sits at b4, exactly where the
    decoder points after the third element.
    """
    dim = 6
    m = PtrNetMerge(dim, dim, np.random.default_rng(0))
    p = m.params
    for name in list(p):
        p[name].data[...] = 0.0
    shift = np.zeros((dim, dim))
    for i in range(dim):
        shift[i, (i + 1) % dim] = 1.0
    for cell in ("enc", "dec"):
        p[f"{cell}_bz"].data[...] = 20.0          # update gate ~ 1
        p[f"{cell}_Wh"].data[...] = 10.0 * (np.eye(dim) if cell == "enc" else shift)
    a, c = 2.0, 6.0
    p["att_e"].data[...] = -a * np.eye(dim)
    p["att_d"].data[...] = c * np.eye(dim)
    p["att_v"].data[...] = 1.0
    p["end_key"].data[...] = 0.0
    p["end_key"].data[4] = -a                     # terminal acts like element at b4
    p["go"].data[...] = 0.0
    p["go"].data[0] = 1.0                         # decoder starts pointing at b1

    y = np.zeros((3, dim))
    for i in range(3):
        y[i, i + 1] = 1.0
    picks, gamma, rows = m.generative(MergePair(y, np.zeros((0, dim))))
    assert picks == [0, 1, 2]
    assert len(rows) == 4                        # three content rows then the stop row
    assert int(np.argmax(rows[-1].data)) == 3    # terminal column wins


def test_generative_replay_matches(rng):
    m = make_merge(seed=17)
    pair = MergePair(rng.normal(size=(5, 2)), np.zeros((0, 2)))
    picks, gamma, _ = m.generative(pair)
    picks2, gamma2, _ = m.generative(pair, forced_picks=picks)
    assert picks2 == picks
    np.testing.assert_array_equal(gamma2.data, gamma.data)


# ---------------------------------------------------------------------------
# regularized binarization


def test_regularized_binarize_hand_values():
    row = np.array([0.1, 0.6, 0.2, 0.1])
    out = regularized_binarize(row, eps=1e-4, depth=2).data
    np.testing.assert_allclose(out, [0.01, 0.96, 0.01, 0.01], atol=1e-12)
    assert np.argmax(out) == np.argmax(row)


def test_regularized_binarize_small_eps_close_to_one_hot(rng):
    row = rng.dirichlet(np.ones(5))
    out = regularized_binarize(row, eps=1e-12, depth=1).data
    onehot = np.zeros(5)
    onehot[np.argmax(row)] = 1.0
    np.testing.assert_allclose(out, onehot, atol=1e-10)


def test_regularized_binarize_eps_range_rejected():
    with pytest.raises(ValueError):
        regularized_binarize(np.ones(4) / 4, eps=0.1, depth=2)   # 0.1 >= 4^-2
    with pytest.raises(ValueError):
        regularized_binarize(np.ones(4) / 4, eps=0.0, depth=1)


def test_regularized_binarize_preserves_argmax(rng):
    for _ in range(50):
        row = rng.dirichlet(np.ones(6))
        out = regularized_binarize(row, eps=1e-9, depth=3).data
        assert np.argmax(out) == np.argmax(row)
        assert (out > 0).all() and (out < 1).all()


# ---------------------------------------------------------------------------
# stochastic chain algebra


def _stochastic(rng, r, c):
    m = rng.uniform(0.1, 1.0, size=(r, c))
    return m / m.sum(axis=1, keepdims=True)


def test_chain_product_identity_blocks():
    levels = [
        ChainLevel(blocks=[Tensor(np.eye(3))], terminal_tail=False),
        ChainLevel(blocks=[Tensor(np.eye(1)), Tensor(np.eye(1))], terminal_tail=True),
    ]
    chain = StochasticChain(levels=levels)
    np.testing.assert_array_equal(chain_product(chain).data, np.eye(3))


def test_chain_product_row_sums(rng):
    a = Tensor(_stochastic(rng, 3, 5))
    b = Tensor(_stochastic(rng, 2, 4))
    c = Tensor(_stochastic(rng, 2, 3))
    chain = StochasticChain(levels=[
        ChainLevel(blocks=[a], terminal_tail=False),
        ChainLevel(blocks=[b, c], terminal_tail=True),
    ])
    prod = chain_product(chain).data
    assert prod.shape == (3, 8)
    np.testing.assert_allclose(prod.sum(axis=1), 1.0, atol=1e-9)


def test_chain_product_hand_two_by_two():
    a = np.array([[0.25, 0.75], [0.6, 0.4]])
    b = np.array([[0.9, 0.1], [0.3, 0.7]])
    chain = StochasticChain(levels=[
        ChainLevel(blocks=[Tensor(a)], terminal_tail=False),
        ChainLevel(blocks=[Tensor(b)], terminal_tail=False),
    ])
    np.testing.assert_allclose(chain_product(chain).data, a @ b, atol=1e-12)


def test_chain_product_dimension_mismatch(rng):
    chain = StochasticChain(levels=[
        ChainLevel(blocks=[Tensor(_stochastic(rng, 2, 3))], terminal_tail=False),
        ChainLevel(blocks=[Tensor(_stochastic(rng, 5, 2))], terminal_tail=True),
    ])
    with pytest.raises(ad.ShapeError):
        chain_product(chain)


# ---------------------------------------------------------------------------
# recursive merge over trees


def _tree_and_elements(rng, n=8, depth=2, threshold=3):
    raw = rng.uniform(size=(n, 2))
    tree = sample_tree(raw, StubSplitter(himove), max_depth=depth,
                       leaf_threshold=threshold, rng=rng)
    return tree, normalize_input(raw).elements


def test_recursive_merge_depth0_single_level(rng):
    raw = rng.uniform(size=(4, 2))
    tree = sample_tree(raw, StubSplitter(himove), max_depth=0, leaf_threshold=1, rng=rng)
    m = make_merge(seed=21)
    res = recursive_merge(tree, m, normalize_input(raw).elements, "fully-generative")
    assert len(res.chain.levels) == 1
    np.testing.assert_array_equal(res.chain.column_elements, np.arange(4))


def test_recursive_merge_depth2_block_layout(rng):
    tree, elements = _tree_and_elements(rng)
    m = make_merge(seed=23)
    res = recursive_merge(tree, m, elements, "teacher-forced-at-root",
                          target_ids=[0, 3, 6])
    levels = res.chain.levels
    assert len(levels) == 3
    assert len(levels[0].blocks) == 1 and len(levels[1].blocks) == 2
    assert len(levels[2].blocks) == 4
    # level widths chain: root cols == level-1 rows + tail, etc.
    prod = chain_product(res.chain)
    assert prod.data.shape == (4, 9)             # 3 targets + stop row, 8 elements + terminal
    np.testing.assert_allclose(prod.data.sum(axis=1), 1.0, atol=1e-9)
    assert sorted(res.chain.column_elements.tolist()) == list(range(8))


def test_recursive_merge_generative_output_ids_valid(rng):
    tree, elements = _tree_and_elements(rng)
    m = make_merge(seed=29)
    res = recursive_merge(tree, m, elements, "fully-generative")
    assert res.output_ids, "root output must be nonempty"
    assert set(res.output_ids) <= set(range(8))


def test_recursive_merge_ragged_tree(rng):
    # threshold forces one child to stop early: identity pass-through level
    raw = rng.uniform(size=(9, 2))

    def lopsided(r):
        p = np.zeros(r.shape[0])
        p[-3:] = 1.0
        return p

    tree = sample_tree(raw, StubSplitter(lopsided), max_depth=2, leaf_threshold=3, rng=rng)
    scales = sorted(v.scale for v in tree.leaves)
    assert scales == [1, 2, 2]
    m = make_merge(seed=31)
    res = recursive_merge(tree, m, normalize_input(raw).elements,
                          "teacher-forced-at-root", target_ids=[1, 8])
    kinds = [lvl.block_kinds for lvl in res.chain.levels]
    assert kinds[1] == ["merge", "identity"] or kinds[1] == ["identity", "merge"]
    prod = chain_product(res.chain)
    np.testing.assert_allclose(prod.data.sum(axis=1), 1.0, atol=1e-9)
    val = chain_nll(res)
    assert np.isfinite(val.item())


def test_recursive_merge_binarize_fine_keeps_finite_nll(rng):
    tree, elements = _tree_and_elements(rng)
    m = make_merge(seed=37)
    res = recursive_merge(tree, m, elements, "teacher-forced-at-root",
                          target_ids=[2, 5], eps=1e-8, binarize_fine=True)
    for level in res.chain.levels[1:]:
        assert level.mode == "binarized"
    assert np.isfinite(chain_nll(res).item())


def test_chain_nll_gradient_matches_fd_depth2(rng):
    tree, elements = _tree_and_elements(rng)
    m = make_merge(in_dim=2, hidden=3, seed=41)
    base = recursive_merge(tree, m, elements, "teacher-forced-at-root",
                           target_ids=[1, 4, 7])

    def build():
        res = recursive_merge(tree, m, elements, "teacher-forced-at-root",
                              target_ids=[1, 4, 7], replay=base)
        return chain_nll(res)

    analytic = tape_grads(build, m.params)
    numeric = finite_diff(lambda: build().item(), m.params)
    assert_grads_close(analytic, numeric)


def test_chain_nll_gradient_binarized_lower_levels(rng):
    # with binarized fine scales only the root path carries gradient, and it
    # still matches finite differences under a pinned structure replay
    tree, elements = _tree_and_elements(rng)
    m = make_merge(in_dim=2, hidden=3, seed=43)
    base = recursive_merge(tree, m, elements, "teacher-forced-at-root",
                           target_ids=[0, 5], eps=1e-8, binarize_fine=True)

    def build():
        res = recursive_merge(tree, m, elements, "teacher-forced-at-root",
                              target_ids=[0, 5], eps=1e-8, binarize_fine=True,
                              replay=base)
        return chain_nll(res)

    analytic = tape_grads(build, m.params)
    numeric = finite_diff(lambda: build().item(), m.params)
    assert_grads_close(analytic, numeric)
