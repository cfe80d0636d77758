import numpy as np
import pytest

from splitmerge.gnn_merge import GnnMerge, gnn_edge_merge

from conftest import assert_grads_close, finite_diff, tape_grads


def test_zero_layers_scores_are_kernel_of_projected_inputs(rng):
    m = GnnMerge(in_dim=2, hidden=4, layers=0, out_dim=3, rng=rng)
    x = rng.normal(size=(5, 2))
    s = gnn_edge_merge(m, x).data
    np.testing.assert_allclose(s, s.T, atol=1e-9)
    assert (s > 0).all()
    proj = x @ m.params["Wo"].data
    d = ((proj[:, None, :] - proj[None, :, :]) ** 2).sum(-1)
    np.testing.assert_allclose(s, np.exp(-d), atol=1e-9)


def test_symmetry_and_positivity(rng):
    m = GnnMerge(in_dim=3, hidden=5, layers=3, out_dim=4, rng=rng)
    s = gnn_edge_merge(m, rng.normal(size=(7, 3))).data
    np.testing.assert_allclose(s, s.T, atol=1e-9)
    assert (s > 0).all()


def test_permutation_equivariance(rng):
    m = GnnMerge(in_dim=2, hidden=4, layers=2, out_dim=3, rng=rng)
    x = rng.normal(size=(6, 2))
    perm = rng.permutation(6)
    s = gnn_edge_merge(m, x).data
    sp = gnn_edge_merge(m, x[perm]).data
    np.testing.assert_allclose(sp, s[np.ix_(perm, perm)], atol=1e-9)


def test_three_node_scalar_hand_trace():
    m = GnnMerge(in_dim=1, hidden=1, layers=1, out_dim=1, rng=np.random.default_rng(0))
    for name in ("W1_0", "W2_0", "Wo"):
        m.params[name].data[...] = 1.0
    m.params["beta_0"].data[...] = 1.0
    m.params["log_tau"].data[...] = 0.0
    m.params["log_tau_out"].data[...] = 0.0
    x = np.array([[0.0], [1.0], [2.0]])
    a = np.exp(-((x - x.T) ** 2))
    v1 = np.maximum(x + (a @ x) / 3.0, 0.0)
    d = (v1 - v1.T) ** 2
    np.testing.assert_allclose(gnn_edge_merge(m, x).data, np.exp(-d), atol=1e-12)


def test_initial_adjacency_validation(rng):
    m = GnnMerge(in_dim=2, hidden=3, layers=2, out_dim=2, rng=rng)
    x = rng.normal(size=(4, 2))
    bad = np.arange(16.0).reshape(4, 4)
    with pytest.raises(ValueError):
        gnn_edge_merge(m, x, bad)
    adj = np.abs(rng.normal(size=(4, 4)))
    adj = adj + adj.T
    s_with = gnn_edge_merge(m, x, adj).data
    s_without = gnn_edge_merge(m, x).data
    assert not np.allclose(s_with, s_without)


def test_edge_logit_gradients(rng):
    m = GnnMerge(in_dim=2, hidden=3, layers=2, out_dim=2, rng=rng)
    x = rng.normal(size=(4, 2))
    probe = np.random.default_rng(5).normal(size=(4, 4))

    def build():
        from splitmerge import autodiff as ad
        return ad.sum_all(ad.mul(m.edge_logits(x), ad.Tensor(probe)))

    analytic = tape_grads(build, m.params)
    numeric = finite_diff(lambda: build().item(), m.params)
    assert_grads_close(analytic, numeric)
