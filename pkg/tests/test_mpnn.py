import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvgae import autodiff as ad
from cvgae import molgraph as mg
from cvgae.autodiff import Tensor
from cvgae.model import init_params
from cvgae.mpnn import (
    GraphBatch,
    MPNNConfig,
    as_tensors,
    gaussian_head,
    init_states,
    message_pass_round,
    run_mpnn,
)

from synth import SMALL, random_dataset


def random_graph_inputs(rng, m, d_v=4, d_e=5):
    nodes = rng.normal(size=(m, d_v))
    edges = rng.normal(size=(m * (m - 1) // 2, d_e))
    return nodes, edges


def model_params(config=SMALL, d_v=4, d_e=5, seed=0):
    p = init_params(config, d_v, d_e, seed)
    rng = np.random.default_rng(seed + 1)
    # nonzero biases so that every term matters
    return {k: v if v.ndim > 1 else rng.normal(scale=0.3, size=v.shape) for k, v in p.items()}


def test_config_validation():
    with pytest.raises(ValueError):
        MPNNConfig(L=0)
    with pytest.raises(ValueError):
        MPNNConfig(d_h=0)
    assert MPNNConfig(d_h=7).d_z == 7


def test_zero_features_give_zero_states():
    p = as_tensors(model_params())
    batch = GraphBatch([np.zeros((3, 4))], [np.zeros((3, 5))])
    st_ = init_states(batch, p, "prior", SMALL.d_h)
    assert np.all(st_.h.value == 0.0)


def test_extra_node_term_added():
    p = as_tensors(model_params())
    z = np.random.default_rng(0).normal(size=(3, SMALL.d_h))
    batch = GraphBatch([np.zeros((3, 4))], [np.zeros((3, 5))])
    st_ = init_states(batch, p, "likelihood", SMALL.d_h, extra_node_term=Tensor(z))
    np.testing.assert_array_equal(st_.h.value, z)


def test_posterior_edge_width():
    params = init_params(SMALL, 4, 5)
    assert params["prior.edge_embed"].shape == (5, SMALL.d_h**2)
    assert params["posterior.edge_embed"].shape == (6, SMALL.d_h**2)
    p = as_tensors(params)
    rng = np.random.default_rng(0)
    batch = GraphBatch(*[[x] for x in random_graph_inputs(rng, 3)])
    st_ = init_states(batch, p, "posterior", SMALL.d_h, extra_edge_input=np.ones(3))
    assert st_.edge_h.shape == (3, SMALL.d_h, SMALL.d_h)
    with pytest.raises(ad.ShapeError):
        init_states(batch, p, "posterior", SMALL.d_h)


def test_update_gate_closed_keeps_state():
    params = model_params()
    params["prior.gru.b_z"] = np.full(SMALL.d_h, -1e3)
    p = as_tensors(params)
    rng = np.random.default_rng(2)
    batch = GraphBatch(*[[x] for x in random_graph_inputs(rng, 4)])
    s0 = init_states(batch, p, "prior", SMALL.d_h)
    s1 = message_pass_round(s0, p, "prior")
    np.testing.assert_array_equal(s1.h.value, s0.h.value)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_two_atoms_scalar_by_hand():
    cfg = MPNNConfig(L=1, d_h=1, d_f=1)
    v = [0.7, -1.3]
    e = 0.4
    w = dict(u=0.9, ue=1.5, jw1=0.6, jw2=-0.8, jb=0.1,
             wz=0.3, uz=-0.2, bz=0.05, wr=-0.4, ur=0.7, br=0.2, wn=1.1, un=0.5, bn=-0.3)
    params = {
        "node_embed": np.array([[w["u"]]]),
        "prior.edge_embed": np.array([[w["ue"]]]),
        "prior.J.W": np.array([[w["jw1"]], [w["jw2"]]]),
        "prior.J.b": np.array([w["jb"]]),
    }
    for g in "zrn":
        params[f"prior.gru.W_{g}"] = np.array([[w["w" + g]]])
        params[f"prior.gru.U_{g}"] = np.array([[w["u" + g]]])
        params[f"prior.gru.b_{g}"] = np.array([w["b" + g]])
    batch = GraphBatch([np.array([[v[0]], [v[1]]])], [np.array([[e]])])
    out = run_mpnn(batch, as_tensors(params), "prior", cfg).value[:, 0]

    h = [w["u"] * v[0], w["u"] * v[1]]
    edge = w["ue"] * e
    expected = []
    for i in range(2):
        j = 1 - i
        m = w["jw1"] * h[i] + w["jw2"] * (edge * h[j]) + w["jb"]
        z = _sig(w["wz"] * m + w["uz"] * h[i] + w["bz"])
        r = _sig(w["wr"] * m + w["ur"] * h[i] + w["br"])
        n = np.tanh(w["wn"] * m + w["un"] * (r * h[i]) + w["bn"])
        expected.append((1 - z) * h[i] + z * n)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_permutation_equivariance(seed, m):
    rng = np.random.default_rng(seed)
    p = as_tensors(model_params(seed=seed % 100))
    nodes, edges = random_graph_inputs(rng, m)
    z = rng.normal(size=(m, SMALL.d_h))
    dist = rng.uniform(0.5, 3.0, size=m * (m - 1) // 2)
    perm = rng.permutation(m)
    r, c = mg.pair_indices(m)
    old_pairs = [mg.pair_index(int(perm[a]), int(perm[b]), m) for a, b in zip(r, c)]

    base = GraphBatch([nodes], [edges])
    moved = GraphBatch([nodes[perm]], [edges[old_pairs]])
    for net, kw, kw_perm in [
        ("prior", {}, {}),
        ("likelihood", {"extra_node_term": Tensor(z)}, {"extra_node_term": Tensor(z[perm])}),
        ("posterior", {"extra_edge_input": dist}, {"extra_edge_input": dist[old_pairs]}),
    ]:
        a = run_mpnn(base, p, net, SMALL, **kw).value
        b = run_mpnn(moved, p, net, SMALL, **kw_perm).value
        assert np.max(np.abs(a[perm] - b)) < 1e-9


def test_rounds_compose_with_shared_weights():
    p = as_tensors(model_params(MPNNConfig(L=3, d_h=8, d_f=16)))
    rng = np.random.default_rng(5)
    batch = GraphBatch(*[[x] for x in random_graph_inputs(rng, 5)])
    s = init_states(batch, p, "prior", 8)
    one = message_pass_round(s, p, "prior")
    np.testing.assert_array_equal(run_mpnn(batch, p, "prior", MPNNConfig(L=1, d_h=8, d_f=16)).value, one.h.value)
    three = message_pass_round(message_pass_round(one, p, "prior"), p, "prior")
    np.testing.assert_array_equal(run_mpnn(batch, p, "prior", MPNNConfig(L=3, d_h=8, d_f=16)).value, three.h.value)


def test_more_rounds_change_output():
    p = as_tensors(model_params())
    rng = np.random.default_rng(6)
    batch = GraphBatch(*[[x] for x in random_graph_inputs(rng, 4)])
    a = run_mpnn(batch, p, "prior", MPNNConfig(L=2, d_h=8, d_f=16)).value
    b = run_mpnn(batch, p, "prior", MPNNConfig(L=4, d_h=8, d_f=16)).value
    assert np.max(np.abs(a - b)) > 1e-6


def test_single_weight_set_regardless_of_depth():
    shapes = [
        {k: v.shape for k, v in init_params(MPNNConfig(L=L, d_h=8, d_f=16), 4, 5).items()}
        for L in (1, 3, 5)
    ]
    assert shapes[0] == shapes[1] == shapes[2]
    for net in ("prior", "posterior", "likelihood"):
        assert sum(k.startswith(f"{net}.J.") for k in shapes[0]) == 2
        assert sum(k.startswith(f"{net}.gru.") for k in shapes[0]) == 9


def test_node_embedding_shared():
    params = init_params(SMALL, 4, 5)
    assert [k for k in params if "node_embed" in k] == ["node_embed"]


def test_batched_molecules_are_independent():
    p = as_tensors(model_params())
    rng = np.random.default_rng(8)
    a = random_graph_inputs(rng, 3)
    b = random_graph_inputs(rng, 5)
    joint = run_mpnn(GraphBatch([a[0], b[0]], [a[1], b[1]]), p, "prior", SMALL).value
    alone_a = run_mpnn(GraphBatch([a[0]], [a[1]]), p, "prior", SMALL).value
    alone_b = run_mpnn(GraphBatch([b[0]], [b[1]]), p, "prior", SMALL).value
    np.testing.assert_allclose(joint, np.vstack([alone_a, alone_b]), rtol=0, atol=1e-12)


def test_single_atom_molecule():
    p = as_tensors(model_params())
    out = run_mpnn(GraphBatch([np.ones((1, 4))], [np.zeros((0, 5))]), p, "prior", SMALL)
    assert out.shape == (1, SMALL.d_h)


# -- head ---------------------------------------------------------------------------


def test_zero_head_gives_standard_normal():
    params = {k: np.zeros_like(v) for k, v in model_params().items()}
    h = Tensor(np.random.default_rng(0).normal(size=(4, SMALL.d_h)))
    g = gaussian_head(h, as_tensors(params), "prior")
    assert np.all(g.mean.value == 0.0) and np.all(g.variance.value == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_head_variance_positive(seed, spread):
    rng = np.random.default_rng(seed)
    h = Tensor(rng.normal(scale=spread, size=(5, SMALL.d_h)))
    g = gaussian_head(h, as_tensors(model_params(seed=seed % 50)), "prior")
    assert g.shape == (5, SMALL.d_z)
    assert np.all(g.variance.value > 0.0)


def test_dropout_only_when_training():
    p = as_tensors(model_params())
    h = Tensor(np.random.default_rng(0).normal(size=(6, SMALL.d_h)))
    a = gaussian_head(h, p, "prior", 0.5, training=False, rng=np.random.default_rng(1))
    b = gaussian_head(h, p, "prior", 0.5, training=False, rng=np.random.default_rng(2))
    np.testing.assert_array_equal(a.mean.value, b.mean.value)
    c = gaussian_head(h, p, "prior", 0.5, training=True, rng=np.random.default_rng(1))
    assert np.max(np.abs(c.mean.value - a.mean.value)) > 0
    with pytest.raises(ValueError):
        gaussian_head(h, p, "prior", 0.5, training=True)


def test_likelihood_head_has_unit_variance_and_no_bias():
    params = init_params(SMALL, 4, 5)
    assert "likelihood.head.W_sigma" not in params
    assert "likelihood.head.b_mu" not in params
    g = gaussian_head(Tensor(np.ones((2, SMALL.d_h))), as_tensors(params), "likelihood", with_variance=False)
    assert g.shape == (2, 3) and np.all(g.variance.value == 1.0)


def test_end_to_end_gradcheck_four_atoms():
    ds = random_dataset(30, seed=11, max_heavy=4)
    g = next(g for g, _ in ds.entries if g.n_atoms == 4)
    batch = GraphBatch.from_graphs([g])
    params = model_params(MPNNConfig(L=2, d_h=4, d_f=6), ds.vocab.node_dim, ds.vocab.edge_dim)
    names = [k for k in params if k == "node_embed" or k.startswith("prior.")]
    weights = Tensor(np.random.default_rng(0).normal(size=(4, 4)))

    def fn(p):
        h = run_mpnn(batch, p, "prior", MPNNConfig(L=2, d_h=4, d_f=6))
        out = gaussian_head(h, p, "prior")
        return ad.add(ad.sum(ad.mul(out.mean, weights)), ad.sum(out.logvar))

    assert ad.grad_check(fn, {k: params[k] for k in names}, h=1e-5) < 1e-4
