"""Edge-conditioned message passing with a weight-shared GRU update and a Gaussian head.

Several molecules can be processed at once as a disjoint union (:class:`GraphBatch`);
messages only flow along the complete graph of each molecule.

Parameter naming, for a network ``net`` in ``{"prior", "posterior", "likelihood"}``::

    node_embed                          shared by all networks, (d_v, d_h)
    net.edge_embed                      (d_e [+1 for posterior], d_h*d_h)
    net.J.W, net.J.b                    aggregation, (2*d_h, d_h)
    net.gru.{W,U,b}_{z,r,n}             GRU gates, W acts on the message, U on the state
    net.head.{W1,b1,W2,b2}              two tanh layers d_h -> d_f -> d_f
    net.head.{W_mu,b_mu,W_sigma,b_sigma}    the likelihood has only W_mu
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussian import GaussianSet

NETWORKS = ("prior", "posterior", "likelihood")
_GATES = ("z", "r", "n")


@dataclass(frozen=True)
class MPNNConfig:
    L: int = 3
    d_h: int = 50
    d_f: int = 100

    def __post_init__(self):
        if self.L < 1 or self.d_h < 1 or self.d_f < 1:
            raise ValueError(f"invalid MPNN config {self}")

    @property
    def d_z(self) -> int:
        # the likelihood adds z_i to the node embedding, so widths must agree
        return self.d_h


class GraphBatch:
    """Disjoint union of complete molecular graphs.

    ``pair_i``/``pair_j`` index the global node array; pairs of molecule ``k``
    occupy ``pair_offsets[k]:pair_offsets[k+1]`` in upper-triangular order.
    """

    def __init__(self, node_features_list, edge_features_list):
        sizes = [len(nf) for nf in node_features_list]
        self.n_atoms = np.array(sizes, dtype=np.int64)
        self.atom_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        pair_i, pair_j, pair_sizes = [], [], []
        for off, m, ef in zip(self.atom_offsets, sizes, edge_features_list):
            r, c = np.triu_indices(m, k=1)
            if len(ef) != len(r):
                raise ad.ShapeError(f"expected {len(r)} edge feature rows for {m} atoms, got {len(ef)}")
            pair_i.append(r + off)
            pair_j.append(c + off)
            pair_sizes.append(len(r))
        self.pair_i = np.concatenate(pair_i).astype(np.int64) if pair_i else np.zeros(0, np.int64)
        self.pair_j = np.concatenate(pair_j).astype(np.int64) if pair_j else np.zeros(0, np.int64)
        self.pair_offsets = np.concatenate([[0], np.cumsum(pair_sizes)]).astype(np.int64)
        self.node_features = np.concatenate([np.asarray(n, dtype=np.float64) for n in node_features_list])
        d_e = edge_features_list[0].shape[1] if len(edge_features_list) else 0
        self.edge_features = np.concatenate(
            [np.asarray(e, dtype=np.float64).reshape(-1, d_e) for e in edge_features_list]
        )
        # directed message endpoints: both orientations of every pair
        self._dst = np.concatenate([self.pair_i, self.pair_j])

    @classmethod
    def from_graphs(cls, graphs) -> "GraphBatch":
        for g in graphs:
            if g.node_features is None:
                raise ValueError(f"graph {g.name!r} is not featurized")
        return cls([g.node_features for g in graphs], [g.edge_features for g in graphs])

    @property
    def n_nodes(self) -> int:
        return int(self.atom_offsets[-1])

    @property
    def n_molecules(self) -> int:
        return len(self.n_atoms)

    def atom_slice(self, k: int) -> slice:
        return slice(int(self.atom_offsets[k]), int(self.atom_offsets[k + 1]))

    def pair_slice(self, k: int) -> slice:
        return slice(int(self.pair_offsets[k]), int(self.pair_offsets[k + 1]))


@dataclass
class NodeStates:
    h: Tensor
    edge_h: Tensor  # (P, d_h, d_h), fixed across rounds
    batch: GraphBatch


# -- parameters ------------------------------------------------------------------------


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def network_shapes(net: str, config: MPNNConfig, d_e: int, out_dim: int, with_variance: bool,
                   with_mean_bias: bool = True) -> dict:
    d_h, d_f = config.d_h, config.d_f
    shapes = {
        f"{net}.edge_embed": (d_e, d_h * d_h),
        f"{net}.J.W": (2 * d_h, d_h),
        f"{net}.J.b": (d_h,),
        f"{net}.head.W1": (d_h, d_f),
        f"{net}.head.b1": (d_f,),
        f"{net}.head.W2": (d_f, d_f),
        f"{net}.head.b2": (d_f,),
        f"{net}.head.W_mu": (d_f, out_dim),
    }
    if with_mean_bias:
        shapes[f"{net}.head.b_mu"] = (out_dim,)
    for g in _GATES:
        shapes[f"{net}.gru.W_{g}"] = (d_h, d_h)
        shapes[f"{net}.gru.U_{g}"] = (d_h, d_h)
        shapes[f"{net}.gru.b_{g}"] = (d_h,)
    if with_variance:
        shapes[f"{net}.head.W_sigma"] = (d_f, out_dim)
        shapes[f"{net}.head.b_sigma"] = (out_dim,)
    return shapes


def init_network(rng, net, config, d_e, out_dim, with_variance=True, with_mean_bias=True) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in network_shapes(net, config, d_e, out_dim, with_variance, with_mean_bias).items():
        params[name] = np.zeros(shape) if len(shape) == 1 else _glorot(rng, *shape)
    return params


def as_tensors(params, tape: "ad.Tape | None" = None) -> dict[str, Tensor]:
    """Wrap a parameter dict, as tape leaves when ``tape`` is given."""
    if tape is None:
        return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    return {k: tape.leaf(v) for k, v in params.items()}


# -- forward ---------------------------------------------------------------------------


def init_states(batch: GraphBatch, params, net: str, d_h: int, extra_node_term=None, extra_edge_input=None):
    """h0 = node features @ U_node (+ extra term); edge matrices from U_edge on
    the edge features, optionally with one extra scalar column per pair."""
    h = ad.matmul(Tensor(batch.node_features), params["node_embed"])
    if extra_node_term is not None:
        h = ad.add(h, extra_node_term)
    edge_in = batch.edge_features
    if extra_edge_input is not None:
        extra = np.asarray(extra_edge_input, dtype=np.float64).reshape(-1, 1)
        if len(extra) != len(edge_in):
            raise ad.ShapeError(f"extra edge input has {len(extra)} rows, expected {len(edge_in)}")
        edge_in = np.concatenate([edge_in, extra], axis=1)
    w = params[f"{net}.edge_embed"]
    if w.shape[0] != edge_in.shape[1]:
        raise ad.ShapeError(f"{net}.edge_embed expects {w.shape[0]} inputs, got {edge_in.shape[1]}")
    e = ad.matmul(Tensor(edge_in), w)
    edge_h = ad.reshape(e, (len(edge_in), d_h, d_h))
    return NodeStates(h, edge_h, batch)


def _gru(h: Tensor, m: Tensor, params, net: str) -> Tensor:
    p = f"{net}.gru."
    z = ad.sigmoid(ad.bias_add(ad.add(ad.matmul(m, params[p + "W_z"]), ad.matmul(h, params[p + "U_z"])), params[p + "b_z"]))
    r = ad.sigmoid(ad.bias_add(ad.add(ad.matmul(m, params[p + "W_r"]), ad.matmul(h, params[p + "U_r"])), params[p + "b_r"]))
    cand = ad.tanh(
        ad.bias_add(ad.add(ad.matmul(m, params[p + "W_n"]), ad.matmul(ad.mul(r, h), params[p + "U_n"])), params[p + "b_n"])
    )
    # (1 - z) * h + z * cand  ==  h + z * (cand - h)
    return ad.add(h, ad.mul(z, ad.sub(cand, h)))


def aggregate(states: NodeStates) -> Tensor:
    """Sum over j != i of edge_h(ij) @ h_j, for every node i."""
    b = states.batch
    if len(b.pair_i) == 0:
        return ad.scale(states.h, 0.0)
    to_i = ad.batched_matvec(states.edge_h, ad.gather_rows(states.h, b.pair_j))
    to_j = ad.batched_matvec(states.edge_h, ad.gather_rows(states.h, b.pair_i))
    return ad.segment_sum(ad.concat([to_i, to_j], axis=0), b._dst, b.n_nodes)


def message_pass_round(states: NodeStates, params, net: str) -> NodeStates:
    agg = aggregate(states)
    m = ad.linear(ad.concat([states.h, agg], axis=1), params[f"{net}.J.W"], params[f"{net}.J.b"])
    return NodeStates(_gru(states.h, m, params, net), states.edge_h, states.batch)


def run_mpnn(batch: GraphBatch, params, net: str, config: MPNNConfig, extra_node_term=None, extra_edge_input=None) -> Tensor:
    states = init_states(batch, params, net, config.d_h, extra_node_term, extra_edge_input)
    for _ in range(config.L):
        states = message_pass_round(states, params, net)
    return states.h


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return ad.mul(x, Tensor(mask))


def gaussian_head(h: Tensor, params, net: str, dropout_rate: float = 0.0, training: bool = False, rng=None, with_variance: bool = True) -> GaussianSet:
    """Two tanh layers (dropout after each while training), then mean and
    log-variance maps. Without a variance head the variance is fixed to 1;
    the mean bias is optional."""
    p = f"{net}.head."
    drop = training and dropout_rate > 0.0
    if drop and rng is None:
        raise ValueError("dropout during training needs an rng")
    x = ad.tanh(ad.linear(h, params[p + "W1"], params[p + "b1"]))
    if drop:
        x = _dropout(x, dropout_rate, rng)
    x = ad.tanh(ad.linear(x, params[p + "W2"], params[p + "b2"]))
    if drop:
        x = _dropout(x, dropout_rate, rng)
    mu = ad.linear(x, params[p + "W_mu"], params.get(p + "b_mu"))
    if with_variance:
        logvar = ad.linear(x, params[p + "W_sigma"], params[p + "b_sigma"])
    else:
        logvar = Tensor(np.zeros(mu.shape))
    return GaussianSet(mu, logvar)
