"""Esophagus graph construction and spatial message passing.

Each timestep is one graph over the 36 pressure sensors: a sensor chain
(35 spatial edges) plus 15 impedance edges linking every second sensor
starting at the third, i.e. 1-indexed pairs (3,5), (5,7), ..., (31,33) so
impedance channel j rides edge (2j+1, 2j+3). Undirected edges are realized
as two directed edges; self-loops are added so a node's own state survives
aggregation. Edge features are 4 wide: [impedance value | one-hot edge
kind (spatial, impedance, self)]; spatial and self edges carry 0 in the
value slot.

Two layer variants: an attention layer with dynamic two-layer scoring, and
a generalized layer with an MLP message and temperature-controlled
softmax aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .hrim import IMP_CHANNELS, MAN_SENSORS, WINDOW_SAMPLES

EDGE_FEATURE_DIM = 4  # value + one-hot(spatial, impedance, self)
KIND_SPATIAL, KIND_IMPEDANCE, KIND_SELF = 0, 1, 2


class GraphError(ValueError):
    pass


@dataclass
class SwallowGraphTopology:
    n_nodes: int
    spatial_pairs: np.ndarray     # [n_spatial, 2] 0-indexed undirected
    impedance_pairs: np.ndarray   # [n_impedance, 2] 0-indexed undirected
    edge_src: np.ndarray          # directed, incl. self loops
    edge_dst: np.ndarray
    edge_kind: np.ndarray
    edge_channel: np.ndarray      # impedance channel per directed edge, -1 otherwise
    agg_matrix: np.ndarray        # [n_nodes, n_edges] 0/1 incidence on dst

    @property
    def n_edges(self):
        return len(self.edge_src)

    @property
    def n_impedance(self):
        return len(self.impedance_pairs)

    def impedance_pairs_1indexed(self):
        return self.impedance_pairs + 1


def chain_topology(n_nodes=MAN_SENSORS, n_impedance=None):
    """Sensor-chain topology; impedance channel j joins 1-indexed sensors
    (2j+1, 2j+3). The clinical catheter has 15 channels on 36 sensors;
    scaled fixtures default to as many pairs as fit."""
    if n_nodes < 2:
        raise GraphError("need at least 2 nodes")
    max_fit = sum(1 for j in range(1, n_nodes) if 2 * j + 3 <= n_nodes)
    if n_impedance is None:
        n_impedance = IMP_CHANNELS if n_nodes == MAN_SENSORS else max_fit
    if n_impedance > max_fit:
        raise GraphError(f"{n_impedance} impedance pairs do not fit on {n_nodes} nodes")
    spatial = np.array([(i, i + 1) for i in range(n_nodes - 1)], dtype=int)
    imp = np.array([(2 * j, 2 * j + 2) for j in range(1, n_impedance + 1)], dtype=int)
    if imp.size == 0:
        imp = imp.reshape(0, 2)

    src, dst, kind, chan = [], [], [], []
    for a, b in spatial:
        for s, d in ((a, b), (b, a)):
            src.append(s)
            dst.append(d)
            kind.append(KIND_SPATIAL)
            chan.append(-1)
    for j, (a, b) in enumerate(imp):
        for s, d in ((a, b), (b, a)):
            src.append(s)
            dst.append(d)
            kind.append(KIND_IMPEDANCE)
            chan.append(j)
    for i in range(n_nodes):
        src.append(i)
        dst.append(i)
        kind.append(KIND_SELF)
        chan.append(-1)

    src = np.array(src, dtype=int)
    dst = np.array(dst, dtype=int)
    agg = (dst[None, :] == np.arange(n_nodes)[:, None]).astype(np.float64)
    return SwallowGraphTopology(
        n_nodes=n_nodes,
        spatial_pairs=spatial,
        impedance_pairs=imp,
        edge_src=src,
        edge_dst=dst,
        edge_kind=np.array(kind, dtype=int),
        edge_channel=np.array(chan, dtype=int),
        agg_matrix=agg,
    )


DEFAULT_TOPOLOGY = chain_topology(MAN_SENSORS)
assert len(DEFAULT_TOPOLOGY.spatial_pairs) == 35
assert len(DEFAULT_TOPOLOGY.impedance_pairs) == IMP_CHANNELS


def export_topology_csv(topology, path):
    rows = ["src,dst,kind,impedance_channel"]
    kinds = {KIND_SPATIAL: "spatial", KIND_IMPEDANCE: "impedance", KIND_SELF: "self"}
    for e in range(topology.n_edges):
        rows.append(f"{topology.edge_src[e]},{topology.edge_dst[e]},"
                    f"{kinds[int(topology.edge_kind[e])]},{topology.edge_channel[e]}")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


@dataclass
class SwallowGraphSequence:
    topology: SwallowGraphTopology
    node_features: np.ndarray    # [750, 36, 1] pressure
    edge_features: np.ndarray    # [750, 15, 1] impedance per undirected edge

    def __post_init__(self):
        if self.node_features.shape != (WINDOW_SAMPLES, self.topology.n_nodes, 1):
            raise GraphError(f"node feature shape {self.node_features.shape}")
        n_imp = len(self.topology.impedance_pairs)
        if self.edge_features.shape != (WINDOW_SAMPLES, n_imp, 1):
            raise GraphError(f"edge feature shape {self.edge_features.shape}")


def build_graph_sequence(event, topology=None):
    """One graph per timestep: node features from manometry, impedance edge
    features from the impedance matrix; spatial/self edges carry zeros."""
    topology = topology or DEFAULT_TOPOLOGY
    return SwallowGraphSequence(
        topology=topology,
        node_features=event.manometry[:, :, None].copy(),
        edge_features=event.impedance[:, :, None].copy(),
    )


def directed_edge_features(impedance, topology):
    """Expand impedance channels into per-directed-edge features.

    impedance: [B, n_channels] -> [B, n_edges, 4] with kind one-hot.
    """
    impedance = np.asarray(impedance, dtype=np.float64)
    b = impedance.shape[0]
    e = topology.n_edges
    out = np.zeros((b, e, EDGE_FEATURE_DIM))
    has_chan = topology.edge_channel >= 0
    out[:, has_chan, 0] = impedance[:, topology.edge_channel[has_chan]]
    out[np.arange(b)[:, None], np.arange(e)[None, :], 1 + topology.edge_kind[None, :]] = 1.0
    return out


# ---------------------------------------------------------------------------
# layer parameters


def init_gnn_params(rng, variant, layers=2, in_dim=1, hidden=32):
    """Per-layer weights; keys are flat ('gnn{l}_...') for the optimizer."""
    if layers < 1:
        raise GraphError("layer count must be >= 1")
    params = {}

    def mat(shape):
        scale = (2.0 / shape[0]) ** 0.5
        return ad.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    d_in = in_dim
    for layer in range(layers):
        msg_in = d_in + EDGE_FEATURE_DIM
        p = f"gnn{layer}_"
        params[p + "bias"] = ad.Tensor(np.zeros(msg_in), requires_grad=True)
        if variant == "generalized":
            params[p + "msg_w1"] = mat((msg_in, hidden))
            params[p + "msg_b1"] = ad.Tensor(np.zeros(hidden), requires_grad=True)
            params[p + "msg_w2"] = mat((hidden, hidden))
            params[p + "msg_b2"] = ad.Tensor(np.zeros(hidden), requires_grad=True)
            params[p + "temperature"] = ad.Tensor(np.array(1.0), requires_grad=True)
        elif variant == "attention":
            params[p + "msg_w"] = mat((msg_in, hidden))
            score_in = d_in + hidden
            params[p + "att_w"] = mat((score_in, hidden))
            params[p + "att_b"] = ad.Tensor(np.zeros(hidden), requires_grad=True)
            params[p + "att_v"] = mat((hidden, 1))
        else:
            raise GraphError(f"unknown gnn variant '{variant}'")
        d_in = hidden
    return params


def gnn_layer_forward(h, edge_feats, topology, params, layer, variant):
    """One round of message passing.

    h: Tensor [B, N, d_in]; edge_feats: Tensor [B, E, 4]. Messages are
    computed from the concatenated source-node and edge features plus a
    bias; aggregation is attention-weighted (attention variant) or
    temperature-softmax-weighted (generalized variant).
    """
    p = f"gnn{layer}_"
    agg = ad.constant(topology.agg_matrix)
    d_in = h.shape[2]

    # message input is concat(h_src, edge_feats) + bias; split the first
    # matmul so the node half runs on N nodes and is gathered afterwards
    # (same math as transforming per edge, far less work and memory)
    def split_first_matmul(w):
        w_node = ad.gather(w, np.arange(d_in), axis=0)
        w_edge = ad.gather(w, np.arange(d_in, w.shape[0]), axis=0)
        bias_row = ad.reshape(params[p + "bias"], (1, d_in + EDGE_FEATURE_DIM))
        return ad.add(
            ad.add(ad.gather(ad.matmul(h, w_node), topology.edge_src, axis=1),
                   ad.matmul(edge_feats, w_edge)),
            ad.matmul(bias_row, w))                     # [B, E, d]

    if variant == "generalized":
        m = ad.leaky_relu(ad.add(split_first_matmul(params[p + "msg_w1"]),
                                 params[p + "msg_b1"]))
        m = ad.add(ad.matmul(m, params[p + "msg_w2"]), params[p + "msg_b2"])
        z = ad.mul(m, params[p + "temperature"])
        shift = ad.constant(z.data.max(axis=1, keepdims=True))
        e = ad.exp(ad.sub(z, shift))
        denom = ad.matmul(agg, e)                       # [B, N, d]
        weights = ad.div(e, ad.gather(denom, topology.edge_dst, axis=1))
        pooled = ad.matmul(agg, ad.mul(weights, m))
    elif variant == "attention":
        m = split_first_matmul(params[p + "msg_w"])     # [B, E, d]
        # score input is concat(h_dst, m); same split trick for att_w
        aw = params[p + "att_w"]
        aw_dst = ad.gather(aw, np.arange(d_in), axis=0)
        aw_msg = ad.gather(aw, np.arange(d_in, aw.shape[0]), axis=0)
        u = ad.leaky_relu(ad.add(
            ad.add(ad.gather(ad.matmul(h, aw_dst), topology.edge_dst, axis=1),
                   ad.matmul(m, aw_msg)),
            params[p + "att_b"]))
        s = ad.matmul(u, params[p + "att_v"])           # [B, E, 1]
        shift = ad.constant(s.data.max(axis=1, keepdims=True))
        e = ad.exp(ad.sub(s, shift))
        denom = ad.matmul(agg, e)                       # [B, N, 1]
        alpha = ad.div(e, ad.gather(denom, topology.edge_dst, axis=1))
        pooled = ad.matmul(agg, ad.mul(alpha, m))
    else:
        raise GraphError(f"unknown gnn variant '{variant}'")
    return ad.leaky_relu(pooled)


def gnn_forward(node_feats, edge_feats, topology, params, layers, variant):
    """Stacked message passing; edge features are re-ingested each layer."""
    h = node_feats
    for layer in range(layers):
        h = gnn_layer_forward(h, edge_feats, topology, params, layer, variant)
    return h


def attention_coefficients(h, edge_feats, topology, params, layer):
    """Attention weights of one attention-variant layer (for invariants)."""
    p = f"gnn{layer}_"
    agg = ad.constant(topology.agg_matrix)
    h_src = ad.gather(h, topology.edge_src, axis=1)
    msg_in = ad.add(ad.concat([h_src, edge_feats], axis=2), params[p + "bias"])
    m = ad.matmul(msg_in, params[p + "msg_w"])
    h_dst = ad.gather(h, topology.edge_dst, axis=1)
    u = ad.leaky_relu(ad.add(
        ad.matmul(ad.concat([h_dst, m], axis=2), params[p + "att_w"]),
        params[p + "att_b"]))
    s = ad.matmul(u, params[p + "att_v"])
    shift = ad.constant(s.data.max(axis=1, keepdims=True))
    e = ad.exp(ad.sub(s, shift))
    denom = ad.matmul(agg, e)
    return ad.div(e, ad.gather(denom, topology.edge_dst, axis=1))


# ---------------------------------------------------------------------------
# node-level attention pooling (per category)


def init_node_pool_params(rng, hidden, n_categories=3):
    params = {}
    for c in range(n_categories):
        p = f"npool{c}_"
        params[p + "w"] = ad.Tensor(
            rng.normal(0.0, (2.0 / hidden) ** 0.5, size=(hidden, hidden)),
            requires_grad=True)
        params[p + "b"] = ad.Tensor(np.zeros(hidden), requires_grad=True)
        params[p + "v"] = ad.Tensor(
            rng.normal(0.0, (2.0 / hidden) ** 0.5, size=(hidden, 1)),
            requires_grad=True)
    return params


def node_attention_pool(h, params, category):
    """Convex combination over nodes: [B, N, d] -> [B, d].

    Scores come from a learned two-layer function; softmax over nodes
    guarantees nonnegative weights summing to 1.
    """
    p = f"npool{category}_"
    scores = ad.matmul(
        ad.leaky_relu(ad.add(ad.matmul(h, params[p + "w"]), params[p + "b"])),
        params[p + "v"])                                 # [B, N, 1]
    alpha = ad.softmax(scores, axis=1)
    return ad.tsum(ad.mul(alpha, h), axis=1)


def node_pool_weights(h, params, category):
    p = f"npool{category}_"
    scores = ad.matmul(
        ad.leaky_relu(ad.add(ad.matmul(h, params[p + "w"]), params[p + "b"])),
        params[p + "v"])
    return ad.softmax(scores, axis=1)
