"""Dual-channel temporal graph attention encoder.

For every node ``i`` and incident edge to ``j`` visible at time ``now``:

* structural weight: softmax over the neighborhood of
  ``LeakyReLU(a_s . [W_s h_i || W_s h_j])``
* temporal weight: ``exp(-gamma * (now - t_edge))``
* update: ``h_i' = act(sum_j (lambda_s * w_struct + lambda_t * w_time) * W h_j)``

The fused weights are used as is, without renormalization. Parallel edges
each contribute their own term, all aged by the most recent edge of the pair. A node with no visible edge falls back to a
single self-loop with zero elapsed time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import DimensionError, DomainError, EmptyNeighborhood, NumericError
from .graph import CATEGORIES, as_view


@dataclass
class EncoderConfig:
    hidden_dim: int = 32
    n_layers: int = 2
    slope: float = 0.2
    activation: str = "leaky_relu"
    direction: str = "both"
    gamma_init: float = 0.1
    lambda_init: float = 0.5
    use_temporal: bool = True
    category_onehot: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise DomainError("n_layers must be >= 1")
        if self.hidden_dim < 1:
            raise DomainError("hidden_dim must be >= 1")
        if self.activation not in ("leaky_relu", "tanh"):
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.gamma_init < 0:
            raise DomainError("gamma_init must be >= 0")


@dataclass
class NodeEmbeddingTable:
    values: np.ndarray
    as_of: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError("embedding table must be 2-D")
        nx.check_finite(self.values, "embedding table")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, node):
        return self.values[node]


@dataclass
class Messages:
    """Flattened neighborhoods: one row per (receiver i, sender j, edge) term."""

    target: np.ndarray  # i
    source: np.ndarray  # j
    dt: np.ndarray
    eid: np.ndarray  # -1 for self-loop fallbacks
    n_nodes: int
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _inverse_softplus(y):
    if y <= 0:
        return -30.0
    return float(y + math.log(-math.expm1(-y)))


def layer_dims(in_dim, config: EncoderConfig):
    dims = [in_dim] + [config.hidden_dim] * config.n_layers
    return list(zip(dims[:-1], dims[1:]))


def init_encoder_params(store: nx.ParamStore, in_dim: int, config: EncoderConfig, prefix="enc"):
    """Register every layer's W_s, a_s, W, gamma (via softplus), lambda_s, lambda_t."""
    for layer, (d_in, d_out) in enumerate(layer_dims(in_dim, config)):
        p = f"{prefix}.{layer}"
        store.add(f"{p}.W_s", (d_out, d_in))
        store.add(f"{p}.a_s", (2 * d_out,))
        store.add(f"{p}.W", (d_out, d_in))
        store.add(f"{p}.gamma_raw", (), "constant", value=_inverse_softplus(config.gamma_init))
        store.add(f"{p}.lambda_s", (), "constant", value=config.lambda_init)
        if config.use_temporal:
            store.add(f"{p}.lambda_t", (), "constant", value=config.lambda_init)
        else:
            store.add(f"{p}.lambda_t", (), "zeros", trainable=False)
            store.frozen.add(f"{p}.gamma_raw")
    return store


def layer_params(store, layer, prefix="enc"):
    p = f"{prefix}.{layer}"
    return {k: store[f"{p}.{k}"] for k in ("W_s", "a_s", "W", "gamma_raw", "lambda_s", "lambda_t")}


def gamma_value(store, layer, prefix="enc") -> float:
    return float(np.logaddexp(0.0, store[f"{prefix}.{layer}.gamma_raw"].value))


def initial_features(graph, category_onehot=True) -> np.ndarray:
    x = graph.features
    if not category_onehot:
        return x
    onehot = np.zeros((graph.num_nodes, len(CATEGORIES)))
    onehot[np.arange(graph.num_nodes), graph.categories] = 1.0
    return np.hstack([x, onehot])


def build_messages(graph, now, direction="both") -> Messages:
    """Collect every neighborhood term visible at ``now`` (edges with t <= now)."""
    view = as_view(graph)
    ea = view.edge_arrays()
    keep = ea.timestamp <= now
    src, dst, t, eid = ea.src[keep], ea.dst[keep], ea.timestamp[keep], ea.eid[keep]
    parts = []
    if direction in ("in", "both"):
        parts.append((dst, src, t, eid))
    if direction in ("out", "both"):
        loop = src != dst if direction == "both" else np.ones(len(src), dtype=bool)
        parts.append((src[loop], dst[loop], t[loop], eid[loop]))
    if direction not in ("in", "out", "both"):
        raise DomainError(f"unknown direction {direction!r}")
    tgt = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.int64)
    srcs = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int64)
    ts = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0, np.int64)
    eids = np.concatenate([p[3] for p in parts]) if parts else np.zeros(0, np.int64)

    n = view.num_nodes
    has = np.zeros(n, dtype=bool)
    has[tgt] = True
    lonely = np.flatnonzero(~has)
    tgt = np.concatenate([tgt, lonely])
    srcs = np.concatenate([srcs, lonely])
    ts = np.concatenate([ts, np.full(len(lonely), now, dtype=np.int64)])
    eids = np.concatenate([eids, np.full(len(lonely), -1, dtype=np.int64)])
    order = np.lexsort((eids, ts, tgt))
    tgt, srcs, ts, eids = tgt[order], srcs[order], ts[order], eids[order]
    dt = (now - pair_latest(tgt, srcs, ts)).astype(np.float64)
    return Messages(tgt, srcs, dt, eids, n, lonely)


def pair_latest(tgt, src, ts) -> np.ndarray:
    """For each term, the latest timestamp among terms sharing its (target, source) pair."""
    if len(ts) == 0:
        return ts
    key = np.lexsort((src, tgt))
    t_sorted = ts[key]
    starts = np.flatnonzero(np.r_[True, (np.diff(tgt[key]) != 0) | (np.diff(src[key]) != 0)])
    group_max = np.maximum.reduceat(t_sorted, starts)
    sizes = np.diff(np.r_[starts, len(ts)])
    out = np.empty_like(ts)
    out[key] = np.repeat(group_max, sizes)
    return out


def temporal_decay(delta_t, gamma):
    """``exp(-gamma * delta_t)``; both arguments must be nonnegative."""
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if np.any(delta_t < 0):
        raise DomainError("elapsed time must be nonnegative")
    if gamma < 0:
        raise DomainError("decay rate must be nonnegative")
    out = np.exp(-gamma * delta_t)
    return float(out) if out.ndim == 0 else out


def _activate(x, config):
    if config.activation == "tanh":
        return nx.tanh(x)
    return nx.leaky_relu(x, config.slope)


def attention_logits(H, msgs: Messages, prm, slope):
    Hs = nx.matmul(H, nx.transpose(prm["W_s"]))
    pair = nx.concat([nx.gather_rows(Hs, msgs.target), nx.gather_rows(Hs, msgs.source)], axis=1)
    return nx.leaky_relu(nx.matmul(pair, prm["a_s"]), slope)


def encoder_layer(H, msgs: Messages, prm, config: EncoderConfig):
    """One fused dual-channel update for all nodes at once (differentiable)."""
    n = msgs.n_nodes
    alpha_s = nx.segment_softmax(attention_logits(H, msgs, prm, config.slope), msgs.target, n)
    gamma = nx.softplus(prm["gamma_raw"])
    alpha_t = nx.exp(nx.mul(nx.neg(gamma), msgs.dt))
    coef = nx.add(nx.mul(prm["lambda_s"], alpha_s), nx.mul(prm["lambda_t"], alpha_t))
    WH = nx.matmul(H, nx.transpose(prm["W"]))
    msg = nx.mul(nx.reshape(coef, (-1, 1)), nx.gather_rows(WH, msgs.source))
    return _activate(nx.segment_sum(msg, msgs.target, n), config)


def encode_tensor(H0, msgs: Messages, store, config: EncoderConfig, prefix="enc"):
    H = nx.as_tensor(H0)
    for layer in range(config.n_layers):
        H = encoder_layer(H, msgs, layer_params(store, layer, prefix), config)
    return H


def encode(graph, features, store, config: EncoderConfig, now, prefix="enc") -> NodeEmbeddingTable:
    """Layer-wise synchronous encoding of every node as of ``now``."""
    msgs = build_messages(graph, now, config.direction)
    H = encode_tensor(np.asarray(features, dtype=np.float64), msgs, store, config, prefix)
    if not np.all(np.isfinite(H.value)):
        raise NumericError("non-finite encoder output")
    return NodeEmbeddingTable(H.value, int(now))


# -- single-node views of the same computation -----------------------------------


def _single_node_messages(i, neighbor_set, dts=None):
    k = len(neighbor_set)
    return Messages(
        target=np.zeros(k, dtype=np.int64),
        source=np.arange(1, k + 1, dtype=np.int64),
        dt=np.zeros(k) if dts is None else np.asarray(dts, dtype=np.float64),
        eid=np.full(k, -1, dtype=np.int64),
        n_nodes=k + 1,
    )


def structural_attention(i, neighbor_set, H, prm, slope=0.2) -> np.ndarray:
    """Attention weights of node ``i`` over ``neighbor_set`` (raises on an empty set)."""
    neighbor_set = list(neighbor_set)
    if not neighbor_set:
        raise EmptyNeighborhood(f"node {i} has no neighbors")
    H = np.asarray(H.values if isinstance(H, NodeEmbeddingTable) else H)
    local = H[[i] + neighbor_set]
    msgs = _single_node_messages(i, neighbor_set)
    logits = attention_logits(nx.Tensor(local), msgs, prm, slope)
    return nx.segment_softmax(logits, msgs.target, msgs.n_nodes).value


def fuse_and_update(i, H, graph, store, config: EncoderConfig, now, layer=0, prefix="enc") -> np.ndarray:
    """New embedding for node ``i`` alone, computed from its visible neighborhood."""
    H = np.asarray(H.values if isinstance(H, NodeEmbeddingTable) else H)
    nbrs = as_view(graph).neighbors(i, up_to=now, direction=config.direction)
    if nbrs:
        ids = [j for j, _ in nbrs]
        edges = as_view(graph).graph.edges
        latest: dict = {}
        for j, e in nbrs:
            latest[j] = max(latest.get(j, edges[e].timestamp), edges[e].timestamp)
        dts = [now - latest[j] for j in ids]
    else:
        ids, dts = [i], [0.0]
    local = H[[i] + ids]
    msgs = _single_node_messages(i, ids, dts)
    out = encoder_layer(nx.Tensor(local), msgs, layer_params(store, layer, prefix), config)
    return out.value[0]
