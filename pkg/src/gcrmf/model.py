"""Forward composition: encoder -> meta-path subgraph embedding -> risk head.

The per-node representation fed to the classifier is ``[h_v || z_v]`` where
``h_v`` is the encoder output and ``z_v`` the subgraph embedding (``h_v``
itself when every meta-path is empty for ``v``). With meta-paths disabled
the representation is ``h_v`` alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nx
from .encoder import EncoderConfig, build_messages, encode_tensor, init_encoder_params, initial_features
from .graph import as_view
from .metapath import (
    MetaPath,
    default_metapaths,
    drop_instances,
    init_metapath_params,
    instance_sets,
    pooling_matrix,
    subgraph_tensor,
)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    metapaths: list = field(default_factory=default_metapaths)
    att_dim: int = 16
    max_per_hop: Optional[int] = 8
    max_total: Optional[int] = 64
    use_metapath: bool = True
    seed: int = 0

    @property
    def rep_dim(self) -> int:
        d = self.encoder.hidden_dim
        return 2 * d if self.use_metapath else d

    @property
    def max_path_len(self) -> int:
        return max((m.length for m in self.metapaths), default=0) if self.use_metapath else 0


def input_dim(graph, config: ModelConfig) -> int:
    return initial_features(as_view(graph), config.encoder.category_onehot).shape[1]


def init_model(graph, config: ModelConfig, seed=None) -> nx.ParamStore:
    store = nx.ParamStore(config.seed if seed is None else seed)
    init_encoder_params(store, input_dim(graph, config), config.encoder)
    if config.use_metapath:
        init_metapath_params(store, len(config.metapaths), config.encoder.hidden_dim, config.att_dim)
    store.add("cls.w", (config.rep_dim,))
    store.add("cls.b", (), "zeros")
    return store


@dataclass
class Context:
    """Everything about one (graph view, now) pair that does not depend on parameters."""

    now: int
    x0: np.ndarray
    msgs: object
    poolings: list  # [(P_m, nonempty_m)] over all nodes
    instance_sets: Optional[list] = None

    @property
    def n_nodes(self) -> int:
        return self.x0.shape[0]


def prepare(graph, config: ModelConfig, now, seed=None, dropout=0.0, id_map=None) -> Context:
    view = as_view(graph)
    x0 = initial_features(view, config.encoder.category_onehot)
    msgs = build_messages(view, now, config.encoder.direction)
    poolings, sets = [], None
    if config.use_metapath:
        seed = config.seed if seed is None else seed
        anchors = np.arange(view.num_nodes)
        sets = instance_sets(
            view, config.metapaths, anchors, config.max_per_hop, config.max_total, seed, now, id_map
        )
        if dropout > 0:
            sets = drop_instances(sets, view, dropout, seed)
        poolings = [pooling_matrix(row, view.num_nodes) for row in sets]
    return Context(int(now), x0, msgs, poolings, sets)


def forward(store, config: ModelConfig, ctx: Context, rows=None):
    """Return ``(h, z, rep)`` tensors; ``z``/``rep`` restricted to ``rows`` when given."""
    h = encode_tensor(ctx.x0, ctx.msgs, store, config.encoder)
    if not config.use_metapath:
        rep = h if rows is None else nx.gather_rows(h, rows)
        return h, rep, rep
    idx = np.arange(ctx.n_nodes) if rows is None else np.asarray(rows, dtype=np.int64)
    pools = [(P[idx], ne[idx]) for P, ne in ctx.poolings]
    z, _ = subgraph_tensor(h, pools, store, rows=idx)
    rep = nx.concat([nx.gather_rows(h, idx), z], axis=1)
    return h, z, rep


def risk_logits(store, rep):
    return nx.add(nx.matmul(rep, store["cls.w"]), store["cls.b"])


def risk_scores(store, rep: np.ndarray) -> np.ndarray:
    return nx.sigmoid(risk_logits(store, nx.Tensor(rep))).value


def representations(store, config: ModelConfig, graph, now, ctx: Optional[Context] = None) -> np.ndarray:
    ctx = ctx or prepare(graph, config, now)
    _, _, rep = forward(store, config, ctx)
    nx.check_finite(rep, "node representations")
    return rep.value
