"""Streaming adaptation of the live embedding table.

New edges arrive in micro-batches. Only the endpoints and their k-hop
frontier (k = encoder depth) are re-embedded; the fresh vectors are blended
into the table by exponential smoothing and every other row is left
untouched. Model parameters stay fixed.

The live table stores the classifier input ``[h || z]`` so scoring reads it
directly.
"""
from __future__ import annotations

import csv
import json
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import numerics as nx
from .encoder import build_messages, encode_tensor, initial_features
from .errors import DimensionError, DomainError, OutOfOrderError, ParseError
from .graph import Edge, RelationType, TemporalHeteroGraph
from .metapath import instance_sets, pooling_matrix, subgraph_tensor
from .metrics import rank_alerts
from .model import ModelConfig, prepare, representations, risk_scores


def smooth_update(z_old, z_hat, alpha):
    """``(1 - alpha) * z_old + alpha * z_hat``."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"smoothing rate must lie in [0, 1], got {alpha}")
    z_old = np.asarray(z_old, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_old.shape != z_hat.shape:
        raise DimensionError(f"shape mismatch {z_old.shape} vs {z_hat.shape}")
    return (1.0 - alpha) * z_old + alpha * z_hat


def k_hop(graph, seeds, k) -> list[int]:
    """Nodes within ``k`` undirected hops of ``seeds`` (seeds included), sorted."""
    seen = set(int(s) for s in seeds)
    frontier = deque((s, 0) for s in sorted(seen))
    while frontier:
        node, d = frontier.popleft()
        if d == k:
            continue
        for t_eid in graph._out[node]:
            nb = graph.edges[t_eid[1]].dst
            if nb not in seen:
                seen.add(nb)
                frontier.append((nb, d + 1))
        for t_eid in graph._in[node]:
            nb = graph.edges[t_eid[1]].src
            if nb not in seen:
                seen.add(nb)
                frontier.append((nb, d + 1))
    return sorted(seen)


@dataclass
class IngestReport:
    affected: list
    n_edges: int
    last_processed: int
    ball_size: int = 0


@dataclass
class StreamState:
    graph: TemporalHeteroGraph
    store: nx.ParamStore
    config: ModelConfig
    table: np.ndarray
    alpha_smooth: float = 0.3
    radius: Optional[int] = None
    last_processed: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.alpha_smooth <= 1.0:
            raise DomainError("alpha_smooth must lie in [0, 1]")
        if self.radius is None:
            self.radius = self.config.encoder.n_layers
        if self.radius < 1:
            raise DomainError("frontier radius must be >= 1")
        nx.check_finite(self.table, "live table")

    @classmethod
    def from_graph(cls, graph, store, config: ModelConfig, alpha_smooth=0.3, now=None, radius=None):
        """Fully embed ``graph`` as of ``now`` (default: its horizon) to seed the table."""
        now = graph.time_horizon if now is None else now
        table = representations(store, config, graph, now, prepare(graph, config, now))
        g = graph.copy() if graph.frozen else graph
        return cls(g, store, config, table, alpha_smooth, radius, max(int(now), 0))

    def snapshot(self) -> np.ndarray:
        """Consistent read-only view of the live table."""
        with self._lock:
            return self.table


def _subgraph(graph, ball, now) -> TemporalHeteroGraph:
    """Induced subgraph on ``ball`` with edges at or before ``now``, in global edge order."""
    local = {g: i for i, g in enumerate(ball)}
    sub = TemporalHeteroGraph(graph.n_features)
    for gid in ball:
        n = graph.nodes[gid]
        sub.add_node(n.category, n.features, n.label, n.first_seen)
    eids = set()
    for gid in ball:
        for t, e in graph._out[gid]:
            if t <= now and graph.edges[e].dst in local:
                eids.add(e)
    for e in sorted(eids):
        ed = graph.edges[e]
        sub.add_edge(local[ed.src], local[ed.dst], ed.relation, ed.timestamp, ed.amount)
    return sub.freeze()


def local_representations(graph, store, config: ModelConfig, nodes, now) -> np.ndarray:
    """``[h || z]`` for ``nodes`` from a forward pass over their receptive field only."""
    nodes = sorted(int(v) for v in nodes)
    if not nodes:
        return np.zeros((0, config.rep_dim))
    ball = k_hop(graph, nodes, config.encoder.n_layers + config.max_path_len)
    sub = _subgraph(graph, ball, now)
    local = {g: i for i, g in enumerate(ball)}
    rows = np.array([local[v] for v in nodes], dtype=np.int64)
    x0 = initial_features(sub, config.encoder.category_onehot)
    h = encode_tensor(x0, build_messages(sub, now, config.encoder.direction), store, config.encoder)
    if not config.use_metapath:
        return nx.gather_rows(h, rows).value
    sets = instance_sets(sub, config.metapaths, rows, config.max_per_hop, config.max_total,
                         config.seed, now, id_map=ball)
    pools = [pooling_matrix(row, sub.num_nodes) for row in sets]
    z, _ = subgraph_tensor(h, pools, store, rows=rows)
    return np.hstack([h.value[rows], z.value])


def _coerce_edge(e) -> tuple:
    if isinstance(e, Edge):
        return e.src, e.dst, e.relation, e.timestamp, e.amount
    rel = e.get("rel", e.get("relation"))
    t = e.get("t", e.get("timestamp"))
    return int(e["src"]), int(e["dst"]), RelationType(rel), int(t), e.get("amount")


def apply_update(state: StreamState, nodes, z_hat) -> np.ndarray:
    """Smooth rows ``nodes`` toward ``z_hat`` and swap in the new table."""
    new = state.table.copy()
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes):
        new[nodes] = smooth_update(state.table[nodes], z_hat, state.alpha_smooth)
    nx.check_finite(new, "live table")
    with state._lock:
        state.table = new
    return new


def ingest_batch(state: StreamState, new_edges: Iterable) -> IngestReport:
    """Append a micro-batch, re-embed its frontier and smooth those rows."""
    edges = [_coerce_edge(e) for e in new_edges]
    if not edges:
        return IngestReport([], 0, state.last_processed)
    for k, (_, _, _, t, _) in enumerate(edges):
        if t < state.last_processed:
            raise OutOfOrderError(
                f"edge {k} has timestamp {t} older than the stream head {state.last_processed}"
            )
    for s, d, *_ in edges:
        state.graph._check_node(s)
        state.graph._check_node(d)
    g = state.graph
    was_frozen = g._frozen
    g._frozen = False
    try:
        for s, d, rel, t, amt in edges:
            g.add_edge(s, d, rel, t, amt)
    finally:
        g._frozen = was_frozen
    now = max(t for *_, t, _ in edges)
    endpoints = {s for s, *_ in edges} | {d for _, d, *_ in edges}
    affected = k_hop(g, endpoints, state.radius)
    z_hat = local_representations(g, state.store, state.config, affected, now)
    apply_update(state, affected, z_hat)
    state.last_processed = now
    return IngestReport(affected, len(edges), now)


def score_stream(state: StreamState, store=None) -> list[tuple[int, float]]:
    """Illicit probability per live row, highest first, ties by node id."""
    table = state.snapshot()
    return rank_alerts(risk_scores(store or state.store, table))


# -- files ---------------------------------------------------------------------------------------


def read_stream(path) -> list[dict]:
    """JSON-lines edges ``{"src", "dst", "rel", "t"[, "amount"]}``; blank lines skipped."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append({
                    "src": int(rec["src"]), "dst": int(rec["dst"]),
                    "rel": RelationType(rec["rel"]).value, "t": int(rec["t"]),
                    "amount": None if rec.get("amount") is None else float(rec["amount"]),
                })
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise ParseError(f"bad stream record ({exc})", path, lineno) from None
    return out


def write_stream(edges, path):
    with open(path, "w") as fh:
        for e in edges:
            s, d, rel, t, amt = _coerce_edge(e)
            fh.write(json.dumps({"src": s, "dst": d, "rel": RelationType(rel).value, "t": t, "amount": amt}) + "\n")


def micro_batches(edges, size):
    """Consecutive slices of at most ``size`` edges, in stream order."""
    if size < 1:
        raise DomainError("batch size must be >= 1")
    edges = list(edges)
    return [edges[i:i + size] for i in range(0, len(edges), size)]


def write_alerts(ranked, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "score"])
        for node, score in ranked:
            w.writerow([node, repr(float(score))])


def read_alerts(path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["node_id", "score"]:
        raise ParseError("alert file must start with node_id,score", path, 1)
    return [(int(a), float(b)) for a, b in rows[1:]]
