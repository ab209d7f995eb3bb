"""Meta-path schemas, instance enumeration and subgraph embeddings.

A meta-path alternates node categories and relation types, e.g.
``Mobility -FundTransfer-> Fintech -FundTransfer-> Energy``. Instances are
followed along out-edges with nondecreasing timestamps. Each meta-path's
instances around an anchor are mean-pooled into ``p_m``; a shared query
scores ``q . tanh(W_m p_m)`` and the softmax over non-empty meta-paths mixes
the ``p_m`` into the anchor's subgraph embedding.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .errors import DimensionError, FormatError, NoSubgraph
from .graph import CATEGORY_INDEX, RELATION_INDEX, IndustryCategory, RelationType, as_view


@dataclass(frozen=True)
class MetaPath:
    categories: tuple  # L + 1 IndustryCategory
    relations: tuple  # L RelationType

    def __post_init__(self):
        if len(self.relations) < 1 or len(self.categories) != len(self.relations) + 1:
            raise FormatError("a meta-path needs L >= 1 relations and L + 1 categories")

    @property
    def length(self) -> int:
        return len(self.relations)

    @property
    def head(self) -> IndustryCategory:
        return self.categories[0]

    @classmethod
    def parse(cls, steps: Sequence[str]) -> "MetaPath":
        steps = list(steps)
        if len(steps) < 3 or len(steps) % 2 == 0:
            raise FormatError(f"meta-path must alternate category/relation and end on a category: {steps}")
        try:
            cats = tuple(IndustryCategory(s) for s in steps[0::2])
            rels = tuple(RelationType(s) for s in steps[1::2])
        except ValueError as exc:
            raise FormatError(f"bad meta-path step in {steps}: {exc}") from exc
        return cls(cats, rels)

    def steps(self) -> list[str]:
        out = [self.categories[0].value]
        for r, c in zip(self.relations, self.categories[1:]):
            out += [r.value, c.value]
        return out

    def __str__(self):
        return "->".join(self.steps())


@dataclass(frozen=True)
class PathInstance:
    node_ids: tuple
    edge_ids: tuple
    timestamps: tuple


DEFAULT_METAPATHS = (
    ("Mobility", "FundTransfer", "Fintech", "FundTransfer", "Energy"),
    ("Mobility", "RentalContract", "Mobility", "Settlement", "Fintech"),
    ("Fintech", "CreditIssue", "Energy", "EnergyTrade", "Fintech"),
)


def default_metapaths() -> list[MetaPath]:
    return [MetaPath.parse(s) for s in DEFAULT_METAPATHS]


def load_metapaths(path) -> list[MetaPath]:
    """Read a JSON list of step arrays."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read meta-path file {path}: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise FormatError("meta-path file must hold a nonempty JSON list")
    return [MetaPath.parse(steps) for steps in raw]


def dump_metapaths(metapaths, path):
    Path(path).write_text(json.dumps([m.steps() for m in metapaths], indent=1))


def validate_instance(graph, metapath: MetaPath, inst: PathInstance) -> bool:
    """Re-check category, relation, connectivity and time order of an instance."""
    g = as_view(graph).graph
    if len(inst.node_ids) != metapath.length + 1 or len(inst.edge_ids) != metapath.length:
        return False
    for node, cat in zip(inst.node_ids, metapath.categories):
        if g.nodes[node].category != cat:
            return False
    prev_t = -np.inf
    for k, (eid, rel) in enumerate(zip(inst.edge_ids, metapath.relations)):
        e = g.edges[eid]
        if e.relation != rel or e.src != inst.node_ids[k] or e.dst != inst.node_ids[k + 1]:
            return False
        if e.timestamp < prev_t or e.timestamp != inst.timestamps[k]:
            return False
        prev_t = e.timestamp
    return True


class OutIndex:
    """Out-edges grouped by source, each group ordered by (timestamp, edge id)."""

    def __init__(self, graph, now=None):
        view = as_view(graph)
        ea = view.edge_arrays()
        keep = np.ones(len(ea), dtype=bool) if now is None else ea.timestamp <= now
        src, eid, t = ea.src[keep], ea.eid[keep], ea.timestamp[keep]
        order = np.lexsort((eid, t, src))
        self.eid = eid[order]
        self.dst = ea.dst[keep][order]
        self.rel = ea.relation[keep][order]
        self.t = t[order]
        self.ptr = np.searchsorted(src[order], np.arange(view.num_nodes + 1))
        self.categories = view.categories

    def candidates(self, node, rel_code, cat_code, min_t):
        lo, hi = self.ptr[node], self.ptr[node + 1]
        sel = (self.rel[lo:hi] == rel_code) & (self.categories[self.dst[lo:hi]] == cat_code) & (
            self.t[lo:hi] >= min_t
        )
        return np.flatnonzero(sel) + lo


def anchor_seed(seed, anchor, metapath_index=0) -> int:
    return zlib.crc32(f"{seed}:{anchor}:{metapath_index}".encode())


def enumerate_instances(
    graph,
    metapath: MetaPath,
    anchor: int,
    max_per_hop: Optional[int] = 8,
    max_total: Optional[int] = 64,
    seed=0,
    now=None,
    index: Optional[OutIndex] = None,
) -> list[PathInstance]:
    """Instances of ``metapath`` starting at ``anchor``.

    Exhaustive depth-first order when no hop offers more than ``max_per_hop``
    candidates and the total stays within ``max_total``; otherwise each
    over-full hop is subsampled uniformly without replacement and the walk
    stops once ``max_total`` instances are collected. ``None`` disables a cap.
    """
    if (max_per_hop is not None and max_per_hop < 1) or (max_total is not None and max_total < 1):
        raise ValueError("sampling caps must be >= 1")
    view = as_view(graph)
    if view.nodes[anchor].category != metapath.head:
        return []
    idx = index if index is not None else OutIndex(view, now)
    rng = np.random.default_rng(seed)
    rel_codes = [RELATION_INDEX[r] for r in metapath.relations]
    cat_codes = [CATEGORY_INDEX[c] for c in metapath.categories]
    out: list[PathInstance] = []

    def walk(node, hop, nodes, edges, times, min_t):
        if max_total is not None and len(out) >= max_total:
            return
        if hop == metapath.length:
            out.append(PathInstance(tuple(nodes), tuple(edges), tuple(times)))
            return
        cand = idx.candidates(node, rel_codes[hop], cat_codes[hop + 1], min_t)
        if max_per_hop is not None and len(cand) > max_per_hop:
            cand = cand[np.sort(rng.choice(len(cand), size=max_per_hop, replace=False))]
        for c in cand:
            t = int(idx.t[c])
            nxt = int(idx.dst[c])
            walk(nxt, hop + 1, nodes + [nxt], edges + [int(idx.eid[c])], times + [t], t)

    walk(int(anchor), 0, [int(anchor)], [], [], -np.inf)
    return out


def instance_sets(graph, metapaths, anchors, max_per_hop=8, max_total=64, seed=0, now=None, id_map=None):
    """``sets[m][k]`` = instances of meta-path ``m`` for ``anchors[k]``.

    ``id_map`` translates local node ids to the ids used for per-anchor seeding,
    so a subgraph replay samples exactly what the full graph would.
    """
    idx = OutIndex(graph, now)
    out = []
    for mi, mp in enumerate(metapaths):
        row = []
        for a in anchors:
            key = a if id_map is None else id_map[a]
            row.append(
                enumerate_instances(graph, mp, a, max_per_hop, max_total, anchor_seed(seed, key, mi), now, idx)
            )
        out.append(row)
    return out


def drop_instances(sets, graph, rate, seed):
    """Edge-dropout augmentation: drop every instance that uses a dropped edge."""
    if rate <= 0:
        return sets
    m = as_view(graph).graph.num_edges
    alive = np.random.default_rng(seed).random(m) >= rate
    return [[[inst for inst in lst if all(alive[e] for e in inst.edge_ids)] for lst in row] for row in sets]


def pooling_matrix(instance_lists, n_nodes) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse rows that mean-pool nodes within each instance, then across instances.

    Returns ``(P, nonempty)`` with ``P[k] @ H == p_m`` for anchor ``k``.
    """
    rows, cols, vals = [], [], []
    nonempty = np.zeros(len(instance_lists), dtype=bool)
    for k, insts in enumerate(instance_lists):
        if not insts:
            continue
        nonempty[k] = True
        w_inst = 1.0 / len(insts)
        for inst in insts:
            w = w_inst / len(inst.node_ids)
            for node in inst.node_ids:
                rows.append(k)
                cols.append(node)
                vals.append(w)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(len(instance_lists), n_nodes))
    P.sum_duplicates()
    return P, nonempty


def embed_path_set(instances, H) -> tuple[np.ndarray, bool]:
    """Mean over instances of the mean node embedding; empty -> (zeros, True)."""
    H = np.asarray(getattr(H, "values", H))
    if not instances:
        return np.zeros(H.shape[1]), True
    inst_means = [H[list(inst.node_ids)].mean(axis=0) for inst in instances]
    return np.mean(inst_means, axis=0), False


# -- attention over meta-paths -------------------------------------------------------


def init_metapath_params(store: nx.ParamStore, n_metapaths, dim, att_dim=16, prefix="mp"):
    for m in range(n_metapaths):
        store.add(f"{prefix}.{m}.W", (att_dim, dim))
    store.add(f"{prefix}.q", (att_dim,))
    return store


def metapath_scores(p_list, store, prefix="mp"):
    """``q . tanh(W_m p_m)`` for each meta-path; ``p_list`` items are (n, d) or (d,) tensors."""
    q = store[f"{prefix}.q"]
    scores = []
    for m, p in enumerate(p_list):
        p = nx.as_tensor(p)
        W = store[f"{prefix}.{m}.W"]
        if p.ndim == 1:
            scores.append(nx.matmul(q, nx.tanh(nx.matvec(W, p))))
        else:
            scores.append(nx.matmul(nx.tanh(nx.matmul(p, nx.transpose(W))), q))
    return scores


def metapath_attention(p_list, store, prefix="mp") -> np.ndarray:
    """Softmax weights over the non-empty entries of ``[(p_m, is_empty), ...]``."""
    if not p_list:
        raise NoSubgraph("no meta-paths")
    mask = np.array([not empty for _, empty in p_list])
    if not mask.any():
        raise NoSubgraph("every meta-path is empty for this anchor")
    scores = metapath_scores([p for p, _ in p_list], store, prefix)
    return nx.softmax(nx.stack(scores), mask=mask).value


def subgraph_embedding(beta, p_list, fallback=None) -> np.ndarray:
    """``sum_m beta_m p_m``; when all meta-paths are empty return ``fallback``."""
    ps = [np.asarray(p if not isinstance(p, tuple) else p[0], dtype=np.float64) for p in p_list]
    empties = [isinstance(p, tuple) and p[1] for p in p_list]
    if ps and all(empties):
        if fallback is None:
            raise NoSubgraph("every meta-path is empty and no fallback given")
        return np.asarray(fallback, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape[0] != len(ps):
        raise DimensionError("beta and p_list must align")
    return np.sum([b * p for b, p in zip(beta, ps)], axis=0)


def subgraph_tensor(H, poolings, store, prefix="mp", rows=None):
    """Batched differentiable subgraph embeddings.

    ``poolings`` is a list of ``(P_m, nonempty_m)`` over the same anchors;
    ``rows`` gives each anchor's own node id for the all-empty fallback.
    Returns ``(z, beta)`` where ``beta`` is the (anchors x M) weight tensor.
    """
    ps = [nx.spmm(P, H) for P, _ in poolings]
    mask = np.stack([ne for _, ne in poolings], axis=1)
    scores = nx.stack(metapath_scores(ps, store, prefix), axis=1)
    beta = nx.softmax(scores, axis=1, mask=mask)
    z = None
    for m, p in enumerate(ps):
        term = nx.mul(nx.index(beta, (slice(None), slice(m, m + 1))), p)
        z = term if z is None else nx.add(z, term)
    if rows is not None:
        any_path = mask.any(axis=1)
        if not any_path.all():
            z = nx.where(any_path[:, None], z, nx.gather_rows(H, rows))
    return z, beta
