"""Comparison detectors: a declarative rule engine and a two-layer GCN.

The attention-only baseline is not here; it is the encoder with its
temporal channel and meta-paths switched off (see ``estimator``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .encoder import initial_features
from .errors import DomainError, FormatError, TrainingError
from .graph import as_view
from .metrics import rank_alerts

RULE_KINDS = {
    "cycle": ("max_len",),
    "fan_in_burst": ("min_count", "max_amount", "window"),
    "amount_threshold": ("min",),
    "layered_chain": ("min_len", "decay_band"),
}


@dataclass
class Rule:
    kind: str
    params: dict
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise FormatError(f"unknown rule kind {self.kind!r}")
        missing = set(RULE_KINDS[self.kind]) - set(self.params)
        extra = set(self.params) - set(RULE_KINDS[self.kind])
        if missing or extra:
            raise FormatError(f"rule {self.kind}: missing {sorted(missing)}, unexpected {sorted(extra)}")
        if self.weight < 0:
            raise DomainError("rule weights must be >= 0")
        for k, v in self.params.items():
            vals = v if isinstance(v, (list, tuple)) else [v]
            if any(x <= 0 for x in vals):
                raise DomainError(f"rule {self.kind}: parameter {k} must be positive")

    def to_dict(self):
        return {"kind": self.kind, "weight": self.weight, **self.params}


@dataclass
class RuleSet:
    rules: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d):
        rules = []
        for r in d.get("rules", []):
            r = dict(r)
            kind, weight = r.pop("kind"), float(r.pop("weight", 1.0))
            rules.append(Rule(kind, r, weight))
        return cls(rules)

    def to_dict(self):
        return {"rules": [r.to_dict() for r in self.rules]}

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"cannot read rule set {path}: {exc}") from None

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def default_ruleset() -> RuleSet:
    """Rules whose parameters mirror the synthetic generator's defaults."""
    text = resources.files("gcrmf").joinpath("default_rules.json").read_text()
    return RuleSet.from_dict(json.loads(text))


# -- rule predicates: each returns a boolean node mask -----------------------------------


def _adjacency(view):
    ea = view.edge_arrays()
    succ = [[] for _ in range(view.num_nodes)]
    for s, d in zip(ea.src.tolist(), ea.dst.tolist()):
        succ[s].append(d)
    return [sorted(set(x)) for x in succ]


def cycle_nodes(view, max_len) -> np.ndarray:
    """Nodes on a simple directed cycle of at most ``max_len`` edges.

    Each cycle is found from its smallest node id, walking only larger ids.
    """
    succ = _adjacency(view)
    hit = np.zeros(view.num_nodes, dtype=bool)
    for s in range(view.num_nodes):
        stack = [(s, [s])]
        while stack:
            node, path = stack.pop()
            for nb in succ[node]:
                if nb == s:
                    hit[path] = True
                elif nb > s and nb not in path and len(path) < max_len:
                    stack.append((nb, path + [nb]))
    return hit


def fan_in_burst_nodes(view, min_count, max_amount, window) -> np.ndarray:
    """Receivers of >= ``min_count`` sub-``max_amount`` in-edges within ``window`` steps, plus senders."""
    ea = view.edge_arrays()
    small = np.isfinite(ea.amount) & (ea.amount < max_amount)
    hit = np.zeros(view.num_nodes, dtype=bool)
    src, dst, t = ea.src[small], ea.dst[small], ea.timestamp[small]
    order = np.lexsort((t, dst))
    src, dst, t = src[order], dst[order], t[order]
    bounds = np.flatnonzero(np.diff(dst)) + 1
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(dst)]):
        if hi - lo < min_count:
            continue
        ts = t[lo:hi]
        # ts[j] - ts[i] < window for every edge in [i, j]
        right = np.searchsorted(ts, ts + window, side="left")
        for i in np.flatnonzero(right - np.arange(len(ts)) >= min_count):
            hit[dst[lo]] = True
            hit[src[lo + i:lo + right[i]]] = True
    return hit


def amount_threshold_nodes(view, minimum) -> np.ndarray:
    ea = view.edge_arrays()
    big = np.isfinite(ea.amount) & (ea.amount >= minimum)
    hit = np.zeros(view.num_nodes, dtype=bool)
    hit[ea.src[big]] = True
    hit[ea.dst[big]] = True
    return hit


def layered_chain_nodes(view, min_len, decay_band) -> np.ndarray:
    """Endpoints of edges lying on a time-ordered chain of >= ``min_len`` edges
    where each hop keeps a fraction in ``[1 - band_hi, 1 - band_lo]`` of the amount."""
    lo_fee, hi_fee = decay_band
    ea = view.edge_arrays()
    ok = np.flatnonzero(np.isfinite(ea.amount) & (ea.amount > 0))
    out_by_node: dict = {}
    for k in ok:
        out_by_node.setdefault(int(ea.src[k]), []).append(int(k))

    def successors(k):
        for f in out_by_node.get(int(ea.dst[k]), ()):
            ratio = ea.amount[f] / ea.amount[k]
            if ea.timestamp[f] >= ea.timestamp[k] and 1 - hi_fee <= ratio <= 1 - lo_fee:
                yield f

    # amounts strictly shrink along a chain, so processing edges by decreasing
    # amount (for forward) / increasing amount (for backward) is a topological order
    fwd = {int(k): 1 for k in ok}
    bwd = {int(k): 1 for k in ok}
    by_amount = sorted((int(k) for k in ok), key=lambda k: (ea.amount[k], k))
    succ_cache = {k: list(successors(k)) for k in by_amount}
    for k in by_amount:
        for f in succ_cache[k]:
            fwd[k] = max(fwd[k], 1 + fwd[f])
    for k in reversed(by_amount):
        for f in succ_cache[k]:
            bwd[f] = max(bwd[f], 1 + bwd[k])
    hit = np.zeros(view.num_nodes, dtype=bool)
    for k in ok:
        if fwd[int(k)] + bwd[int(k)] - 1 >= min_len:
            hit[ea.src[k]] = True
            hit[ea.dst[k]] = True
    return hit


def rule_hits(view, rule: Rule) -> np.ndarray:
    p = rule.params
    if rule.kind == "cycle":
        return cycle_nodes(view, int(p["max_len"]))
    if rule.kind == "fan_in_burst":
        return fan_in_burst_nodes(view, int(p["min_count"]), float(p["max_amount"]), float(p["window"]))
    if rule.kind == "amount_threshold":
        return amount_threshold_nodes(view, float(p["min"]))
    return layered_chain_nodes(view, int(p["min_len"]), tuple(p["decay_band"]))


def rulematch_scores(graph, rules: RuleSet) -> np.ndarray:
    """Per-node sum of triggered rule weights, divided by the total weight."""
    view = as_view(graph)
    score = np.zeros(view.num_nodes)
    total = sum(r.weight for r in rules.rules)
    if total == 0:
        return score
    for r in rules.rules:
        score += r.weight * rule_hits(view, r)
    return score / total


def rulematch_score(graph, rules: RuleSet) -> list[tuple[int, float]]:
    return rank_alerts(rulematch_scores(graph, rules))


# -- SEMI-GCN ----------------------------------------------------------------------------


def normalized_adjacency(graph, now=None) -> sp.csr_matrix:
    """``D^-1/2 (A + A^T + I) D^-1/2`` over distinct node pairs with an edge at or before ``now``."""
    view = as_view(graph)
    n = view.num_nodes
    ea = view.edge_arrays()
    keep = np.ones(len(ea), dtype=bool) if now is None else ea.timestamp <= now
    s, d = ea.src[keep], ea.dst[keep]
    A = sp.coo_matrix((np.ones(len(s)), (s, d)), shape=(n, n)).tocsr()
    A = ((A + A.T) > 0).astype(np.float64)
    A.setdiag(1.0)
    deg = np.asarray(A.sum(axis=1)).ravel()
    dinv = sp.diags(1.0 / np.sqrt(deg))
    return (dinv @ A @ dinv).tocsr()


@dataclass
class GCNConfig:
    hidden: int = 16
    epochs: int = 200
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    seed: int = 0
    category_onehot: bool = True


def init_gcn(in_dim, config: GCNConfig, n_classes=2) -> nx.ParamStore:
    store = nx.ParamStore(config.seed)
    store.add("gcn.W1", (config.hidden, in_dim))
    store.add("gcn.b1", (config.hidden,), "zeros")
    store.add("gcn.W2", (n_classes, config.hidden))
    store.add("gcn.b2", (n_classes,), "zeros")
    return store


def gcn_forward(store, A_hat, X):
    h = nx.relu(nx.add(nx.spmm(A_hat, nx.matmul(X, nx.transpose(store["gcn.W1"]))), store["gcn.b1"]))
    return nx.add(nx.spmm(A_hat, nx.matmul(h, nx.transpose(store["gcn.W2"]))), store["gcn.b2"])


def gcn_loss(store, A_hat, X, rows, targets):
    logits = nx.gather_rows(gcn_forward(store, A_hat, X), rows)
    return nx.softmax_cross_entropy(logits, targets)


def gcn_train_and_score(graph, labels, train_mask=None, config: Optional[GCNConfig] = None, now=None,
                        store=None):
    """Fit on labeled training nodes, return ``(store, illicit probability per node)``.

    ``labels``: 1 illicit, 0 licit, -1 unlabeled.
    """
    config = config or GCNConfig()
    view = as_view(graph)
    labels = np.asarray(labels, dtype=np.int64)
    mask = labels >= 0 if train_mask is None else (np.asarray(train_mask, bool) & (labels >= 0))
    rows = np.flatnonzero(mask)
    if len(np.unique(labels[rows])) < 2:
        raise TrainingError("SEMI-GCN needs at least one labeled node of each class")
    X = initial_features(view, config.category_onehot)
    A_hat = normalized_adjacency(view, now)
    store = store or init_gcn(X.shape[1], config)
    opt = nx.Optimizer("adam", config.learning_rate, weight_decay=config.weight_decay)
    for _ in range(config.epochs):
        loss = gcn_loss(store, A_hat, X, rows, labels[rows])
        loss.backward()
        nx.optimizer_step(store, opt)
    nx.check_finite(gcn_forward(store, A_hat, X), "GCN logits")
    return store, gcn_scores(store, A_hat, X)


def gcn_scores(store, A_hat, X) -> np.ndarray:
    return nx.softmax(gcn_forward(store, A_hat, X), axis=1).value[:, 1]
