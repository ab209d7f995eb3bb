"""Dataset ingestion, synthetic cross-industry graphs and the graph file format."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, IntegrityError, ParseError, SpecError
from .graph import (
    CATEGORY_INDEX,
    IndustryCategory as Cat,
    Label,
    RelationType as Rel,
    TemporalHeteroGraph,
)

GRAPH_MAGIC = "GCRMF-GRAPH-1"

# -- Elliptic bundle -------------------------------------------------------------------


@dataclass
class ProxyRule:
    """Assign ``category`` when the node's percentile rank of ``stat`` lies in ``[lo, hi)``.

    ``stat`` is ``in_degree``, ``out_degree``, ``degree`` or ``feature:<k>``.
    """

    stat: str
    lo: float
    hi: float
    category: Cat
    relation: Rel


@dataclass
class ProxyMapConfig:
    rules: list = field(
        default_factory=lambda: [
            ProxyRule("in_degree", 0.9, 1.01, Cat.FINTECH, Rel.FUND_TRANSFER),
            ProxyRule("degree", 0.5, 0.9, Cat.ENERGY, Rel.ENERGY_TRADE),
        ]
    )
    fallback: Cat = Cat.MOBILITY
    fallback_relation: Rel = Rel.FUND_TRANSFER

    @classmethod
    def from_dict(cls, d):
        rules = [
            ProxyRule(r["stat"], float(r["lo"]), float(r["hi"]), Cat(r["category"]), Rel(r["relation"]))
            for r in d.get("rules", [])
        ]
        return cls(rules, Cat(d.get("fallback", "Mobility")), Rel(d.get("fallback_relation", "FundTransfer")))


def percentile_ranks(values) -> np.ndarray:
    """Rank / n in [0, 1) with ties broken by position, so every bucket is exact."""
    values = np.asarray(values, dtype=np.float64)
    order = np.lexsort((np.arange(len(values)), values))
    ranks = np.empty(len(values))
    ranks[order] = np.arange(len(values)) / max(len(values), 1)
    return ranks


def apply_proxy_map(in_deg, out_deg, features, proxy: ProxyMapConfig):
    """Return ``(category, relation, rule_index)`` per node; -1 marks the fallback."""
    n = len(in_deg)
    stats = {"in_degree": in_deg, "out_degree": out_deg, "degree": in_deg + out_deg}
    cats = [proxy.fallback] * n
    rels = [proxy.fallback_relation] * n
    which = np.full(n, -1, dtype=np.int64)
    for k, rule in enumerate(proxy.rules):
        if rule.stat.startswith("feature:"):
            col = int(rule.stat.split(":", 1)[1])
            vals = features[:, col]
        elif rule.stat in stats:
            vals = stats[rule.stat]
        else:
            raise SpecError(f"unknown proxy statistic {rule.stat!r}")
        pct = percentile_ranks(vals)
        hit = (which < 0) & (pct >= rule.lo) & (pct < rule.hi)
        for i in np.flatnonzero(hit):
            cats[i], rels[i] = rule.category, rule.relation
        which[hit] = k
    return cats, rels, which


def _rows(path):
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if row:
                yield lineno, row


def _is_header(row):
    try:
        float(row[0])
        return False
    except ValueError:
        return True


def load_elliptic(features_path, edgelist_path, classes_path, proxy: Optional[ProxyMapConfig] = None):
    """Build a frozen graph from the three Elliptic CSV files.

    One node per transaction (``first_seen`` = its time step), one directed
    edge per edgelist row stamped with the source's time step. Duplicate
    edgelist rows become parallel edges.
    """
    proxy = proxy or ProxyMapConfig()
    tx_ids, steps, feats = [], [], []
    width = None
    for lineno, row in _rows(features_path):
        if lineno == 1 and _is_header(row):
            continue
        try:
            vals = [float(v) for v in row[2:]]
            tx, step = row[0], int(float(row[1]))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad feature row ({exc})", features_path, lineno) from None
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ParseError(f"expected {width} features, got {len(vals)}", features_path, lineno)
        tx_ids.append(tx)
        steps.append(step)
        feats.append(vals)
    index = {tx: i for i, tx in enumerate(tx_ids)}
    if len(index) != len(tx_ids):
        raise IntegrityError("duplicate transaction ids in features file")

    labels = [Label.UNKNOWN] * len(tx_ids)
    for lineno, row in _rows(classes_path):
        if lineno == 1 and _is_header(row):
            continue
        if len(row) < 2:
            raise ParseError("expected tx_id,class", classes_path, lineno)
        tx, cls = row[0], row[1].strip().lower()
        if tx not in index:
            raise IntegrityError(f"class row for unknown transaction {tx}", [tx])
        try:
            labels[index[tx]] = {"1": Label.ILLICIT, "2": Label.LICIT, "unknown": Label.UNKNOWN}[cls]
        except KeyError:
            raise ParseError(f"unknown class {row[1]!r}", classes_path, lineno) from None

    pairs, dangling = [], []
    for lineno, row in _rows(edgelist_path):
        if lineno == 1 and _is_header(row):
            continue
        if len(row) < 2:
            raise ParseError("expected src,dst", edgelist_path, lineno)
        s, d = row[0], row[1]
        if s not in index or d not in index:
            dangling.extend(x for x in (s, d) if x not in index)
            continue
        pairs.append((index[s], index[d]))
    if dangling:
        raise IntegrityError(
            f"{len(dangling)} dangling edge endpoints, e.g. {sorted(set(dangling))[:10]}", sorted(set(dangling))
        )

    n = len(tx_ids)
    fmat = np.array(feats, dtype=np.float64).reshape(n, width or 0)
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    in_deg = np.bincount(dst, minlength=n).astype(float)
    out_deg = np.bincount(src, minlength=n).astype(float)
    cats, rels, _ = apply_proxy_map(in_deg, out_deg, fmat, proxy)

    g = TemporalHeteroGraph(width or 0)
    for i in range(n):
        g.add_node(cats[i], fmat[i], labels[i], steps[i], external_id=tx_ids[i])
    for s, d in pairs:
        g.add_edge(s, d, rels[s], steps[s])
    return g.freeze()


def write_elliptic(graph, directory):
    """Write a graph as an Elliptic-style bundle (used for fixtures)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    code = {Label.ILLICIT: "1", Label.LICIT: "2", Label.UNKNOWN: "unknown"}
    ext = [graph.external_ids.get(n.id, n.id) for n in graph.nodes]
    with open(directory / "elliptic_txs_features.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for n in graph.nodes:
            w.writerow([ext[n.id], n.first_seen] + [repr(float(v)) for v in n.features])
    with open(directory / "elliptic_txs_edgelist.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["txId1", "txId2"])
        for e in graph.edges:
            w.writerow([ext[e.src], ext[e.dst]])
    with open(directory / "elliptic_txs_classes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["txId", "class"])
        for n in graph.nodes:
            w.writerow([ext[n.id], code[n.label]])
    return directory


ELLIPTIC_FILES = ("elliptic_txs_features.csv", "elliptic_txs_edgelist.csv", "elliptic_txs_classes.csv")


def elliptic_paths(directory):
    return tuple(Path(directory) / f for f in ELLIPTIC_FILES)


# -- synthetic generator -------------------------------------------------------------------

MOTIF_TYPES = ("circular", "microburst", "layered")

# business relation per (src category, dst category) for background traffic;
# a uniformly random relation replaces it with probability ``relation_noise``
_BUSINESS = {
    (Cat.MOBILITY, Cat.MOBILITY): Rel.RENTAL_CONTRACT,
    (Cat.MOBILITY, Cat.FINTECH): Rel.SETTLEMENT,
    (Cat.MOBILITY, Cat.ENERGY): Rel.ENERGY_TRADE,
    (Cat.FINTECH, Cat.MOBILITY): Rel.CREDIT_ISSUE,
    (Cat.FINTECH, Cat.FINTECH): Rel.SETTLEMENT,
    (Cat.FINTECH, Cat.ENERGY): Rel.CREDIT_ISSUE,
    (Cat.ENERGY, Cat.MOBILITY): Rel.SETTLEMENT,
    (Cat.ENERGY, Cat.FINTECH): Rel.ENERGY_TRADE,
    (Cat.ENERGY, Cat.ENERGY): Rel.ENERGY_TRADE,
}

_RELATIONS = tuple(Rel)

_CYCLE_RELATION = {
    (Cat.MOBILITY, Cat.FINTECH): Rel.FUND_TRANSFER,
    (Cat.FINTECH, Cat.ENERGY): Rel.FUND_TRANSFER,
    (Cat.ENERGY, Cat.MOBILITY): Rel.SETTLEMENT,
    (Cat.MOBILITY, Cat.MOBILITY): Rel.RENTAL_CONTRACT,
    (Cat.FINTECH, Cat.MOBILITY): Rel.FUND_TRANSFER,
}


@dataclass
class SyntheticSpec:
    n_background_nodes: int = 1800
    n_windows: int = 5
    steps_per_window: int = 10
    n_features: int = 16
    background_degree: float = 1.5
    relation_noise: float = 0.2
    n_hubs: int = 40
    hub_preference: float = 0.3
    category_mix: tuple = (0.4, 0.3, 0.3)  # Mobility, Energy, Fintech
    licit_fraction: float = 0.7
    late_fraction: float = 0.3
    circular: int = 8
    microburst: int = 4
    layered: int = 8
    cycle_len: tuple = (3, 5)
    burst_size: tuple = (20, 25)
    burst_span: int = 2
    motif_span: int = 3
    burst_max_amount: float = 100.0
    chain_len: tuple = (4, 6)
    chain_exit: bool = True
    fee_range: tuple = (0.02, 0.08)
    amount_jitter: float = 0.01
    camouflage_degree: float = 1.0
    feature_noise: float = 1.0
    shell_signal: float = 0.0
    seed: int = 0

    def validate(self):
        counts = (self.circular, self.microburst, self.layered)
        if min(counts) < 0 or self.n_background_nodes < 0:
            raise SpecError("counts must be nonnegative")
        if self.n_windows < 1 or self.steps_per_window < 1:
            raise SpecError("need at least one window of at least one step")
        for name, (lo, hi) in (("cycle_len", self.cycle_len), ("burst_size", self.burst_size),
                               ("chain_len", self.chain_len)):
            if lo > hi or lo < 1:
                raise SpecError(f"invalid {name} range {(lo, hi)}")
        if self.cycle_len[0] < 2:
            raise SpecError("a cycle needs at least 2 nodes")
        budget = (
            self.circular * self.cycle_len[1]
            + self.microburst * (self.burst_size[1] + 2)
            + self.layered * (self.chain_len[1] + 2)
        )
        if budget > max(self.n_background_nodes, 1):
            raise SpecError(
                f"motifs need up to {budget} nodes, exceeding the budget of {self.n_background_nodes}"
            )
        if max(self.burst_span, self.motif_span) > self.steps_per_window or min(self.burst_span, self.motif_span) < 1:
            raise SpecError("motif spans must lie in [1, steps_per_window]")
        if not 0 <= self.relation_noise <= 1:
            raise SpecError("relation_noise must lie in [0, 1]")
        if self.n_hubs > self.n_background_nodes:
            raise SpecError("more hubs than background nodes")
        if not math.isclose(sum(self.category_mix), 1.0):
            raise SpecError("category_mix must sum to 1")
        return self

    @property
    def horizon(self) -> int:
        return self.n_windows * self.steps_per_window

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Motif:
    motif_type: str
    node_ids: list
    edge_ids: list
    window: int

    def to_dict(self):
        return {"motif_type": self.motif_type, "node_ids": self.node_ids, "edge_ids": self.edge_ids}


def generate_synthetic(spec: SyntheticSpec) -> tuple[TemporalHeteroGraph, list[Motif]]:
    """Background cross-industry traffic plus planted, labeled laundering motifs."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    F = spec.n_features
    cats3 = [Cat.MOBILITY, Cat.ENERGY, Cat.FINTECH]
    profile = {c: rng.normal(0.0, 0.5, size=F) for c in cats3}
    shell = rng.normal(size=F)
    shell *= spec.shell_signal / max(np.linalg.norm(shell), 1e-12)
    g = TemporalHeteroGraph(F)
    H = spec.horizon

    def features(cat, illicit=False):
        x = profile[cat] + rng.normal(0.0, spec.feature_noise, size=F)
        return x + shell if illicit else x

    def amount():
        return float(np.round(rng.lognormal(6.0, 1.0), 2))

    # background nodes
    bg_cats = rng.choice(3, size=spec.n_background_nodes, p=list(spec.category_mix))
    late = rng.random(spec.n_background_nodes) < spec.late_fraction
    for k in range(spec.n_background_nodes):
        cat = cats3[bg_cats[k]]
        first = int(rng.integers(0, H)) if late[k] else 0
        lab = Label.LICIT if rng.random() < spec.licit_fraction else Label.UNKNOWN
        g.add_node(cat, features(cat), lab, first)
    bg = np.arange(spec.n_background_nodes)
    hubs = rng.choice(bg, size=spec.n_hubs, replace=False) if spec.n_hubs else np.zeros(0, np.int64)
    first_seen = [n.first_seen for n in g.nodes]

    def bg_edge(src, dst, lo_t, hi_t):
        cs, cd = g.nodes[src].category, g.nodes[dst].category
        if rng.random() < spec.relation_noise:
            rel = _RELATIONS[int(rng.integers(len(_RELATIONS)))]
        else:
            rel = _BUSINESS[(cs, cd)]
        t = int(rng.integers(lo_t, hi_t + 1))
        return g.add_edge(src, dst, rel, t, amount())

    n_bg_edges = int(round(spec.background_degree * spec.n_background_nodes))
    for _ in range(n_bg_edges if spec.n_background_nodes > 1 else 0):
        s = int(rng.integers(spec.n_background_nodes))
        if len(hubs) and rng.random() < spec.hub_preference:
            d = int(hubs[rng.integers(len(hubs))])
        else:
            d = int(rng.integers(spec.n_background_nodes))
        if d == s:
            continue
        lo = max(first_seen[s], first_seen[d])
        bg_edge(s, d, lo, H - 1)

    motifs: list[Motif] = []
    plan = (["circular"] * spec.circular + ["microburst"] * spec.microburst + ["layered"] * spec.layered)
    windows = rng.integers(0, spec.n_windows, size=len(plan))
    for kind, w in zip(plan, windows):
        w0 = int(w) * spec.steps_per_window
        w1 = w0 + spec.steps_per_window - 1
        if kind == "circular":
            motifs.append(_plant_cycle(g, spec, rng, w0, w1, features, amount, int(w)))
        elif kind == "microburst":
            motifs.append(_plant_burst(g, spec, rng, w0, w1, features, int(w)))
        else:
            motifs.append(_plant_chain(g, spec, rng, w0, w1, features, amount, int(w)))
        if spec.camouflage_degree > 0 and spec.n_background_nodes:
            for v in motifs[-1].node_ids:
                for _ in range(int(rng.poisson(spec.camouflage_degree))):
                    u = int(rng.integers(spec.n_background_nodes))
                    s, d = (v, u) if rng.random() < 0.5 else (u, v)
                    bg_edge(s, d, max(w0, first_seen[u]) if first_seen[u] <= w1 else w1, w1)
    return g.freeze(), motifs


def _sorted_times(rng, n, lo, hi, span):
    """``n`` sorted steps inside one ``span``-long stretch of ``[lo, hi]``."""
    start = int(rng.integers(lo, hi - span + 2))
    return sorted(int(t) for t in rng.integers(start, start + span, size=n))


def _plant_cycle(g, spec, rng, w0, w1, features, amount, w):
    L = int(rng.integers(spec.cycle_len[0], spec.cycle_len[1] + 1))
    order = [Cat.MOBILITY, Cat.FINTECH, Cat.ENERGY]
    cats = [order[k % 3] for k in range(L)]
    nodes = [g.add_node(c, features(c, True), Label.ILLICIT, w0) for c in cats]
    base = amount() * 10
    times = _sorted_times(rng, L, w0, w1, spec.motif_span)
    edges = []
    for k in range(L):
        s, d = nodes[k], nodes[(k + 1) % L]
        rel = _CYCLE_RELATION.get((cats[k], cats[(k + 1) % L]), Rel.FUND_TRANSFER)
        amt = float(np.round(base * (1.0 + rng.normal(0.0, spec.amount_jitter)), 2))
        edges.append(g.add_edge(s, d, rel, times[k], amt))
    return Motif("circular", nodes, edges, w)


def _plant_burst(g, spec, rng, w0, w1, features, w):
    """Renters pay one Mobility hub in a short burst; the hub then settles to a fresh wallet."""
    n = int(rng.integers(spec.burst_size[0], spec.burst_size[1] + 1))
    hub = g.add_node(Cat.MOBILITY, features(Cat.MOBILITY, True), Label.ILLICIT, w0)
    t0 = int(rng.integers(w0, w1 - spec.burst_span + 2))
    nodes, edges, total = [hub], [], 0.0
    for _ in range(n):
        s = g.add_node(Cat.MOBILITY, features(Cat.MOBILITY, True), Label.ILLICIT, w0)
        nodes.append(s)
        amt = float(np.round(rng.uniform(0.05, 1.0) * spec.burst_max_amount * 0.99, 2))
        total += amt
        t = int(rng.integers(t0, t0 + spec.burst_span))
        edges.append(g.add_edge(s, hub, Rel.RENTAL_CONTRACT, t, amt))
    sink = g.add_node(Cat.FINTECH, features(Cat.FINTECH, True), Label.ILLICIT, w0)
    nodes.append(sink)
    edges.append(g.add_edge(hub, sink, Rel.SETTLEMENT, min(t0 + spec.burst_span, w1), float(np.round(total, 2))))
    return Motif("microburst", nodes, edges, w)


def _plant_chain(g, spec, rng, w0, w1, features, amount, w):
    """Wallet-to-wallet hops losing a fee each time, into an Energy node (and out again)."""
    L = int(rng.integers(spec.chain_len[0], spec.chain_len[1] + 1))
    cats = [Cat.FINTECH] * L + [Cat.ENERGY] + ([Cat.FINTECH] if spec.chain_exit else [])
    nodes = [g.add_node(c, features(c, True), Label.ILLICIT, w0) for c in cats]
    times = _sorted_times(rng, len(cats) - 1, w0, w1, spec.motif_span)
    amt = amount() * 20
    edges = []
    for k in range(len(cats) - 1):
        rel = Rel.FUND_TRANSFER if k < L - 1 else (Rel.CREDIT_ISSUE if k == L - 1 else Rel.ENERGY_TRADE)
        edges.append(g.add_edge(nodes[k], nodes[k + 1], rel, times[k], float(np.round(amt, 2))))
        amt *= 1.0 - rng.uniform(*spec.fee_range)
    return Motif("layered", nodes, edges, w)


# -- structural predicates used to audit planted motifs ----------------------------------------


def is_cycle(graph, motif) -> bool:
    es = [graph.edges[e] for e in motif.edge_ids]
    if len(es) != len(motif.node_ids) or len(set(motif.node_ids)) != len(motif.node_ids):
        return False
    return all(es[k].dst == es[(k + 1) % len(es)].src for k in range(len(es)))


def is_fan_in_burst(graph, motif, min_count, max_amount, span) -> bool:
    hub = motif.node_ids[0]
    es = [graph.edges[e] for e in motif.edge_ids if graph.edges[e].dst == hub]
    ts = [e.timestamp for e in es]
    return (
        len(es) >= min_count
        and all(e.dst == hub for e in es)
        and all(e.amount is not None and e.amount < max_amount for e in es)
        and max(ts) - min(ts) < span
    )


def is_decaying_chain(graph, motif, min_len, fee_range) -> bool:
    es = [graph.edges[e] for e in motif.edge_ids]
    if len(es) < min_len:
        return False
    for a, b in zip(es, es[1:]):
        if a.dst != b.src or b.timestamp < a.timestamp:
            return False
        ratio = b.amount / a.amount
        if not (1 - fee_range[1] - 1e-9 <= ratio <= 1 - fee_range[0] + 1e-9):
            return False
    return True


# -- files -------------------------------------------------------------------------------------


def export_graph(graph, path):
    nodes = graph.nodes
    edges = graph.edges
    payload = {
        "format": GRAPH_MAGIC,
        "n_features": graph.n_features,
        "nodes": {
            "category": [n.category.value for n in nodes],
            "label": [n.label.value for n in nodes],
            "first_seen": [n.first_seen for n in nodes],
            "features": [n.features.tolist() for n in nodes],
            "external_id": [graph.external_ids.get(n.id) for n in nodes],
        },
        "edges": {
            "src": [e.src for e in edges],
            "dst": [e.dst for e in edges],
            "relation": [e.relation.value for e in edges],
            "timestamp": [e.timestamp for e in edges],
            "amount": [e.amount for e in edges],
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def import_graph(path) -> TemporalHeteroGraph:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a valid graph file ({exc.msg} at char {exc.pos})") from None
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != GRAPH_MAGIC:
        raise FormatError(f"{path}: missing or unsupported format header (want {GRAPH_MAGIC})")
    try:
        g = TemporalHeteroGraph(int(payload["n_features"]))
        nd, ed = payload["nodes"], payload["edges"]
        for k in range(len(nd["category"])):
            g.add_node(nd["category"][k], nd["features"][k], nd["label"][k], nd["first_seen"][k],
                       external_id=nd["external_id"][k])
        for k in range(len(ed["src"])):
            g.add_edge(ed["src"][k], ed["dst"][k], ed["relation"][k], ed["timestamp"][k], ed["amount"][k])
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt graph file ({exc})") from None
    return g.freeze()


def write_ground_truth(motifs, path):
    Path(path).write_text(json.dumps([m.to_dict() for m in motifs], indent=1))


def read_ground_truth(path) -> list[dict]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read ground truth {path}: {exc}") from None
    return data


def motif_node_sets(motifs) -> dict:
    out: dict = {t: set() for t in MOTIF_TYPES}
    for m in motifs:
        d = m.to_dict() if isinstance(m, Motif) else m
        out.setdefault(d["motif_type"], set()).update(d["node_ids"])
    return out


def category_counts(graph) -> dict:
    counts = np.bincount(graph.categories, minlength=len(CATEGORY_INDEX))
    return {c.value: int(counts[i]) for c, i in CATEGORY_INDEX.items()}
