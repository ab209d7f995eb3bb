"""Cross-industry heterogeneous temporal graph.

Nodes carry an industry category, a feature vector, a compliance label and a
first-seen time step. Edges are directed, typed and stamped with an integer
time-step index. Per-node incidence lists stay sorted by ``(timestamp, edge_id)``
so time-filtered neighborhood queries are a bisection away.
"""
from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import DimensionError, DomainError, MissingNodeError, StateError

DEFAULT_N_FEATURES = 16


class IndustryCategory(str, enum.Enum):
    MOBILITY = "Mobility"
    ENERGY = "Energy"
    FINTECH = "Fintech"
    OTHER = "Other"


class RelationType(str, enum.Enum):
    FUND_TRANSFER = "FundTransfer"
    RENTAL_CONTRACT = "RentalContract"
    ENERGY_TRADE = "EnergyTrade"
    SETTLEMENT = "Settlement"
    CREDIT_ISSUE = "CreditIssue"


class Label(str, enum.Enum):
    ILLICIT = "Illicit"
    LICIT = "Licit"
    UNKNOWN = "Unknown"


CATEGORIES = list(IndustryCategory)
RELATIONS = list(RelationType)
CATEGORY_INDEX = {c: i for i, c in enumerate(CATEGORIES)}
RELATION_INDEX = {r: i for i, r in enumerate(RELATIONS)}

# binary target used by every classifier: Illicit=1, Licit=0, Unknown=-1
LABEL_TARGET = {Label.ILLICIT: 1, Label.LICIT: 0, Label.UNKNOWN: -1}

DIRECTIONS = ("in", "out", "both")


@dataclass(frozen=True)
class Node:
    id: int
    category: IndustryCategory
    features: np.ndarray
    label: Label = Label.UNKNOWN
    first_seen: int = 0


@dataclass(frozen=True)
class Edge:
    id: int
    src: int
    dst: int
    relation: RelationType
    timestamp: int
    amount: Optional[float] = None


@dataclass(frozen=True)
class EdgeArrays:
    """Column view of a set of edges, ordered by edge id."""

    eid: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    relation: np.ndarray
    timestamp: np.ndarray
    amount: np.ndarray  # NaN where the amount is absent

    def __len__(self):
        return len(self.eid)


def _check_direction(direction):
    if direction not in DIRECTIONS:
        raise DomainError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


class TemporalHeteroGraph:
    """Append-only typed temporal multigraph with dense integer ids.

    Mutation is single-writer. After :meth:`freeze` the graph rejects further
    inserts and can be shared read-only (cached column arrays are then stable).
    Streaming code extends a frozen graph through :meth:`with_edges`, which
    returns a new graph and leaves the original untouched.
    """

    def __init__(self, n_features: int = DEFAULT_N_FEATURES):
        if n_features < 0:
            raise DomainError("n_features must be nonnegative")
        self.n_features = int(n_features)
        self.nodes: list[Node] = []
        self.edges: list[Edge] = []
        self.external_ids: dict[int, object] = {}
        self._out: list[list[tuple[int, int]]] = []
        self._in: list[list[tuple[int, int]]] = []
        self._frozen = False
        self._cache: dict = {}

    # -- construction -----------------------------------------------------

    def add_node(self, category, features, label=Label.UNKNOWN, first_seen=0, external_id=None) -> int:
        self._check_mutable()
        features = np.asarray(features, dtype=np.float64).reshape(-1)
        if features.shape[0] != self.n_features:
            raise DimensionError(
                f"feature length {features.shape[0]} does not match graph width {self.n_features}"
            )
        if int(first_seen) < 0:
            raise DomainError("first_seen must be >= 0")
        nid = len(self.nodes)
        self.nodes.append(
            Node(nid, IndustryCategory(category), features, Label(label), int(first_seen))
        )
        self._out.append([])
        self._in.append([])
        if external_id is not None:
            self.external_ids[nid] = external_id
        self._cache.clear()
        return nid

    def add_edge(self, src, dst, relation, timestamp, amount=None) -> int:
        self._check_mutable()
        self._check_node(src)
        self._check_node(dst)
        timestamp = int(timestamp)
        if timestamp < 0:
            raise DomainError(f"negative timestamp {timestamp}")
        if amount is not None:
            amount = float(amount)
            if not amount >= 0:
                raise DomainError(f"amount must be nonnegative, got {amount}")
        eid = len(self.edges)
        self.edges.append(Edge(eid, int(src), int(dst), RelationType(relation), timestamp, amount))
        bisect.insort(self._out[src], (timestamp, eid))
        bisect.insort(self._in[dst], (timestamp, eid))
        self._cache.clear()
        return eid

    def freeze(self) -> "TemporalHeteroGraph":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def copy(self) -> "TemporalHeteroGraph":
        """Unfrozen deep-enough copy (nodes/edges are immutable records)."""
        g = TemporalHeteroGraph(self.n_features)
        g.nodes = list(self.nodes)
        g.edges = list(self.edges)
        g.external_ids = dict(self.external_ids)
        g._out = [list(lst) for lst in self._out]
        g._in = [list(lst) for lst in self._in]
        return g

    def with_edges(self, edges: Iterable) -> "TemporalHeteroGraph":
        """Return a frozen copy with ``edges`` appended.

        ``edges`` items are :class:`Edge` records (their ``id`` is ignored) or
        mappings with keys ``src, dst, relation, timestamp[, amount]``.
        """
        g = self.copy()
        for e in edges:
            if isinstance(e, Edge):
                g.add_edge(e.src, e.dst, e.relation, e.timestamp, e.amount)
            else:
                g.add_edge(e["src"], e["dst"], e["relation"], e["timestamp"], e.get("amount"))
        return g.freeze()

    def _check_mutable(self):
        if self._frozen:
            raise StateError("graph is frozen")

    def _check_node(self, node):
        if not (isinstance(node, (int, np.integer)) and 0 <= node < len(self.nodes)):
            raise MissingNodeError(f"unknown node {node!r}")

    # -- queries ----------------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def time_horizon(self) -> int:
        """Largest edge timestamp (or first-seen step); -1 for an empty graph."""
        if "horizon" not in self._cache:
            t_edges = max((e.timestamp for e in self.edges), default=-1)
            t_nodes = max((n.first_seen for n in self.nodes), default=-1)
            self._cache["horizon"] = max(t_edges, t_nodes)
        return self._cache["horizon"]

    def neighbors(self, node, up_to=None, direction="both", since=None) -> list[tuple[int, int]]:
        """Incident ``(neighbor_id, edge_id)`` pairs with ``since <= t <= up_to``.

        Ordered by ``(timestamp, edge_id)``. A self-loop appears once under
        ``direction="both"``.
        """
        self._check_node(node)
        _check_direction(direction)
        hi = (np.inf if up_to is None else up_to, np.inf)
        lo = (-np.inf if since is None else since, -1)

        def window(lst):
            return lst[bisect.bisect_left(lst, lo): bisect.bisect_right(lst, hi)]

        out: list[tuple[int, int, int]] = []
        if direction in ("out", "both"):
            out.extend((t, eid, self.edges[eid].dst) for t, eid in window(self._out[node]))
        if direction in ("in", "both"):
            seen = {eid for _, eid, _ in out}
            out.extend(
                (t, eid, self.edges[eid].src) for t, eid in window(self._in[node]) if eid not in seen
            )
        out.sort(key=lambda r: (r[0], r[1]))
        return [(nbr, eid) for _, eid, nbr in out]

    def snapshot(self, window_start, window_end) -> "GraphView":
        if window_start > window_end:
            raise DomainError(f"inverted window [{window_start}, {window_end}]")
        return GraphView(self, window_start, window_end)

    def view(self, up_to=None) -> "GraphView":
        """Cumulative view of every edge with timestamp <= ``up_to``."""
        return GraphView(self, 0, self.time_horizon if up_to is None else up_to)

    def iter_nodes(self) -> Iterator[Node]:
        for n in self.nodes:
            assert n.category in CATEGORY_INDEX
            yield n

    def iter_edges(self) -> Iterator[Edge]:
        for e in self.edges:
            assert e.relation in RELATION_INDEX
            yield e

    # -- column caches ----------------------------------------------------

    def _cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def features(self) -> np.ndarray:
        return self._cached(
            "features",
            lambda: np.vstack([n.features for n in self.nodes])
            if self.nodes else np.zeros((0, self.n_features)),
        )

    @property
    def categories(self) -> np.ndarray:
        return self._cached(
            "categories",
            lambda: np.array([CATEGORY_INDEX[n.category] for n in self.nodes], dtype=np.int64),
        )

    @property
    def targets(self) -> np.ndarray:
        """Binary targets per node: 1 illicit, 0 licit, -1 unknown."""
        return self._cached(
            "targets", lambda: np.array([LABEL_TARGET[n.label] for n in self.nodes], dtype=np.int64)
        )

    @property
    def first_seen(self) -> np.ndarray:
        return self._cached(
            "first_seen", lambda: np.array([n.first_seen for n in self.nodes], dtype=np.int64)
        )

    def edge_arrays(self) -> EdgeArrays:
        def build():
            m = len(self.edges)
            return EdgeArrays(
                eid=np.arange(m, dtype=np.int64),
                src=np.fromiter((e.src for e in self.edges), np.int64, m),
                dst=np.fromiter((e.dst for e in self.edges), np.int64, m),
                relation=np.fromiter((RELATION_INDEX[e.relation] for e in self.edges), np.int64, m),
                timestamp=np.fromiter((e.timestamp for e in self.edges), np.int64, m),
                amount=np.fromiter(
                    (np.nan if e.amount is None else e.amount for e in self.edges), np.float64, m
                ),
            )

        return self._cached("edge_arrays", build)

    def __repr__(self):
        return (
            f"TemporalHeteroGraph(nodes={self.num_nodes}, edges={self.num_edges}, "
            f"F={self.n_features}, frozen={self._frozen})"
        )


@dataclass
class GraphView:
    """Read-only window ``[start, end]`` over a graph; all nodes retained."""

    graph: TemporalHeteroGraph
    start: int
    end: int
    _arrays: Optional[EdgeArrays] = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def nodes(self) -> list[Node]:
        return self.graph.nodes

    @property
    def n_features(self) -> int:
        return self.graph.n_features

    @property
    def features(self) -> np.ndarray:
        return self.graph.features

    @property
    def categories(self) -> np.ndarray:
        return self.graph.categories

    @property
    def targets(self) -> np.ndarray:
        return self.graph.targets

    @property
    def first_seen(self) -> np.ndarray:
        return self.graph.first_seen

    @property
    def time_horizon(self) -> int:
        return self.end

    def edge_arrays(self) -> EdgeArrays:
        if self._arrays is None:
            full = self.graph.edge_arrays()
            keep = (full.timestamp >= self.start) & (full.timestamp <= self.end)
            self._arrays = EdgeArrays(
                *(getattr(full, f)[keep] for f in ("eid", "src", "dst", "relation", "timestamp", "amount"))
            )
        return self._arrays

    @property
    def num_edges(self) -> int:
        return len(self.edge_arrays())

    @property
    def edges(self) -> list[Edge]:
        return [self.graph.edges[i] for i in self.edge_arrays().eid]

    def neighbors(self, node, up_to=None, direction="both") -> list[tuple[int, int]]:
        hi = self.end if up_to is None else min(up_to, self.end)
        return self.graph.neighbors(node, up_to=hi, direction=direction, since=self.start)

    def snapshot(self, window_start, window_end) -> "GraphView":
        if window_start > window_end:
            raise DomainError(f"inverted window [{window_start}, {window_end}]")
        return GraphView(self.graph, max(window_start, self.start), min(window_end, self.end))


def as_view(graph) -> GraphView:
    if isinstance(graph, GraphView):
        return graph
    return graph.view()


def equal_windows(t_min: int, t_max: int, n_windows: int) -> list[tuple[int, int]]:
    """Partition the integer range ``[t_min, t_max]`` into contiguous windows of near-equal width."""
    if n_windows < 1:
        raise DomainError("n_windows must be >= 1")
    if t_max < t_min:
        raise DomainError("empty time range")
    span = t_max - t_min + 1
    cuts = [t_min + (span * k) // n_windows for k in range(n_windows + 1)]
    return [(cuts[k], cuts[k + 1] - 1) for k in range(n_windows) if cuts[k + 1] > cuts[k]]


def category_of(graph, node) -> IndustryCategory:
    return graph.nodes[node].category


def relation_names(rel_codes: Sequence[int]) -> list[str]:
    return [RELATIONS[int(r)].value for r in rel_codes]
