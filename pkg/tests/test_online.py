import threading
from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gcrmf.encoder import EncoderConfig
from gcrmf.errors import DomainError, OutOfOrderError, ParseError
from gcrmf.graph import IndustryCategory as C, RelationType as R, TemporalHeteroGraph
from gcrmf.model import ModelConfig, init_model, representations
from gcrmf.online import (
    StreamState,
    apply_update,
    ingest_batch,
    k_hop,
    local_representations,
    micro_batches,
    read_alerts,
    read_stream,
    score_stream,
    smooth_update,
    write_alerts,
    write_stream,
)

import oracles
from conftest import random_graph

CATS = [C.MOBILITY, C.FINTECH, C.ENERGY]
RELS = [R.FUND_TRANSFER, R.CREDIT_ISSUE, R.ENERGY_TRADE, R.RENTAL_CONTRACT, R.SETTLEMENT]


def stream_state(n=40, m=60, seed=0, alpha=0.3, n_layers=2):
    g = random_graph(n, m, seed=seed, horizon=5, cats=CATS, rels=RELS)
    config = ModelConfig(EncoderConfig(hidden_dim=4, n_layers=n_layers), seed=seed)
    return StreamState.from_graph(g, init_model(g, config), config, alpha_smooth=alpha, now=5)


def bfs(graph, seeds, k):
    adj = {v: set() for v in range(graph.num_nodes)}
    for e in graph.edges:
        adj[e.src].add(e.dst)
        adj[e.dst].add(e.src)
    dist = {s: 0 for s in seeds}
    queue = deque(seeds)
    while queue:
        v = queue.popleft()
        for u in adj[v]:
            if u not in dist and dist[v] < k:
                dist[u] = dist[v] + 1
                queue.append(u)
    return sorted(dist)


# -- smoothing ------------------------------------------------------------------------------


def test_smoothing_examples():
    assert smooth_update([1.0, 2.0], [5.0, 6.0], 0.0).tolist() == [1.0, 2.0]
    assert smooth_update([1.0, 2.0], [5.0, 6.0], 1.0).tolist() == [5.0, 6.0]
    np.testing.assert_allclose(smooth_update([1.0, 0.0], [0.0, 1.0], 0.3), [0.7, 0.3], atol=1e-15)


def test_smoothing_domain():
    with pytest.raises(DomainError):
        smooth_update([1.0], [1.0], 1.5)


@given(st.integers(0, 1000), st.floats(0, 1))
def test_smoothing_matches_oracle(seed, alpha):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=6), rng.normal(size=6)
    np.testing.assert_allclose(smooth_update(a, b, alpha), oracles.smoothing(a, b, alpha), atol=1e-12)


@given(st.floats(0.01, 0.99), st.integers(1, 30))
def test_geometric_convergence_under_constant_input(alpha, n):
    state = stream_state(alpha=alpha)
    rows = np.arange(10)
    target = np.random.default_rng(0).normal(size=(10, state.table.shape[1]))
    start = np.linalg.norm(state.table[rows] - target)
    for _ in range(n):
        apply_update(state, rows, target)
    gap = np.linalg.norm(state.table[rows] - target)
    assert gap == pytest.approx((1 - alpha) ** n * start, rel=1e-9)


# -- frontier and ingestion -------------------------------------------------------------------


def test_k_hop_matches_bfs():
    g = random_graph(30, 40, seed=3)
    for v in range(g.num_nodes):
        for k in (0, 1, 2, 3):
            assert k_hop(g, [v], k) == bfs(g, [v], k)


def test_frontier_of_four_nodes():
    g = TemporalHeteroGraph(2)
    for c in [C.MOBILITY, C.FINTECH, C.ENERGY, C.FINTECH, C.ENERGY, C.MOBILITY]:
        g.add_node(c, [0.5, -0.5])
    g.add_edge(1, 2, R.CREDIT_ISSUE, 0)
    g.add_edge(3, 1, R.FUND_TRANSFER, 0)
    g.add_edge(4, 5, R.ENERGY_TRADE, 0)
    g.freeze()
    config = ModelConfig(EncoderConfig(hidden_dim=3, n_layers=1))
    state = StreamState.from_graph(g, init_model(g, config), config, now=0)
    report = ingest_batch(state, [{"src": 0, "dst": 1, "rel": "FundTransfer", "t": 1}])
    assert report.affected == [0, 1, 2, 3]


def test_empty_batch_changes_nothing():
    state = stream_state()
    before = state.table.copy()
    report = ingest_batch(state, [])
    assert report.affected == [] and state.table.tobytes() == before.tobytes()


def test_untouched_rows_are_bit_identical():
    state = stream_state()
    before = state.table.copy()
    report = ingest_batch(state, [{"src": 0, "dst": 1, "rel": "FundTransfer", "t": 6}])
    outside = np.setdiff1d(np.arange(len(before)), report.affected)
    assert len(outside) > 0
    assert state.table[outside].tobytes() == before[outside].tobytes()
    assert report.affected == bfs(state.graph, [0, 1], 2)
    assert state.last_processed == 6


def test_local_pass_equals_full_pass():
    state = stream_state(seed=2)
    ingest_batch(state, [{"src": 3, "dst": 7, "rel": "CreditIssue", "t": 6}])
    nodes = k_hop(state.graph, [3, 7], 2)
    full = representations(state.store, state.config, state.graph, 6)
    local = local_representations(state.graph, state.store, state.config, nodes, 6)
    np.testing.assert_allclose(local, full[nodes], rtol=0, atol=1e-12)


def test_alpha_zero_is_idempotent():
    state = stream_state(alpha=0.0)
    before = state.table.copy()
    ingest_batch(state, [{"src": 2, "dst": 9, "rel": "Settlement", "t": 7}])
    assert state.table.tobytes() == before.tobytes()
    assert state.last_processed == 7


def test_out_of_order_batch_is_rejected():
    state = stream_state()
    ingest_batch(state, [{"src": 0, "dst": 1, "rel": "FundTransfer", "t": 8}])
    edges = state.graph.num_edges
    with pytest.raises(OutOfOrderError):
        ingest_batch(state, [{"src": 0, "dst": 1, "rel": "FundTransfer", "t": 7}])
    assert state.graph.num_edges == edges


def test_frozen_source_graph_is_not_mutated():
    g = random_graph(10, 10, seed=0, cats=CATS)
    config = ModelConfig(EncoderConfig(hidden_dim=3, n_layers=1))
    state = StreamState.from_graph(g, init_model(g, config), config)
    ingest_batch(state, [{"src": 0, "dst": 1, "rel": "FundTransfer", "t": 20}])
    assert g.num_edges == 10 and state.graph.num_edges == 11


# -- scoring ------------------------------------------------------------------------------------


def test_identical_rows_rank_by_id():
    state = stream_state()
    state.table = np.ones_like(state.table)
    ranked = score_stream(state)
    assert [n for n, _ in ranked] == list(range(len(state.table)))
    assert len({s for _, s in ranked}) == 1


def test_planted_node_ranks_first():
    state = stream_state()
    w = state.store["cls.w"].value
    state.table = np.zeros_like(state.table)
    state.table[17] = 10 * w
    assert score_stream(state)[0][0] == 17


@pytest.mark.parametrize("seed", range(5))
def test_ranking_matches_sort_oracle(seed):
    state = stream_state(seed=seed)
    state.table = np.random.default_rng(seed).normal(size=state.table.shape)
    w, b = state.store["cls.w"].value, float(state.store["cls.b"].value)
    scores = [1 / (1 + np.exp(-(row @ w + b))) for row in state.table]
    want = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    assert [n for n, _ in score_stream(state)] == want


def test_readers_see_whole_batches():
    state = stream_state(alpha=1.0)
    tables = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            tables.append(state.snapshot())

    t = threading.Thread(target=reader)
    t.start()
    snapshots = [state.table]
    for k in range(5):
        ingest_batch(state, [{"src": k, "dst": k + 10, "rel": "FundTransfer", "t": 6 + k}])
        snapshots.append(state.table)
    stop.set()
    t.join()
    valid = {s.tobytes() for s in snapshots}
    assert all(tb.tobytes() in valid for tb in tables)


# -- files --------------------------------------------------------------------------------------


def test_stream_file_round_trip(tmp_path):
    edges = [{"src": 0, "dst": 1, "rel": "FundTransfer", "t": 3, "amount": 12.5},
             {"src": 1, "dst": 2, "rel": "Settlement", "t": 4, "amount": None}]
    write_stream(edges, tmp_path / "s.jsonl")
    assert read_stream(tmp_path / "s.jsonl") == edges


@pytest.mark.parametrize("line", ['{"src": 0, "dst": 1, "rel": "Nope", "t": 1}', '{"src": 0', '{"dst": 1}'])
def test_bad_stream_line_reports_line_number(tmp_path, line):
    (tmp_path / "s.jsonl").write_text('{"src": 0, "dst": 1, "rel": "FundTransfer", "t": 1}\n\n' + line + "\n")
    with pytest.raises(ParseError) as info:
        read_stream(tmp_path / "s.jsonl")
    assert info.value.line == 3


def test_alert_file_round_trip(tmp_path):
    ranked = [(4, 0.9), (1, 0.5), (0, 0.5)]
    write_alerts(ranked, tmp_path / "a.csv")
    assert read_alerts(tmp_path / "a.csv") == ranked
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "node_id,score"


def test_micro_batches():
    assert micro_batches(range(5), 2) == [[0, 1], [2, 3], [4]]
    with pytest.raises(DomainError):
        micro_batches([], 0)
