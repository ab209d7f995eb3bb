import dataclasses

import numpy as np
import pytest

from gcrmf.data import (
    GRAPH_MAGIC,
    ProxyMapConfig,
    ProxyRule,
    SyntheticSpec,
    apply_proxy_map,
    elliptic_paths,
    export_graph,
    generate_synthetic,
    import_graph,
    is_cycle,
    is_decaying_chain,
    is_fan_in_burst,
    load_elliptic,
    percentile_ranks,
    read_ground_truth,
    write_elliptic,
    write_ground_truth,
)
from gcrmf.errors import FormatError, IntegrityError, ParseError, SpecError
from gcrmf.graph import IndustryCategory as C, Label, RelationType as R, TemporalHeteroGraph

from conftest import random_graph

SMALL = dict(n_background_nodes=300, n_hubs=10, circular=2, microburst=1, layered=2, n_windows=3)


def write_bundle(d, features, edges, classes):
    d.mkdir(exist_ok=True)
    f, e, c = elliptic_paths(d)
    f.write_text("\n".join(features) + "\n")
    e.write_text("txId1,txId2\n" + "\n".join(edges) + "\n")
    c.write_text("txId,class\n" + "\n".join(classes) + "\n")
    return f, e, c


# -- Elliptic ------------------------------------------------------------------------------


def test_three_row_bundle(tmp_path):
    paths = write_bundle(
        tmp_path / "b",
        ["101,1,0.5,1.0", "202,1,-0.5,2.0", "303,2,0.0,0.0"],
        ["101,202", "202,303", "101,202"],
        ["101,1", "202,2", "303,unknown"],
    )
    g = load_elliptic(*paths)
    assert (g.num_nodes, g.num_edges, g.n_features) == (3, 3, 2)
    assert [n.label for n in g.nodes] == [Label.ILLICIT, Label.LICIT, Label.UNKNOWN]
    assert [n.first_seen for n in g.nodes] == [1, 1, 2]
    assert [e.timestamp for e in g.edges] == [1, 1, 1]
    assert g.external_ids == {0: "101", 1: "202", 2: "303"}


def test_dangling_endpoint_lists_ids(tmp_path):
    paths = write_bundle(tmp_path / "b", ["1,1,0.0", "2,1,0.0"], ["1,2", "2,99", "77,1"], ["1,1"])
    with pytest.raises(IntegrityError) as info:
        load_elliptic(*paths)
    assert info.value.offending == ["77", "99"]
    assert "77" in str(info.value)


def test_malformed_row_reports_line(tmp_path):
    paths = write_bundle(tmp_path / "b", ["1,1,0.0", "2,x,0.0"], [], [])
    with pytest.raises(ParseError) as info:
        load_elliptic(*paths)
    assert info.value.line == 2


def test_bad_class_value(tmp_path):
    paths = write_bundle(tmp_path / "b", ["1,1,0.0"], [], ["1,7"])
    with pytest.raises(ParseError):
        load_elliptic(*paths)


def test_bundle_round_trip(tmp_path):
    g = random_graph(40, 80, seed=0, labels=True)
    h = load_elliptic(*elliptic_paths(write_elliptic(g, tmp_path / "b")))
    assert (h.num_nodes, h.num_edges) == (g.num_nodes, g.num_edges)
    assert h.targets.tolist() == g.targets.tolist()
    np.testing.assert_array_equal(h.features, g.features)


def test_proxy_rules_partition_nodes():
    rng = np.random.default_rng(0)
    in_deg = rng.integers(0, 20, size=500).astype(float)
    out_deg = rng.integers(0, 20, size=500).astype(float)
    feats = rng.normal(size=(500, 3))
    proxy = ProxyMapConfig()
    cats, _, which = apply_proxy_map(in_deg, out_deg, feats, proxy)
    assert len(cats) == 500
    # independent scan: the first matching rule decides, otherwise the fallback
    ranks = {"in_degree": percentile_ranks(in_deg), "degree": percentile_ranks(in_deg + out_deg)}
    for i in range(500):
        expected = proxy.fallback
        for rule in proxy.rules:
            if rule.lo <= ranks[rule.stat][i] < rule.hi:
                expected = rule.category
                break
        assert cats[i] == expected
    assert (which == 0).sum() == 50


def test_feature_proxy_rule():
    proxy = ProxyMapConfig([ProxyRule("feature:1", 0.5, 1.01, C.ENERGY, R.ENERGY_TRADE)])
    feats = np.array([[0, 1.0], [0, 3.0], [0, 2.0], [0, 0.0]])
    cats, _, _ = apply_proxy_map(np.zeros(4), np.zeros(4), feats, proxy)
    assert cats == [C.MOBILITY, C.ENERGY, C.ENERGY, C.MOBILITY]


def test_percentile_ranks_break_ties_by_position():
    assert percentile_ranks([5, 5, 5, 5]).tolist() == [0.0, 0.25, 0.5, 0.75]


# -- synthetic --------------------------------------------------------------------------------


def test_no_motifs_means_no_illicit_nodes():
    g, motifs = generate_synthetic(SyntheticSpec(**{**SMALL, "circular": 0, "microburst": 0, "layered": 0}))
    assert motifs == []
    assert Label.ILLICIT not in {n.label for n in g.nodes}


def test_single_four_cycle():
    spec = SyntheticSpec(**{**SMALL, "circular": 1, "microburst": 0, "layered": 0,
                            "cycle_len": (4, 4), "camouflage_degree": 0.0})
    g, (m,) = generate_synthetic(spec)
    assert m.motif_type == "circular"
    assert len(m.node_ids) == 4 and len(m.edge_ids) == 4
    assert is_cycle(g, m)


def test_planted_motifs_satisfy_their_predicates():
    spec = SyntheticSpec(**SMALL)
    g, motifs = generate_synthetic(spec)
    assert len(motifs) == 5
    for m in motifs:
        if m.motif_type == "circular":
            assert is_cycle(g, m)
            amounts = [g.edges[e].amount for e in m.edge_ids]
            assert max(amounts) / min(amounts) < 1.1
            assert len({g.edges[e].timestamp // spec.steps_per_window for e in m.edge_ids}) == 1
        elif m.motif_type == "microburst":
            assert is_fan_in_burst(g, m, spec.burst_size[0], spec.burst_max_amount, spec.burst_span)
        else:
            assert is_decaying_chain(g, m, spec.chain_len[0], spec.fee_range)
            assert g.nodes[m.node_ids[0]].category == C.FINTECH
            assert C.ENERGY in {g.nodes[v].category for v in m.node_ids}


def test_motif_nodes_are_illicit():
    g, motifs = generate_synthetic(SyntheticSpec(**SMALL))
    for m in motifs:
        assert all(g.nodes[v].label == Label.ILLICIT for v in m.node_ids)
    background = {n.label for n in g.nodes[: SMALL["n_background_nodes"]]}
    assert background <= {Label.LICIT, Label.UNKNOWN}


def test_generation_is_byte_identical(tmp_path):
    for k in range(2):
        g, motifs = generate_synthetic(SyntheticSpec(**SMALL, seed=3))
        export_graph(g, tmp_path / f"g{k}.json")
        write_ground_truth(motifs, tmp_path / f"t{k}.json")
    assert (tmp_path / "g0.json").read_bytes() == (tmp_path / "g1.json").read_bytes()
    assert (tmp_path / "t0.json").read_bytes() == (tmp_path / "t1.json").read_bytes()


def test_different_seeds_differ():
    a, _ = generate_synthetic(SyntheticSpec(**SMALL, seed=1))
    b, _ = generate_synthetic(SyntheticSpec(**SMALL, seed=2))
    assert not np.array_equal(a.features, b.features)


@pytest.mark.parametrize("change", [
    {"circular": 200},
    {"circular": -1},
    {"cycle_len": (5, 3)},
    {"category_mix": (0.5, 0.5, 0.5)},
    {"motif_span": 99},
])
def test_invalid_specs(change):
    with pytest.raises(SpecError):
        generate_synthetic(SyntheticSpec(**{**SMALL, **change}))


def test_spec_dict_round_trip():
    spec = SyntheticSpec(**SMALL)
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(SpecError):
        SyntheticSpec.from_dict({"bogus": 1})


def test_ground_truth_file(tmp_path):
    _, motifs = generate_synthetic(SyntheticSpec(**SMALL))
    write_ground_truth(motifs, tmp_path / "gt.json")
    rows = read_ground_truth(tmp_path / "gt.json")
    assert [set(r) for r in rows] == [{"motif_type", "node_ids", "edge_ids"}] * len(motifs)


# -- graph file -------------------------------------------------------------------------------


def _same(g, h):
    assert (g.num_nodes, g.num_edges, g.n_features) == (h.num_nodes, h.num_edges, h.n_features)
    for a, b in zip(g.nodes, h.nodes):
        assert (a.id, a.category, a.label, a.first_seen) == (b.id, b.category, b.label, b.first_seen)
        assert a.features.tobytes() == b.features.tobytes()
    for a, b in zip(g.edges, h.edges):
        assert dataclasses.astuple(a) == dataclasses.astuple(b)


def test_empty_graph_round_trip(tmp_path):
    export_graph(TemporalHeteroGraph(4), tmp_path / "g.json")
    _same(TemporalHeteroGraph(4), import_graph(tmp_path / "g.json"))


def test_random_graph_round_trip(tmp_path):
    g = random_graph(100, 300, seed=8, labels=True)
    export_graph(g, tmp_path / "g.json")
    _same(g, import_graph(tmp_path / "g.json"))


def test_truncated_file(tmp_path):
    export_graph(random_graph(20, 30), tmp_path / "g.json")
    text = (tmp_path / "g.json").read_text()
    (tmp_path / "g.json").write_text(text[: len(text) // 2])
    with pytest.raises(FormatError):
        import_graph(tmp_path / "g.json")


def test_wrong_version(tmp_path):
    (tmp_path / "g.json").write_text('{"format": "GCRMF-GRAPH-0"}')
    with pytest.raises(FormatError):
        import_graph(tmp_path / "g.json")
    assert GRAPH_MAGIC == "GCRMF-GRAPH-1"
