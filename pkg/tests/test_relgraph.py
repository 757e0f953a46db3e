import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kspace.relgraph import (EdgeSet, EdgeType, HeteroGraph, IngestError, SchemaError, build_graph,
                             bundles_equal, emit, format_timestamp, graph_summary, ingest, make_bundle,
                             parse_manifest, parse_timestamp, sample_neighborhood)
from kspace.synthetic import LeakageSpec, generate

from helpers import random_temporal_graph, toy_bundle, toy_manifest


def test_manifest_requires_known_fk_target():
    doc = toy_manifest()
    doc["tables"][1]["columns"][1]["target"] = "nope"
    with pytest.raises(SchemaError):
        parse_manifest(doc)


def test_manifest_requires_one_primary_key():
    doc = toy_manifest()
    doc["tables"][0]["columns"][0]["kind"] = "numeric"
    with pytest.raises(SchemaError):
        parse_manifest(doc)


def test_manifest_schema_errors_name_the_field():
    doc = toy_manifest()
    doc["tables"][0]["columns"][2]["kind"] = "float"
    with pytest.raises(SchemaError, match="tables/0/columns/2/kind"):
        parse_manifest(doc)


def test_non_binary_label_is_rejected():
    b = toy_bundle()
    cols = {t: dict(b.tables[t].columns) for t in b.tables}
    cols["users"]["churn"] = np.array([0.0, 2.0, 1.0])
    with pytest.raises(IngestError):
        make_bundle(b.manifest, cols)


def test_two_table_toy_has_forward_and_reverse_types():
    g = build_graph(toy_bundle())
    fwd = EdgeType("orders", "user_id", "users")
    assert set(g.edges) == {fwd, fwd.reversed()}


def test_empty_child_table_gives_nodes_only():
    g = build_graph(toy_bundle(n_orders=0))
    assert g.n_nodes == 3
    assert g.n_edges == 0


def test_null_fk_gives_no_edge_and_n_rows_give_2n_edges():
    b = toy_bundle(n_orders=6)
    g = build_graph(b)
    assert g.n_edges == 12
    cols = {t: dict(b.tables[t].columns) for t in b.tables}
    fk = cols["orders"]["user_id"].copy()
    fk[2] = np.nan
    cols["orders"]["user_id"] = fk
    assert build_graph(make_bundle(b.manifest, cols)).n_edges == 10


def test_edge_time_comes_from_source_row_and_twins_match():
    b = toy_bundle(n_orders=4)
    g = build_graph(b)
    for t, es in g.edges.items():
        twin = g.edges[t.reversed()]
        assert sorted(zip(es.src, es.dst)) == sorted(zip(twin.dst, twin.src))
        assert np.array_equal(np.sort(es.time), np.sort(twin.time))
    fwd = g.edges[EdgeType("orders", "user_id", "users")]
    assert np.array_equal(np.sort(fwd.time), b.tables["orders"].columns["placed"])


def test_dangling_fk_is_dropped_with_warning(caplog):
    b = toy_bundle(n_orders=3)
    cols = {t: dict(b.tables[t].columns) for t in b.tables}
    fk = cols["orders"]["user_id"].copy()
    fk[0] = 99
    cols["orders"]["user_id"] = fk
    g = build_graph(make_bundle(b.manifest, cols))
    assert g.n_edges == 4
    assert "dangling" in caplog.text


def test_ingest_emit_round_trip(tmp_path):
    b = toy_bundle()
    emit(b, tmp_path)
    assert bundles_equal(b, ingest(tmp_path / "manifest.json"))


def test_synthetic_round_trip_and_counts(tmp_path):
    b, _ = generate(LeakageSpec(users=60, items=15, interactions=300, seed=3))
    emit(b, tmp_path)
    back = ingest(tmp_path / "manifest.json")
    assert bundles_equal(b, back)
    g = build_graph(back)
    assert g.table_sizes == [60, 15, 300]
    assert g.n_edges == 4 * 300


def test_synthetic_degree_histogram_matches_generator():
    b, _ = generate(LeakageSpec(users=50, items=12, interactions=400, seed=1))
    g = build_graph(b)
    t = EdgeType("interactions", "item_id", "items")
    deg = np.bincount(g.edges[t].dst - g.offsets[1], minlength=12)
    expect = np.bincount(b.tables["interactions"].columns["item_id"].astype(int), minlength=12)
    assert np.array_equal(deg, expect)


def test_ingest_reports_file_and_line(tmp_path):
    b = toy_bundle()
    emit(b, tmp_path)
    lines = (tmp_path / "orders.csv").read_text().splitlines()
    parts = lines[2].split(",")
    parts[2] = "not-a-time"
    lines[2] = ",".join(parts)
    (tmp_path / "orders.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(IngestError, match="orders.csv:3"):
        ingest(tmp_path / "manifest.json")


def test_ingest_missing_column(tmp_path):
    b = toy_bundle()
    emit(b, tmp_path)
    text = (tmp_path / "users.csv").read_text().replace("age,", "years,", 1)
    (tmp_path / "users.csv").write_text(text)
    with pytest.raises(IngestError, match="age"):
        ingest(tmp_path / "manifest.json")


def test_timestamps_round_trip():
    for v in (0.0, 1_704_067_200.0, 1.5):
        assert parse_timestamp(format_timestamp(v)) == v
    assert parse_timestamp("2024-01-01T00:00:00Z") == 1_704_067_200.0


def test_dump_edges_format(tmp_path):
    g = build_graph(toy_bundle(n_orders=2))
    g.dump_edges(tmp_path / "e.csv")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "src_table,src_row,fk,dst_table,dst_row,timestamp"
    assert len(rows) == 1 + 4


def test_graph_summary_counts():
    s = graph_summary(build_graph(toy_bundle(n_orders=4)))
    assert s["nodes"] == {"users": 3, "orders": 4}
    assert s["edges"] == 8


# ---------------------------------------------------------------------------
# sampling

def _star(n_leaves, times=None):
    times = np.zeros(n_leaves) if times is None else np.asarray(times, float)
    t = EdgeType("leaf", "hub_id", "hub")
    es = EdgeSet(np.arange(1, n_leaves + 1), np.zeros(n_leaves, dtype=np.int64), times)
    return HeteroGraph(["hub", "leaf"], [1, n_leaves],
                       {t: es, t.reversed(): EdgeSet(es.dst.copy(), es.src.copy(), times.copy())})


def test_seed_without_admissible_edges_is_alone():
    g = _star(3, times=[5.0, 6.0, 7.0])
    sub = sample_neighborhood(g, [0], [1.0], [16, 8], 0)
    assert sub.nodes.tolist() == [0]
    assert all(not layer for layer in sub.layers)


def test_fanout_above_degree_takes_everything():
    g = _star(2)
    sub = sample_neighborhood(g, [0], [10.0], [16], 0)
    assert sorted(sub.nodes.tolist()) == [0, 1, 2]


def test_inclusion_frequency_is_uniform():
    g = _star(32)
    hits = np.zeros(33)
    n = 10_000
    for s in range(n):
        sub = sample_neighborhood(g, [0], [1.0], [16], s)
        hits[sub.nodes] += 1
    freq = hits[1:] / n
    assert np.all(np.abs(freq - 0.5) < 0.02)


def test_unknown_seed_raises():
    with pytest.raises(KeyError):
        sample_neighborhood(_star(2), [7], [0.0], [4], 0)


def test_sampling_is_deterministic_and_batch_independent():
    g = random_temporal_graph(np.random.default_rng(3), max_nodes=14)
    seeds = np.arange(g.n_nodes)
    times = np.full(g.n_nodes, 6.0)
    a = sample_neighborhood(g, seeds, times, [3, 2], 11)
    b = sample_neighborhood(g, seeds, times, [3, 2], 11)
    assert np.array_equal(a.nodes, b.nodes)
    one = sample_neighborhood(g, seeds[-1:], times[-1:], [3, 2], 11)
    own = a.nodes[a.node_seed == len(seeds) - 1]
    assert np.array_equal(one.nodes, own)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 10), st.lists(st.integers(1, 5), min_size=1, max_size=3))
def test_sampled_edges_respect_seed_time_and_fanout(seed, t_seed, fanout):
    g = random_temporal_graph(np.random.default_rng(seed))
    seeds = np.arange(g.n_nodes)
    sub = sample_neighborhood(g, seeds, np.full(len(seeds), t_seed), fanout, seed)
    for layer, f in enumerate(fanout):
        for t, (src, dst) in sub.layers[layer].items():
            tm = sub.edge_times[layer][t]
            assert np.all(np.isnan(tm) | (tm <= t_seed))
            counts = np.bincount(dst, minlength=sub.n_nodes)
            assert counts.max() <= f
            # every sampled edge exists in the graph
            es = g.edges[t]
            have = set(zip(es.src.tolist(), es.dst.tolist()))
            assert all((sub.nodes[u], sub.nodes[v]) in have for u, v in zip(src, dst))


def test_reverse_closure_of_sampled_subgraph():
    g = random_temporal_graph(np.random.default_rng(8), max_nodes=14)
    sub = sample_neighborhood(g, np.arange(g.n_nodes), np.full(g.n_nodes, 9.0), [4, 4], 2)
    for layer in sub.layers:
        for t, (src, dst) in layer.items():
            twin = g.edges[t.reversed()]
            have = set(zip(twin.src.tolist(), twin.dst.tolist()))
            assert all((sub.nodes[v], sub.nodes[u]) in have for u, v in zip(src, dst))


def test_static_seed_sees_every_edge():
    g = _star(3, times=[5.0, 6.0, np.nan])
    sub = sample_neighborhood(g, [0], [np.nan], [16], 0)
    assert len(sub.nodes) == 4
