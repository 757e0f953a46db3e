"""Shared oracles and toy data for the test suite."""
from __future__ import annotations

import numpy as np

from kspace.relgraph import EdgeSet, EdgeType, HeteroGraph, make_bundle, parse_manifest


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d f / d x by central differences; ``f`` reads ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def toy_manifest(tasks=True) -> dict:
    return {
        "name": "shop",
        "version": 1,
        "tables": [
            {"name": "users", "columns": [
                {"name": "user_id", "kind": "primary-key"},
                {"name": "signup", "kind": "timestamp"},
                {"name": "age", "kind": "numeric"},
                {"name": "country", "kind": "categorical"},
                {"name": "churn", "kind": "numeric"},
            ]},
            {"name": "orders", "columns": [
                {"name": "order_id", "kind": "primary-key"},
                {"name": "user_id", "kind": "foreign-key", "target": "users"},
                {"name": "placed", "kind": "timestamp"},
                {"name": "amount", "kind": "numeric"},
            ]},
        ],
        "tasks": [{"name": "churn", "table": "users", "label": "churn", "timestamp": "signup"}] if tasks else [],
    }


def toy_bundle(n_orders: int = 5):
    users = {"user_id": [0, 1, 2], "signup": [100.0, 200.0, 300.0], "age": [30.0, float("nan"), 50.0],
             "country": ["de", None, "fr"], "churn": [0.0, 1.0, 0.0]}
    rng = np.random.default_rng(0)
    orders = {"order_id": np.arange(n_orders), "user_id": rng.integers(0, 3, n_orders).astype(float),
              "placed": np.arange(n_orders) * 50.0 + 10.0, "amount": rng.uniform(1, 9, n_orders).round(2)}
    return make_bundle(parse_manifest(toy_manifest()), {"users": users, "orders": orders})


def random_temporal_graph(rng: np.random.Generator, max_nodes: int = 15, n_types: int = 2,
                          p_static: float = 0.2, max_edges: int = 30) -> HeteroGraph:
    """Two tables, random typed edges with twins, some static; no self-loops."""
    sizes = [int(rng.integers(1, max_nodes // 2 + 1)), int(rng.integers(1, max_nodes // 2 + 1))]
    names = ["a", "b"]
    offsets = [0, sizes[0]]
    edges = {}
    for k in range(n_types):
        src_t, dst_t = names[k % 2], names[(k + 1) % 2] if k % 3 else names[k % 2]
        m = int(rng.integers(0, max_edges // n_types + 1))
        s = rng.integers(0, sizes[names.index(src_t)], m) + offsets[names.index(src_t)]
        d = rng.integers(0, sizes[names.index(dst_t)], m) + offsets[names.index(dst_t)]
        keep = s != d
        s, d = s[keep], d[keep]
        t = rng.integers(0, 10, len(s)).astype(float)
        t[rng.random(len(s)) < p_static] = np.nan
        et = EdgeType(src_t, f"fk{k}", dst_t)
        edges[et] = EdgeSet(s.astype(np.int64), d.astype(np.int64), t)
        edges[et.reversed()] = EdgeSet(d.astype(np.int64), s.astype(np.int64), t.copy())
    return HeteroGraph(names, sizes, edges)


def raw_edges(g: HeteroGraph):
    """Flat (src, dst, time) arrays over every edge type."""
    src = np.concatenate([es.src for es in g.edges.values()]) if g.edges else np.zeros(0, int)
    dst = np.concatenate([es.dst for es in g.edges.values()]) if g.edges else np.zeros(0, int)
    tm = np.concatenate([es.time for es in g.edges.values()]) if g.edges else np.zeros(0)
    return src, dst, tm


def admissible_transition_matrix(g: HeteroGraph, seed_time: float) -> np.ndarray:
    """Independent oracle: uniform moves over admissible raw edges (rows of halting nodes are zero)."""
    src, dst, tm = raw_edges(g)
    ok = np.isnan(tm) | (tm <= seed_time)
    P = np.zeros((g.n_nodes, g.n_nodes))
    for u, v in zip(src[ok], dst[ok]):
        P[u, v] += 1.0
    deg = P.sum(axis=1, keepdims=True)
    return np.divide(P, deg, out=np.zeros_like(P), where=deg > 0)
