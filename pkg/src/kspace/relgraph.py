"""Relational tables -> heterogeneous temporal graph -> sampled neighborhoods."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np

log = logging.getLogger(__name__)

COLUMN_KINDS = ("numeric", "categorical", "timestamp", "primary-key", "foreign-key")


class SchemaError(ValueError):
    """The manifest is malformed or inconsistent."""


class IngestError(ValueError):
    """A table file does not match its manifest entry."""


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    target: str | None = None


@dataclass(frozen=True)
class TableSpec:
    name: str
    columns: tuple[ColumnSpec, ...]
    file: str | None = None

    @property
    def csv_name(self) -> str:
        return self.file or f"{self.name}.csv"

    def columns_of(self, kind: str) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind == kind]

    @property
    def primary_key(self) -> str:
        return self.columns_of("primary-key")[0].name

    @property
    def time_column(self) -> str | None:
        ts = self.columns_of("timestamp")
        return ts[0].name if ts else None


@dataclass(frozen=True)
class TaskSpec:
    name: str
    table: str
    label: str
    timestamp: str


@dataclass(frozen=True)
class SchemaManifest:
    name: str
    tables: tuple[TableSpec, ...]
    tasks: tuple[TaskSpec, ...] = ()

    def table(self, name: str) -> TableSpec:
        for t in self.tables:
            if t.name == name:
                return t
        raise SchemaError(f"unknown table {name!r}")

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise SchemaError(f"unknown task {name!r}")

    def label_columns(self, table: str) -> set[str]:
        return {t.label for t in self.tasks if t.table == table}

    def to_dict(self) -> dict:
        tables = []
        for t in self.tables:
            cols = []
            for c in t.columns:
                d = {"name": c.name, "kind": c.kind}
                if c.target is not None:
                    d["target"] = c.target
                cols.append(d)
            entry = {"name": t.name, "columns": cols}
            if t.file:
                entry["file"] = t.file
            tables.append(entry)
        return {"name": self.name, "version": 1, "tables": tables,
                "tasks": [dict(name=t.name, table=t.table, label=t.label, timestamp=t.timestamp)
                          for t in self.tasks]}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def manifest_schema() -> dict:
    text = resources.files("kspace").joinpath("schemas/manifest.schema.json").read_text()
    return json.loads(text)


def parse_manifest(doc: dict) -> SchemaManifest:
    try:
        jsonschema.validate(doc, manifest_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"manifest invalid at {where}: {exc.message}") from None
    tables = tuple(
        TableSpec(t["name"], tuple(ColumnSpec(c["name"], c["kind"], c.get("target"))
                                   for c in t["columns"]), t.get("file"))
        for t in doc["tables"])
    tasks = tuple(TaskSpec(**t) for t in doc.get("tasks", []))
    m = SchemaManifest(doc["name"], tables, tasks)
    _check_manifest(m)
    return m


def _check_manifest(m: SchemaManifest) -> None:
    names = m.table_names
    if len(set(names)) != len(names):
        raise SchemaError("duplicate table names")
    for t in m.tables:
        cols = [c.name for c in t.columns]
        if len(set(cols)) != len(cols):
            raise SchemaError(f"table {t.name!r}: duplicate column names")
        if len(t.columns_of("primary-key")) != 1:
            raise SchemaError(f"table {t.name!r}: exactly one primary key required")
        for c in t.columns_of("foreign-key"):
            if c.target not in names:
                raise SchemaError(f"{t.name}.{c.name}: foreign key targets unknown table {c.target!r}")
    for task in m.tasks:
        t = m.table(task.table)
        kinds = {c.name: c.kind for c in t.columns}
        if kinds.get(task.label) != "numeric":
            raise SchemaError(f"task {task.name!r}: label {task.label!r} is not a numeric column")
        if kinds.get(task.timestamp) != "timestamp":
            raise SchemaError(f"task {task.name!r}: {task.timestamp!r} is not a timestamp column")


def load_manifest(path) -> SchemaManifest:
    with open(path) as fh:
        return parse_manifest(json.load(fh))


# ---------------------------------------------------------------------------
# table data

@dataclass
class TableData:
    name: str
    columns: dict[str, np.ndarray]

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0


@dataclass
class RelationalBundle:
    manifest: SchemaManifest
    tables: dict[str, TableData]
    vocab: dict[tuple[str, str], tuple[str, ...]] = field(default_factory=dict)

    def __getitem__(self, table: str) -> TableData:
        return self.tables[table]


def _same_column(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape != b.shape:
        return False
    if a.dtype == object or b.dtype == object:
        return all(x == y for x, y in zip(a.tolist(), b.tolist()))
    return bool(np.array_equal(a, b, equal_nan=True))


def bundles_equal(a: RelationalBundle, b: RelationalBundle) -> bool:
    if a.manifest != b.manifest or set(a.tables) != set(b.tables):
        return False
    for name, ta in a.tables.items():
        tb = b.tables[name]
        if set(ta.columns) != set(tb.columns):
            return False
        if not all(_same_column(ta.columns[c], tb.columns[c]) for c in ta.columns):
            return False
    return True


def parse_timestamp(text: str) -> float:
    """Epoch seconds from an ISO-8601 string or a bare number."""
    try:
        return float(text)
    except ValueError:
        pass
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(value: float) -> str:
    if math.isnan(value):
        return ""
    if float(value).is_integer():
        return datetime.fromtimestamp(value, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return repr(float(value))


def _format_number(value: float) -> str:
    if math.isnan(value):
        return ""
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def _build_vocab(bundle: RelationalBundle) -> None:
    for spec in bundle.manifest.tables:
        for c in spec.columns_of("categorical"):
            vals = bundle.tables[spec.name].columns[c.name]
            bundle.vocab[(spec.name, c.name)] = tuple(sorted({v for v in vals.tolist() if v is not None}))


def make_bundle(manifest: SchemaManifest, columns: dict[str, dict[str, Sequence]]) -> RelationalBundle:
    """Typed bundle from in-memory columns (used by generators and tests)."""
    tables = {}
    for spec in manifest.tables:
        data = columns.get(spec.name, {})
        cols = {}
        for c in spec.columns:
            raw = data.get(c.name, [])
            if c.kind == "primary-key":
                cols[c.name] = np.asarray(raw, dtype=np.int64).reshape(-1)
            elif c.kind == "categorical":
                cols[c.name] = np.array([None if v is None else str(v) for v in raw], dtype=object)
            else:
                cols[c.name] = np.asarray(raw, dtype=np.float64).reshape(-1)
        lengths = {len(v) for v in cols.values()}
        if len(lengths) > 1:
            raise IngestError(f"table {spec.name!r}: columns of unequal length")
        tables[spec.name] = TableData(spec.name, cols)
    bundle = RelationalBundle(manifest, tables)
    _check_labels(bundle)
    _build_vocab(bundle)
    return bundle


def _check_labels(bundle: RelationalBundle) -> None:
    for task in bundle.manifest.tasks:
        y = bundle.tables[task.table].columns[task.label]
        y = y[~np.isnan(y)]
        if not np.all((y == 0) | (y == 1)):
            raise IngestError(f"task {task.name!r}: label column {task.label!r} is not binary")


def _read_table(spec: TableSpec, path: Path) -> TableData:
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise IngestError(f"missing table file {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None) or []
        missing = [c.name for c in spec.columns if c.name not in header]
        if missing:
            raise IngestError(f"{path.name}: missing column(s) {', '.join(missing)}")
        pos = {name: i for i, name in enumerate(header)}
        raw: dict[str, list] = {c.name: [] for c in spec.columns}
        for lineno, row in enumerate(reader, start=2):
            for c in spec.columns:
                cell = row[pos[c.name]] if pos[c.name] < len(row) else ""
                raw[c.name].append(_parse_cell(c, cell, path.name, lineno))
    cols = {}
    for c in spec.columns:
        vals = raw[c.name]
        if c.kind == "primary-key":
            cols[c.name] = np.asarray(vals, dtype=np.int64)
        elif c.kind == "categorical":
            cols[c.name] = np.array(vals, dtype=object)
        else:
            cols[c.name] = np.asarray(vals, dtype=np.float64)
    return TableData(spec.name, cols)


def _parse_cell(c: ColumnSpec, cell: str, fname: str, lineno: int):
    empty = cell.strip() == ""
    if c.kind == "categorical":
        return None if empty else cell
    if c.kind == "primary-key":
        if empty:
            raise IngestError(f"{fname}:{lineno}: empty primary key {c.name!r}")
        try:
            return int(cell)
        except ValueError:
            raise IngestError(f"{fname}:{lineno}: primary key {c.name!r} is not an integer: {cell!r}") from None
    if empty:
        return math.nan
    if c.kind == "timestamp":
        try:
            return parse_timestamp(cell)
        except ValueError:
            raise IngestError(f"{fname}:{lineno}: unparsable timestamp in {c.name!r}: {cell!r}") from None
    try:
        return float(cell)
    except ValueError:
        raise IngestError(f"{fname}:{lineno}: non-numeric value in {c.name!r}: {cell!r}") from None


def ingest(manifest: SchemaManifest | str | Path, root=None) -> RelationalBundle:
    """Read every table CSV named by the manifest into typed column stores."""
    if not isinstance(manifest, SchemaManifest):
        mpath = Path(manifest)
        root = mpath.parent if root is None else root
        manifest = load_manifest(mpath)
    root = Path(root if root is not None else ".")
    tables = {spec.name: _read_table(spec, root / spec.csv_name) for spec in manifest.tables}
    bundle = RelationalBundle(manifest, tables)
    _check_labels(bundle)
    _build_vocab(bundle)
    for spec in manifest.tables:
        pk = tables[spec.name].columns[spec.primary_key]
        if len(np.unique(pk)) != len(pk):
            raise IngestError(f"table {spec.name!r}: duplicate primary keys")
    return bundle


def emit(bundle: RelationalBundle, out_dir) -> Path:
    """Write ``manifest.json`` and one CSV per table; inverse of :func:`ingest`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for spec in bundle.manifest.tables:
        data = bundle.tables[spec.name]
        with open(out / spec.csv_name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([c.name for c in spec.columns])
            cols = []
            for c in spec.columns:
                v = data.columns[c.name]
                if c.kind == "categorical":
                    cols.append(["" if x is None else x for x in v.tolist()])
                elif c.kind == "primary-key":
                    cols.append([str(x) for x in v.tolist()])
                elif c.kind == "timestamp":
                    cols.append([format_timestamp(x) for x in v.tolist()])
                else:
                    cols.append([_format_number(x) for x in v.tolist()])
            w.writerows(zip(*cols))
    path = out / "manifest.json"
    path.write_text(json.dumps(bundle.manifest.to_dict(), indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# graph

@dataclass(frozen=True, order=True)
class EdgeType:
    """``src --fk--> dst`` where ``src`` holds the foreign key; ``reverse`` flips it."""

    src: str
    fk: str
    dst: str
    reverse: bool = False

    def reversed(self) -> "EdgeType":
        return EdgeType(self.dst, self.fk, self.src, not self.reverse)

    def __str__(self) -> str:
        arrow = "<-" if self.reverse else "->"
        return f"{self.src}{arrow}{self.fk}{arrow}{self.dst}"


STATIC = math.nan


@dataclass
class EdgeSet:
    src: np.ndarray
    dst: np.ndarray
    time: np.ndarray  # NaN = static


class HeteroGraph:
    """Typed nodes (one per row) and typed, timestamped directed edges.

    Global node ids are assigned table by table in manifest order.
    """

    def __init__(self, table_names: Sequence[str], table_sizes: Sequence[int],
                 edges: dict[EdgeType, EdgeSet]):
        self.table_names = list(table_names)
        self.table_sizes = list(table_sizes)
        self.offsets = np.concatenate([[0], np.cumsum(table_sizes)]).astype(np.int64)
        self.n_nodes = int(self.offsets[-1])
        self.node_table = np.repeat(np.arange(len(table_names)), table_sizes).astype(np.int64)
        self.edges = dict(sorted(edges.items()))
        self._index_in_edges()
        self._index_out_edges()

    # -- indexing ---------------------------------------------------------
    def _index_in_edges(self) -> None:
        self.in_types: dict[str, list[EdgeType]] = {t: [] for t in self.table_names}
        self._in: dict[EdgeType, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}
        for t, es in self.edges.items():
            self.in_types[t.dst].append(t)
            key = np.where(np.isnan(es.time), -np.inf, es.time)
            order = np.lexsort((key, es.dst))
            indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
            np.add.at(indptr, es.dst + 1, 1)
            indptr = np.cumsum(indptr)
            self._in[t] = (indptr, es.src[order], key[order], order)

    def _index_out_edges(self) -> None:
        # pooled over every type (original and reversed), for random walks
        src = np.concatenate([es.src for es in self.edges.values()]) if self.edges else np.zeros(0, np.int64)
        dst = np.concatenate([es.dst for es in self.edges.values()]) if self.edges else np.zeros(0, np.int64)
        tm = np.concatenate([es.time for es in self.edges.values()]) if self.edges else np.zeros(0)
        key = np.where(np.isnan(tm), -np.inf, tm)
        uniq = np.unique(key[np.isfinite(key)])
        rank = np.zeros(len(key), dtype=np.int64)
        fin = np.isfinite(key)
        rank[fin] = np.searchsorted(uniq, key[fin]) + 1
        order = np.lexsort((rank, src))
        indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        self.out_indptr = np.cumsum(indptr)
        self.out_dst = dst[order]
        self.out_time = tm[order]
        self.out_rank = rank[order]
        self.time_levels = uniq
        self._rank_stride = len(uniq) + 1
        self.out_key = src[order] * self._rank_stride + self.out_rank

    def time_rank(self, seed_times) -> np.ndarray:
        """Number of distinct finite edge times <= each seed time (static seeds see all)."""
        t = np.asarray(seed_times, dtype=np.float64)
        r = np.searchsorted(self.time_levels, np.where(np.isnan(t), np.inf, t), side="right")
        return r.astype(np.int64)

    def admissible_out_count(self, nodes, ranks) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        hi = np.searchsorted(self.out_key, nodes * self._rank_stride + ranks, side="right")
        return hi - self.out_indptr[nodes]

    # -- queries ----------------------------------------------------------
    def node_id(self, table: str, row: int) -> int:
        return int(self.offsets[self.table_names.index(table)] + row)

    def table_of(self, node: int) -> str:
        return self.table_names[self.node_table[node]]

    def row_of(self, node: int) -> int:
        return int(node - self.offsets[self.node_table[node]])

    def in_edges(self, t: EdgeType, node: int) -> tuple[np.ndarray, np.ndarray]:
        """(sources, time keys) of ``t``-edges into ``node``, oldest first; static = -inf."""
        indptr, src, key, _ = self._in[t]
        lo, hi = indptr[node], indptr[node + 1]
        return src[lo:hi], key[lo:hi]

    @property
    def n_edges(self) -> int:
        return sum(len(es.src) for es in self.edges.values())

    def edge_set(self) -> set[tuple[int, int, EdgeType]]:
        return {(int(u), int(v), t) for t, es in self.edges.items() for u, v in zip(es.src, es.dst)}

    def dump_edges(self, path) -> None:
        """Debug edge list: ``src_table,src_row,fk,dst_table,dst_row,timestamp``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src_table", "src_row", "fk", "dst_table", "dst_row", "timestamp"])
            for t, es in self.edges.items():
                fk = f"rev:{t.fk}" if t.reverse else t.fk
                for u, v, tm in zip(es.src.tolist(), es.dst.tolist(), es.time.tolist()):
                    w.writerow([t.src, self.row_of(u), fk, t.dst, self.row_of(v),
                                "static" if math.isnan(tm) else format_timestamp(tm)])


def build_graph(bundle: RelationalBundle) -> HeteroGraph:
    """One node per row, one edge per non-null foreign key plus its reversed twin."""
    m = bundle.manifest
    names = m.table_names
    sizes = [bundle.tables[n].n_rows for n in names]
    offsets = dict(zip(names, np.concatenate([[0], np.cumsum(sizes)])[:-1].tolist()))
    edges: dict[EdgeType, EdgeSet] = {}
    for spec in m.tables:
        data = bundle.tables[spec.name]
        tcol = spec.time_column
        times = data.columns[tcol] if tcol else np.full(data.n_rows, STATIC)
        for c in spec.columns_of("foreign-key"):
            target = m.table(c.target)
            pk = bundle.tables[target.name].columns[target.primary_key]
            order = np.argsort(pk, kind="stable")
            fk = data.columns[c.name]
            rows = np.flatnonzero(~np.isnan(fk))
            keys = fk[rows]
            pos = np.searchsorted(pk[order], keys)
            pos_c = np.minimum(pos, max(len(pk) - 1, 0))
            found = (pos < len(pk)) & (pk[order][pos_c] == keys) if len(pk) else np.zeros(len(rows), bool)
            if not found.all():
                bad = rows[~found]
                log.warning("%s.%s: dropping %d dangling foreign key(s), rows %s",
                            spec.name, c.name, len(bad), (bad + 2).tolist()[:10])
            rows, tgt = rows[found], order[pos_c[found]]
            src = rows + offsets[spec.name]
            dst = tgt + offsets[target.name]
            keep = src != dst
            t = EdgeType(spec.name, c.name, target.name)
            es = EdgeSet(src[keep].astype(np.int64), dst[keep].astype(np.int64), times[rows][keep])
            edges[t] = es
            edges[t.reversed()] = EdgeSet(es.dst.copy(), es.src.copy(), es.time.copy())
    return HeteroGraph(names, sizes, edges)


# ---------------------------------------------------------------------------
# sampling

@dataclass
class SampledSubgraph:
    """Disjoint per-seed neighborhoods merged into one local index space.

    ``layers[l][t] = (src_local, dst_local)`` holds the edges sampled at hop
    ``l + 1``; messages flow from ``src`` toward the seed.
    """

    seeds: np.ndarray
    seed_times: np.ndarray
    nodes: np.ndarray
    node_seed: np.ndarray
    seed_local: np.ndarray
    layers: list[dict[EdgeType, tuple[np.ndarray, np.ndarray]]]
    edge_times: list[dict[EdgeType, np.ndarray]]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def node_times(self) -> np.ndarray:
        return self.seed_times[self.node_seed]


def stream_seed(*parts) -> list[int]:
    """Entropy list for ``np.random.default_rng``; accepts ints, floats and strings."""
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:8], "little"))
        elif isinstance(p, float) or isinstance(p, np.floating):
            out.append(int(np.float64(p).view(np.uint64)))
        else:
            out.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    return out


def derive_seed(*parts) -> int:
    """Collapse a named sub-stream into a single 63-bit integer seed."""
    return int(np.random.SeedSequence(stream_seed(*parts)).generate_state(1, np.uint64)[0] >> np.uint64(1))


def sample_neighborhood(g: HeteroGraph, seeds, seed_times, fanout: Sequence[int],
                        rng_seed: int) -> SampledSubgraph:
    """Layered, time-respecting, per-edge-type uniform sampling without replacement.

    Each seed draws from its own stream derived from ``(rng_seed, node)`` so
    the result does not depend on how seeds are batched.
    """
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1)
    seed_times = np.asarray(seed_times, dtype=np.float64).reshape(-1)
    if len(seeds) != len(seed_times):
        raise ValueError("one seed time per seed required")
    if len(seeds) and (seeds.min() < 0 or seeds.max() >= g.n_nodes):
        bad = seeds[(seeds < 0) | (seeds >= g.n_nodes)][0]
        raise KeyError(f"unknown seed node {int(bad)}")
    n_layers = len(fanout)
    nodes: list[int] = []
    node_seed: list[int] = []
    seed_local = np.empty(len(seeds), dtype=np.int64)
    buf_src = [{} for _ in range(n_layers)]
    buf_dst = [{} for _ in range(n_layers)]
    buf_t = [{} for _ in range(n_layers)]
    node_table = g.node_table
    names = g.table_names
    for k, (seed, tseed) in enumerate(zip(seeds.tolist(), seed_times.tolist())):
        rng = np.random.default_rng(stream_seed(rng_seed, seed))
        limit = math.inf if math.isnan(tseed) else tseed
        local = {seed: len(nodes)}
        seed_local[k] = len(nodes)
        nodes.append(seed)
        node_seed.append(k)
        frontier = [seed]
        for layer, f in enumerate(fanout):
            new = []
            for v in frontier:
                lv = local[v]
                for t in g.in_types[names[node_table[v]]]:
                    src, key = g.in_edges(t, v)
                    cnt = int(np.searchsorted(key, limit, side="right"))
                    if cnt == 0 or f <= 0:
                        continue
                    pick = np.arange(cnt) if cnt <= f else np.sort(rng.choice(cnt, f, replace=False))
                    bs = buf_src[layer].setdefault(t, [])
                    bd = buf_dst[layer].setdefault(t, [])
                    bt = buf_t[layer].setdefault(t, [])
                    for u, tu in zip(src[pick].tolist(), key[pick].tolist()):
                        lu = local.get(u)
                        if lu is None:
                            lu = local[u] = len(nodes)
                            nodes.append(u)
                            node_seed.append(k)
                            new.append(u)
                        bs.append(lu)
                        bd.append(lv)
                        bt.append(tu)
            frontier = new
    layers, times = [], []
    for layer in range(n_layers):
        layers.append({t: (np.asarray(buf_src[layer][t], np.int64), np.asarray(buf_dst[layer][t], np.int64))
                       for t in sorted(buf_src[layer])})
        times.append({t: np.where(np.isneginf(buf_t[layer][t]), STATIC, buf_t[layer][t])
                      for t in sorted(buf_t[layer])})
    return SampledSubgraph(seeds, seed_times, np.asarray(nodes, np.int64),
                           np.asarray(node_seed, np.int64), seed_local, layers, times)


def graph_summary(g: HeteroGraph) -> dict:
    return {
        "nodes": {t: n for t, n in zip(g.table_names, g.table_sizes)},
        "edge_types": {str(t): int(len(es.src)) for t, es in g.edges.items()},
        "edges": g.n_edges,
    }
