"""Node input features: frozen row embeddings, time features and temporal RWPE."""
from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .relgraph import HeteroGraph, RelationalBundle, SampledSubgraph, stream_seed


@dataclass
class FeatureConfig:
    d_enc: int = 128
    buckets: int = 64
    time_pairs: int = 4
    rwpe_steps: int = 32
    walks: int = 100
    temporal: bool = True
    fanout: tuple[int, ...] = (16, 8, 4)

    @property
    def width(self) -> int:
        return self.d_enc + 1 + 2 * self.time_pairs + self.rwpe_steps


# ---------------------------------------------------------------------------
# frozen row encoder

def _bucket(column: str, value: str, buckets: int) -> int:
    return zlib.crc32(f"{column}\x1f{value}".encode()) % buckets


@dataclass
class _TableEncoder:
    numeric: list[str]
    categorical: list[str]
    mean: np.ndarray
    std: np.ndarray
    projection: np.ndarray


class FrozenRowEncoder:
    """Standardize numerics, hash categoricals to one-hot buckets, project.

    A deterministic stand-in for a pretrained tabular encoder: projection
    matrices are seeded from the manifest digest, statistics come from the
    rows passed to :meth:`fit`, and nothing changes afterwards.
    """

    def __init__(self, d_enc: int = 128, buckets: int = 64):
        self.d_enc = d_enc
        self.buckets = buckets
        self.tables: dict[str, _TableEncoder] = {}
        self.manifest_digest: str | None = None

    @property
    def fitted(self) -> bool:
        return self.manifest_digest is not None

    def fit(self, bundle: RelationalBundle, cutoff: float | None = None) -> "FrozenRowEncoder":
        if self.fitted:
            raise RuntimeError("encoder is frozen; build a new one to refit")
        m = bundle.manifest
        digest = m.digest()
        for spec in m.tables:
            data = bundle.tables[spec.name]
            labels = m.label_columns(spec.name)
            numeric = [c.name for c in spec.columns_of("numeric") if c.name not in labels]
            categorical = [c.name for c in spec.columns_of("categorical")]
            rows = np.ones(data.n_rows, dtype=bool)
            tcol = spec.time_column
            if cutoff is not None and tcol is not None:
                t = data.columns[tcol]
                rows = np.isnan(t) | (t <= cutoff)
            mean = np.zeros(len(numeric))
            std = np.ones(len(numeric))
            for j, c in enumerate(numeric):
                v = data.columns[c][rows]
                v = v[~np.isnan(v)]
                if len(v):
                    mean[j] = v.mean()
                    s = v.std()
                    std[j] = s if s > 0 else 1.0
            width = len(numeric) + self.buckets * len(categorical)
            seed = int.from_bytes(hashlib.sha256(f"{digest}:{spec.name}".encode()).digest()[:8], "little")
            proj = np.random.default_rng(seed).normal(0.0, 1.0 / math.sqrt(max(width, 1)),
                                                      size=(width, self.d_enc))
            for a in (mean, std, proj):
                a.setflags(write=False)
            self.tables[spec.name] = _TableEncoder(numeric, categorical, mean, std, proj)
        self.manifest_digest = digest
        return self

    def digest(self) -> str:
        h = hashlib.sha256((self.manifest_digest or "").encode())
        for name in sorted(self.tables):
            te = self.tables[name]
            for a in (te.mean, te.std, te.projection):
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def _inputs(self, table: str, columns: dict[str, np.ndarray], n: int) -> np.ndarray:
        te = self.tables[table]
        x = np.zeros((n, len(te.numeric) + self.buckets * len(te.categorical)))
        for j, c in enumerate(te.numeric):
            z = (columns[c] - te.mean[j]) / te.std[j]
            x[:, j] = np.where(np.isnan(z), 0.0, z)
        base = len(te.numeric)
        for j, c in enumerate(te.categorical):
            for r, v in enumerate(columns[c].tolist()):
                if v is not None:
                    x[r, base + j * self.buckets + _bucket(c, v, self.buckets)] = 1.0
        return x

    def encode_table(self, bundle: RelationalBundle, table: str) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("encoder not fitted")
        if table not in self.tables:
            raise KeyError(f"unknown table {table!r}")
        data = bundle.tables[table]
        return self._inputs(table, data.columns, data.n_rows) @ self.tables[table].projection

    def encode_row(self, table: str, row: dict) -> np.ndarray:
        """Embed one row given as ``{column: value}``; absent columns count as missing."""
        if not self.fitted:
            raise RuntimeError("encoder not fitted")
        if table not in self.tables:
            raise KeyError(f"unknown table {table!r}")
        te = self.tables[table]
        cols = {c: np.array([row.get(c, math.nan)], dtype=np.float64) for c in te.numeric}
        cols.update({c: np.array([row.get(c)], dtype=object) for c in te.categorical})
        return (self._inputs(table, cols, 1) @ te.projection)[0]


# ---------------------------------------------------------------------------
# time features

def time_features(t, t_min: float, t_max: float, pairs: int = 4) -> np.ndarray:
    """``[index, sin_0, cos_0, ..., sin_{K-1}, cos_{K-1}]`` per timestamp; NaN = static."""
    if not t_min < t_max:
        raise ValueError("time_features needs t_min < t_max")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    span = t_max - t_min
    static = np.isnan(t)
    rel = np.where(static, 0.0, t - t_min)
    out = np.empty((len(t), 1 + 2 * pairs))
    out[:, 0] = np.clip(rel / span, 0.0, 1.0)
    for j in range(pairs):
        w = 2.0 * math.pi * 2.0 ** j / span
        out[:, 1 + 2 * j] = np.sin(w * rel)
        out[:, 2 + 2 * j] = np.cos(w * rel)
    out[static, 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# temporal random-walk positional encoding

def walk_returns(g: HeteroGraph, starts, seed_times, k: int, walks: int,
                 rng: np.random.Generator, trace: list | None = None) -> np.ndarray:
    """Return counts ``(len(starts), k)`` from ``walks`` walks per start node.

    A walk steps along a uniformly chosen out-edge (original or reversed type)
    whose timestamp is not after its seed time; with no such edge it halts.
    When ``trace`` is a list, ``(edge_times, seed_times)`` of every traversed
    edge are appended per step.
    """
    starts = np.asarray(starts, dtype=np.int64)
    n = len(starts)
    counts = np.zeros((n, k), dtype=np.int64)
    if n == 0 or k == 0:
        return counts
    owner = np.repeat(np.arange(n), walks)
    origin = starts[owner]
    times = np.broadcast_to(np.asarray(seed_times, dtype=np.float64), (n,))[owner]
    ranks = g.time_rank(times)
    levels, level_of = np.unique(ranks, return_inverse=True)
    table = None
    if len(levels) * g.n_nodes <= 64 * len(ranks):
        # few distinct seed times: one admissible-count lookup table per time
        every = np.arange(g.n_nodes)
        table = np.stack([g.admissible_out_count(every, np.full(g.n_nodes, r)) for r in levels])
    pos = origin.copy()
    alive = np.arange(len(pos))
    for s in range(k):
        p = pos[alive]
        if table is not None:
            cnt = table[level_of[alive], p]
        else:
            cnt = g.admissible_out_count(p, ranks[alive])
        moving = cnt > 0
        alive, p, cnt = alive[moving], p[moving], cnt[moving]
        if len(alive) == 0:
            break
        pick = np.minimum((rng.random(len(cnt)) * cnt).astype(np.int64), cnt - 1)
        e = g.out_indptr[p] + pick
        if trace is not None:
            trace.append((g.out_time[e], times[alive]))
        pos[alive] = g.out_dst[e]
        back = alive[pos[alive] == origin[alive]]
        counts[:, s] = np.bincount(owner[back], minlength=n)
    return counts


def rwpe(g: HeteroGraph, node: int, seed_time: float, k: int = 32, walks: int = 100,
         rng_seed: int = 0) -> np.ndarray:
    """Monte-Carlo return probabilities for steps ``1..k`` from ``node``."""
    if not 0 <= node < g.n_nodes:
        raise KeyError(f"unknown node {node}")
    rng = np.random.default_rng(stream_seed(rng_seed, node, float(seed_time)))
    return walk_returns(g, [node], seed_time, k, walks, rng)[0] / walks


def rwpe_all(g: HeteroGraph, seed_time: float, k: int = 32, walks: int = 100,
             rng_seed: int = 0) -> np.ndarray:
    """RWPE of every node at one seed time, from a single stream keyed on the time."""
    rng = np.random.default_rng(stream_seed(rng_seed, "rwpe", float(seed_time)))
    return walk_returns(g, np.arange(g.n_nodes), seed_time, k, walks, rng) / walks


def exact_return_probabilities(g: HeteroGraph, node: int, seed_time: float, k: int) -> np.ndarray:
    """Dense transition-matrix powers over admissible edges (halting rows are zero)."""
    n = g.n_nodes
    P = np.zeros((n, n))
    rank = g.time_rank([seed_time])[0]
    for u in range(n):
        lo = g.out_indptr[u]
        cnt = int(g.admissible_out_count([u], [rank])[0])
        for e in range(lo, lo + cnt):
            P[u, g.out_dst[e]] += 1.0 / cnt
    out = np.zeros(k)
    row = np.zeros(n)
    row[node] = 1.0
    for s in range(k):
        row = row @ P
        out[s] = row[node]
    return out


# ---------------------------------------------------------------------------
# feature store

CACHE_MAGIC = b"KSFC"
CACHE_VERSION = 1


def _time_key(t: float) -> float:
    return math.inf if math.isnan(t) else float(t)


class FeatureStore:
    """Per-node ``[row embedding | time features | RWPE]`` for a fixed graph.

    Row embeddings and time features are computed once; RWPE rows are
    computed for the whole graph the first time a seed time is requested and
    cached under that time.
    """

    def __init__(self, bundle: RelationalBundle, graph: HeteroGraph, cfg: FeatureConfig,
                 encoder: FrozenRowEncoder, t_range: tuple[float, float], rng_seed: int = 0):
        self.bundle = bundle
        self.graph = graph
        self.cfg = cfg
        self.encoder = encoder
        self.t_range = t_range
        self.rng_seed = rng_seed
        emb, tf, tables = [], [], []
        for i, spec in enumerate(bundle.manifest.tables):
            data = bundle.tables[spec.name]
            emb.append(encoder.encode_table(bundle, spec.name))
            tcol = spec.time_column
            times = data.columns[tcol] if tcol else np.full(data.n_rows, math.nan)
            tf.append(time_features(times, *t_range, pairs=cfg.time_pairs))
            tables.append(np.full(data.n_rows, i))
        self.embedding = np.concatenate(emb) if emb else np.zeros((0, cfg.d_enc))
        tfeat = np.concatenate(tf)
        if not cfg.temporal:
            tfeat = np.zeros_like(tfeat)
        self.time = tfeat
        self.table_index = np.concatenate(tables).astype(np.int64)
        self._rwpe: dict[float, np.ndarray] = {}

    @classmethod
    def build(cls, bundle: RelationalBundle, graph: HeteroGraph, cfg: FeatureConfig,
              cutoff: float | None = None, rng_seed: int = 0) -> "FeatureStore":
        enc = FrozenRowEncoder(cfg.d_enc, cfg.buckets).fit(bundle, cutoff)
        return cls(bundle, graph, cfg, enc, training_time_range(bundle, cutoff), rng_seed)

    @property
    def width(self) -> int:
        return self.cfg.width

    def rwpe_at(self, seed_time: float) -> np.ndarray:
        key = _time_key(seed_time)
        got = self._rwpe.get(key)
        if got is None:
            if self.cfg.rwpe_steps == 0:
                got = np.zeros((self.graph.n_nodes, 0))
            else:
                got = rwpe_all(self.graph, seed_time, self.cfg.rwpe_steps, self.cfg.walks, self.rng_seed)
            self._rwpe[key] = got
        return got

    def features(self, sub: SampledSubgraph) -> np.ndarray:
        nodes = sub.nodes
        out = np.empty((len(nodes), self.width))
        de, dt = self.cfg.d_enc, 1 + 2 * self.cfg.time_pairs
        out[:, :de] = self.embedding[nodes]
        out[:, de:de + dt] = self.time[nodes]
        times = sub.node_times
        keys = np.where(np.isnan(times), np.inf, times)
        for key in np.unique(keys):
            sel = keys == key
            out[sel, de + dt:] = self.rwpe_at(math.nan if math.isinf(key) else float(key))[nodes[sel]]
        return out

    def table_positions(self, sub: SampledSubgraph) -> np.ndarray:
        return self.table_index[sub.nodes]

    # -- cache file -------------------------------------------------------
    def _header(self) -> dict:
        c = self.cfg
        return {"format": "kspace-features", "version": CACHE_VERSION,
                "widths": {"enc": c.d_enc, "time": 1 + 2 * c.time_pairs, "rwpe": c.rwpe_steps},
                "manifest_digest": self.bundle.manifest.digest(),
                "encoder_digest": self.encoder.digest(),
                "walks": c.walks, "rng_seed": self.rng_seed, "temporal": c.temporal}

    def save_cache(self, path) -> Path:
        """Write one record ``(node id, seed time, features)`` per cached (node, time)."""
        header = json.dumps(self._header(), sort_keys=True).encode()
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(CACHE_MAGIC)
            fh.write(struct.pack("<IQ", CACHE_VERSION, len(header)))
            fh.write(header)
            ids = np.arange(self.graph.n_nodes, dtype="<i8")
            for key in sorted(self._rwpe):
                feats = np.concatenate([self.embedding, self.time, self._rwpe[key]], axis=1)
                rec = np.empty(len(ids), dtype=[("node", "<i8"), ("time", "<f8"),
                                                 ("x", "<f8", (self.width,))])
                rec["node"], rec["time"], rec["x"] = ids, key, feats
                fh.write(rec.tobytes())
        return path

    def load_cache(self, path) -> bool:
        """Load RWPE rows from a cache file; returns False (and loads nothing) if stale."""
        data = Path(path).read_bytes()
        if data[:4] != CACHE_MAGIC:
            return False
        version, hlen = struct.unpack("<IQ", data[4:16])
        header = json.loads(data[16:16 + hlen])
        if version != CACHE_VERSION or header != self._header():
            return False
        dtype = np.dtype([("node", "<i8"), ("time", "<f8"), ("x", "<f8", (self.width,))])
        rec = np.frombuffer(data, dtype=dtype, offset=16 + hlen)
        lo = self.width - self.cfg.rwpe_steps
        for key in np.unique(rec["time"]):
            sel = rec[rec["time"] == key]
            block = np.zeros((self.graph.n_nodes, self.cfg.rwpe_steps))
            block[sel["node"]] = sel["x"][:, lo:]
            self._rwpe[float(key)] = block
        return True


def training_time_range(bundle: RelationalBundle, cutoff: float | None = None) -> tuple[float, float]:
    ts = []
    for spec in bundle.manifest.tables:
        tcol = spec.time_column
        if tcol is None:
            continue
        t = bundle.tables[spec.name].columns[tcol]
        t = t[~np.isnan(t)]
        if cutoff is not None:
            t = t[t <= cutoff]
        ts.append(t)
    allt = np.concatenate(ts) if ts else np.zeros(0)
    if len(allt) == 0:
        return 0.0, 1.0
    lo, hi = float(allt.min()), float(allt.max())
    return (lo, hi) if hi > lo else (lo, lo + 1.0)
