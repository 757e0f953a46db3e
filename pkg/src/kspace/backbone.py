"""Relational core: input projection, table-type RoPE, hetero SMPNN blocks, output projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .relgraph import EdgeType, SampledSubgraph

LN_EPS = 1e-5


@dataclass
class BackboneConfig:
    layers: int = 3
    hidden: int = 256
    heads: int = 2
    conv: str = "gatv2"
    rope_base: float = 10000.0
    scale_init: float = 0.0

    def validate(self) -> "BackboneConfig":
        if self.layers < 1:
            raise ValueError("backbone needs at least one layer")
        if self.hidden % 2:
            raise ValueError("hidden width must be even for RoPE")
        if self.conv not in ("gcn", "gatv2"):
            raise ValueError(f"unknown conv kind {self.conv!r}")
        if self.conv == "gatv2" and (self.heads < 1 or self.hidden % self.heads):
            raise ValueError("attention heads must divide the hidden width")
        return self


def _dense(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def init_sub_block(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d = cfg.hidden
    p = {
        "ln1.g": np.ones((1, d)), "ln1.b": np.zeros((1, d)),
        "lin.W": _dense(rng, d, d), "lin.b": np.zeros((1, d)),
        "scale1": np.full((1, 1), cfg.scale_init),
        "ln2.g": np.ones((1, d)), "ln2.b": np.zeros((1, d)),
        "ff.W": _dense(rng, d, d), "ff.b": np.zeros((1, d)),
        "scale2": np.full((1, 1), cfg.scale_init),
    }
    if cfg.conv == "gatv2":
        p["conv.Wr"] = _dense(rng, d, d)
        p["conv.att"] = rng.normal(0.0, 1.0 / np.sqrt(d // cfg.heads), size=(1, d))
    return p


def init_params(cfg: BackboneConfig, in_width: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Flat ``name -> 2-D array`` parameter map; every scale starts at ``cfg.scale_init``."""
    cfg.validate()
    d = cfg.hidden
    params = {"in.W": _dense(rng, in_width, d), "in.b": np.zeros((1, d))}
    for layer in range(cfg.layers):
        for path in ("rev", "fwd"):
            for k, v in init_sub_block(cfg, rng).items():
                params[f"block{layer}.{path}.{k}"] = v
    params["out.W"] = _dense(rng, d, d)
    params["out.b"] = np.zeros((1, d))
    return params


def sub_params(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def input_project(params: dict[str, Tensor], features: Tensor) -> Tensor:
    W = params["in.W"]
    if features.cols != W.rows:
        raise ad.DimensionError(f"feature width {features.cols} != expected {W.rows}")
    return ad.row_add(ad.matmul(features, W), params["in.b"])


def rope_table(x: Tensor, table_index, base: float = 10000.0) -> Tensor:
    return ad.rope_rotate(x, table_index, base)


def _head_mask(d: int, heads: int) -> np.ndarray:
    mask = np.zeros((d, heads))
    per = d // heads
    for h in range(heads):
        mask[h * per:(h + 1) * per, h] = 1.0
    return mask


def _conv(p: dict[str, Tensor], u: Tensor, src, dst, n_out: int, cfg: BackboneConfig) -> Tensor:
    """Aggregate rows of ``u`` along edges ``src -> dst`` into ``n_out`` rows."""
    xs = ad.gather_rows(u, src)
    if cfg.conv == "gcn":
        return ad.scatter_mean_rows(xs, dst, n_out)
    tape = u.tape
    xr = ad.matmul(u, p["conv.Wr"])
    # dst indexes u's rows here as well: callers place targets first in u
    z = ad.silu(ad.add(xs, ad.gather_rows(xr, dst)))
    mask = tape.constant(_head_mask(cfg.hidden, cfg.heads))
    scores = ad.matmul(ad.mul(z, p["conv.att"]), mask)
    alpha = ad.segment_softmax(scores, dst, n_out)
    msg = ad.mul(xs, ad.matmul(alpha, ad.transpose(mask)))
    return ad.scatter_add_rows(msg, dst, n_out)


def sub_block(p: dict[str, Tensor], x: Tensor, src, dst, cfg: BackboneConfig, rows=None) -> Tensor:
    """Modified SMPNN block evaluated at ``rows`` (all rows when ``None``).

    branch = scale1 * SiLU(conv(linear(LN1(x)), E)); y = x + branch;
    out = scale2 * SiLU(linear(LN2(y))).
    """
    n = x.rows
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
        raise ad.DimensionError("edge references a row outside x")
    if rows is None:
        rows = np.arange(n)
        xt = x
        u_rows = rows
        src_pos, dst_pos = src, dst
    else:
        rows = np.asarray(rows, dtype=np.int64)
        xt = ad.gather_rows(x, rows)
        # targets first so dst positions index u directly
        extra = np.setdiff1d(np.unique(src), rows)
        u_rows = np.concatenate([rows, extra])
        lookup = np.full(n, -1, dtype=np.int64)
        lookup[u_rows] = np.arange(len(u_rows))
        src_pos, dst_pos = lookup[src], lookup[dst]
        if np.any(dst_pos < 0) or np.any(dst_pos >= len(rows)):
            raise ad.DimensionError("edge destination outside the requested rows")
    xu = xt if len(u_rows) == len(rows) else ad.gather_rows(x, u_rows)
    u = ad.row_add(ad.matmul(ad.layer_norm(xu, p["ln1.g"], p["ln1.b"], LN_EPS), p["lin.W"]), p["lin.b"])
    c = _conv(p, u, src_pos, dst_pos, len(rows), cfg)
    y = ad.add(xt, ad.mul(ad.silu(c), p["scale1"]))
    ff = ad.row_add(ad.matmul(ad.layer_norm(y, p["ln2.g"], p["ln2.b"], LN_EPS), p["ff.W"]), p["ff.b"])
    return ad.mul(ad.silu(ff), p["scale2"])


def smpnn_sub_block(p: dict[str, Tensor], x: Tensor, edges, cfg: BackboneConfig) -> Tensor:
    src, dst = edges
    return sub_block(p, x, src, dst, cfg)


def hetero_block(layer_params: dict[str, dict[str, Tensor]], x: Tensor,
                 edges: dict[EdgeType, tuple[np.ndarray, np.ndarray]], cfg: BackboneConfig) -> Tensor:
    """One hetero layer: per-type messages, count-normalized, residual-added.

    Only destination rows of each type are evaluated; rows outside the
    destination set are masked out of the aggregate anyway.
    """
    n = x.rows
    count = np.zeros(n)
    outs, idx = [], []
    for t in sorted(edges):
        src, dst = edges[t]
        if len(dst) == 0:
            continue
        D = np.unique(dst)
        count[D] += 1.0
        block = layer_params["rev"] if t.reverse else layer_params["fwd"]
        outs.append(sub_block(block, x, src, dst, cfg, rows=D))
        idx.append(D)
    if not outs:
        return x
    msg = outs[0] if len(outs) == 1 else ad.concat_rows(outs)
    A = ad.scatter_add_rows(msg, np.concatenate(idx), n)
    inv = x.tape.constant((1.0 / np.maximum(count, 1.0))[:, None])
    return ad.add(x, ad.mul(A, inv))


def bind(tape: Tape, params: dict[str, np.ndarray], prefix: str = "") -> dict[str, Tensor]:
    return tape.params(params, prefix)


def layer_view(P: dict[str, Tensor], layer: int) -> dict[str, dict[str, Tensor]]:
    return {path: sub_params(P, f"block{layer}.{path}.") for path in ("rev", "fwd")}


def backbone_forward(cfg: BackboneConfig, P: dict[str, Tensor], sub: SampledSubgraph,
                     features: np.ndarray, table_index, boundary: bool = True) -> Tensor:
    """Representation ``h`` of the seed rows of ``sub``.

    Backbone layer ``l`` consumes sampled shell ``L - l`` (outermost first).
    ``P`` holds tape-bound parameters; ``h`` is marked as the tape boundary
    unless ``boundary`` is False.
    """
    if len(sub.layers) != cfg.layers:
        raise ad.DimensionError(f"subgraph has {len(sub.layers)} shells, backbone has {cfg.layers} layers")
    tape = P["in.W"].tape
    x = input_project(P, tape.constant(features))
    x = rope_table(x, table_index, cfg.rope_base)
    for layer in range(cfg.layers):
        x = hetero_block(layer_view(P, layer), x, sub.layers[cfg.layers - 1 - layer], cfg)
    h = ad.row_add(ad.matmul(ad.gather_rows(x, sub.seed_local), P["out.W"]), P["out.b"])
    if boundary:
        tape.mark_boundary(h)
    return h
