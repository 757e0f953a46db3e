"""Tape-based reverse-mode differentiation over dense 2-D float64 arrays.

A :class:`Tape` records every primitive applied to its tensors.  The sweep in
:meth:`Tape.backward_from` can be stopped at a *boundary* tensor: the gradient
arriving there is captured row by row, and the caller decides what flows on by
handing a (possibly transformed) gradient to :meth:`Tape.resume_backward`.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)), name="w")
    x = tape.constant(np.arange(6.0).reshape(2, 3))
    loss = sum_all(matmul(x, w))
    grads = tape.backward_from(loss)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import sparse


class DimensionError(ValueError):
    """Operand shapes are incompatible with the primitive."""


class NumericError(ArithmeticError):
    """A non-finite value reached a checked tape."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class TapeNode:
    id: int
    kind: str
    inputs: tuple[int, ...]
    backward: BackwardFn | None = None
    name: str | None = None


@dataclass
class BoundaryHandle:
    """The representation tensor where the reverse sweep pauses."""

    node_id: int
    shape: tuple[int, int]
    captured: np.ndarray | None = None


@dataclass
class Tensor:
    value: np.ndarray
    tape: "Tape"
    id: int
    requires_grad: bool = False
    name: str | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _as_2d(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


class Tape:
    """Records primitives in creation order; node ids only ever increase."""

    def __init__(self, checked: bool = True):
        self.checked = checked
        self.nodes: list[TapeNode] = []
        self.leaves: dict[str, Tensor] = {}
        self.boundary: BoundaryHandle | None = None
        self._pending: dict[int, np.ndarray] | None = None

    # -- construction -----------------------------------------------------
    def _check(self, arr: np.ndarray, what: str) -> None:
        if self.checked and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in {what}")

    def _record(self, kind, value, inputs: Sequence[Tensor], backward=None, name=None) -> Tensor:
        self._check(value, kind)
        requires = any(t.requires_grad for t in inputs)
        node = TapeNode(len(self.nodes), kind, tuple(t.id for t in inputs),
                        backward if requires else None, name)
        self.nodes.append(node)
        return Tensor(value, self, node.id, requires, name)

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Tensor:
        arr = _as_2d(value)
        self._check(arr, f"leaf {name!r}")
        if name is not None and name in self.leaves:
            raise ContractError(f"leaf {name!r} registered twice")
        node = TapeNode(len(self.nodes), "leaf", (), None, name)
        self.nodes.append(node)
        t = Tensor(arr, self, node.id, requires_grad, name)
        if name is not None and requires_grad:
            self.leaves[name] = t
        return t

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def params(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> dict[str, Tensor]:
        return {k: self.leaf(v, name=prefix + k) for k, v in arrays.items()}

    def mark_boundary(self, t: Tensor) -> BoundaryHandle:
        if self.boundary is not None:
            raise ContractError("a tape carries exactly one boundary")
        if t.tape is not self:
            raise ContractError("boundary tensor belongs to another tape")
        self.boundary = BoundaryHandle(t.id, t.shape)
        return self.boundary

    # -- reverse sweeps ---------------------------------------------------
    def _sweep(self, grads: dict[int, np.ndarray], start: int, stop: int) -> None:
        nodes = self.nodes
        for i in range(start, stop - 1, -1):
            node = nodes[i]
            if node.backward is None:
                continue
            g = grads.get(i)
            if g is None:
                continue
            for pid, pg in zip(node.inputs, node.backward(g)):
                if pg is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg

    def _leaf_grads(self, grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.leaves.items():
            g = grads.get(t.id)
            out[name] = np.zeros_like(t.value) if g is None else g
        return out

    def backward_from(self, loss: Tensor, seed: float = 1.0) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss.

        With a boundary marked, the sweep stops there: the boundary gradient
        is stored on the handle and leaves below it are left untouched until
        :meth:`resume_backward`.
        """
        if loss.tape is not self:
            raise ContractError("loss belongs to another tape")
        if loss.shape != (1, 1):
            raise ContractError(f"loss must be a 1x1 scalar, got {loss.shape}")
        grads = {loss.id: np.full((1, 1), float(seed))}
        b = self.boundary
        if b is None:
            self._sweep(grads, loss.id, 0)
            self._pending = None
            return self._leaf_grads(grads)
        if loss.id <= b.node_id:
            raise ContractError("loss was recorded before the boundary")
        self._sweep(grads, loss.id, b.node_id + 1)
        captured = grads.pop(b.node_id, None)
        b.captured = np.zeros(b.shape) if captured is None else captured
        self._pending = grads
        return self._leaf_grads(grads)

    def resume_backward(self, boundary: BoundaryHandle, injected_grad) -> dict[str, np.ndarray]:
        """Continue the sweep below the boundary with ``injected_grad`` as upstream."""
        if boundary is not self.boundary:
            raise ContractError("unknown boundary handle")
        if self._pending is None or boundary.captured is None:
            raise ContractError("resume_backward called before backward_from")
        inj = np.asarray(injected_grad, dtype=np.float64)
        if inj.shape != boundary.shape:
            raise DimensionError(f"injected gradient {inj.shape} != boundary {boundary.shape}")
        grads = self._pending
        self._pending = None
        grads[boundary.node_id] = inj
        self._sweep(grads, boundary.node_id, 0)
        return self._leaf_grads(grads)


# ---------------------------------------------------------------------------
# primitives

def _tape_of(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise ContractError("tensors from different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")


def segment_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets given by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if values.shape[0] == 0:
        return np.zeros((n, values.shape[1]))
    m = sparse.csr_matrix(
        (np.ones(index.shape[0]), (index, np.arange(index.shape[0]))),
        shape=(n, index.shape[0]),
    )
    return np.asarray(m @ values)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return tape._record("matmul", av @ bv, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return tape._record("add", a.value + b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return tape._record("sub", a.value - b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def row_add(a: Tensor, row: Tensor) -> Tensor:
    """Add a ``(1, n)`` row to every row of ``a``."""
    tape = _tape_of(a, row)
    if row.rows != 1 or row.cols != a.cols:
        raise DimensionError(f"row_add: {a.shape} + {row.shape}")
    return tape._record("row_add", a.value + row.value, (a, row),
                        lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value

    def backward(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return tape._record("mul", av * bv, (a, b), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    return x.tape._record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    xv = x.value
    s = _sigmoid(xv)
    return x.tape._record("silu", xv * s, (x,),
                          lambda g: (g * s * (1.0 + xv * (1.0 - s)),))


def log(x: Tensor) -> Tensor:
    xv = x.value
    if x.tape.checked and np.any(xv <= 0):
        raise NumericError("log of a non-positive value")
    return x.tape._record("log", np.log(xv), (x,), lambda g: (g / xv,))


def neg(x: Tensor) -> Tensor:
    return x.tape._record("neg", -x.value, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return x.tape._record("scale", x.value * c, (x,), lambda g: (g * c,))


def transpose(x: Tensor) -> Tensor:
    return x.tape._record("transpose", x.value.T.copy(), (x,), lambda g: (g.T,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return x.tape._record("sum", np.array([[x.value.sum()]]), (x,),
                          lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.value.size
    return x.tape._record("mean", np.array([[x.value.sum() / n]]), (x,),
                          lambda g: (np.full(shape, g[0, 0] / n),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xv = x.value
    inside = (xv > lo) & (xv < hi)
    return x.tape._record("clip", np.clip(xv, lo, hi), (x,), lambda g: (g * inside,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation followed by the ``(1, n)`` affine ``gain``, ``bias``."""
    tape = _tape_of(x, gain, bias)
    n = x.cols
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise DimensionError(f"layer_norm: affine {gain.shape}/{bias.shape} for width {n}")
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return (gx,
                (g * xhat).sum(axis=0, keepdims=True),
                g.sum(axis=0, keepdims=True))

    return tape._record("layer_norm", xhat * gv + bias.value, (x, gain, bias), backward)


def softmax_rows(x: Tensor) -> Tensor:
    xv = x.value
    e = np.exp(xv - xv.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    return x.tape._record("softmax_rows", y, (x,),
                          lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    tape = _tape_of(*parts)
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts {sorted(rows)}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return tape._record("concat_cols", np.concatenate([p.value for p in parts], axis=1),
                        tuple(parts), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    tape = _tape_of(*parts)
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts {sorted(cols)}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return tape._record("concat_rows", np.concatenate([p.value for p in parts], axis=0),
                        tuple(parts), backward)


def gather_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    n = x.rows
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError("gather_rows: index out of range")
    return x.tape._record("gather_rows", x.value[idx], (x,),
                          lambda g: (segment_sum(g, idx, n),))


def scatter_add_rows(x: Tensor, index, n_out: int) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape[0] != x.rows:
        raise DimensionError("scatter_add_rows: one index per row required")
    if idx.size and (idx.min() < 0 or idx.max() >= n_out):
        raise DimensionError("scatter_add_rows: index out of range")
    return x.tape._record("scatter_add_rows", segment_sum(x.value, idx, n_out), (x,),
                          lambda g: (g[idx],))


def scatter_mean_rows(x: Tensor, index, n_out: int) -> Tensor:
    """Mean of the rows sent to each bucket; empty buckets are zero."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape[0] != x.rows:
        raise DimensionError("scatter_mean_rows: one index per row required")
    if idx.size and (idx.min() < 0 or idx.max() >= n_out):
        raise DimensionError("scatter_mean_rows: index out of range")
    count = np.bincount(idx, minlength=n_out).astype(np.float64)[:, None]
    denom = np.maximum(count, 1.0)
    per_row = denom[idx]
    return x.tape._record("scatter_mean_rows", segment_sum(x.value, idx, n_out) / denom, (x,),
                          lambda g: (g[idx] / per_row,))


def segment_softmax(scores: Tensor, index, n_seg: int) -> Tensor:
    """Softmax of each column taken over the rows that share a segment id."""
    idx = np.asarray(index, dtype=np.int64)
    sv = scores.value
    if idx.shape[0] != sv.shape[0]:
        raise DimensionError("segment_softmax: one segment id per row required")
    if sv.shape[0] == 0:
        return scores.tape._record("segment_softmax", sv.copy(), (scores,), lambda g: (g,))
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    seg_max = np.zeros((n_seg, sv.shape[1]))
    seg_max[sorted_idx[starts]] = np.maximum.reduceat(sv[order], starts, axis=0)
    e = np.exp(sv - seg_max[idx])
    y = e / segment_sum(e, idx, n_seg)[idx]

    def backward(g):
        return (y * (g - segment_sum(g * y, idx, n_seg)[idx]),)

    return scores.tape._record("segment_softmax", y, (scores,), backward)


def rope_angles(m, d: int, base: float = 10000.0) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64).reshape(-1, 1)
    theta = base ** (-2.0 * np.arange(d // 2) / d)
    return m * theta[None, :]


def rope_rotate(x: Tensor, m, base: float = 10000.0) -> Tensor:
    """Rotate column pairs ``(2i, 2i+1)`` of row ``r`` by ``m[r] * base**(-2i/d)``."""
    d = x.cols
    if d % 2:
        raise DimensionError(f"rope_rotate needs an even width, got {d}")
    ang = rope_angles(m, d, base)
    if ang.shape[0] != x.rows:
        raise DimensionError("rope_rotate: one position per row required")
    c, s = np.cos(ang), np.sin(ang)
    xv = x.value
    out = np.empty_like(xv)
    out[:, 0::2] = xv[:, 0::2] * c - xv[:, 1::2] * s
    out[:, 1::2] = xv[:, 0::2] * s + xv[:, 1::2] * c

    def backward(g):
        gx = np.empty_like(g)
        gx[:, 0::2] = g[:, 0::2] * c + g[:, 1::2] * s
        gx[:, 1::2] = -g[:, 0::2] * s + g[:, 1::2] * c
        return (gx,)

    return x.tape._record("rope_rotate", out, (x,), backward)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Per-row sigmoid cross-entropy; ``labels`` is a constant ``(n, 1)`` array."""
    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    x = logits.value
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return logits.tape._record("bce_with_logits", loss, (logits,), lambda g: (g * (s - y),))


PRIMITIVES = (
    "matmul", "add", "sub", "row_add", "mul", "silu", "layer_norm", "softmax_rows",
    "sigmoid", "log", "neg", "scale", "concat_cols", "concat_rows", "gather_rows", "scatter_mean_rows",
    "scatter_add_rows", "rope_rotate", "transpose", "sum", "mean", "clip",
    "segment_softmax", "bce_with_logits",
)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"KSPC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, blocks: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named 2-D blocks as little-endian float64 behind a JSON index."""
    path = Path(path)
    index, offset, payload = [], 0, []
    for name in sorted(blocks):
        arr = _as_2d(blocks[name])
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "rows": arr.shape[0], "cols": arr.shape[1], "offset": offset})
        offset += len(raw)
        payload.append(raw)
    header = json.dumps({"format": "kspace-checkpoint", "version": CHECKPOINT_VERSION,
                         "blocks": index, "meta": meta or {}}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a kspace checkpoint")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    blocks = {}
    for b in header["blocks"]:
        n = b["rows"] * b["cols"]
        start = base + b["offset"]
        blocks[b["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=start) \
            .reshape(b["rows"], b["cols"]).astype(np.float64)
    return blocks, header.get("meta", {})
