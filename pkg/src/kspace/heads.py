"""Prediction heads on the representation ``h``: frozen in-context head and adversary."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


@dataclass
class EpisodeBatch:
    """Row indices into ``h`` for support and query, with their binary labels."""

    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray

    def validate(self) -> "EpisodeBatch":
        ys = np.asarray(self.support_labels)
        if len(self.support) < 2 or len(np.unique(ys)) < 2:
            raise ad.ContractError("support set needs at least two rows and both classes")
        if np.intersect1d(self.support, self.query).size:
            raise ad.ContractError("support and query rows overlap")
        return self


@dataclass(frozen=True)
class FrozenIclHead:
    """Softmax-kernel mixture of support labels; nothing here is trainable."""

    width: int
    smoothing: float = 0.01

    @property
    def temperature(self) -> float:
        return math.sqrt(self.width)


def icl_predict(head: FrozenIclHead, zs: Tensor, ys, zq: Tensor) -> Tensor:
    """Query probabilities ``clip(softmax(<zq, zs>/tau) @ ys, eps, 1-eps)``, shape ``(n_q, 1)``."""
    ys = np.asarray(ys, dtype=np.float64).reshape(-1, 1)
    if len(np.unique(ys)) < 2:
        raise ad.ContractError("single-class support set")
    if zs.cols != head.width or zq.cols != head.width:
        raise ad.DimensionError("representation width does not match the head")
    tape = zs.tape
    logits = ad.scale(ad.matmul(zq, ad.transpose(zs)), 1.0 / head.temperature)
    p = ad.matmul(ad.softmax_rows(logits), tape.constant(ys))
    eps = head.smoothing
    return ad.clip(p, eps, 1.0 - eps)


def main_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against labels ``y``."""
    tape = p.tape
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    pos = ad.mul(tape.constant(y), ad.log(p))
    neg = ad.mul(tape.constant(1.0 - y), ad.log(ad.sub(tape.constant(np.ones(p.shape)), p)))
    return ad.neg(ad.mean_all(ad.add(pos, neg)))


def icl_probabilities(head: FrozenIclHead, zs: np.ndarray, ys, zq: np.ndarray) -> np.ndarray:
    """Tape-free evaluation of :func:`icl_predict`."""
    tape = Tape(checked=False)
    return icl_predict(head, tape.constant(zs), ys, tape.constant(zq)).value[:, 0]


# ---------------------------------------------------------------------------
# adversary

def init_adversary(width: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    hid = width // 2
    return {
        "adv.W1": rng.normal(0.0, 1.0 / math.sqrt(width), size=(width, hid)),
        "adv.b1": np.zeros((1, hid)),
        "adv.W2": rng.normal(0.0, 1.0 / math.sqrt(hid), size=(hid, 1)),
        "adv.b2": np.zeros((1, 1)),
    }


def adversary_logits(P: dict[str, Tensor], h: Tensor) -> Tensor:
    z = ad.silu(ad.row_add(ad.matmul(h, P["adv.W1"]), P["adv.b1"]))
    return ad.row_add(ad.matmul(z, P["adv.W2"]), P["adv.b2"])


@dataclass
class AdversaryPass:
    loss: float
    row_grads: np.ndarray
    param_grads: dict[str, np.ndarray]
    logits: np.ndarray


def adv_forward_loss(params: dict[str, np.ndarray], h: np.ndarray, y) -> AdversaryPass:
    """Adversary on a detached copy of ``h``.

    ``row_grads[i]`` is the gradient of row ``i``'s own loss w.r.t. ``h[i]``;
    ``param_grads`` belong to the mean loss and only ever reach the adversary.
    """
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[0]
    tape = Tape()
    P = tape.params(params)
    hc = tape.leaf(h, name="h")
    logits = adversary_logits(P, hc)
    per_row = ad.bce_with_logits(logits, np.asarray(y, dtype=np.float64).reshape(-1, 1))
    grads = tape.backward_from(ad.sum_all(per_row))
    row_grads = grads.pop("h")
    param_grads = {k: g / n for k, g in grads.items()}
    return AdversaryPass(float(per_row.value.sum() / n), row_grads, param_grads, logits.value[:, 0])
