"""Training with sample-wise gradient projection at the representation boundary."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .backbone import BackboneConfig, backbone_forward, init_params
from .dataset import RelationalDataset, TaskRows
from .evaluation import TaskRef, auroc
from .heads import (AdversaryPass, FrozenIclHead, adv_forward_loss, icl_predict,
                    icl_probabilities, init_adversary, main_loss)
from .relgraph import derive_seed, sample_neighborhood, stream_seed

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# projection

@dataclass
class ProjectionReport:
    g_main: np.ndarray
    g_adv: np.ndarray
    dot: np.ndarray
    alpha: np.ndarray
    refined: np.ndarray
    fired: np.ndarray

    @property
    def fire_rate(self) -> float:
        return float(self.fired.mean()) if len(self.fired) else 0.0

    @property
    def mean_alpha(self) -> float:
        return float(self.alpha[self.fired].mean()) if self.fired.any() else 0.0


def project_gradients(g_main, g_adv) -> tuple[np.ndarray, ProjectionReport]:
    """Per row: if <g_main, g_adv> > 0 remove the component of g_main along g_adv.

    Rows whose gate stays closed (including g_adv = 0) are returned unchanged.
    """
    gm = np.asarray(g_main, dtype=np.float64)
    ga = np.asarray(g_adv, dtype=np.float64)
    if gm.shape != ga.shape or gm.ndim != 2:
        raise ad.DimensionError(f"gradient shapes differ: {gm.shape} vs {ga.shape}")
    dot = np.einsum("ij,ij->i", gm, ga)
    fired = dot > 0
    alpha = np.zeros(len(gm))
    out = gm.copy()
    if fired.any():
        # work with g_adv rescaled by its largest entry so tiny rows do not underflow ||g_adv||^2
        m = np.abs(ga[fired]).max(axis=1)
        u = ga[fired] / m[:, None]
        coef = np.einsum("ij,ij->i", gm[fired], u) / np.einsum("ij,ij->i", u, u)
        alpha[fired] = coef / m
        out[fired] = gm[fired] - coef[:, None] * u
    return out, ProjectionReport(gm, ga, dot, alpha, out, fired)


# ---------------------------------------------------------------------------
# optimizer

class AdamW:
    """Adaptive moments with decoupled weight decay; state keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        if lr <= 0:
            raise ValueError("step size must be positive")
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = params[name]
            p -= self.lr * self.wd * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# config and state

@dataclass
class TrainConfig:
    adversarial: bool = False
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 10
    n_support: int = 64
    n_query: int = 64
    seed: int = 0
    detach_support: bool = False
    episodes_per_epoch: int | None = None
    eval_support: int = 256
    eval_chunk: int = 256

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError("step size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.n_support < 2 or self.n_query < 1:
            raise ValueError("episodes need n_support >= 2 and n_query >= 1")
        return self

    def optimizer(self) -> AdamW:
        return AdamW(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass
class ModelState:
    backbone: BackboneConfig
    params: dict[str, np.ndarray]
    adversary: dict[str, np.ndarray] | None
    opt: AdamW
    adv_opt: AdamW | None
    steps: int = 0

    @property
    def head(self) -> FrozenIclHead:
        return FrozenIclHead(self.backbone.hidden)

    def blocks(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        if self.adversary:
            out.update(self.adversary)
        return out


def init_state(bcfg: BackboneConfig, tcfg: TrainConfig, in_width: int) -> ModelState:
    rng = np.random.default_rng(stream_seed(tcfg.seed, "init"))
    params = init_params(bcfg, in_width, rng)
    adv = adv_opt = None
    if tcfg.adversarial:
        adv = init_adversary(bcfg.hidden, np.random.default_rng(stream_seed(tcfg.seed, "init-adversary")))
        adv_opt = tcfg.optimizer()
    return ModelState(bcfg, params, adv, tcfg.optimizer(), adv_opt)


# ---------------------------------------------------------------------------
# episodes

@dataclass
class Episode:
    dataset: RelationalDataset
    task: TaskRows
    support: np.ndarray  # row indices into the task
    query: np.ndarray

    @property
    def seeds(self) -> np.ndarray:
        return self.task.nodes[np.concatenate([self.support, self.query])]

    @property
    def seed_times(self) -> np.ndarray:
        return self.task.times[np.concatenate([self.support, self.query])]


def _fix_support(rows: np.ndarray, labels: np.ndarray, ns: int) -> np.ndarray | None:
    ys = labels[rows[:ns]]
    if len(np.unique(ys)) == 2:
        return rows
    missing = 1 - ys[0]
    cand = np.flatnonzero(labels[rows[ns:]] == missing)
    if not len(cand):
        return None
    rows = rows.copy()
    j = ns + cand[0]
    rows[ns - 1], rows[j] = rows[j], rows[ns - 1]
    return rows


def task_episodes(ds: RelationalDataset, task: TaskRows, n_support: int, n_query: int,
                  rng: np.random.Generator, split: str = "train") -> list[Episode]:
    """Shuffle a split and cut it into disjoint support/query episodes."""
    pool = rng.permutation(task.split(split))
    size = n_support + n_query
    if len(pool) < 3:
        return []
    if len(pool) < size:
        n_support = max(2, len(pool) // 2)
        size = len(pool)
    out = []
    for start in range(0, len(pool) - size + 1, size):
        rows = _fix_support(pool[start:start + size], task.labels, n_support)
        if rows is None:
            log.warning("%s: skipping single-class episode", task.ref.id)
            continue
        out.append(Episode(ds, task, rows[:n_support], rows[n_support:]))
    return out


def epoch_episodes(sources: Sequence[tuple[RelationalDataset, TaskRows]], cfg: TrainConfig,
                   epoch: int) -> list[Episode]:
    """Round-robin interleaving of per-task episode lists."""
    per_task = []
    for ds, task in sources:
        rng = np.random.default_rng(stream_seed(cfg.seed, "episodes", task.ref.id, epoch))
        per_task.append(task_episodes(ds, task, cfg.n_support, cfg.n_query, rng))
    out = []
    for i in range(max((len(e) for e in per_task), default=0)):
        out.extend(e[i] for e in per_task if i < len(e))
    if cfg.episodes_per_epoch is not None:
        out = out[:cfg.episodes_per_epoch]
    return out


# ---------------------------------------------------------------------------
# one step

class NonFiniteStep(ArithmeticError):
    pass


def _norm_mean(g: np.ndarray) -> float:
    return float(np.linalg.norm(g, axis=1).mean()) if len(g) else 0.0


def forward_episode(state: ModelState, ep: Episode, rng_seed: int, tape: Tape, boundary=True):
    ds = ep.dataset
    sub = sample_neighborhood(ds.graph, ep.seeds, ep.seed_times, ds.fanout, rng_seed)
    feats = ds.store.features(sub)
    P = tape.params(state.params)
    h = backbone_forward(state.backbone, P, sub, feats, ds.store.table_positions(sub), boundary=boundary)
    ns = len(ep.support)
    zs = ad.gather_rows(h, np.arange(ns))
    zq = ad.gather_rows(h, np.arange(ns, h.rows))
    p = icl_predict(state.head, zs, ep.task.labels[ep.support], zq)
    loss = main_loss(p, ep.task.labels[ep.query])
    return h, loss


def train_step(state: ModelState, ep: Episode, cfg: TrainConfig, rng_seed: int) -> dict:
    """Forward, capture boundary gradients, project, resume, update."""
    tape = Tape()
    try:
        h, loss = forward_episode(state, ep, rng_seed, tape)
        tape.backward_from(loss)
    except ad.NumericError as exc:
        log.error("step %d aborted: %s", state.steps, exc)
        return {"step": state.steps, "aborted": True, "error": str(exc)}
    boundary = tape.boundary
    captured = boundary.captured
    ns = len(ep.support)
    nq = len(ep.query)
    inject = captured
    record = {"step": state.steps, "task": ep.task.ref.id, "loss_main": float(loss.value[0, 0])}
    adv = None
    if cfg.adversarial or cfg.detach_support:
        inject = captured.copy()
    if cfg.detach_support:
        inject[:ns] = 0.0
    if cfg.adversarial:
        labels = ep.task.labels[np.concatenate([ep.support, ep.query])]
        adv: AdversaryPass = adv_forward_loss(state.adversary, h.value, labels)
        # captured query rows are the per-query gradients divided by n_q;
        # the projection is invariant to that positive factor
        refined, rep = project_gradients(captured[ns:], adv.row_grads[ns:])
        inject[ns:] = refined
        record.update({
            "loss_adv": adv.loss,
            "gate_rate": rep.fire_rate,
            "mean_alpha": rep.mean_alpha * nq,
            "norm_g_main": _norm_mean(captured[ns:]) * nq,
            "norm_g_adv": _norm_mean(adv.row_grads[ns:]),
            "norm_g_refined": _norm_mean(refined) * nq,
        })
    grads = tape.resume_backward(boundary, inject)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.error("step %d aborted: non-finite gradient", state.steps)
        return {**record, "aborted": True, "error": "non-finite gradient"}
    record["grad_norm"] = float(math.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    state.opt.step(state.params, grads)
    if adv is not None:
        state.adv_opt.step(state.adversary, adv.param_grads)
    state.steps += 1
    return record


# ---------------------------------------------------------------------------
# inference

def represent(state: ModelState, ds: RelationalDataset, nodes, times, rng_seed: int,
              chunk: int = 256) -> np.ndarray:
    """Representations ``h`` for seed rows; per-seed sampling makes chunking irrelevant."""
    nodes = np.asarray(nodes)
    times = np.asarray(times)
    out = np.empty((len(nodes), state.backbone.hidden))
    for lo in range(0, len(nodes), chunk):
        sl = slice(lo, lo + chunk)
        sub = sample_neighborhood(ds.graph, nodes[sl], times[sl], ds.fanout, rng_seed)
        tape = Tape(checked=False)
        P = tape.params(state.params)
        h = backbone_forward(state.backbone, P, sub, ds.store.features(sub),
                             ds.store.table_positions(sub), boundary=False)
        out[sl] = h.value
    return out


def support_rows(task: TaskRows, n: int, seed: int) -> np.ndarray:
    """Evaluation support drawn from the task's training split, both classes present."""
    rng = np.random.default_rng(stream_seed(seed, "eval-support", task.ref.id))
    pool = rng.permutation(task.train)
    rows = pool[:n]
    if len(np.unique(task.labels[rows])) < 2:
        fixed = _fix_support(pool, task.labels, min(n, len(pool) - 1))
        if fixed is None:
            raise ad.ContractError(f"{task.ref.id}: training split has a single class")
        rows = fixed[:n]
    return rows


def predict(state: ModelState, ds: RelationalDataset, task: TaskRows, query_rows, cfg: TrainConfig,
            seed: int) -> np.ndarray:
    sup = support_rows(task, cfg.eval_support, seed)
    rs = derive_seed(seed, "eval-sampling")
    zs = represent(state, ds, task.nodes[sup], task.times[sup], rs, cfg.eval_chunk)
    zq = represent(state, ds, task.nodes[query_rows], task.times[query_rows], rs, cfg.eval_chunk)
    return icl_probabilities(state.head, zs, task.labels[sup], zq)


def evaluate(state: ModelState, ds: RelationalDataset, task: TaskRows, split: str,
             cfg: TrainConfig, seed: int) -> float:
    rows = task.split(split)
    return auroc(predict(state, ds, task, rows, cfg, seed), task.labels[rows])


# ---------------------------------------------------------------------------
# fit

@dataclass
class FitResult:
    state: ModelState
    best: dict[str, np.ndarray]
    best_adversary: dict[str, np.ndarray] | None
    best_epoch: int
    log: list[dict] = field(default_factory=list)


def fit(bcfg: BackboneConfig, tcfg: TrainConfig, sources: Sequence[tuple[RelationalDataset, TaskRows]],
        log_path=None) -> FitResult:
    """Train on the given (dataset, task) pairs, keeping the best-by-validation weights."""
    tcfg.validate()
    if not sources:
        raise ValueError("at least one training task is required")
    widths = {ds.store.width for ds, _ in sources}
    if len(widths) != 1:
        raise ValueError("training datasets disagree on feature width")
    state = init_state(bcfg, tcfg, widths.pop())
    best = copy.deepcopy(state.params)
    best_adv = copy.deepcopy(state.adversary)
    best_val, best_epoch = -math.inf, 0
    records: list[dict] = []
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, tcfg.epochs + 1):
            episodes = epoch_episodes(sources, tcfg, epoch)
            for i, ep in enumerate(episodes):
                rs = derive_seed(tcfg.seed, "sampling", epoch, i)
                rec = {"epoch": epoch, **train_step(state, ep, tcfg, rs)}
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
            vals = [evaluate(state, ds, t, "val", tcfg, tcfg.seed) for ds, t in sources if len(t.val)]
            vals = [v for v in vals if not math.isnan(v)]
            val = float(np.mean(vals)) if vals else math.nan
            rec = {"epoch": epoch, "val_auroc": val}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if not math.isnan(val) and val > best_val:
                best_val, best_epoch = val, epoch
                best = copy.deepcopy(state.params)
                best_adv = copy.deepcopy(state.adversary)
    finally:
        if fh:
            fh.close()
    return FitResult(state, best, best_adv, best_epoch, records)


def state_from_blocks(bcfg: BackboneConfig, blocks: dict[str, np.ndarray]) -> ModelState:
    params = {k: v for k, v in blocks.items() if not k.startswith("adv.")}
    adv = {k: v for k, v in blocks.items() if k.startswith("adv.")} or None
    return ModelState(bcfg, params, adv, AdamW(), AdamW() if adv else None)
