"""Synthetic users/items/interactions databases with a label-leaking shortcut column.

Two tasks live on the users table. Both depend on ``g``, the standardized
mean quality of items a user interacted with before their snapshot time, so
reading it requires message passing. Task A additionally depends on the
``shortcut`` column of the user row itself.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .evaluation import auroc, temporal_split
from .relgraph import RelationalBundle, derive_seed, emit, make_bundle, parse_manifest

log = logging.getLogger(__name__)

DAY = 86400.0
EPOCH = 1_704_067_200.0  # 2024-01-01T00:00:00Z
SIDECAR = "ground_truth.json"
REGIONS = ("north", "south", "east", "west")
CATEGORIES = tuple(f"c{i}" for i in range(8))


@dataclass(frozen=True)
class LeakageSpec:
    users: int = 4000
    items: int = 500
    interactions: int = 40000
    rho: float = 0.8
    sigma_s: float = 1.0
    balance: float = 0.5
    seed: int = 0
    kappa: float = 4.0
    snapshots: int = 7
    horizon_days: int = 365

    def validate(self) -> "LeakageSpec":
        if min(self.users, self.items, self.interactions) < 10:
            raise ValueError("entity counts must be >= 10")
        if not (0.0 <= self.rho <= 1.0 and 0.0 <= self.sigma_s <= 1.0):
            raise ValueError("strengths must lie in [0, 1]")
        if not 0.0 < self.balance < 1.0:
            raise ValueError("label balance must lie in (0, 1)")
        if self.snapshots < 1 or self.kappa <= 0:
            raise ValueError("need at least one snapshot and a positive signal scale")
        if self.rho == 0 and self.sigma_s == 0:
            log.warning("both strengths are 0: labels are pure noise")
        return self


@dataclass
class GroundTruth:
    spec: LeakageSpec
    coefficients: dict[str, dict[str, float]]
    thresholds: dict[str, float]
    g: np.ndarray
    s: np.ndarray
    logits: dict[str, np.ndarray]

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "coefficients": self.coefficients,
            "thresholds": self.thresholds,
            "latents": {"g": self.g.tolist(), "s": self.s.tolist()},
            "logits": {k: v.tolist() for k, v in self.logits.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(LeakageSpec(**d["spec"]), d["coefficients"], d["thresholds"],
                   np.asarray(d["latents"]["g"]), np.asarray(d["latents"]["s"]),
                   {k: np.asarray(v) for k, v in d["logits"].items()})

    def latents(self) -> np.ndarray:
        return np.column_stack([self.g, self.s])


def leakage_manifest(name: str = "leakage") -> dict:
    return {
        "name": name,
        "version": 1,
        "tables": [
            {"name": "users", "columns": [
                {"name": "user_id", "kind": "primary-key"},
                {"name": "snapshot_time", "kind": "timestamp"},
                {"name": "shortcut", "kind": "numeric"},
                {"name": "age", "kind": "numeric"},
                {"name": "region", "kind": "categorical"},
                {"name": "label_a", "kind": "numeric"},
                {"name": "label_b", "kind": "numeric"},
            ]},
            {"name": "items", "columns": [
                {"name": "item_id", "kind": "primary-key"},
                {"name": "quality", "kind": "numeric"},
                {"name": "category", "kind": "categorical"},
            ]},
            {"name": "interactions", "columns": [
                {"name": "interaction_id", "kind": "primary-key"},
                {"name": "user_id", "kind": "foreign-key", "target": "users"},
                {"name": "item_id", "kind": "foreign-key", "target": "items"},
                {"name": "time", "kind": "timestamp"},
                {"name": "dwell", "kind": "numeric"},
            ]},
        ],
        "tasks": [
            {"name": "task_a", "table": "users", "label": "label_a", "timestamp": "snapshot_time"},
            {"name": "task_b", "table": "users", "label": "label_b", "timestamp": "snapshot_time"},
        ],
    }


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else np.zeros_like(x)


def _threshold(logit: np.ndarray, balance: float) -> tuple[np.ndarray, float]:
    cut = float(np.quantile(logit, 1.0 - balance))
    return (logit > cut).astype(np.float64), cut


def generate(spec: LeakageSpec) -> tuple[RelationalBundle, GroundTruth]:
    spec.validate()
    U, I, E = spec.users, spec.items, spec.interactions

    def rng(name):
        return np.random.default_rng(derive_seed(spec.seed, "synthetic", name))

    r = rng("items")
    quality = r.normal(size=I)
    category = np.array(CATEGORIES, dtype=object)[r.integers(len(CATEGORIES), size=I)]

    r = rng("users")
    s = r.normal(size=U)
    age = np.round(r.uniform(18, 70, size=U))
    region = np.array(REGIONS, dtype=object)[r.integers(len(REGIONS), size=U)]
    lo = int(spec.horizon_days * 0.55)
    levels = np.linspace(lo, spec.horizon_days - 15, spec.snapshots).round() if spec.snapshots > 1 \
        else np.array([float(lo)])
    snap_day = levels[r.integers(len(levels), size=U)]

    r = rng("interactions")
    ui = r.integers(U, size=E)
    it = r.integers(I, size=E)
    day = r.uniform(0, spec.horizon_days, size=E)
    t = EPOCH + np.floor(day * DAY)
    dwell = np.round(r.gamma(2.0, 30.0, size=E), 1)

    # shared relational signal: mean quality of items seen up to the snapshot
    snap = EPOCH + snap_day * DAY
    seen = t <= snap[ui]
    tot = np.bincount(ui[seen], weights=quality[it[seen]], minlength=U)
    cnt = np.bincount(ui[seen], minlength=U)
    g = _zscore(np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0))

    r = rng("labels")
    k = spec.kappa
    coef = {"task_a": {"g": k * spec.rho, "s": k * spec.sigma_s}, "task_b": {"g": k * spec.rho, "s": 0.0}}
    logits, labels, cuts = {}, {}, {}
    for task in ("task_a", "task_b"):
        c = coef[task]
        logits[task] = c["g"] * g + c["s"] * s
        labels[task], cuts[task] = _threshold(logits[task] + r.logistic(size=U), spec.balance)

    columns = {
        "users": {"user_id": np.arange(U), "snapshot_time": snap, "shortcut": np.round(s, 6),
                  "age": age, "region": region, "label_a": labels["task_a"], "label_b": labels["task_b"]},
        "items": {"item_id": np.arange(I), "quality": np.round(quality, 6), "category": category},
        "interactions": {"interaction_id": np.arange(E), "user_id": ui, "item_id": it,
                         "time": t, "dwell": dwell},
    }
    bundle = make_bundle(parse_manifest(leakage_manifest()), columns)
    truth = GroundTruth(spec, coef, cuts, g, s, logits)
    return bundle, truth


def write(bundle: RelationalBundle, truth: GroundTruth, out_dir) -> Path:
    """Emit the bundle and its ground-truth sidecar; returns the manifest path."""
    manifest = emit(bundle, out_dir)
    with open(manifest.parent / SIDECAR, "w") as fh:
        json.dump(truth.to_dict(), fh)
    return manifest


def load_truth(path) -> GroundTruth:
    p = Path(path)
    if p.is_dir():
        p = p / SIDECAR
    with open(p) as fh:
        return GroundTruth.from_dict(json.load(fh))


def _test_rows(bundle: RelationalBundle, task: str, fractions) -> np.ndarray:
    spec = bundle.manifest.task(task)
    times = bundle.tables[spec.table].columns[spec.timestamp]
    return temporal_split(times, fractions)[2]


def oracle_auroc(bundle: RelationalBundle, truth: GroundTruth, task: str, rows=None,
                 fractions=(0.7, 0.15, 0.15)) -> float:
    """AUROC of the noiseless generative logit on ``rows`` (default: the test split)."""
    if rows is None:
        rows = _test_rows(bundle, task, fractions)
    y = bundle.tables["users"].columns[bundle.manifest.task(task).label]
    return auroc(truth.logits[task][rows], y[rows])


def latent_probe_auroc(bundle: RelationalBundle, truth: GroundTruth, task: str,
                       fractions=(0.7, 0.15, 0.15)) -> float:
    """Logistic regression on the stored latents, fitted on train and scored on test."""
    from sklearn.linear_model import LogisticRegression

    spec = bundle.manifest.task(task)
    times = bundle.tables["users"].columns[spec.timestamp]
    train, _, test = temporal_split(times, fractions)
    y = bundle.tables["users"].columns[spec.label].astype(int)
    X = truth.latents()
    clf = LogisticRegression().fit(X[train], y[train])
    return auroc(clf.decision_function(X[test]), y[test])


def in_table_probe_auroc(bundle: RelationalBundle, task: str, fractions=(0.7, 0.15, 0.15)) -> float:
    """Logistic regression on the users row alone (no relational aggregates)."""
    from sklearn.linear_model import LogisticRegression

    users = bundle.tables["users"].columns
    spec = bundle.manifest.task(task)
    train, _, test = temporal_split(users[spec.timestamp], fractions)
    region = np.stack([users["region"] == r for r in REGIONS], axis=1).astype(float)
    X = np.column_stack([users["shortcut"], _zscore(users["age"]), region])
    y = users[spec.label].astype(int)
    clf = LogisticRegression().fit(X[train], y[train])
    return auroc(clf.decision_function(X[test]), y[test])
