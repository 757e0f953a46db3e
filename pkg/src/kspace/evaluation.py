"""Supervision regimes, temporal splits and AUROC."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

REGIMES = ("ST", "WD", "CD", "ALL")
VARIANTS = ("base", "adv")


@dataclass(frozen=True, order=True)
class TaskRef:
    database: str
    name: str

    @property
    def id(self) -> str:
        return f"{self.database}/{self.name}"

    @classmethod
    def parse(cls, text: str) -> "TaskRef":
        db, _, name = text.partition("/")
        if not name:
            raise ValueError(f"task id must look like 'database/task', got {text!r}")
        return cls(db, name)


@dataclass(frozen=True)
class RegimeSpec:
    regime: str
    target: TaskRef
    train: tuple[TaskRef, ...]
    computable: bool = True
    reason: str = ""


def build_regimes(tasks, regimes=REGIMES) -> list[RegimeSpec]:
    """Every (regime, target) pair; impossible ones carry ``computable=False``."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("empty task list")
    out = []
    for target in tasks:
        same_db = [t for t in tasks if t.database == target.database]
        for regime in regimes:
            if regime == "ST":
                train = (target,)
            elif regime == "WD":
                train = tuple(t for t in same_db if t != target)
            elif regime == "CD":
                train = tuple(t for t in tasks if t.database != target.database)
            elif regime == "ALL":
                train = tuple(tasks)
            else:
                raise ValueError(f"unknown regime {regime!r}")
            if train:
                out.append(RegimeSpec(regime, target, train))
            else:
                why = "single-task database" if regime == "WD" else "no other database"
                out.append(RegimeSpec(regime, target, (), False, f"not computable: {why}"))
    return out


def temporal_split(times, fractions=(0.7, 0.15, 0.15)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index sets ordered by timestamp quantiles; ties keep their input order."""
    times = np.asarray(times, dtype=np.float64)
    n = len(times)
    if len(fractions) != 3 or not math.isclose(sum(fractions), 1.0) or min(fractions) < 0:
        raise ValueError(f"bad split fractions {fractions}")
    if n < 3:
        raise ValueError(f"too few rows to split ({n})")
    finite = times[~np.isnan(times)]
    if len(finite) == n and n and np.all(finite == finite[0]):
        log.warning("all timestamps equal; falling back to input-order split")
    order = np.argsort(np.where(np.isnan(times), -np.inf, times), kind="stable")
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_trval = int(math.floor((fractions[0] + fractions[1]) * n + 1e-9))
    train, val, test = order[:n_train], order[n_train:n_trval], order[n_trval:]
    if fractions[0] > 0 and len(train) == 0 or fractions[2] > 0 and len(test) == 0:
        raise ValueError(f"too few rows to split ({n})")
    return train, val, test


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2).

    Returns NaN when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalResult:
    task: str
    regime: str
    variant: str
    auroc: float
    n_query: int
    seed: int

    def __post_init__(self):
        if not (math.isnan(self.auroc) or 0.0 <= self.auroc <= 1.0):
            raise ValueError(f"AUROC out of range: {self.auroc}")
