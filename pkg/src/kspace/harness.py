"""Regime x variant x seed matrix: train once per training set, evaluate every target, report."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .backbone import BackboneConfig
from .dataset import RelationalDataset, prepare_dataset
from .evaluation import VARIANTS, EvalResult, RegimeSpec, TaskRef, build_regimes
from .features import FeatureConfig
from .relgraph import derive_seed
from .synthetic import SIDECAR, LeakageSpec, generate, oracle_auroc
from .trainer import TrainConfig, evaluate, fit, state_from_blocks

log = logging.getLogger(__name__)

CSV_FIELDS = ("task", "regime", "variant", "seed", "auroc", "n_query")
MISSING = "missing"


def threads() -> int:
    raw = os.environ.get("KSPACE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring KSPACE_THREADS=%r", raw)
        return 1


def check_no_sidecar(ds: RelationalDataset) -> None:
    """Ground truth must never be loaded as a table."""
    for spec in ds.bundle.manifest.tables:
        if spec.csv_name == SIDECAR:
            raise ValueError(f"table {spec.name!r} points at the ground-truth sidecar")


# ---------------------------------------------------------------------------
# training groups

@dataclass(frozen=True)
class TrainKey:
    train: tuple[TaskRef, ...]
    variant: str
    seed: int

    @property
    def slug(self) -> str:
        names = "+".join(t.id.replace("/", ".") for t in self.train)
        if len(names) > 80:
            names = hashlib.sha1(names.encode()).hexdigest()[:12]
        return f"{self.variant}__seed{self.seed}__{names}"


def train_config_for(tcfg: TrainConfig, variant: str, seed: int) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return replace(tcfg, adversarial=(variant == "adv"), seed=seed)


def train_groups(regimes: Sequence[RegimeSpec], variants, seeds) -> list[TrainKey]:
    keys = []
    for spec in regimes:
        if not spec.computable:
            continue
        for v in variants:
            for s in seeds:
                k = TrainKey(tuple(sorted(spec.train)), v, s)
                if k not in keys:
                    keys.append(k)
    return keys


def checkpoint_path(ckpt_dir, key: TrainKey) -> Path:
    return Path(ckpt_dir) / f"{key.slug}.kspc"


def train_one(key: TrainKey, datasets: dict[str, RelationalDataset], bcfg: BackboneConfig,
              tcfg: TrainConfig, ckpt_dir=None, log_dir=None):
    cfg = train_config_for(tcfg, key.variant, key.seed)
    sources = [(datasets[t.database], datasets[t.database].task(t.name)) for t in key.train]
    log_path = None
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(log_dir) / f"{key.slug}.jsonl"
    res = fit(bcfg, cfg, sources, log_path=log_path)
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
        blocks = dict(res.best)
        if res.best_adversary:
            blocks.update(res.best_adversary)
        save_checkpoint(checkpoint_path(ckpt_dir, key), blocks, {
            "backbone": asdict(bcfg), "train": asdict(cfg), "best_epoch": res.best_epoch,
            "tasks": [t.id for t in key.train], "variant": key.variant, "seed": key.seed})
    return res


def train_matrix(datasets, regimes, variants, seeds, bcfg, tcfg, ckpt_dir=None, log_dir=None) -> dict:
    """Fit every distinct (training set, variant, seed); returns ``key -> best blocks``."""
    for ds in datasets.values():
        check_no_sidecar(ds)
    keys = train_groups(regimes, variants, seeds)

    def work(k):
        log.info("training %s", k.slug)
        res = train_one(k, datasets, bcfg, tcfg, ckpt_dir, log_dir)
        return k, {**res.best, **(res.best_adversary or {})}

    n = threads()
    if n == 1:
        return dict(work(k) for k in keys)
    with ThreadPoolExecutor(max_workers=n) as pool:
        return dict(pool.map(work, keys))


def eval_matrix(datasets, regimes, variants, seeds, bcfg, tcfg, models: dict) -> tuple[list[EvalResult], list[dict]]:
    """Test AUROC per cell; cells without a model are reported as missing."""
    results, missing = [], []
    for spec in regimes:
        for v in variants:
            for s in seeds:
                cell = {"task": spec.target.id, "regime": spec.regime, "variant": v, "seed": s}
                if not spec.computable:
                    missing.append({**cell, "reason": spec.reason})
                    continue
                key = TrainKey(tuple(sorted(spec.train)), v, s)
                blocks = models.get(key)
                if blocks is None:
                    missing.append({**cell, "reason": "missing checkpoint"})
                    continue
                ds = datasets[spec.target.database]
                task = ds.task(spec.target.name)
                state = state_from_blocks(bcfg, blocks)
                a = evaluate(state, ds, task, "test", train_config_for(tcfg, v, s), s)
                results.append(EvalResult(spec.target.id, spec.regime, v, a, len(task.test), s))
    return results, missing


def run_matrix(datasets: dict[str, RelationalDataset], regimes: Sequence[RegimeSpec], variants,
               seeds, bcfg: BackboneConfig, tcfg: TrainConfig, out_dir=None, emit_plot=False):
    regimes = list(regimes)
    models = train_matrix(datasets, regimes, variants, seeds, bcfg, tcfg,
                          ckpt_dir=None if out_dir is None else Path(out_dir) / "checkpoints",
                          log_dir=None if out_dir is None else Path(out_dir) / "logs")
    results, missing = eval_matrix(datasets, regimes, variants, seeds, bcfg, tcfg, models)
    if out_dir is not None:
        write_report(results, missing, out_dir, variants, emit_plot)
    return results, missing


# ---------------------------------------------------------------------------
# reports

def summarize(results: Sequence[EvalResult], variants=VARIANTS, cells=()) -> list[dict]:
    """Wide table: one row per (task, regime), seed-averaged AUROC per variant, delta, average row."""
    order: list[tuple[str, str]] = []
    for task, regime in list(cells) + [(r.task, r.regime) for r in results]:
        if (task, regime) not in order:
            order.append((task, regime))
    rows = []
    for task, regime in order:
        row = {"task": task, "regime": regime}
        for v in variants:
            vals = [r.auroc for r in results if (r.task, r.regime, r.variant) == (task, regime, v)
                    and not math.isnan(r.auroc)]
            row[v] = float(np.mean(vals)) if vals else math.nan
        if "base" in variants and "adv" in variants:
            row["delta"] = row["adv"] - row["base"]
        rows.append(row)
    if rows:
        avg = {"task": "average", "regime": ""}
        for col in [*variants, "delta"] if "delta" in rows[0] else list(variants):
            vals = [r[col] for r in rows if not math.isnan(r[col])]
            avg[col] = float(np.mean(vals)) if vals else math.nan
        rows.append(avg)
    return rows


def _fmt(x) -> str:
    if isinstance(x, float):
        return MISSING if math.isnan(x) else f"{x:.4f}"
    return str(x)


def write_report(results, missing, out_dir, variants=VARIANTS, emit_plot=False) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv", "summary": out / "summary.csv", "markdown": out / "report.md"}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in results:
            w.writerow([r.task, r.regime, r.variant, r.seed, repr(r.auroc), r.n_query])
        for m in missing:
            w.writerow([m["task"], m["regime"], m["variant"], m["seed"], MISSING, ""])
    # partial tables keep rows for missing cells; with no results at all the table is header-only
    cells = [(m["task"], m["regime"]) for m in missing] if results else []
    summary = summarize(results, variants, cells)
    cols = ["task", "regime", *variants] + (["delta"] if "base" in variants and "adv" in variants else [])
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in summary:
            w.writerow([_fmt(row[c]) for c in cols])
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(_fmt(row[c]) for c in cols) + " |" for row in summary]
    if missing:
        lines += ["", "Missing cells:", ""]
        lines += [f"- {m['task']} {m['regime']} {m['variant']} seed {m['seed']}: {m['reason']}" for m in missing]
    paths["markdown"].write_text("\n".join(lines) + "\n")
    if emit_plot:
        from .plots import regime_bar_chart
        paths["plot"] = regime_bar_chart(summary, out / "auroc_by_regime.svg", variants)
    return paths


def read_results(path) -> list[EvalResult]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["auroc"] == MISSING:
                continue
            out.append(EvalResult(row["task"], row["regime"], row["variant"], float(row["auroc"]),
                                  int(row["n_query"]), int(row["seed"])))
    return out


# ---------------------------------------------------------------------------
# synthetic leakage experiment

@dataclass
class LeakageOutcome:
    seeds: list[int]
    per_seed: list[dict] = field(default_factory=list)

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.per_seed]))

    def checks(self) -> dict[str, tuple[bool, str]]:
        st_b, st_a = self.mean("st_base"), self.mean("st_adv")
        wd_b, wd_a = self.mean("wd_base"), self.mean("wd_adv")
        orc = self.mean("oracle_b")
        return {
            "st": (st_b >= 0.75 and st_a >= 0.75, f"ST(A) base={st_b:.4f} adv={st_a:.4f} (>= 0.75)"),
            "wd_collapse": (wd_b <= orc - 0.15, f"WD(B) base={wd_b:.4f} oracle(B)={orc:.4f} (base <= oracle - 0.15)"),
            "wd_recovery": (wd_a >= wd_b + 0.10, f"WD(B) adv={wd_a:.4f} base={wd_b:.4f} (adv >= base + 0.10)"),
        }


def leakage_experiment(spec: LeakageSpec, seeds: Sequence[int], bcfg: BackboneConfig, tcfg: TrainConfig,
                       fcfg: FeatureConfig, out_dir=None, emit_plot=False) -> LeakageOutcome:
    """Train on task A, evaluate on A (ST) and on B (WD), per seed, for both variants.

    Every seed draws a fresh database as well as fresh training randomness.
    """
    outcome = LeakageOutcome(list(seeds))
    all_results, all_missing = [], []
    for seed in seeds:
        bundle, truth = generate(replace(spec, seed=derive_seed(spec.seed, "data", seed)))
        ds = prepare_dataset(bundle, fcfg, rng_seed=derive_seed(seed, "walks"))
        regimes = [r for r in build_regimes(ds.refs) if
                   (r.regime == "ST" and r.target.name == "task_a") or
                   (r.regime == "WD" and r.target.name == "task_b")]
        sub = None if out_dir is None else Path(out_dir) / f"seed{seed}"
        results, missing = run_matrix({ds.name: ds}, regimes, VARIANTS, [seed], bcfg, tcfg, sub)
        all_results += results
        all_missing += missing
        row = {"seed": seed, "oracle_a": oracle_auroc(bundle, truth, "task_a"),
               "oracle_b": oracle_auroc(bundle, truth, "task_b")}
        for r in results:
            row[f"{r.regime.lower()}_{r.variant}"] = r.auroc
        outcome.per_seed.append(row)
        log.info("seed %s: %s", seed, json.dumps(row))
    if out_dir is not None:
        write_report(all_results, all_missing, out_dir, VARIANTS, emit_plot)
        with open(Path(out_dir) / "leakage.json", "w") as fh:
            json.dump({"per_seed": outcome.per_seed,
                       "checks": {k: list(v) for k, v in outcome.checks().items()}}, fh, indent=1)
    return outcome


def load_models(ckpt_dir, keys) -> dict:
    models = {}
    for k in keys:
        p = checkpoint_path(ckpt_dir, k)
        if p.exists():
            models[k] = load_checkpoint(p)[0]
        else:
            log.warning("missing checkpoint %s", p)
    return models
