"""A relational database made ready for training: graph, features and split task rows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import TaskRef, temporal_split
from .features import FeatureConfig, FeatureStore
from .relgraph import HeteroGraph, RelationalBundle, build_graph


@dataclass
class TaskRows:
    ref: TaskRef
    nodes: np.ndarray
    times: np.ndarray
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


@dataclass
class RelationalDataset:
    name: str
    bundle: RelationalBundle
    graph: HeteroGraph
    store: FeatureStore
    tasks: dict[str, TaskRows]
    fanout: tuple[int, ...]

    def task(self, ref: TaskRef | str) -> TaskRows:
        name = ref.name if isinstance(ref, TaskRef) else ref
        return self.tasks[name]

    @property
    def refs(self) -> list[TaskRef]:
        return [t.ref for t in self.tasks.values()]


def task_rows(bundle: RelationalBundle, graph: HeteroGraph, task_name: str, fractions) -> TaskRows:
    m = bundle.manifest
    spec = m.task(task_name)
    data = bundle.tables[spec.table]
    y = data.columns[spec.label]
    rows = np.flatnonzero(~np.isnan(y))
    times = data.columns[spec.timestamp][rows]
    nodes = rows + graph.offsets[graph.table_names.index(spec.table)]
    train, val, test = temporal_split(times, fractions)
    return TaskRows(TaskRef(m.name, task_name), nodes.astype(np.int64), times,
                    y[rows].astype(np.int64), train, val, test)


def prepare_dataset(bundle: RelationalBundle, cfg: FeatureConfig, fractions=(0.7, 0.15, 0.15),
                    rng_seed: int = 0) -> RelationalDataset:
    """Build the graph, split every task in time and fit the frozen encoder on training rows."""
    graph = build_graph(bundle)
    tasks = {t.name: task_rows(bundle, graph, t.name, fractions) for t in bundle.manifest.tasks}
    cut = [tr.times[tr.train].max() for tr in tasks.values() if len(tr.train)]
    cutoff = float(max(cut)) if cut else None
    store = FeatureStore.build(bundle, graph, cfg, cutoff=cutoff, rng_seed=rng_seed)
    return RelationalDataset(bundle.manifest.name, bundle, graph, store, tasks, tuple(cfg.fanout))
