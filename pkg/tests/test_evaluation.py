import itertools
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kspace.evaluation import EvalResult, TaskRef, auroc, build_regimes, temporal_split


def pairwise_auroc(s, y):
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auroc_hand_cases():
    assert auroc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auroc([0.3] * 6, [1, 0] * 3) == 0.5
    assert auroc([0.1, 0.8, 0.9], [1, 1, 0]) == 0.0
    assert math.isnan(auroc([0.1, 0.2], [1, 1]))


def test_auroc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    s = rng.normal(size=50)
    y = rng.integers(0, 2, 50)
    assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12


def test_auroc_with_heavy_ties():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = rng.integers(0, 4, 30).astype(float)
        y = rng.integers(0, 2, 30)
        y[:2] = [0, 1]
        assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=40, unique=True), st.integers(0, 2**31))
def test_auroc_transform_and_flip(s, seed):
    # integer-spaced scores so the transforms below cannot create ties by rounding
    s = np.array(s, dtype=float) / 10.0
    y = np.random.default_rng(seed).integers(0, 2, len(s))
    y[:2] = [0, 1]
    a = auroc(s, y)
    assert auroc(np.exp(s / 100.0) * 3 + 1, y) == pytest.approx(a, abs=1e-12)
    assert auroc(1 - s, y) == pytest.approx(1 - a, abs=1e-12)


def test_eval_result_range():
    EvalResult("db/t", "ST", "base", 0.7, 10, 0)
    EvalResult("db/t", "ST", "base", math.nan, 10, 0)
    with pytest.raises(ValueError):
        EvalResult("db/t", "ST", "base", 1.2, 10, 0)


# ---------------------------------------------------------------------------
# regimes

def refs(spec):
    return [TaskRef(db, t) for db, names in spec.items() for t in names]


def test_single_task_database_has_no_wd():
    out = build_regimes(refs({"solo": ["t"], "other": ["a", "b"]}))
    wd = [r for r in out if r.regime == "WD" and r.target.database == "solo"]
    assert len(wd) == 1 and not wd[0].computable and "not computable" in wd[0].reason


def test_two_task_database_wd_is_the_other_task():
    a, b = refs({"db": ["a", "b"]})
    out = {(r.regime, r.target): r for r in build_regimes([a, b])}
    assert out["WD", a].train == (b,) and out["WD", b].train == (a,)


def test_cd_counts():
    tasks = refs({f"db{i}": ["x", "y"] for i in range(3)})
    cd = [r for r in build_regimes(tasks) if r.regime == "CD"]
    assert len(cd) == 6 and all(len(r.train) == 4 for r in cd)


def test_empty_task_list_rejected():
    with pytest.raises(ValueError):
        build_regimes([])


def test_unknown_regime_rejected():
    with pytest.raises(ValueError):
        build_regimes(refs({"db": ["a"]}), regimes=("XX",))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=10, unique=True))
def test_regime_set_algebra(pairs):
    tasks = [TaskRef(f"d{d}", f"t{t}") for d, t in pairs]
    everything = set(tasks)
    for r in build_regimes(tasks):
        same = {t for t in tasks if t.database == r.target.database}
        want = {"ST": {r.target}, "WD": same - {r.target}, "CD": everything - same, "ALL": everything}[r.regime]
        assert set(r.train) == (want if r.computable else set())
        assert r.computable == bool(want)
        assert len(r.train) == len(set(r.train))
    assert len(build_regimes(tasks)) == 4 * len(tasks)


def test_task_ref_parse():
    assert TaskRef.parse("db/t") == TaskRef("db", "t")
    assert TaskRef("db", "t").id == "db/t"
    with pytest.raises(ValueError):
        TaskRef.parse("nodb")


# ---------------------------------------------------------------------------
# temporal split

def test_monotone_timestamps():
    train, val, test = temporal_split(np.arange(1, 101))
    assert train.tolist() == list(range(70))
    assert val.tolist() == list(range(70, 85)) and test.tolist() == list(range(85, 100))


def test_equal_timestamps_fall_back_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        train, val, test = temporal_split(np.full(20, 5.0))
    assert "equal" in caplog.text
    assert train.tolist() == list(range(14))


def test_split_matches_sort_oracle():
    rng = np.random.default_rng(3)
    for n in (10, 57, 400):
        t = rng.integers(0, 30, n).astype(float)
        train, val, test = temporal_split(t)
        order = sorted(range(n), key=lambda i: (t[i], i))
        k1, k2 = int(0.7 * n + 1e-9), int(0.85 * n + 1e-9)
        assert train.tolist() == order[:k1]
        assert val.tolist() == order[k1:k2] and test.tolist() == order[k2:]
        assert t[test].min() >= t[train].max()


def test_split_errors():
    with pytest.raises(ValueError):
        temporal_split([1.0, 2.0])
    with pytest.raises(ValueError):
        temporal_split(np.arange(10), (0.5, 0.5, 0.5))


def test_splits_partition_rows():
    t = np.random.default_rng(4).normal(size=33)
    parts = temporal_split(t)
    assert sorted(itertools.chain(*[p.tolist() for p in parts])) == list(range(33))
