import csv
import math

import numpy as np
import pytest

from kspace import harness as H
from kspace.backbone import BackboneConfig
from kspace.evaluation import EvalResult, TaskRef, build_regimes
from kspace.trainer import TrainConfig

BCFG = BackboneConfig(layers=2, hidden=8, heads=2)
TCFG = TrainConfig(epochs=1, n_support=8, n_query=8, episodes_per_epoch=3, eval_support=16)


def res(task, regime, variant, auroc, seed=0):
    return EvalResult(task, regime, variant, auroc, 10, seed)


def sample_results():
    return [res("db/a", "ST", "base", 0.8), res("db/a", "ST", "adv", 0.82),
            res("db/a", "ST", "base", 0.6, seed=1), res("db/a", "ST", "adv", 0.7, seed=1),
            res("db/b", "WD", "base", 0.5), res("db/b", "WD", "adv", 0.65)]


def test_empty_results_give_header_only_report(tmp_path):
    paths = H.write_report([], [], tmp_path)
    assert paths["summary"].read_text() == "task,regime,base,adv,delta\n"
    assert paths["csv"].read_text().splitlines() == [",".join(H.CSV_FIELDS)]
    assert paths["markdown"].read_text().splitlines() == ["| task | regime | base | adv | delta |",
                                                          "|---|---|---|---|---|"]


def test_delta_is_per_row_subtraction_and_average_is_column_mean():
    rows = H.summarize(sample_results())
    body, avg = rows[:-1], rows[-1]
    assert [r["task"] for r in body] == ["db/a", "db/b"]
    assert body[0]["base"] == pytest.approx(0.7) and body[0]["adv"] == pytest.approx(0.76)
    for r in body:
        assert r["delta"] == r["adv"] - r["base"]
    assert avg["task"] == "average"
    for col in ("base", "adv", "delta"):
        assert avg[col] == pytest.approx(np.mean([r[col] for r in body]), abs=1e-15)


def test_report_averages_match_recomputed_means(tmp_path):
    paths = H.write_report(sample_results(), [], tmp_path)
    with open(paths["summary"]) as fh:
        rows = list(csv.DictReader(fh))
    body = rows[:-1]
    for col in ("base", "adv"):
        assert float(rows[-1][col]) == pytest.approx(np.mean([float(r[col]) for r in body]), abs=1e-4)


def test_missing_cells_are_marked(tmp_path):
    missing = [{"task": "db/c", "regime": "WD", "variant": "adv", "seed": 0, "reason": "missing checkpoint"}]
    paths = H.write_report(sample_results()[:2], missing, tmp_path)
    summary = paths["summary"].read_text().splitlines()
    assert "db/c,WD,missing,missing,missing" in summary
    assert "missing checkpoint" in paths["markdown"].read_text()
    assert "db/c,WD,adv,0,missing," in paths["csv"].read_text()
    # missing rows are skipped when reading back
    assert len(H.read_results(paths["csv"])) == 2


def test_results_round_trip(tmp_path):
    paths = H.write_report(sample_results(), [], tmp_path)
    back = H.read_results(paths["csv"])
    assert back == sample_results()


def test_plot_is_deterministic(tmp_path):
    a = H.write_report(sample_results(), [], tmp_path / "a", emit_plot=True)["plot"]
    b = H.write_report(sample_results(), [], tmp_path / "b", emit_plot=True)["plot"]
    assert a.suffix == ".svg" and a.read_bytes() == b.read_bytes()
    assert b"<svg" in a.read_bytes()


def test_plot_handles_missing_values(tmp_path):
    rows = [res("db/a", "ST", "base", 0.8)]
    p = H.write_report(rows, [], tmp_path, emit_plot=True)["plot"]
    assert p.exists()


def test_variant_mapping_and_groups():
    assert H.train_config_for(TCFG, "base", 3).adversarial is False
    cfg = H.train_config_for(TCFG, "adv", 3)
    assert cfg.adversarial and cfg.seed == 3
    with pytest.raises(ValueError):
        H.train_config_for(TCFG, "other", 0)
    a, b = TaskRef("db", "a"), TaskRef("db", "b")
    keys = H.train_groups(build_regimes([a, b]), ("base", "adv"), (0, 1))
    # ST(a)=WD(b)={a}, ST(b)=WD(a)={b}, CD not computable, ALL={a,b}
    assert len(keys) == 3 * 2 * 2
    assert len({k.slug for k in keys}) == len(keys)


def test_threads_env(monkeypatch):
    monkeypatch.setenv("KSPACE_THREADS", "3")
    assert H.threads() == 3
    monkeypatch.setenv("KSPACE_THREADS", "zero")
    assert H.threads() == 1
    monkeypatch.delenv("KSPACE_THREADS")
    assert H.threads() == 1


def test_eval_without_models_marks_everything_missing(tiny):
    regimes = build_regimes(tiny.refs)
    results, missing = H.eval_matrix({tiny.name: tiny}, regimes, ("base",), (0,), BCFG, TCFG, {})
    assert results == []
    assert len(missing) == len(regimes)
    reasons = {m["reason"] for m in missing}
    assert "missing checkpoint" in reasons and any("not computable" in r for r in reasons)


def test_run_matrix_end_to_end(tiny, tmp_path):
    regimes = [r for r in build_regimes(tiny.refs) if r.regime in ("ST", "WD")]
    results, missing = H.run_matrix({tiny.name: tiny}, regimes, ("base", "adv"), (0,), BCFG, TCFG, tmp_path)
    assert len(results) == 2 * 2 * 2 and not missing
    assert all(0 <= r.auroc <= 1 for r in results)
    ckpts = sorted((tmp_path / "checkpoints").iterdir())
    assert len(ckpts) == 4 and len(list((tmp_path / "logs").iterdir())) == 4
    # checkpoints reload into identical evaluations
    keys = H.train_groups(regimes, ("base", "adv"), (0,))
    models = H.load_models(tmp_path / "checkpoints", keys)
    again, _ = H.eval_matrix({tiny.name: tiny}, regimes, ("base", "adv"), (0,), BCFG, TCFG, models)
    assert [r.auroc for r in again] == [r.auroc for r in results]


def test_sidecar_table_rejected(tiny):
    import dataclasses
    spec = tiny.bundle.manifest.tables[0]
    bad = dataclasses.replace(spec, file=H.SIDECAR)
    manifest = dataclasses.replace(tiny.bundle.manifest, tables=(bad,) + tiny.bundle.manifest.tables[1:])
    fake = dataclasses.replace(tiny, bundle=dataclasses.replace(tiny.bundle, manifest=manifest))
    with pytest.raises(ValueError):
        H.check_no_sidecar(fake)


def test_leakage_checks_thresholds():
    out = H.LeakageOutcome([0], [{"st_base": 0.8, "st_adv": 0.76, "wd_base": 0.6, "wd_adv": 0.71, "oracle_b": 0.9}])
    checks = out.checks()
    assert checks["st"][0] and checks["wd_collapse"][0] and checks["wd_recovery"][0]
    out.per_seed[0]["wd_adv"] = 0.69
    assert not out.checks()["wd_recovery"][0]
    assert math.isclose(out.mean("oracle_b"), 0.9)
