"""Command-line entry point: synth, ingest, train, eval, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .relgraph import IngestError, SchemaError, derive_seed

log = logging.getLogger("kspace")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_INCOMPLETE = 0, 1, 2, 3


def _csv_list(text: str) -> list[str]:
    return [t for t in (s.strip() for s in text.split(",")) if t]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv_list(text)]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kspace", description="Relational in-context transfer with gradient projection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic leakage database")
    s.add_argument("--out", required=True)
    s.add_argument("--users", type=int, default=4000)
    s.add_argument("--items", type=int, default=500)
    s.add_argument("--interactions", type=int, default=40000)
    s.add_argument("--rho", type=float, default=0.8)
    s.add_argument("--sigma-s", type=float, default=1.0)
    s.add_argument("--balance", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("ingest", help="validate a manifest, load its tables and summarize the graph")
    s.add_argument("manifest")
    s.add_argument("--dump-edges", metavar="CSV")

    for name, help_ in (("train", "fit one model per (training set, variant, seed)"),
                        ("eval", "evaluate saved checkpoints and write the report")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config")
        s.add_argument("--manifest", action="append", dest="manifests")
        s.add_argument("--out", dest="out_dir")
        s.add_argument("--variant", type=_csv_list, dest="variants")
        s.add_argument("--regimes", type=_csv_list)
        s.add_argument("--seeds", type=_int_list)
        s.add_argument("--root-seed", type=int)
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--hidden", type=int)
        s.add_argument("--detach-support", action="store_true", default=None)
        if name == "eval":
            s.add_argument("--checkpoints")
            s.add_argument("--emit-plot", action="store_true")

    s = sub.add_parser("report", help="re-render summary, markdown and plot from results.csv")
    s.add_argument("results")
    s.add_argument("--out")
    s.add_argument("--emit-plot", action="store_true")
    return p


def _overrides(a) -> dict:
    o: dict = {}
    for k in ("manifests", "out_dir", "variants", "regimes", "seeds", "root_seed"):
        v = getattr(a, k, None)
        if v is not None:
            o[k] = v
    train = {k: getattr(a, k) for k in ("epochs", "lr", "detach_support") if getattr(a, k, None) is not None}
    if train:
        o["train"] = train
    if getattr(a, "hidden", None) is not None:
        o["backbone"] = {"hidden": a.hidden}
    return o


def _load_run(a):
    from .dataset import prepare_dataset
    from .evaluation import build_regimes
    from .relgraph import ingest

    cfg = C.validate(C.load(a.config, _overrides(a)))
    datasets = {}
    for m in cfg.manifests:
        bundle = ingest(m)
        ds = prepare_dataset(bundle, cfg.features, tuple(cfg.split), derive_seed(cfg.root_seed, "walks"))
        if ds.name in datasets:
            raise C.ConfigError(f"manifests: duplicate database name {ds.name!r}")
        datasets[ds.name] = ds
    refs = [r for ds in datasets.values() for r in ds.refs]
    regimes = build_regimes(refs, cfg.regimes) if cfg.regimes else []
    return cfg, datasets, regimes


def cmd_synth(a) -> int:
    from .synthetic import LeakageSpec, generate, write

    spec = LeakageSpec(a.users, a.items, a.interactions, a.rho, a.sigma_s, a.balance, a.seed)
    bundle, truth = generate(spec)
    out = write(bundle, truth, a.out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ingest(a) -> int:
    from .relgraph import build_graph, graph_summary, ingest

    bundle = ingest(a.manifest)
    g = build_graph(bundle)
    print(json.dumps(graph_summary(g), indent=2))
    if a.dump_edges:
        g.dump_edges(a.dump_edges)
    return EXIT_OK


def cmd_train(a) -> int:
    from .harness import train_matrix

    cfg, datasets, regimes = _load_run(a)
    out = Path(cfg.out_dir)
    C.write_resolved(cfg, out)
    train_matrix(datasets, regimes, cfg.variants, cfg.seeds, cfg.backbone, cfg.train,
                 ckpt_dir=out / "checkpoints", log_dir=out / "logs")
    print(f"checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .harness import eval_matrix, load_models, train_groups, write_report

    cfg, datasets, regimes = _load_run(a)
    out = Path(cfg.out_dir)
    ckpt = Path(a.checkpoints) if a.checkpoints else out / "checkpoints"
    models = load_models(ckpt, train_groups(regimes, cfg.variants, cfg.seeds))
    results, missing = eval_matrix(datasets, regimes, cfg.variants, cfg.seeds, cfg.backbone, cfg.train, models)
    paths = write_report(results, missing, out, cfg.variants, a.emit_plot)
    print(paths["markdown"].read_text(), end="")
    if not results or missing:
        return EXIT_INCOMPLETE
    return EXIT_OK


def cmd_report(a) -> int:
    from .harness import read_results, write_report

    results = read_results(a.results)
    out = Path(a.out) if a.out else Path(a.results).parent
    variants = [v for v in ("base", "adv") if any(r.variant == v for r in results)] or ["base", "adv"]
    paths = write_report(results, [], out, variants, a.emit_plot)
    print(paths["markdown"].read_text(), end="")
    return EXIT_OK if results else EXIT_INCOMPLETE


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except (C.ConfigError, SchemaError, IngestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
