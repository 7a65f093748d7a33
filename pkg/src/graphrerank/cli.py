"""Command-line pipeline: ingest, train, build-index, eval, sweep-nk, bench.

All commands share one run directory (``--out``) laid out as::

    data/      split manifests, interaction matrix, vocabularies, stats
    models/    one checkpoint and training log per seed
    index/     user and item similarity indices
    eval/      reports of ``eval``;  sweep/ reports of ``sweep-nk``
    bench/     timing table
    manifests/ one JSON manifest per stage

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data, evaluation, synthetic
from ._io import file_sha256
from ._random import derive_seed
from .config import load_config, set_value
from .exceptions import DataError, NumericalError
from .model import DCNRanker, fit_grid, write_training_log
from .rerank import GraphConvReranker, write_debug_dump
from .similarity import SimilarityIndex

_log = logging.getLogger("graphrerank")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
METRIC_ORDER = ("recall", "ndcg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run directory helpers ----------------------------------------------------

class Run:
    def __init__(self, root, cfg, force):
        self.root = Path(root)
        self.cfg = cfg
        self.force = force

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def claim(self, stage, *dirs):
        """Create output dirs for ``stage``; refuse to overwrite without ``--force``."""
        manifest = self.path("manifests", f"{stage}.json")
        if manifest.exists() and not self.force:
            raise UsageError(f"{manifest} exists; pass --force to overwrite")
        for d in ("manifests",) + dirs:
            self.path(d).mkdir(parents=True, exist_ok=True)

    def require(self, *parts):
        p = self.path(*parts)
        if not p.exists():
            raise DataError(f"missing artifact {p}; run the earlier stage first")
        return p

    def manifest(self, stage, inputs, outputs, volatile=(), extra=None):
        """Record config hash plus input/output hashes. Wall-clock files are listed unhashed."""
        rel = lambda p: Path(p).resolve().relative_to(self.root.resolve()).as_posix() \
            if Path(p).resolve().is_relative_to(self.root.resolve()) else str(p)
        doc = {
            "stage": stage,
            "config_sha256": self.cfg.digest(),
            "config": self.cfg.canonical(),
            "inputs": {rel(p): file_sha256(p) for p in sorted(map(str, inputs))},
            "outputs": {rel(p): file_sha256(p) for p in sorted(map(str, outputs))},
            "volatile_outputs": sorted(rel(p) for p in volatile),
        }
        if extra:
            doc.update(extra)
        with open(self.path("manifests", f"{stage}.json"), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _seeds(cfg):
    return list(cfg["eval"]["seeds"])


def _load_splits(run):
    paths = [run.require("data", f"{name}.tsv") for name in ("train", "val", "test")]
    train, val, test = (data.read_pairs(p) for p in paths)
    mpath = run.require("data", "matrix.grim")
    return train, val, test, data.load_matrix(mpath), paths + [mpath]


# -- commands ------------------------------------------------------------------

def cmd_make_synthetic(run, args):
    """Write a planted two-block interaction file."""
    out = Path(args.path)
    if out.exists() and not run.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    seed = _seeds(run.cfg)[0]
    records, _ = synthetic.make_two_block(args.users, args.items, args.p_within, args.p_across,
                                          n_context=args.context, seed=seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    synthetic.write_interactions(out, records)
    print(f"wrote {len(records)} interactions to {out}")


def format_stats_table(name, stats):
    header = f"{'Dataset':<16}{'#Users':>10}{'#Items':>10}{'#Interactions':>16}{'Sparsity':>10}"
    row = (f"{name:<16}{stats['users']:>10,}{stats['items']:>10,}{stats['interactions']:>16,}"
           f"{stats['sparsity']:>10.4f}")
    return header + "\n" + row


def cmd_ingest(run, args):
    cfg = run.cfg.validate(need_interactions=True)
    src = Path(cfg["data"]["interactions"])
    run.claim("ingest", "data")
    records, vocab = data.load_interactions(src, cfg.schema_mapping())
    stats = data.dataset_stats(records, vocab)
    pairs = data.binarize(records, cfg["data"]["threshold"])
    split_seed = derive_seed(cfg["data"]["split_seed"], "split")
    parts = data.split(pairs, cfg["data"]["split"], seed=split_seed)
    outputs = []
    for name, part in zip(("train", "val", "test"), parts):
        p = run.path("data", f"{name}.tsv")
        data.write_pairs(p, part)
        outputs.append(p)
    M = data.build_matrix(parts[0], vocab.n_users, vocab.n_items)
    data.save_matrix(run.path("data", "matrix.grim"), M)
    outputs.append(run.path("data", "matrix.grim"))
    for name, ids in (("users", vocab.user_ids), ("items", vocab.item_ids)):
        p = run.path("data", f"{name}.txt")
        p.write_text("".join(f"{x}\n" for x in ids), encoding="utf-8")
        outputs.append(p)
    stats_path = run.path("data", "stats.json")
    stats_path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs.append(stats_path)
    run.manifest("ingest", [src], outputs)
    print(format_stats_table(src.stem, stats))
    print(f"split: train {len(parts[0])}, val {len(parts[1])}, test {len(parts[2])}; "
          f"matrix nnz {M.nnz}")


def cmd_train(run, args):
    cfg = run.cfg.validate()
    train, val, _, M, inputs = _load_splits(run)
    run.claim("train", "models")
    eval_set = (val.X, val.labels) if len(np.unique(val.labels)) == 2 else None
    grid = cfg.grid() if args.grid else None
    if args.grid and not grid:
        raise UsageError("--grid needs a [grid] section in the config")
    outputs, volatile = [], []
    for seed in _seeds(cfg):
        template = DCNRanker(**cfg.model_params(), random_state=seed)
        meta = {"seed": seed, "encoder": template.encoder}
        if grid:
            if eval_set is None:
                raise DataError("grid selection needs both labels in the validation split")
            model, best, results = fit_grid(template, grid, train.X, train.labels, eval_set, interactions=M)
            meta["grid"] = [{"params": _jsonable(p), "best_val_auc": a} for p, a in results]
            meta["selected"] = _jsonable(best)
        else:
            model = template.fit(train.X, train.labels, eval_set=eval_set, interactions=M)
        ckpt = run.path("models", f"seed{seed}.grck")
        log_path = run.path("models", f"seed{seed}.log.csv")
        model.save(ckpt, metadata=meta)
        write_training_log(log_path, model.training_log_)
        outputs.append(ckpt)
        volatile.append(log_path)
        print(f"seed {seed}: best epoch {model.best_epoch_}, val AUC {model.best_val_auc_:.4f}"
              + (f", selected {meta['selected']}" if grid else ""))
    run.manifest("train", inputs, outputs, volatile)


def _jsonable(params):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}


def cmd_build_index(run, args):
    cfg = run.cfg.validate()
    mpath = run.require("data", "matrix.grim")
    M = data.load_matrix(mpath)
    run.claim("build-index", "index")
    n_max = max(cfg["rerank"]["n_max"], max(cfg["eval"]["nk_grid"]), cfg["rerank"]["n_k"]) \
        + int(cfg["rerank"]["exclude_self"])
    sides = ("user", "item") if args.side == "both" else (args.side,)
    outputs = []
    for side in sides:
        t0 = time.perf_counter()
        index = SimilarityIndex(side, n_max, cfg.threads()).fit(M)
        p = run.path("index", f"{side}.grsi")
        index.save(p)
        outputs.append(p)
        lengths = index.counts_
        print(f"{side} index: {index.n_rows} rows, n_max {n_max}, mean row length {lengths.mean():.2f}, "
              f"{time.perf_counter() - t0:.2f}s")
    run.manifest("build-index", [mpath], outputs)


def _load_indices(run):
    paths = [run.require("index", "user.grsi"), run.require("index", "item.grsi")]
    return SimilarityIndex.load(paths[0]), SimilarityIndex.load(paths[1]), paths


def _load_model(run, seed):
    return DCNRanker.load(run.require("models", f"seed{seed}.grck")), run.path("models", f"seed{seed}.grck")


def _evaluate_modes(run, stage, nk_list, include_base, args):
    cfg = run.cfg.validate()
    _, _, test, M, inputs = _load_splits(run)
    uidx, iidx, ipaths = _load_indices(run)
    inputs += ipaths
    run.claim(stage, stage)
    r = cfg["rerank"]
    ks = tuple(cfg["eval"]["ks"])
    reports, outputs, volatile, fallback_rows, timing_rows = [], [], [], [], []
    model_rows = {}
    for seed in _seeds(cfg):
        model, ckpt = _load_model(run, seed)
        inputs.append(ckpt)
        base = evaluation.evaluate(model, test, M, ks=ks, seed=seed, shortlist=r["shortlist"],
                                   n_jobs=cfg.threads(), config=cfg.canonical())
        if include_base:
            reports.append(base)
        for n_k in nk_list:
            rr = GraphConvReranker.from_indices(model, uidx, iidx, n_k=n_k, context_policy=r["context_policy"],
                                                exclude_self=r["exclude_self"])
            rep = evaluation.evaluate(model, test, M, reranker=rr, ks=ks, seed=seed, shortlist=r["shortlist"],
                                      n_jobs=cfg.threads(), config=cfg.canonical())
            rep.base_metrics = base.metrics
            reports.append(rep)
            fallback_rows.append({"seed": seed, "n_k": n_k, "queries": rr.n_queries_, "fallbacks": rr.n_fallbacks_,
                                  "pair_evaluations": rr.n_pair_evaluations_})
            # cache misses depend on thread scheduling, so they go with the timings
            model_rows[seed, n_k] = rr.n_model_rows_
            if args.debug_dump:
                limit = min(args.debug_dump, len(test))
                dump = run.path(stage, f"debug_seed{seed}_nk{n_k}.jsonl")
                write_debug_dump(dump, rr.explain(test.X[:limit]))
                outputs.append(dump)
        for rep in [base] + reports[len(reports) - len(nk_list):]:
            timing_rows.append({"seed": seed, "mode": rep.mode, "n_k": rep.n_k, **rep.timings,
                                "model_rows": model_rows.get((seed, rep.n_k), 0) if rep.mode == "rerank" else 0})

    rows = [_report_row(rep, ks) for rep in reports]
    csv_path = run.path(stage, "report.csv")
    evaluation.write_rows_csv(csv_path, rows)
    json_path = run.path(stage, "report.json")
    evaluation.write_report_json(json_path, reports, include_timings=False)
    timing_path = run.path(stage, "timings.csv")
    evaluation.write_rows_csv(timing_path, timing_rows)
    outputs += [csv_path, json_path]
    volatile.append(timing_path)
    if fallback_rows:
        fb = run.path(stage, "fallbacks.csv")
        evaluation.write_rows_csv(fb, fallback_rows)
        outputs.append(fb)
    run.manifest(stage, inputs, outputs, volatile)

    print(format_report_table(rows, ks))
    if args.fallback_report and fallback_rows:
        print()
        print(f"{'seed':>6}{'n_k':>6}{'queries':>10}{'fallbacks':>11}{'pair_evals':>12}")
        for fr in fallback_rows:
            print(f"{fr['seed']:>6}{fr['n_k']:>6}{fr['queries']:>10}{fr['fallbacks']:>11}{fr['pair_evaluations']:>12}")
    if nk_list:
        print()
        for rep in reports:
            if rep.mode == "rerank":
                hist = evaluation.proportion_histogram(rep.max_pair_proportion, bins=10)
                print(f"seed {rep.seed} n_k {rep.n_k} max-pair proportion histogram: {hist['counts']}")
    return reports


def _report_row(rep, ks):
    row = rep.csv_row()
    row["fallbacks"] = rep.fallbacks
    row["pair_evaluations"] = rep.pair_evaluations
    base = getattr(rep, "base_metrics", None)
    for k in ks:
        for name in METRIC_ORDER:
            key = f"{name}@{k}"
            row[f"pct_change_{key}"] = (100.0 * evaluation.relative_change({key: rep.metrics[key]},
                                                                           {key: base[key]})[key]
                                        if base is not None else None)
    return row


def format_report_table(rows, ks):
    keys = [f"{n}@{k}" for k in ks for n in METRIC_ORDER]
    head = f"{'seed':>5} {'mode':<7}{'n_k':>4}" + "".join(f"{k:>11}{'%Δ':>8}" for k in keys) + f"{'auc':>9}"
    lines = [head]
    for row in rows:
        cells = ""
        for k in keys:
            pct = row.get(f"pct_change_{k}")
            cells += f"{row[k]:>11.5f}" + (f"{pct:>+8.2f}" if pct is not None and math.isfinite(pct) else f"{'':>8}")
        auc = row["auc"]
        lines.append(f"{row['seed']:>5} {row['mode']:<7}{row['n_k']:>4}{cells}"
                     + (f"{auc:>9.4f}" if math.isfinite(auc) else f"{'nan':>9}"))
    return "\n".join(lines)


def cmd_eval(run, args):
    nk = [run.cfg["rerank"]["n_k"]] if args.mode == "rerank" else []
    _evaluate_modes(run, "eval", nk, True, args)


def cmd_sweep_nk(run, args):
    _evaluate_modes(run, "sweep", list(run.cfg["eval"]["nk_grid"]), True, args)


def cmd_bench(run, args):
    cfg = run.cfg.validate()
    train, val, test, M, inputs = _load_splits(run)
    seed = _seeds(cfg)[0]
    model, ckpt = _load_model(run, seed)
    inputs.append(ckpt)
    run.claim("bench", "bench")
    rows = evaluation.bench(model, train, val, test, M, tuple(cfg["eval"]["nk_grid"]),
                            epochs=cfg["eval"]["bench_epochs"], n_max=cfg["rerank"]["n_max"],
                            graph_layers=cfg["graph"]["layers"], n_jobs=cfg.threads())
    log_path = run.path("models", f"seed{seed}.log.csv")
    train_seconds = _logged_train_seconds(log_path)
    timing = run.path("bench", "timing.csv")
    evaluation.write_rows_csv(timing, rows, ["stage", "mode", "n_k", "seconds", "invocations"])
    print(f"{'stage':<14}{'mode':<8}{'n_k':>4}{'seconds':>11}{'invocations':>13}")
    for row in rows:
        print(f"{row['stage']:<14}{row['mode']:<8}{row['n_k']:>4}{row['seconds']:>11.4f}{row['invocations']:>13}")
    overhead = evaluation.rerank_overhead(rows, train_seconds)
    if overhead:
        print()
        source = "logged training" if train_seconds is not None else "bench epochs only"
        for n_k, pct in overhead.items():
            print(f"re-ranking overhead at n_k={n_k}: {pct:.2f}% of pipeline time ({source})")
    run.manifest("bench", inputs, [], [timing])


def _logged_train_seconds(path):
    if not path.exists():
        return None
    with open(path, encoding="utf-8", newline="") as fh:
        return math.fsum(float(row["wall_seconds"]) for row in csv.DictReader(fh))


COMMANDS = {
    "make-synthetic": cmd_make_synthetic,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "build-index": cmd_build_index,
    "eval": cmd_eval,
    "sweep-nk": cmd_sweep_nk,
    "bench": cmd_bench,
}


def build_parser():
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="INI run configuration")
    g.add_argument("--seed", help="comma-separated seeds; the first also seeds the data split")
    g.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    g.add_argument("--out", help="run directory (default: runs/<timestamp>)")
    g.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key; repeatable")
    g.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="graphrerank", description="Graph-convolution re-ranking pipeline.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-synthetic", parents=[common], help="write a planted two-block dataset")
    p.add_argument("path")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=300)
    p.add_argument("--p-within", type=float, default=0.3)
    p.add_argument("--p-across", type=float, default=0.01)
    p.add_argument("--context", type=int, default=0, help="number of random context columns")

    p = sub.add_parser("ingest", parents=[common], help="load, binarize, split and build the matrix")
    p.add_argument("--interactions", help="input file (overrides data.interactions)")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("train", parents=[common], help="train one ranker per seed")
    p.add_argument("--grid", action="store_true", help="select over the [grid] section by val AUC")
    p.add_argument("--encoder", choices=("table", "graph"))
    p.add_argument("--layers", type=int, help="propagation layers of the graph encoder")
    p.add_argument("--readout", help="comma-separated readout coefficients")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--cross-variant", choices=("vector", "matrix"))

    p = sub.add_parser("build-index", parents=[common], help="precompute similarity indices")
    p.add_argument("--side", choices=("user", "item", "both"), default="both")
    p.add_argument("--n-max", type=int)

    for name, helptext in (("eval", "base or re-ranked evaluation"), ("sweep-nk", "re-rank across the n_k grid")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name == "eval":
            p.add_argument("--mode", choices=("base", "rerank"), default="rerank")
            p.add_argument("--nk", type=int)
        else:
            p.add_argument("--nk", help="comma-separated n_k grid")
        p.add_argument("--context-policy", choices=("query", "zero"))
        p.add_argument("--exclude-self", action="store_true", default=None)
        p.add_argument("--shortlist", type=int)
        p.add_argument("--fallback-report", action="store_true")
        p.add_argument("--debug-dump", type=int, default=0, metavar="N",
                       help="write per-query explanations for the first N test pairs")

    p = sub.add_parser("bench", parents=[common], help="timing table for encoders and re-ranking")
    p.add_argument("--nk", help="comma-separated n_k grid")
    p.add_argument("--epochs", type=int, help="epochs per encoder in the training timing")
    return parser


def _apply_flags(cfg, args):
    """Translate dedicated flags into config overrides (flags win over the file)."""
    sets = []
    if args.seed:
        seeds = args.seed.replace(" ", "")
        sets += [f"eval.seeds={seeds}", f"data.split_seed={seeds.split(',')[0]}"]
    if args.threads is not None:
        sets.append(f"run.threads={args.threads}")
    mapping = {
        "interactions": "data.interactions", "threshold": "data.threshold",
        "encoder": "graph.encoder", "layers": "graph.layers", "readout": "graph.readout",
        "epochs": "model.max_epochs", "lr": "model.learning_rate", "cross_variant": "model.cross_variant",
        "n_max": "rerank.n_max", "context_policy": "rerank.context_policy", "exclude_self": "rerank.exclude_self",
        "shortlist": "rerank.shortlist",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            sets.append(f"{key}={value}")
    nk = getattr(args, "nk", None)
    if nk is not None:
        if args.command == "eval":
            sets.append(f"rerank.n_k={nk}")
        else:
            sets.append(f"eval.nk_grid={nk}")
    if args.command == "bench" and getattr(args, "epochs", None) is not None:
        sets = [s for s in sets if not s.startswith("model.max_epochs")] + [f"eval.bench_epochs={args.epochs}"]
    for s in sets:
        set_value(cfg, s)
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        _apply_flags(cfg, args)
        out = args.out or Path("runs") / time.strftime("%Y%m%d-%H%M%S")
        run = Run(out, cfg, args.force)
        # single-threaded BLAS keeps every kernel's summation order fixed
        with threadpool_limits(limits=1, user_api="blas"):
            COMMANDS[args.command](run, args)
    except UsageError as exc:
        print(f"graphrerank: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"graphrerank: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError) as exc:
        print(f"graphrerank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, IndexError) as exc:
        print(f"graphrerank: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
