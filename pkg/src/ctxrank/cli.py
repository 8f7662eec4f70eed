"""Command-line entry point: ``ctxrank <stage> [options]``.

Stages communicate through files so each can be rerun on its own:

    simulate        -> DIR/dataset.jsonl, DIR/schema.json, DIR/truth/*.tsv
    train           -> RUN/model.ckpt, RUN/exam.ckpt, RUN/curve.tsv, RUN/partition.tsv, RUN/run.json
    export-context  -> context TSV (query_id, user_id, 2m floats)
    cluster         -> cluster TSV (query_id, cluster_id) + centroid JSON
    train-gbdt      -> structured-text model
    eval            -> per-query metric TSV
    compare         -> paired t-test of two eval files
    report          -> full experiment from a config file
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .context import export_context, format_context_rows, parse_context_rows
from .data import FeatureSchema, build_history, fit_normalization, load_dataset, normalize_records, write_dataset
from .experiment import (
    ExperimentConfig,
    ModelSpec,
    StageError,
    build_model,
    partition,
    report_json,
    report_table,
    run_experiment,
)
from .gbdt import GbdtModel, GbdtParams, flatten_records, gbdt_scores, gbdt_train
from .kmeans import kmeans_assign, kmeans_fit
from .metrics import baseline_scores, mean_ndcg, ndcg_from_scores, paired_ttest
from .simulator import export_truth, generate_log
from .unbiased import predict, train_dual

log = logging.getLogger("ctxrank")

CONFIG_ENV = "CTXRANK_CONFIG"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STAGE = {
    "simulate": 10, "train": 11, "export-context": 12, "cluster": 13, "train-gbdt": 14,
    "eval": 15, "compare": 16, "report": 17,
}


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def _config(args) -> ExperimentConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        return ExperimentConfig.load(path)
    return ExperimentConfig()


def _load_data(data_dir):
    d = Path(data_dir)
    schema = FeatureSchema.load(d / "schema.json")
    return list(load_dataset(d / "dataset.jsonl", schema)), schema


def _read_partition(path) -> dict[str, int]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            q, p = line.split("\t")
            out[q] = int(p)
    return out


def _split(records, part: dict[str, int]):
    parts = ([], [], [])
    for r in sorted(records, key=lambda r: (r.timestamp, r.query_id)):
        if r.query_id in part:
            parts[part[r.query_id]].append(r)
    return parts


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- stages


def cmd_simulate(args) -> None:
    cfg = _config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.users is not None:
        cfg.simulator = {**cfg.simulator, "n_users": args.users}
    records, schema, truth = generate_log(cfg.sim_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "dataset.jsonl", records)
    schema.save(out / "schema.json")
    export_truth(truth, out / "truth")
    print(f"{len(records)} queries -> {out}")


def _run_meta(run: Path) -> dict:
    return json.loads((run / "run.json").read_text())


def _restore(run: Path, schema):
    """Rebuild the model of a train run with its normalised partitions and histories."""
    meta = _run_meta(run)
    cfg = ExperimentConfig.from_dict(meta["config"])
    spec = ModelSpec(**meta["spec"])
    model = build_model(spec, schema, cfg)
    T.load_into(model.store, T.load_checkpoint(run / "model.ckpt")[0])
    stats = [tuple(s) for s in meta["norm_stats"]]
    return model, spec, cfg, stats


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.partition is not None:
        cfg.partition = args.partition
    if args.epochs is not None:
        cfg.trainer = {**cfg.trainer, "epochs": args.epochs}
    spec = ModelSpec(name=args.model.upper(), kind=args.model, unbiased=args.unbiased, ablation=args.ablation,
                     pos_emb=args.posemb, substitute_qvec=args.substitute_qvec)
    records, schema = _load_data(args.data)
    raw = partition(records, cfg.partition, cfg.seed)
    stats = fit_normalization(raw[0])
    norm = [normalize_records(p, stats, schema) for p in raw]
    k = cfg.context_config(spec).k
    hist = build_history([r for p in norm for r in p], k)
    model = build_model(spec, schema, cfg)
    result, exam = train_dual(model, norm[0], norm[1], cfg.train_config(spec.unbiased), hist)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    T.save_checkpoint(model.store, run / "model.ckpt", {"kind": spec.kind, "name": spec.name})
    if exam is not None:
        T.save_checkpoint(exam.store, run / "exam.ckpt")
    _write(run / "curve.tsv", result.curve_tsv())
    _write(run / "partition.tsv", "".join(f"{r.query_id}\t{i}\n" for i, p in enumerate(raw) for r in p))
    meta = {"config": cfg.to_dict(), "spec": vars(spec), "norm_stats": [list(s) for s in stats],
            "best_step": result.best_step, "best_valid_ndcg@5": result.best_metric}
    _write(run / "run.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"best valid NDCG@{cfg.train_config().valid_k} {result.best_metric:.4f} at step {result.best_step}")


def _normalised_all(run: Path, records, schema, stats, model):
    norm = normalize_records(records, stats, schema)
    k = getattr(getattr(model, "cfg", None), "k", 0)
    return norm, build_history(norm, k)


def cmd_export_context(args) -> None:
    records, schema = _load_data(args.data)
    run = Path(args.run)
    model, spec, _, stats = _restore(run, schema)
    if spec.kind != "cnrm":
        raise ValueError("context export needs a cnrm run")
    norm, hist = _normalised_all(run, records, schema, stats, model)
    norm.sort(key=lambda r: (r.timestamp, r.query_id))
    _write(args.out, format_context_rows(export_context(model, norm, hist)))


def cmd_cluster(args) -> None:
    rows = parse_context_rows(Path(args.context).read_text())
    part = _read_partition(args.partition)
    train = np.stack([v for q, _, v in rows if part.get(q) == 0])
    km = kmeans_fit(train, args.n, args.seed)
    ids = kmeans_assign(km, np.stack([v for _, _, v in rows]))
    _write(args.out, "".join(f"{q}\t{int(c)}\n" for (q, _, _), c in zip(rows, ids)))
    if args.centroids:
        _write(args.centroids, json.dumps(km.to_dict(), indent=1) + "\n")


def _read_clusters(path) -> dict[str, int]:
    return _read_partition(path)


def cmd_train_gbdt(args) -> None:
    records, schema = _load_data(args.data)
    train, valid, _ = _split(records, _read_partition(args.partition))
    if args.context and not args.clusters:
        raise ValueError("--context on needs --clusters")
    clusters = _read_clusters(args.clusters) if args.context else None
    n = (max(clusters.values()) + 1) if clusters else 10
    n = args.n_clusters or n
    params = GbdtParams(seed=args.seed)
    model = gbdt_train(flatten_records(train, schema, clusters=clusters, n_clusters=n),
                       flatten_records(valid, schema, clusters=clusters, n_clusters=n), params)
    model.params["n_clusters"] = n if clusters else None
    model.save(args.out)
    print(f"{len(model.trees)} trees (best round {model.best_round})")


def _eval_scores(args, records, schema, context_records):
    """Scores for ``records``; CNRM histories are built over ``context_records``."""
    if args.baseline:
        return [baseline_scores(r, args.baseline, schema) for r in records]
    if args.gbdt:
        model = GbdtModel.load(args.gbdt)
        n = model.params.get("n_clusters")
        clusters = _read_clusters(args.clusters) if n else None
        flat = flatten_records(records, schema, clusters=clusters, n_clusters=n or 10)
        return gbdt_scores(model, flat)
    run = Path(args.run)
    model, _, _, stats = _restore(run, schema)
    _, hist = _normalised_all(run, context_records, schema, stats, model)
    return predict(model, normalize_records(records, stats, schema), hist)


def cmd_eval(args) -> None:
    records, schema = _load_data(args.data)
    everything = records
    if args.partition:
        records = _split(records, _read_partition(args.partition))[{"train": 0, "valid": 1, "test": 2}[args.part]]
    if sum(x is not None for x in (args.run, args.gbdt, args.baseline)) != 1:
        raise ValueError("give exactly one of --run, --gbdt, --baseline")
    cutoffs = []
    for m in args.metrics.split(","):
        name, _, k = m.strip().partition("@")
        if name.lower() != "ndcg" or not k.isdigit():
            raise ValueError(f"unsupported metric {m!r}")
        cutoffs.append(int(k))
    if args.labels == "true" and any(r.label_true is None for r in records):
        raise ValueError("dataset carries no true labels")
    scores = _eval_scores(args, records, schema, everything)
    lines = ["query_id\t" + "\t".join(f"ndcg@{k}" for k in cutoffs)]
    table = []
    for s, r in zip(scores, records):
        labels = r.label_true if args.labels == "true" else r.label_obs
        vals = [ndcg_from_scores(s, labels, k) for k in cutoffs]
        table.append(vals)
        lines.append(r.query_id + "\t" + "\t".join("nan" if np.isnan(v) else f"{v:.6f}" for v in vals))
    _write(args.out, "\n".join(lines) + "\n")
    arr = np.array(table).reshape(-1, len(cutoffs))
    print("\t".join(f"ndcg@{k}={mean_ndcg(arr[:, i]):.4f}" for i, k in enumerate(cutoffs)))


def _read_eval(path) -> tuple[list[str], dict[str, dict[str, float]]]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")[1:]
    vals = {}
    for line in lines[1:]:
        parts = line.split("\t")
        vals[parts[0]] = {h: float(v) for h, v in zip(header, parts[1:])}
    return header, vals


def cmd_compare(args) -> None:
    _, a = _read_eval(args.a)
    _, b = _read_eval(args.b)
    common = sorted(set(a) & set(b))
    if len(common) < 2:
        raise ValueError("need at least two shared query ids")
    xa = [a[q][args.metric] for q in common]
    xb = [b[q][args.metric] for q in common]
    t, p, rel = paired_ttest(xa, xb)
    print(f"{args.metric}\tA={mean_ndcg(xa):.4f}\tB={mean_ndcg(xb):.4f}\tt={t:.4f}\tp={p:.4g}\t"
          f"rel={100 * rel:+.2f}%" + ("\tsignificant" if p < 0.05 else ""))


def cmd_report(args) -> None:
    cfg = _config(args)
    if args.seed is not None:
        cfg.seed = args.seed
    report = run_experiment(cfg, cache_dir=args.cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "report.json", report_json(report))
    table = report_table(report)
    _write(out / "report.txt", table)
    print(table, end="")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxrank", description="Context-aware learning to rank toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help=f"experiment config JSON (default: ${CONFIG_ENV})")
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("simulate", help="generate a synthetic two-panel email-search log")
    with_config(s)
    s.add_argument("--users", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train NRM or CNRM")
    with_config(s)
    s.add_argument("--data", required=True)
    s.add_argument("--model", choices=["nrm", "cnrm"], required=True)
    s.add_argument("--unbiased", type=_on_off, default=True, metavar="on|off")
    s.add_argument("--ablation", default="full", choices=["full", "FQ", "FD", "FQD", "FD&FQD"])
    s.add_argument("--posemb", type=_on_off, default=True, metavar="on|off")
    s.add_argument("--substitute-qvec", type=_on_off, default=False, metavar="on|off")
    s.add_argument("--partition", choices=["time", "user"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)

    s = sub.add_parser("export-context", help="write c(q0) for every query of a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--run", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("cluster", help="k-means over exported context vectors")
    s.add_argument("--context", required=True)
    s.add_argument("--partition", required=True, help="partition.tsv of the train run (fit on train only)")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--centroids")

    s = sub.add_parser("train-gbdt", help="train LambdaMART, optionally with cluster features")
    s.add_argument("--data", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--context", type=_on_off, default=False, metavar="on|off")
    s.add_argument("--clusters")
    s.add_argument("--n-clusters", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="per-query NDCG of a model or baseline")
    s.add_argument("--data", required=True)
    s.add_argument("--partition", help="partition.tsv; restricts evaluation to --part")
    s.add_argument("--part", choices=["train", "valid", "test"], default="test")
    s.add_argument("--run")
    s.add_argument("--gbdt")
    s.add_argument("--clusters")
    s.add_argument("--baseline", choices=["bm25f", "recency"])
    s.add_argument("--metrics", default="ndcg@3,ndcg@5,ndcg@10")
    s.add_argument("--labels", choices=["obs", "true"], default="obs")
    s.add_argument("--out", required=True)

    s = sub.add_parser("compare", help="paired two-tailed t-test between two eval files")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--metric", default="ndcg@5")

    s = sub.add_parser("report", help="run a full experiment and write report.json / report.txt")
    with_config(s)
    s.add_argument("--cache", help="directory for trained-model reuse across reruns")
    s.add_argument("--out", required=True)
    return p


COMMANDS = {
    "simulate": cmd_simulate, "train": cmd_train, "export-context": cmd_export_context,
    "cluster": cmd_cluster, "train-gbdt": cmd_train_gbdt, "eval": cmd_eval,
    "compare": cmd_compare, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (StageError, ValueError, KeyError, IndexError, OSError, RuntimeError) as exc:
        print(f"ctxrank {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_STAGE[args.command]
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
