"""End-to-end experiment pipeline: simulate, partition, train, cluster, evaluate, compare."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .context import CNRM, ContextConfig, export_context
from .data import QueryRecord, build_history, fit_normalization, normalize_records, split_by_time, split_by_user
from .encoder import NRM
from .gbdt import GbdtParams, feature_importance, flatten_records, gbdt_scores, gbdt_train
from .kmeans import kmeans_assign, kmeans_fit
from .metrics import baseline_scores, mean_ndcg, ndcg_from_scores, paired_ttest, user_cluster_distribution
from .simulator import SimConfig, generate_log
from .unbiased import ExaminationModel, TrainConfig, TrainResult, predict, train_dual

log = logging.getLogger(__name__)

CACHE_VERSION = "2"

DEFAULT_MODELS = [
    {"name": "NRM", "kind": "nrm"},
    {"name": "CNRM", "kind": "cnrm"},
]


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class _stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


# ---------------------------------------------------------------- config


@dataclass
class ModelSpec:
    name: str
    kind: str = "nrm"
    unbiased: bool = True
    ablation: str = "full"
    pos_emb: bool = True
    substitute_qvec: bool = False

    def __post_init__(self):
        if self.kind not in ("nrm", "cnrm"):
            raise ValueError(f"model kind must be nrm or cnrm, got {self.kind!r}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    simulator: dict = field(default_factory=dict)
    partition: str = "time"
    trainer: dict = field(default_factory=lambda: {"warmup_steps": 200, "weight_clip": 2.0})
    context: dict = field(default_factory=dict)
    models: list[ModelSpec] = field(default_factory=lambda: [ModelSpec(**m) for m in DEFAULT_MODELS])
    baselines: list[str] = field(default_factory=lambda: ["bm25f", "recency"])
    gbdt: dict = field(default_factory=lambda: {"enabled": False})
    metrics: dict = field(default_factory=lambda: {"cutoffs": [3, 5, 10], "reference": "NRM"})
    name: str = "experiment"

    def __post_init__(self):
        if self.partition not in ("time", "user"):
            raise ValueError("partition must be exactly one of 'time' or 'user'")
        self.models = [m if isinstance(m, ModelSpec) else ModelSpec(**m) for m in self.models]
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError("model names must be unique")
        self.metrics = {"cutoffs": [3, 5, 10], "reference": "NRM", **self.metrics}
        if any(int(k) <= 0 for k in self.metrics["cutoffs"]):
            raise ValueError("metric cutoffs must be positive")
        ctx = self.gbdt.get("context_model")
        if self.gbdt.get("enabled") and ctx is not None:
            spec = next((m for m in self.models if m.name == ctx), None)
            if spec is None or spec.kind != "cnrm":
                raise ValueError(f"gbdt context_model {ctx!r} must name a cnrm model of the config")
        # fail early on bad blocks
        self.sim_config()
        self.train_config()
        self.context_config(ModelSpec("probe", "cnrm"))

    def sim_config(self) -> SimConfig:
        return SimConfig(**{**self.simulator, "seed": self.seed})

    def train_config(self, unbiased: bool = True) -> TrainConfig:
        return TrainConfig(**{**self.trainer, "seed": self.seed, "unbiased": unbiased})

    def context_config(self, spec: ModelSpec) -> ContextConfig:
        return ContextConfig(**{**self.context, "ablation": spec.ablation, "pos_emb": spec.pos_emb,
                                "substitute_qvec": spec.substitute_qvec})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["models"] = [asdict(m) for m in self.models]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config blocks: {sorted(extra)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def hash(self) -> str:
        return _digest(self.to_dict())


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=_jsonable).encode()).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not serialisable: {type(x).__name__}")


# ---------------------------------------------------------------- data preparation


@dataclass
class Prepared:
    schema: object
    truth: object
    raw: tuple[list[QueryRecord], list[QueryRecord], list[QueryRecord]]
    norm: tuple[list[QueryRecord], list[QueryRecord], list[QueryRecord]]
    stats: list
    histories: dict
    k: int


def partition(records: Sequence[QueryRecord], scheme: str, seed: int):
    if scheme == "time":
        return split_by_time(records)
    if scheme == "user":
        return split_by_user(records, seed)
    raise ValueError(f"unknown partition {scheme!r}")


def prepare_from_records(records, schema, truth, scheme: str, seed: int, k: int) -> Prepared:
    raw = partition(records, scheme, seed)
    st = fit_normalization(raw[0])
    norm = tuple(normalize_records(p, st, schema) for p in raw)
    histories = build_history([r for p in norm for r in p], k)
    return Prepared(schema, truth, raw, norm, st, histories, k)


def prepare(cfg: ExperimentConfig) -> Prepared:
    with _stage("simulate"):
        records, schema, truth = generate_log(cfg.sim_config())
    with _stage("partition"):
        return prepare_from_records(records, schema, truth, cfg.partition, cfg.seed,
                                    cfg.context_config(ModelSpec("probe", "cnrm")).k)


# ---------------------------------------------------------------- models


def build_model(spec: ModelSpec, schema, cfg: ExperimentConfig):
    if spec.kind == "nrm":
        return NRM(schema, seed=cfg.seed)
    return CNRM(schema, cfg.context_config(spec), seed=cfg.seed)


def _model_key(spec: ModelSpec, cfg: ExperimentConfig) -> str:
    # resolved dataclasses, so a changed library default never reuses a stale checkpoint
    return _digest({
        "v": CACHE_VERSION, "seed": cfg.seed, "simulator": asdict(cfg.sim_config()), "partition": cfg.partition,
        "trainer": asdict(cfg.train_config(spec.unbiased)),
        "context": asdict(cfg.context_config(spec)) if spec.kind == "cnrm" else None,
        "spec": {**asdict(spec), "name": None},
    })


def train_model(spec: ModelSpec, prep: Prepared, cfg: ExperimentConfig, cache_dir=None):
    """Train (or load from ``cache_dir``) one ranker; returns ``(model, exam, curve_tsv)``."""
    model = build_model(spec, prep.schema, cfg)
    exam = ExaminationModel(hidden=model.encoder.m, seed=cfg.seed + 2) if spec.unbiased else None
    if cache_dir is not None:
        d = Path(cache_dir) / _model_key(spec, cfg)
        if (d / "model.ckpt").exists():
            T.load_into(model.store, T.load_checkpoint(d / "model.ckpt")[0])
            if exam is not None:
                T.load_into(exam.store, T.load_checkpoint(d / "exam.ckpt")[0])
            return model, exam, (d / "curve.tsv").read_text()
    train, valid, _ = prep.norm
    result: TrainResult
    result, exam = train_dual(model, train, valid, cfg.train_config(spec.unbiased), prep.histories, exam)
    curve = result.curve_tsv()
    if cache_dir is not None:
        d.mkdir(parents=True, exist_ok=True)
        if exam is not None:
            T.save_checkpoint(exam.store, d / "exam.ckpt")
        (d / "curve.tsv").write_text(curve)
        T.save_checkpoint(model.store, d / "model.ckpt", {"name": spec.name, "kind": spec.kind})
    return model, exam, curve


# ---------------------------------------------------------------- evaluation


@dataclass
class RunResult:
    name: str
    kind: str
    seed: int
    config_hash: str
    query_ids: list[str]
    ndcg: dict[str, np.ndarray]  # "true@5" -> per-query values (NaN = excluded)

    def mean(self, key: str) -> float:
        return mean_ndcg(self.ndcg[key])


def per_query_ndcg(scores: Sequence[np.ndarray], records: Sequence[QueryRecord], cutoffs, labels=("true", "obs")):
    out = {}
    for lab in labels:
        for k in cutoffs:
            out[f"{lab}@{k}"] = np.array([
                ndcg_from_scores(s, r.label_true if lab == "true" else r.label_obs, int(k))
                for s, r in zip(scores, records)
            ])
    return out


def propensity_curve(exam: ExaminationModel, records: Sequence[QueryRecord], max_rank: int = 10):
    """Mean examination score per relevance-panel position over the candidates of ``records``."""
    pr = np.concatenate([r.pos_r for r in records])
    pt = np.concatenate([r.pos_t for r in records])
    with T.no_grad():
        s = exam.score(pr, pt).data.astype(np.float64)
    ranks = list(range(1, max_rank + 1))
    means = [float(s[pr == p].mean()) if np.any(pr == p) else float("nan") for p in ranks]
    rho = stats.spearmanr(ranks, means).statistic
    return {"positions": ranks, "mean_score": means, "spearman": float(rho)}


def _compare(a: RunResult, b: RunResult, keys) -> dict:
    out = {}
    for key in keys:
        t, p, rel = paired_ttest(a.ndcg[key], b.ndcg[key])
        out[key] = {"t": t, "p": p, "rel_improvement": rel, "significant": bool(p < 0.05)}
    return out


def run_experiment(cfg: ExperimentConfig, cache_dir=None) -> dict:
    """Full pipeline; returns the machine-readable report plus per-query results under ``runs``."""
    chash = cfg.hash()
    prep = prepare(cfg)
    test_raw, test = prep.raw[2], prep.norm[2]
    cutoffs = [int(k) for k in cfg.metrics["cutoffs"]]
    keys = [f"{lab}@{k}" for lab in ("true", "obs") for k in cutoffs]
    qids = [r.query_id for r in test]
    runs: dict[str, RunResult] = {}
    extras: dict = {"propensity": {}, "curves": {}}
    models: dict = {}

    with _stage("baselines"):
        for b in cfg.baselines:
            scores = [baseline_scores(r, b, prep.schema) for r in test_raw]
            runs[b] = RunResult(b, "baseline", cfg.seed, chash, qids, per_query_ndcg(scores, test_raw, cutoffs))

    for spec in cfg.models:
        with _stage(f"train:{spec.name}"):
            model, exam, curve = train_model(spec, prep, cfg, cache_dir)
            models[spec.name] = model
            extras["curves"][spec.name] = curve
        with _stage(f"evaluate:{spec.name}"):
            scores = predict(model, test, prep.histories)
            runs[spec.name] = RunResult(spec.name, spec.kind, cfg.seed, chash, qids,
                                        per_query_ndcg(scores, test, cutoffs))
            if exam is not None:
                extras["propensity"][spec.name] = propensity_curve(exam, prep.norm[0])

    gb = cfg.gbdt
    if gb.get("enabled"):
        params = GbdtParams(**{**gb.get("params", {}), "seed": cfg.seed})
        train_raw, valid_raw, _ = prep.raw
        with _stage("gbdt:plain"):
            m = gbdt_train(flatten_records(train_raw, prep.schema), flatten_records(valid_raw, prep.schema), params)
            ft = flatten_records(test_raw, prep.schema)
            runs["LambdaMART"] = RunResult("LambdaMART", "gbdt", cfg.seed, chash, qids,
                                           per_query_ndcg(gbdt_scores(m, ft), test_raw, cutoffs))
            extras["gbdt_plain_trees"] = len(m.trees)
        ctx_name = gb.get("context_model")
        if ctx_name is not None:
            n = int(gb.get("n_clusters", 10))
            with _stage("export-context"):
                rows = [export_context(models[ctx_name], p, prep.histories) for p in prep.norm]
            with _stage("cluster"):
                km = kmeans_fit(np.stack([v for _, _, v in rows[0]]), n, cfg.seed)
                clusters = {}
                for part in rows:
                    ids = kmeans_assign(km, np.stack([v for _, _, v in part]))
                    clusters.update({q: int(c) for (q, _, _), c in zip(part, ids)})
                extras["user_clusters"] = {
                    k: v for k, v in user_cluster_distribution(
                        [(u, clusters[q]) for part in rows for q, u, _ in part]).items() if k.endswith(("hist", "edges"))
                }
            with _stage("gbdt:context"):
                m2 = gbdt_train(flatten_records(train_raw, prep.schema, clusters=clusters, n_clusters=n),
                                flatten_records(valid_raw, prep.schema, clusters=clusters, n_clusters=n), params)
                ft2 = flatten_records(test_raw, prep.schema, clusters=clusters, n_clusters=n)
                name = f"LambdaMART+{ctx_name}"
                runs[name] = RunResult(name, "gbdt", cfg.seed, chash, qids,
                                       per_query_ndcg(gbdt_scores(m2, ft2), test_raw, cutoffs))
                extras["gbdt_context_trees"] = len(m2.trees)
                extras["gbdt_importance"] = feature_importance(m2)

    with _stage("compare"):
        report = build_report(cfg, runs, keys, extras)
    report["runs"] = runs
    return report


def cached_report(cfg: ExperimentConfig, cache_dir) -> dict:
    """``run_experiment`` keyed on the config hash; returns the report body (no per-query runs)."""
    key = _digest({"config": cfg.to_dict(), "simulator": asdict(cfg.sim_config()),
                   "trainer": asdict(cfg.train_config()), "gbdt": asdict(GbdtParams(**cfg.gbdt.get("params", {})))})
    path = Path(cache_dir) / "reports" / f"v{CACHE_VERSION}-{key}.json"
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    text = report_json(run_experiment(cfg, cache_dir))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return json.loads(text)


def build_report(cfg: ExperimentConfig, runs: dict[str, RunResult], keys, extras) -> dict:
    ref = cfg.metrics["reference"]
    comparisons = {}
    if ref in runs:
        for name, r in runs.items():
            if name != ref:
                comparisons[f"{name} vs {ref}"] = _compare(r, runs[ref], keys)
    if "LambdaMART" in runs:
        for name, r in runs.items():
            if name.startswith("LambdaMART+"):
                comparisons[f"{name} vs LambdaMART"] = _compare(r, runs["LambdaMART"], keys)
    body = {
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "n_test_queries": len(next(iter(runs.values())).query_ids) if runs else 0,
        "means": {name: {k: r.mean(k) for k in keys} for name, r in runs.items()},
        "comparisons": comparisons,
        "propensity": extras.get("propensity", {}),
        "gbdt": {k: v for k, v in extras.items() if k.startswith("gbdt")},
        "user_clusters": extras.get("user_clusters"),
    }
    body = json.loads(json.dumps(body, default=_jsonable))
    body["report_hash"] = _digest(body)
    return body


def report_json(report: dict) -> str:
    body = {k: v for k, v in report.items() if k != "runs"}
    return json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n"


def report_table(report: dict) -> str:
    """Human-readable table: true-label NDCG per model, deltas against the reference."""
    cfg = report["config"]
    ref = cfg["metrics"]["reference"]
    cutoffs = cfg["metrics"]["cutoffs"]
    lines = [f"config {report['config_hash']}  report {report['report_hash']}  seed {cfg['seed']}  "
             f"partition {cfg['partition']}  test queries {report['n_test_queries']}"]
    header = "model".ljust(24) + "".join(f"NDCG@{k}".rjust(10) + "delta".rjust(10) for k in cutoffs)
    lines += [header, "-" * len(header)]
    # config order, so a report read back from sorted JSON prints the same table
    first = list(cfg.get("baselines", [])) + [m["name"] for m in cfg.get("models", [])]
    names = [n for n in first if n in report["means"]]
    names += sorted(n for n in report["means"] if n not in names)
    for name in names:
        means = report["means"][name]
        cmp_key = f"{name} vs {ref}" if not name.startswith("LambdaMART+") else f"{name} vs LambdaMART"
        cmp = report["comparisons"].get(cmp_key)
        row = name.ljust(24)
        for k in cutoffs:
            row += f"{means[f'true@{k}']:.4f}".rjust(10)
            if cmp is None:
                row += "".rjust(10)
            else:
                c = cmp[f"true@{k}"]
                row += (f"{100 * c['rel_improvement']:+.2f}%" + ("*" if c["significant"] else " ")).rjust(10)
        lines.append(row)
    lines.append(f"* paired two-tailed t-test p<0.05 against {ref} (LambdaMART+ rows: against LambdaMART)")
    for name, pc in report.get("propensity", {}).items():
        lines.append(f"{name} examination score by pos_r 1..10: spearman {pc['spearman']:+.3f}")
    return "\n".join(lines) + "\n"
