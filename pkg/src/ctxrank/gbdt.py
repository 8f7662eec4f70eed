"""LambdaMART: boosted regression trees fit to LambdaRank gradients."""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FeatureSchema, QueryRecord
from .kmeans import bundle_cluster_features
from .metrics import mean_ndcg, ndcg_from_scores

log = logging.getLogger(__name__)

BUNDLE_FEATURES = ("recency", "email_length", "bm25f")
_EPS = 1e-12


@dataclass
class GbdtParams:
    n_trees: int = 500
    max_leaves: int = 150
    shrinkage: float = 0.3
    early_stop: int = 30
    min_samples_leaf: int = 20
    truncation: int = 10
    valid_k: int = 5
    seed: int = 0


# ---------------------------------------------------------------- flat rows


@dataclass
class FlatData:
    X: np.ndarray  # [rows, features]
    y: np.ndarray
    group: np.ndarray  # row offsets per query, len = n_queries + 1
    query_ids: list[str]
    feature_names: list[str]

    @property
    def n_queries(self) -> int:
        return len(self.group) - 1

    def split_scores(self, scores: np.ndarray) -> list[np.ndarray]:
        return [scores[a:b] for a, b in zip(self.group[:-1], self.group[1:])]


def base_feature_names(schema: FeatureSchema) -> list[str]:
    def block(key, n):
        given = getattr(schema, f"{key}_names")
        return list(given) if given else [f"{key}{i}" for i in range(n)]

    return (block("q_cont", schema.q_cont_dim) + block("q_disc", len(schema.q_disc_cards))
            + block("d_cont", schema.d_cont_dim) + block("d_disc", len(schema.d_disc_cards))
            + block("qd_cont", schema.qd_cont_dim))


def bundle_feature_names(n_clusters: int, top=BUNDLE_FEATURES) -> list[str]:
    return [f"c{c}:{f}" for c in range(n_clusters) for f in top]


def flatten_records(records: Sequence[QueryRecord], schema: FeatureSchema, labels: str = "obs",
                    clusters: dict[str, int] | None = None, n_clusters: int = 10,
                    top=BUNDLE_FEATURES) -> FlatData:
    """One row per candidate: q_cont, q_disc (ordinal), d_cont, d_disc, qd_cont[, bundle]."""
    rows, ys, offsets = [], [], [0]
    locs = [schema.locate(f) for f in top] if clusters is not None else []
    for r in records:
        n = r.n_docs
        q = np.concatenate([r.q_cont, r.q_disc.astype(np.float64)])
        block = [np.broadcast_to(q, (n, len(q))), r.d_cont, r.d_disc.astype(np.float64), r.qd_cont]
        if clusters is not None:
            fl = np.stack([getattr(r, g)[:, c] for g, c in locs], axis=1)
            block.append(bundle_cluster_features(fl, clusters[r.query_id], n_clusters))
        rows.append(np.concatenate(block, axis=1))
        ys.append(r.label_true if labels == "true" else r.label_obs)
        offsets.append(offsets[-1] + n)
    names = base_feature_names(schema)
    if clusters is not None:
        names = names + bundle_feature_names(n_clusters, top)
    return FlatData(np.concatenate(rows).astype(np.float64), np.concatenate(ys).astype(np.float64),
                    np.array(offsets), [r.query_id for r in records], names)


# ---------------------------------------------------------------- lambdas


def _discounts(ranks: np.ndarray, truncation: int) -> np.ndarray:
    d = 1.0 / np.log2(ranks + 1.0)
    return np.where(ranks <= truncation, d, 0.0)


def lambdarank_gradients(scores, labels, truncation: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """``(lambda, weight)`` per document of one query group.

    ``lambda`` is the ascent direction: positive pushes a document up.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = len(s)
    lam = np.zeros(n)
    w = np.zeros(n)
    if n < 2 or np.all(y == y[0]):
        return lam, w
    gain = 2.0**y - 1.0
    ideal = np.sort(gain)[::-1]
    idcg = float(np.sum(ideal * _discounts(np.arange(1, n + 1), truncation)))
    if idcg <= 0:
        return lam, w
    order = np.argsort(-s, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(1, n + 1)
    disc = _discounts(ranks, truncation)
    better = y[:, None] > y[None, :]
    delta = np.abs((gain[:, None] - gain[None, :]) * (disc[:, None] - disc[None, :])) / idcg
    with np.errstate(over="ignore"):
        rho = 1.0 / (1.0 + np.exp(s[:, None] - s[None, :]))
    pair = np.where(better, rho * delta, 0.0)
    hess = np.where(better, rho * (1.0 - rho) * delta, 0.0)
    lam = pair.sum(axis=1) - pair.sum(axis=0)
    w = hess.sum(axis=1) + hess.sum(axis=0)
    return lam, w


def group_lambdas(scores: np.ndarray, data: FlatData, truncation: int = 10) -> tuple[np.ndarray, np.ndarray]:
    lam = np.zeros(len(scores))
    w = np.zeros(len(scores))
    for a, b in zip(data.group[:-1], data.group[1:]):
        lam[a:b], w[a:b] = lambdarank_gradients(scores[a:b], data.y[a:b], truncation)
    return lam, w


# ---------------------------------------------------------------- trees


@dataclass
class RegressionTree:
    """Array-encoded binary tree; ``feature[i] < 0`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add_node(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.feature) - 1

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f < 0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        node = np.zeros(len(X), dtype=np.int64)
        feat = np.array(self.feature)
        thr = np.array(self.threshold)
        left = np.array(self.left)
        right = np.array(self.right)
        active = feat[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = X[idx, feat[nd]] <= thr[nd]
            node[idx] = np.where(go_left, left[nd], right[nd])
            active[idx] = feat[node[idx]] >= 0
        return np.array(self.value)[node]

    def nodes(self) -> list[dict]:
        out = []
        for i in range(len(self.feature)):
            if self.feature[i] < 0:
                out.append({"id": i, "leaf": self.value[i]})
            else:
                out.append({"id": i, "feature": self.feature[i], "threshold": self.threshold[i],
                            "left": self.left[i], "right": self.right[i]})
        return out

    @classmethod
    def from_nodes(cls, nodes: list[dict]) -> "RegressionTree":
        t = cls()
        for i, nd in enumerate(sorted(nodes, key=lambda d: d["id"])):
            if nd["id"] != i:
                raise ValueError("tree node ids must be 0..n-1")
            t.add_node(nd.get("leaf", 0.0))
            if "feature" in nd:
                t.feature[i] = int(nd["feature"])
                t.threshold[i] = float(nd["threshold"])
                t.left[i] = int(nd["left"])
                t.right[i] = int(nd["right"])
        return t


def _best_split(sorted_idx: np.ndarray, Xcol_sorted: np.ndarray, g: np.ndarray, h: np.ndarray,
                G: float, H: float, min_leaf: int):
    """Best exact threshold on one feature: ``(gain, position)`` or ``None``."""
    n = len(sorted_idx)
    if n < 2 * min_leaf:
        return None
    gl = np.cumsum(g[sorted_idx])[:-1]
    hl = np.cumsum(h[sorted_idx])[:-1]
    valid = Xcol_sorted[1:] > Xcol_sorted[:-1]
    pos = np.arange(1, n)
    valid &= (pos >= min_leaf) & (n - pos >= min_leaf)
    if not valid.any():
        return None
    gr, hr = G - gl, H - hl
    gain = gl * gl / (hl + _EPS) + gr * gr / (hr + _EPS) - G * G / (H + _EPS)
    gain = np.where(valid, gain, -np.inf)
    i = int(np.argmax(gain))
    return float(gain[i]), i + 1


class _TreeBuilder:
    """Best-first (leaf-wise) growth with exact greedy split search.

    Each open leaf keeps, for every feature, its row indices in ascending
    feature order, so a split partitions those lists without re-sorting.
    """

    def __init__(self, X: np.ndarray, presorted: np.ndarray, max_leaves: int, min_leaf: int):
        self.X = X
        self.presorted = presorted  # [features, rows] int32
        self.max_leaves = max_leaves
        self.min_leaf = min_leaf

    def _evaluate(self, sorted_lists, g, h):
        rows = sorted_lists[0]
        G, H = float(g[rows].sum()), float(h[rows].sum())
        best = None
        for f, lst in enumerate(sorted_lists):
            res = _best_split(lst, self.X[lst, f], g, h, G, H, self.min_leaf)
            # strict improvement keeps the lowest feature index on ties
            if res is not None and res[0] > _EPS and (best is None or res[0] > best[0]):
                best = (res[0], f, res[1])
        return G, H, best

    def build(self, g: np.ndarray, h: np.ndarray) -> tuple[RegressionTree, np.ndarray, dict[int, float]]:
        """Returns the tree, the per-row fitted values and the split gain per feature."""
        tree = RegressionTree()
        lists = list(self.presorted)
        G, H, best = self._evaluate(lists, g, h)
        root = tree.add_node(G / (H + _EPS))
        heap = []
        counter = 0
        leaves = {root: lists}
        if best is not None:
            heapq.heappush(heap, (-best[0], counter, root, best))
        importance: dict[int, float] = {}
        n_leaves = 1
        go_left = np.zeros(len(self.X), dtype=bool)
        while heap and n_leaves < self.max_leaves:
            _, _, node, (gain, f, pos) = heapq.heappop(heap)
            lists = leaves.pop(node)
            lst = lists[f]
            vals = self.X[lst, f]
            thr = 0.5 * (vals[pos - 1] + vals[pos])
            if not vals[pos - 1] <= thr < vals[pos]:
                thr = float(vals[pos - 1])
            go_left[lst[:pos]] = True
            go_left[lst[pos:]] = False
            left_lists = [l[go_left[l]] for l in lists]
            right_lists = [l[~go_left[l]] for l in lists]
            importance[f] = importance.get(f, 0.0) + gain
            tree.feature[node] = f
            tree.threshold[node] = float(thr)
            for side, child_lists in (("left", left_lists), ("right", right_lists)):
                Gc, Hc, bc = self._evaluate(child_lists, g, h)
                child = tree.add_node(Gc / (Hc + _EPS))
                getattr(tree, side)[node] = child
                leaves[child] = child_lists
                if bc is not None:
                    counter += 1
                    heapq.heappush(heap, (-bc[0], counter, child, bc))
            n_leaves += 1
        fitted = np.zeros(len(self.X))
        for node, lists in leaves.items():
            fitted[lists[0]] = tree.value[node]
        return tree, fitted, importance


# ---------------------------------------------------------------- model


@dataclass
class GbdtModel:
    trees: list[RegressionTree] = field(default_factory=list)
    shrinkage: float = 0.3
    feature_names: list[str] = field(default_factory=list)
    gain: dict[int, float] = field(default_factory=dict)  # split gain per feature index
    tree_gains: list[dict[int, float]] = field(default_factory=list)
    valid_curve: list[float] = field(default_factory=list)
    best_round: int = 0
    params: dict = field(default_factory=dict)

    def predict(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.zeros(len(X))
        for tree in self.trees[: len(self.trees) if n_trees is None else n_trees]:
            out += self.shrinkage * tree.predict(X)
        return out

    def to_text(self) -> str:
        doc = {
            "format": "ctxrank-gbdt v1",
            "shrinkage": self.shrinkage,
            "best_round": self.best_round,
            "params": self.params,
            "feature_names": self.feature_names,
            "valid_curve": self.valid_curve,
            "trees": [{"gain": {str(k): v for k, v in sorted(g.items())}, "nodes": t.nodes()}
                      for t, g in zip(self.trees, self.tree_gains)],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GbdtModel":
        doc = json.loads(text)
        if doc.get("format") != "ctxrank-gbdt v1":
            raise ValueError("not a ctxrank gbdt model")
        m = cls(shrinkage=float(doc["shrinkage"]), feature_names=list(doc["feature_names"]),
                valid_curve=list(doc.get("valid_curve", [])), best_round=int(doc.get("best_round", 0)),
                params=dict(doc.get("params", {})))
        for t in doc["trees"]:
            m.trees.append(RegressionTree.from_nodes(t["nodes"]))
            g = {int(k): float(v) for k, v in t.get("gain", {}).items()}
            m.tree_gains.append(g)
            for k, v in g.items():
                m.gain[k] = m.gain.get(k, 0.0) + v
        return m

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "GbdtModel":
        return cls.from_text(Path(path).read_text())


def _presort(X: np.ndarray) -> np.ndarray:
    return np.stack([np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]).astype(np.int32)


def _ndcg(scores: np.ndarray, data: FlatData, k: int) -> float:
    return mean_ndcg([ndcg_from_scores(s, y, k) for s, y in zip(data.split_scores(scores), data.split_scores(data.y))])


def gbdt_train(train: FlatData, valid: FlatData | None, params: GbdtParams | None = None) -> GbdtModel:
    """Boost up to ``n_trees`` rounds; early stop on validation NDCG and keep the best prefix."""
    p = params or GbdtParams()
    model = GbdtModel(shrinkage=p.shrinkage, feature_names=list(train.feature_names), params=asdict(p))
    builder = _TreeBuilder(train.X, _presort(train.X), p.max_leaves, p.min_samples_leaf)
    f_train = np.zeros(len(train.y))
    f_valid = np.zeros(len(valid.y)) if valid is not None else None
    best = -np.inf
    for rnd in range(1, p.n_trees + 1):
        lam, w = group_lambdas(f_train, train, p.truncation)
        tree, fitted, gains = builder.build(lam, w)
        model.trees.append(tree)
        model.tree_gains.append(gains)
        f_train += p.shrinkage * fitted
        if valid is None:
            model.best_round = rnd
            continue
        f_valid += p.shrinkage * tree.predict(valid.X)
        metric = _ndcg(f_valid, valid, p.valid_k)
        model.valid_curve.append(metric)
        if metric > best:
            best, model.best_round = metric, rnd
        log.info("round %d leaves %d valid ndcg@%d %.4f", rnd, tree.n_leaves, p.valid_k, metric)
        if rnd - model.best_round >= p.early_stop:
            break
    model.trees = model.trees[: model.best_round]
    model.tree_gains = model.tree_gains[: model.best_round]
    for g in model.tree_gains:
        for k, v in g.items():
            model.gain[k] = model.gain.get(k, 0.0) + v
    return model


def feature_importance(model: GbdtModel) -> dict:
    """Split-gain shares per feature, plus per-cluster-block totals for bundled columns."""
    names = model.feature_names
    total = sum(model.gain.values())
    shares = {n: 0.0 for n in names}
    if total > 0:
        for i, v in model.gain.items():
            shares[names[i]] += v / total
    blocks: dict[str, float] = {}
    for n, v in shares.items():
        if n.startswith("c") and ":" in n:
            block = n.split(":", 1)[0]
            blocks[block] = blocks.get(block, 0.0) + v
    return {"features": shares, "cluster_blocks": blocks}


def gbdt_scores(model: GbdtModel, data: FlatData) -> list[np.ndarray]:
    return data.split_scores(model.predict(data.X))
