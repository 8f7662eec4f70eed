"""NDCG, paired significance tests, heuristic baselines and cluster statistics."""

from __future__ import annotations

import math
import warnings
from collections import Counter, defaultdict
from typing import Sequence

import numpy as np
from scipy import stats

from .data import FeatureSchema, QueryRecord, SchemaError


def dcg_at_k(grades: Sequence[int], k: int) -> float:
    g = np.asarray(grades, dtype=np.float64)[:k]
    if g.size == 0:
        return 0.0
    discounts = np.log2(np.arange(2, g.size + 2))
    return float(np.sum((2.0**g - 1.0) / discounts))


def ndcg_at_k(grades: Sequence[int], k: int) -> float:
    """NDCG of grades listed in ranked order; NaN when no grade is positive.

    The NaN sentinel marks queries that aggregate means must skip.
    """
    if k <= 0:
        raise ValueError(f"cutoff must be positive, got {k}")
    ideal = dcg_at_k(sorted(grades, reverse=True), k)
    if ideal == 0.0:
        return float("nan")
    return dcg_at_k(grades, k) / ideal


def rank_by_scores(scores: np.ndarray, tiebreak: Sequence | None = None) -> np.ndarray:
    """Indices sorted by descending score; ties keep ``tiebreak`` (or input) order."""
    scores = np.asarray(scores, dtype=np.float64)
    if tiebreak is None:
        return np.argsort(-scores, kind="stable")
    return np.array(sorted(range(len(scores)), key=lambda i: (-scores[i], tiebreak[i])), dtype=np.int64)


def ndcg_from_scores(scores: np.ndarray, grades: np.ndarray, k: int) -> float:
    order = rank_by_scores(scores)
    return ndcg_at_k(np.asarray(grades)[order], k)


def padded_ndcg(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    """Per-query NDCG@k for ``[B, N]`` arrays (NaN for all-zero queries)."""
    out = np.empty(len(scores))
    for b in range(len(scores)):
        m = mask[b]
        out[b] = ndcg_from_scores(scores[b][m], labels[b][m], k)
    return out


def mean_ndcg(values: Sequence[float]) -> float:
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


# ---------------------------------------------------------------- significance


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    """Two-tailed paired t-test of ``a`` against ``b``.

    Returns ``(t, p, mean relative improvement of a over b)``. Pairs where
    either side is NaN are dropped. Zero-variance differences give ``p = 1``
    for equal means and ``p = 0`` (with a warning) otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    keep = ~(np.isnan(a) | np.isnan(b))
    a, b = a[keep], b[keep]
    if a.size < 2:
        raise ValueError("paired t-test needs at least two pairs")
    mb = b.mean()
    rel = (a.mean() - mb) / abs(mb) if mb != 0 else float("inf") * np.sign(a.mean() - mb)
    diff = a - b
    if np.all(diff == diff[0]):
        if diff[0] == 0:
            return 0.0, 1.0, 0.0
        warnings.warn("zero-variance paired differences with nonzero mean; p set to 0", RuntimeWarning)
        return math.copysign(float("inf"), diff[0]), 0.0, float(rel)
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue), float(rel)


# ---------------------------------------------------------------- baselines

BASELINES = {"bm25f": "bm25f", "recency": "recency"}


def baseline_scores(rec: QueryRecord, criterion: str, schema: FeatureSchema) -> np.ndarray:
    """Single-feature heuristic score; larger is ranked higher.

    ``recency`` is stored as age (days since the email arrived), so its score
    is the negated age.
    """
    if criterion not in BASELINES:
        raise ValueError(f"unknown baseline {criterion!r}")
    group, col = schema.locate(BASELINES[criterion])
    if group not in ("d_cont", "qd_cont"):
        raise SchemaError(f"baseline feature {criterion!r} must be a candidate-level column")
    values = getattr(rec, group)[:, col]
    return -values if criterion == "recency" else values


def baseline_rank(rec: QueryRecord, criterion: str, schema: FeatureSchema) -> list[int]:
    scores = baseline_scores(rec, criterion, schema)
    return rank_by_scores(scores, tiebreak=rec.doc_ids).tolist()


# ---------------------------------------------------------------- cluster analysis


def user_cluster_distribution(rows: Sequence[tuple[str, int]], bins: int = 10) -> dict:
    """Per-user distinct-cluster counts and entropies, each in equal-width bins.

    ``rows`` are ``(user_id, cluster_id)`` pairs, one per query.
    """
    by_user: dict[str, Counter] = defaultdict(Counter)
    for user, cluster in rows:
        by_user[user][int(cluster)] += 1
    users = sorted(by_user)
    counts = np.array([len(by_user[u]) for u in users], dtype=np.float64)
    entropies = []
    for u in users:
        freq = np.array(list(by_user[u].values()), dtype=np.float64)
        p = freq / freq.sum()
        entropies.append(float(-(p * np.log2(p)).sum()) + 0.0)
    entropies = np.array(entropies)
    count_hist, count_edges = np.histogram(counts, bins=bins)
    ent_hist, ent_edges = np.histogram(entropies, bins=bins)
    return {
        "users": users,
        "unique_clusters": counts.astype(int).tolist(),
        "entropy": entropies.tolist(),
        "count_hist": count_hist.tolist(),
        "count_edges": count_edges.tolist(),
        "entropy_hist": ent_hist.tolist(),
        "entropy_edges": ent_edges.tolist(),
    }
