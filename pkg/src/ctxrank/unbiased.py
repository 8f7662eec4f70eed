"""List-wise losses, the two-panel examination model and dual unbiased training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .batch import Batch, make_batch
from .data import QueryRecord, UserHistory
from .metrics import mean_ndcg, ndcg_from_scores

log = logging.getLogger(__name__)

NEG_INF = -1e9
MAX_POSITION = 50


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 10
    lr: float = 0.002
    warmup_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 1e-5
    unbiased: bool = True
    weight_clip: float = 10.0
    seed: int = 0
    eval_every: int = 0  # steps between validations; 0 = once per epoch
    valid_k: int = 5

    def __post_init__(self):
        for name in ("batch_size", "epochs", "lr", "warmup_steps", "weight_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def noam_lr(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to ``base_lr`` then inverse-square-root decay."""
    step = max(step, 1)
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


# ---------------------------------------------------------------- examination model


class ExaminationModel:
    """Position-only propensity scorer over (relevance, time) panel ranks."""

    def __init__(self, hidden: int = 64, max_position: int = MAX_POSITION, seed: int = 0):
        rng = np.random.default_rng(seed)
        m = hidden
        self.max_position = max_position
        self.store = T.ParameterStore()
        s = self.store
        s.add("exam.emb_r", T.uniform_init(rng, (max_position, m), m), decay=False)
        s.add("exam.emb_t", T.uniform_init(rng, (max_position, m), m), decay=False)
        s.add("exam.W_p1", T.uniform_init(rng, (m, 2 * m), 2 * m))
        s.add("exam.b_p1", np.zeros(m))
        s.add("exam.W_p2", T.uniform_init(rng, (1, m), m))
        s.add("exam.b_p2", np.zeros(1))

    def score(self, pos_r, pos_t) -> T.Tensor:
        """``W_p2 tanh(W_p1 [emb(pos_r); emb(pos_t)])``, same shape as the inputs."""
        pos_r = np.asarray(pos_r, dtype=np.int64)
        pos_t = np.asarray(pos_t, dtype=np.int64)
        s = self.store
        er = T.embedding_lookup(s["exam.emb_r"], pos_r - 1, name="exam.emb_r")
        et = T.embedding_lookup(s["exam.emb_t"], pos_t - 1, name="exam.emb_t")
        h = T.tanh(T.linear(T.concat([er, et], axis=-1), s["exam.W_p1"], s["exam.b_p1"]))
        out = T.linear(h, s["exam.W_p2"], s["exam.b_p2"])
        return T.reshape(out, out.shape[:-1])

    def scores(self, batch: Batch) -> T.Tensor:
        return self.score(batch.pos_r, batch.pos_t)


# ---------------------------------------------------------------- losses


def _as_2d(x, mask):
    x = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 1:
        x = T.reshape(x, (1, -1))
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    return x, np.atleast_2d(mask)


def _masked_log_softmax(scores: T.Tensor, mask: np.ndarray) -> T.Tensor:
    return T.log_softmax(scores + np.where(mask, 0.0, NEG_INF), axis=-1)


def listwise_loss(scores, labels, mask=None) -> T.Tensor:
    """Softmax cross-entropy ``-sum y log softmax(s)``, averaged over lists."""
    scores, mask = _as_2d(scores, mask)
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64)) * mask
    ll = _masked_log_softmax(scores, mask)
    return T.sum(T.mul(ll, -y)) * (1.0 / scores.shape[0])


def relative_propensity_weights(other_scores: np.ndarray, pos_r: np.ndarray, mask: np.ndarray,
                                clip: float | None = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``g(d_r1) / g(d)`` with ``g`` the masked softmax of ``other_scores``.

    Returns ``(weights [B, N], has_ref [B])``; lists without a ``pos_r == 1``
    document get zero weight.
    """
    s = np.where(mask, np.asarray(other_scores, dtype=np.float64), -np.inf)
    ref = (np.asarray(pos_r) == 1) & mask
    has_ref = ref.any(axis=1)
    ref_score = np.where(has_ref, np.where(ref, s, -np.inf).max(axis=1), 0.0)
    log_ratio = ref_score[:, None] - np.where(mask, s, 0.0)
    if clip is not None:
        log_ratio = np.minimum(log_ratio, math.log(clip))
    w = np.exp(log_ratio) * mask * has_ref[:, None]
    return w, has_ref


def weighted_listwise_loss(scores: T.Tensor, labels, weights, mask) -> T.Tensor:
    scores, mask = _as_2d(scores, mask)
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64)) * np.atleast_2d(weights) * mask
    ll = _masked_log_softmax(scores, mask)
    return T.sum(T.mul(ll, -y)) * (1.0 / scores.shape[0])


def ipw_ranking_loss(s_r, s_e, labels, pos_r, mask=None, clip: float | None = 10.0):
    """Ranking loss with inverse-propensity weights taken from ``s_e`` (held constant).

    Returns ``(loss, n_skipped)``.
    """
    s_r, mask = _as_2d(s_r, mask)
    se = s_e.data if isinstance(s_e, T.Tensor) else np.asarray(s_e, dtype=np.float64)
    w, has_ref = relative_propensity_weights(np.atleast_2d(se), np.atleast_2d(pos_r), mask, clip)
    return weighted_listwise_loss(s_r, labels, w, mask), int((~has_ref).sum())


def examination_loss(s_r, s_e, labels, pos_r, mask=None, clip: float | None = 10.0):
    """The ranking loss with the two score lists swapped."""
    return ipw_ranking_loss(s_e, s_r, labels, pos_r, mask, clip)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    best_metric: float
    best_step: int
    curve: list[dict] = field(default_factory=list)
    skipped: int = 0
    steps: int = 0

    def curve_tsv(self) -> str:
        lines = ["step\tL_r\tL_e\tlr\tvalid_ndcg@5"]
        for row in self.curve:
            v = row.get("valid")
            lines.append(
                f"{row['step']}\t{row['L_r']:.6f}\t{row['L_e']:.6f}\t{row['lr']:.8f}\t"
                + ("" if v is None else f"{v:.6f}")
            )
        return "\n".join(lines) + "\n"


def predict(model, records: Sequence[QueryRecord], histories: dict[str, UserHistory] | None = None,
            chunk: int = 256) -> list[np.ndarray]:
    """Per-record score arrays (no gradient, dropout off)."""
    k = getattr(getattr(model, "cfg", None), "k", 0)
    out = []
    prev = model.train_rng
    model.train_rng = None
    try:
        with T.no_grad():
            for i in range(0, len(records), chunk):
                recs = records[i : i + chunk]
                batch = make_batch(recs, histories if model.kind == "cnrm" else None, k)
                s = model.scores(batch).data
                out.extend(s[b, : r.n_docs].astype(np.float64) for b, r in enumerate(recs))
    finally:
        model.train_rng = prev
    return out


def evaluate_ndcg(model, records, histories=None, k: int = 5, use_true: bool = False) -> np.ndarray:
    scores = predict(model, records, histories)
    vals = []
    for s, r in zip(scores, records):
        labels = r.label_true if use_true else r.label_obs
        vals.append(ndcg_from_scores(s, labels, k))
    return np.array(vals)


def train_dual(model, train: Sequence[QueryRecord], valid: Sequence[QueryRecord], cfg: TrainConfig,
               histories: dict[str, UserHistory] | None = None,
               exam: ExaminationModel | None = None) -> tuple[TrainResult, ExaminationModel | None]:
    """Alternating-free dual optimisation: both models step on every batch.

    The ranking model descends the propensity-weighted loss, the examination
    model the swapped loss; each side's weights are constants for the other.
    With ``cfg.unbiased`` false all weights are 1 and no examination model is
    trained. The best validation (observed-label NDCG) parameters are restored.
    """
    if model.kind == "cnrm" and histories is None:
        raise ValueError("CNRM training needs user histories")
    hist = histories if model.kind == "cnrm" else None
    k = getattr(getattr(model, "cfg", None), "k", 0)
    rng = np.random.default_rng(cfg.seed)
    model.train_rng = np.random.default_rng(cfg.seed + 1)
    if cfg.unbiased and exam is None:
        exam = ExaminationModel(hidden=model.encoder.m, seed=cfg.seed + 2)
    train = list(train)
    n_batches = math.ceil(len(train) / cfg.batch_size)
    total = n_batches * cfg.epochs
    if cfg.warmup_steps >= total:
        log.warning("warmup_steps %d >= total steps %d", cfg.warmup_steps, total)
    eval_every = cfg.eval_every or n_batches
    result = TrainResult(best_metric=-1.0, best_step=0)
    best = model.store.snapshot()
    best_exam = exam.store.snapshot() if exam is not None else None
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for bi in range(n_batches):
            recs = [train[i] for i in order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]]
            batch = make_batch(recs, hist, k)
            step += 1
            lr = noam_lr(step, cfg.lr, cfg.warmup_steps)
            model.store.zero_grad()
            s_r = model.scores(batch)
            if cfg.unbiased:
                exam.store.zero_grad()
                s_e = exam.scores(batch)
                l_r, skipped = ipw_ranking_loss(s_r, s_e, batch.labels, batch.pos_r, batch.mask, cfg.weight_clip)
                l_e, _ = examination_loss(s_r, s_e, batch.labels, batch.pos_r, batch.mask, cfg.weight_clip)
                result.skipped += skipped
                T.backward(l_r + l_e)
            else:
                l_r = listwise_loss(s_r, batch.labels, batch.mask)
                l_e = T.Tensor(0.0)
                T.backward(l_r)
            if not (np.isfinite(l_r.data) and np.isfinite(l_e.data)):
                raise DivergenceError(f"loss diverged at step {step}: L_r={l_r.item()} L_e={l_e.item()} lr={lr}")
            T.adam_step(model.store, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.l2)
            if cfg.unbiased:
                T.adam_step(exam.store, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.l2)
            row = {"step": step, "L_r": l_r.item(), "L_e": l_e.item(), "lr": lr, "valid": None}
            if step % eval_every == 0 or step == total:
                metric = mean_ndcg(evaluate_ndcg(model, valid, hist, k=cfg.valid_k))
                row["valid"] = metric
                if metric > result.best_metric:
                    result.best_metric = metric
                    result.best_step = step
                    best = model.store.snapshot()
                    best_exam = exam.store.snapshot() if exam is not None else None
                log.info("step %d lr %.5f L_r %.4f L_e %.4f valid ndcg@%d %.4f",
                         step, lr, row["L_r"], row["L_e"], cfg.valid_k, metric)
            result.curve.append(row)
    model.store.restore(best)
    if exam is not None and best_exam is not None:
        exam.store.restore(best_exam)
    model.train_rng = None
    result.steps = step
    return result, exam
