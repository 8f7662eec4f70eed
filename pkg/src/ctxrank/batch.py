"""Packing of query records (and their histories) into flat/padded arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import QueryRecord, UserHistory


@dataclass
class Batch:
    n_queries: int
    max_docs: int
    query_ids: list[str]
    user_ids: list[str]
    q_disc: np.ndarray  # [B, nq]
    q_cont: np.ndarray  # [B, nqc]
    doc_query: np.ndarray  # [M] query index of each flat candidate
    d_disc: np.ndarray  # [M, nd]
    d_cont: np.ndarray
    qd_cont: np.ndarray
    pad_index: np.ndarray  # [B, N] index into flat docs, M for padding
    mask: np.ndarray  # [B, N] bool
    labels: np.ndarray  # [B, N] observed grades, 0 on padding
    labels_true: np.ndarray | None
    pos_r: np.ndarray  # [B, N], 1 on padding
    pos_t: np.ndarray
    # history, flattened over entries H and positive docs P
    k: int = 0
    h_q_disc: np.ndarray | None = None  # [H, nq]
    h_q_cont: np.ndarray | None = None
    h_query: np.ndarray | None = None  # [H] owning query index
    h_slot: np.ndarray | None = None  # [H] 1 = most recent
    p_d_disc: np.ndarray | None = None  # [P, nd]
    p_d_cont: np.ndarray | None = None
    p_qd_cont: np.ndarray | None = None
    p_entry: np.ndarray | None = None  # [P] owning entry index

    @property
    def n_docs(self) -> int:
        return len(self.doc_query)

    def token_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Token gather table ``[B, k+1]`` and key mask.

        Slot 0 holds the current query (row ``b``), slot ``i`` the ``i``-th most
        recent history entry (row ``B + h``); absent slots point at row ``B + H``.
        """
        B = self.n_queries
        H = 0 if self.h_query is None else len(self.h_query)
        idx = np.full((B, self.k + 1), B + H, dtype=np.int64)
        idx[:, 0] = np.arange(B)
        if H:
            idx[self.h_query, self.h_slot] = B + np.arange(H)
        return idx, idx < B + H


def make_batch(
    records: Sequence[QueryRecord],
    histories: dict[str, UserHistory] | None = None,
    k: int = 0,
) -> Batch:
    B = len(records)
    N = max(r.n_docs for r in records)
    sizes = np.array([r.n_docs for r in records])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    M = int(offsets[-1])
    pad_index = np.full((B, N), M, dtype=np.int64)
    mask = np.zeros((B, N), dtype=bool)
    labels = np.zeros((B, N), dtype=np.int64)
    has_true = all(r.label_true is not None for r in records)
    labels_true = np.zeros((B, N), dtype=np.int64) if has_true else None
    pos_r = np.ones((B, N), dtype=np.int64)
    pos_t = np.ones((B, N), dtype=np.int64)
    for b, r in enumerate(records):
        n = r.n_docs
        pad_index[b, :n] = np.arange(offsets[b], offsets[b + 1])
        mask[b, :n] = True
        labels[b, :n] = r.label_obs
        if has_true:
            labels_true[b, :n] = r.label_true
        pos_r[b, :n] = r.pos_r
        pos_t[b, :n] = r.pos_t
    batch = Batch(
        n_queries=B,
        max_docs=N,
        query_ids=[r.query_id for r in records],
        user_ids=[r.user_id for r in records],
        q_disc=np.stack([r.q_disc for r in records]),
        q_cont=np.stack([r.q_cont for r in records]),
        doc_query=np.repeat(np.arange(B), sizes),
        d_disc=np.concatenate([r.d_disc for r in records]),
        d_cont=np.concatenate([r.d_cont for r in records]),
        qd_cont=np.concatenate([r.qd_cont for r in records]),
        pad_index=pad_index,
        mask=mask,
        labels=labels,
        labels_true=labels_true,
        pos_r=pos_r,
        pos_t=pos_t,
        k=k,
    )
    if histories is not None:
        attach_history(batch, records, histories, k)
    return batch


def attach_history(batch: Batch, records: Sequence[QueryRecord], histories: dict[str, UserHistory], k: int) -> None:
    hq_disc, hq_cont, h_query, h_slot = [], [], [], []
    pd, pc, pq, p_entry = [], [], [], []
    for b, r in enumerate(records):
        hist = histories.get(r.query_id)
        entries = [] if hist is None else hist.entries
        if len(entries) > k:
            raise ValueError(f"history of {r.query_id} has {len(entries)} entries, limit {k}")
        j = len(entries)
        for i, e in enumerate(entries):
            if e.n_pos < 1:
                raise ValueError(f"history entry {e.query_id} has no positive document")
            h = len(h_query)
            hq_disc.append(e.q_disc)
            hq_cont.append(e.q_cont)
            h_query.append(b)
            h_slot.append(j - i)  # oldest gets slot j, newest slot 1
            pd.append(e.pos_d_disc)
            pc.append(e.pos_d_cont)
            pq.append(e.pos_qd_cont)
            p_entry.append(np.full(e.n_pos, h))
    nq = batch.q_disc.shape[1]
    nqc = batch.q_cont.shape[1]
    nd = batch.d_disc.shape[1]
    ndc = batch.d_cont.shape[1]
    nqd = batch.qd_cont.shape[1]
    batch.k = k
    batch.h_q_disc = np.stack(hq_disc) if hq_disc else np.zeros((0, nq), dtype=np.int64)
    batch.h_q_cont = np.stack(hq_cont) if hq_cont else np.zeros((0, nqc))
    batch.h_query = np.asarray(h_query, dtype=np.int64)
    batch.h_slot = np.asarray(h_slot, dtype=np.int64)
    batch.p_d_disc = np.concatenate(pd) if pd else np.zeros((0, nd), dtype=np.int64)
    batch.p_d_cont = np.concatenate(pc) if pc else np.zeros((0, ndc))
    batch.p_qd_cont = np.concatenate(pq) if pq else np.zeros((0, nqd))
    batch.p_entry = np.concatenate(p_entry).astype(np.int64) if p_entry else np.zeros(0, dtype=np.int64)
