"""Context-dependent ranker: history aggregation, transformer context, bilinear score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .batch import Batch, make_batch
from .data import FeatureSchema, HistoryEntry
from .encoder import FeatureEncoder, to_padded

ABLATIONS = {
    "full": ("q", "d", "qd"),
    "FQ": ("q",),
    "FD": ("d",),
    "FQD": ("qd",),
    "FD&FQD": ("d", "qd"),
}

NEG_INF = -1e9


@dataclass
class ContextConfig:
    k: int = 10
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    dropout: float = 0.1
    ablation: str = "full"
    pos_emb: bool = True
    substitute_qvec: bool = False

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}")
        if not 1 <= self.layers <= 3:
            raise ValueError("transformer layers must be in 1..3")


class CNRM:
    kind = "cnrm"

    def __init__(self, schema: FeatureSchema, cfg: ContextConfig | None = None, seed: int = 0,
                 emb_dim: int = 10, hidden: int = 64):
        self.cfg = cfg or ContextConfig()
        rng = np.random.default_rng(seed)
        self.store = T.ParameterStore()
        self.encoder = FeatureEncoder(schema, self.store, rng, emb_dim, hidden)
        d = 2 * hidden
        if d % self.cfg.heads:
            raise ValueError(f"model width {d} not divisible by {self.cfg.heads} heads")
        self.width = d
        s = self.store
        s.add("ctx.W_d", T.uniform_init(rng, (d, d), d))
        s.add("ctx.b_d", np.zeros(d))
        s.add("ctx.W_qd", T.uniform_init(rng, (d, d), d))
        s.add("ctx.b_qd", np.zeros(d))
        s.add("ctx.pos_emb", T.uniform_init(rng, (self.cfg.k + 1, d), d), decay=False)
        if self.cfg.substitute_qvec:
            s.add("ctx.q0_vec", T.uniform_init(rng, (1, d), d))
        f = self.cfg.ffn
        for layer in range(self.cfg.layers):
            p = f"ctx.tf{layer}"
            for name in ("ln1", "ln2"):
                s.add(f"{p}.{name}_g", np.ones(d))
                s.add(f"{p}.{name}_b", np.zeros(d))
            for name in ("Wq", "Wk", "Wv", "Wo"):
                s.add(f"{p}.{name}", T.uniform_init(rng, (d, d), d))
                s.add(f"{p}.{name}_b", np.zeros(d))
            s.add(f"{p}.W1", T.uniform_init(rng, (f, d), d))
            s.add(f"{p}.b1", np.zeros(f))
            s.add(f"{p}.W2", T.uniform_init(rng, (d, f), f))
            s.add(f"{p}.b2", np.zeros(d))
        s.add("ctx.lnf_g", np.ones(d))
        s.add("ctx.lnf_b", np.zeros(d))
        s.add("ctx.W_b", T.uniform_init(rng, (d, d), d))
        self.train_rng: np.random.Generator | None = None

    # ------------------------------------------------------------ history

    def aggregate_positives(self, pos_d_disc, pos_d_cont, pos_qd_cont, entry_ids, n_entries):
        """Projected averages ``h_D(D+)`` and ``h_QD(q, D+)`` per history entry."""
        if n_entries and np.bincount(entry_ids, minlength=n_entries).min() < 1:
            raise ValueError("history entry without positive documents")
        enc, s = self.encoder, self.store
        h_d = T.segment_mean(enc.encode_doc(pos_d_disc, pos_d_cont), entry_ids, n_entries)
        h_qd = T.segment_mean(enc.encode_qd(pos_qd_cont), entry_ids, n_entries)
        return (
            T.tanh(T.linear(h_d, s["ctx.W_d"], s["ctx.b_d"])),
            T.tanh(T.linear(h_qd, s["ctx.W_qd"], s["ctx.b_qd"])),
        )

    def history_vectors(self, h_q_disc, h_q_cont, pos_d_disc, pos_d_cont, pos_qd_cont, entry_ids) -> T.Tensor:
        """``o(q_i, D+_i)`` for each entry, with the ablation mask applied."""
        n = len(h_q_disc)
        h_q = self.encoder.encode_query(h_q_disc, h_q_cont)
        h_d, h_qd = self.aggregate_positives(pos_d_disc, pos_d_cont, pos_qd_cont, entry_ids, n)
        keep = ABLATIONS[self.cfg.ablation]
        zero = T.Tensor(np.zeros((n, self.width)))
        return self.encoder.aggregate(
            h_q if "q" in keep else zero,
            h_d if "d" in keep else zero,
            h_qd if "qd" in keep else zero,
        )

    def entry_vector(self, entry: HistoryEntry) -> T.Tensor:
        """``o(q_i, D+_i)`` for a single history entry."""
        out = self.history_vectors(
            entry.q_disc[None, :], entry.q_cont[None, :], entry.pos_d_disc, entry.pos_d_cont,
            entry.pos_qd_cont, np.zeros(entry.n_pos, dtype=np.int64),
        )
        return T.reshape(out, (self.width,))

    # ------------------------------------------------------------ transformer

    def _attention(self, x: T.Tensor, p: str, key_add: np.ndarray) -> T.Tensor:
        s = self.store
        B, L, d = x.shape
        H = self.cfg.heads
        dh = d // H

        def heads(t):
            return T.transpose(T.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q = heads(T.linear(x, s[f"{p}.Wq"], s[f"{p}.Wq_b"]))
        k = heads(T.linear(x, s[f"{p}.Wk"], s[f"{p}.Wk_b"]))
        v = heads(T.linear(x, s[f"{p}.Wv"], s[f"{p}.Wv_b"]))
        scores = T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(dh)) + key_add
        att = T.softmax(scores, axis=-1)
        out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
        return T.linear(out, s[f"{p}.Wo"], s[f"{p}.Wo_b"])

    def transformer(self, tokens: T.Tensor, key_mask: np.ndarray) -> T.Tensor:
        """Pre-norm encoder stack (GELU feed-forward); masked keys never receive attention."""
        s, rate, rng = self.store, self.cfg.dropout, self.train_rng
        key_add = np.where(key_mask, 0.0, NEG_INF)[:, None, None, :]
        x = tokens
        for layer in range(self.cfg.layers):
            p = f"ctx.tf{layer}"
            a = T.layer_norm(x, s[f"{p}.ln1_g"], s[f"{p}.ln1_b"])
            x = x + T.dropout(self._attention(a, p, key_add), rate, rng)
            f = T.layer_norm(x, s[f"{p}.ln2_g"], s[f"{p}.ln2_b"])
            f = T.linear(T.gelu(T.linear(f, s[f"{p}.W1"], s[f"{p}.b1"])), s[f"{p}.W2"], s[f"{p}.b2"])
            x = x + T.dropout(f, rate, rng)
        return T.layer_norm(x, s["ctx.lnf_g"], s["ctx.lnf_b"])

    def encode_context(self, batch: Batch) -> T.Tensor:
        """``c(q0)`` for every query of the batch, ``[B, 2m]``."""
        if batch.h_query is None:
            raise ValueError("batch carries no history; build it with histories")
        if batch.k > self.cfg.k:
            raise ValueError(f"history length {batch.k} exceeds k={self.cfg.k}")
        B = batch.n_queries
        if self.cfg.substitute_qvec:
            q0 = T.take_rows(self.store["ctx.q0_vec"], np.zeros(B, dtype=np.int64))
        else:
            q0 = self.encoder.encode_query(batch.q_disc, batch.q_cont)
        parts = [q0]
        if len(batch.h_query):
            parts.append(self.history_vectors(batch.h_q_disc, batch.h_q_cont, batch.p_d_disc,
                                              batch.p_d_cont, batch.p_qd_cont, batch.p_entry))
        parts.append(T.Tensor(np.zeros((1, self.width))))
        table = T.concat(parts, axis=0)
        idx, key_mask = batch.token_index()
        tokens = T.take_rows(table, idx)  # [B, k+1, 2m]
        L = idx.shape[1]
        if self.cfg.pos_emb:
            tokens = tokens + T.index(self.store["ctx.pos_emb"], slice(0, L))
        out = self.transformer(tokens, key_mask)
        return T.index(out, (slice(None), 0))

    def bilinear(self, o: T.Tensor, c_rows: T.Tensor) -> T.Tensor:
        """Row-wise ``o^T W_b c``."""
        wc = T.matmul(c_rows, T.transpose(self.store["ctx.W_b"]))
        return T.sum(T.mul(o, wc), axis=-1)

    def scores(self, batch: Batch) -> T.Tensor:
        c = self.encode_context(batch)
        o = self.encoder.doc_vectors(batch)
        return to_padded(self.bilinear(o, T.take_rows(c, batch.doc_query)), batch)


def export_context(model: CNRM, records, histories, chunk: int = 256) -> list[tuple[str, str, np.ndarray]]:
    """``(query_id, user_id, c(q0))`` per record, in input order, dropout off."""
    rows = []
    prev, model.train_rng = model.train_rng, None
    try:
        with T.no_grad():
            for i in range(0, len(records), chunk):
                recs = records[i : i + chunk]
                c = model.encode_context(make_batch(recs, histories, model.cfg.k)).data
                rows.extend((r.query_id, r.user_id, c[b].astype(np.float64)) for b, r in enumerate(recs))
    finally:
        model.train_rng = prev
    return rows


def format_context_rows(rows) -> str:
    lines = []
    for qid, uid, vec in rows:
        lines.append("\t".join([qid, uid] + [f"{v:.6g}" for v in vec]))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_context_rows(text: str) -> list[tuple[str, str, np.ndarray]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ValueError(f"line {lineno}: expected query_id, user_id and a vector")
        rows.append((parts[0], parts[1], np.array([float(v) for v in parts[2:]])))
    return rows
