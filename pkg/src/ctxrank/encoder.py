"""Grouped feature encoding, self-attention aggregation and the NRM scorer."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .batch import Batch
from .data import FeatureSchema


class FeatureEncoder:
    """Maps the query, document and q-d feature groups to ``2m``-vectors.

    Parameters live in ``store`` under ``prefix``; the context encoder reuses
    the same instance so candidate and history documents share weights.
    """

    def __init__(self, schema: FeatureSchema, store: T.ParameterStore, rng: np.random.Generator,
                 emb_dim: int = 10, hidden: int = 64, prefix: str = "enc"):
        self.schema = schema
        self.store = store
        self.e = emb_dim
        self.m = hidden
        self.prefix = prefix
        m, e = hidden, emb_dim
        p = prefix
        for group, cards in (("q", schema.q_disc_cards), ("d", schema.d_disc_cards)):
            for i, card in enumerate(cards):
                store.add(f"{p}.emb_{group}{i}", T.uniform_init(rng, (card, e), e), decay=False)
            n_in = len(cards) * e
            store.add(f"{p}.W_{group}_disc", T.uniform_init(rng, (m, n_in), n_in))
            store.add(f"{p}.b_{group}_disc", np.zeros(m))
        for group, dim in (("q", schema.q_cont_dim), ("d", schema.d_cont_dim)):
            store.add(f"{p}.W_{group}_cont", T.uniform_init(rng, (m, dim), dim))
            store.add(f"{p}.b_{group}_cont", np.zeros(m))
        store.add(f"{p}.W_qd_cont", T.uniform_init(rng, (2 * m, schema.qd_cont_dim), schema.qd_cont_dim))
        store.add(f"{p}.b_qd_cont", np.zeros(2 * m))
        store.add(f"{p}.W_a", T.uniform_init(rng, (2 * m, 2 * m), 2 * m))
        store.add(f"{p}.b_a", np.zeros(2 * m))

    def _w(self, name):
        return self.store[f"{self.prefix}.{name}"]

    def _encode_group(self, group: str, disc, cont) -> T.Tensor:
        disc = np.atleast_2d(np.asarray(disc, dtype=np.int64))
        cont = np.atleast_2d(np.asarray(cont))
        cards = self.schema.q_disc_cards if group == "q" else self.schema.d_disc_cards
        embs = [
            T.embedding_lookup(self._w(f"emb_{group}{i}"), disc[:, i], name=f"{self.prefix}.emb_{group}{i}")
            for i in range(len(cards))
        ]
        g = T.concat(embs, axis=-1) if len(embs) > 1 else embs[0]
        h_disc = T.tanh(T.linear(g, self._w(f"W_{group}_disc"), self._w(f"b_{group}_disc")))
        h_cont = T.tanh(T.linear(T.Tensor(cont), self._w(f"W_{group}_cont"), self._w(f"b_{group}_cont")))
        return T.concat([h_disc, h_cont], axis=-1)

    def encode_query(self, q_disc, q_cont) -> T.Tensor:
        """``h_Q``: rows of ``[tanh(W_QD g_D) ; tanh(W_QC q_cont)]``."""
        return self._encode_group("q", q_disc, q_cont)

    def encode_doc(self, d_disc, d_cont) -> T.Tensor:
        return self._encode_group("d", d_disc, d_cont)

    def encode_qd(self, qd_cont) -> T.Tensor:
        x = T.Tensor(np.atleast_2d(np.asarray(qd_cont)))
        return T.tanh(T.linear(x, self._w("W_qd_cont"), self._w("b_qd_cont")))

    def aggregate(self, h_q: T.Tensor, h_d: T.Tensor, h_qd: T.Tensor) -> T.Tensor:
        """Self-attention over the three group vectors, average-pooled.

        Each group vector is mapped with the shared ``W_a``; column ``j`` of the
        3x3 attention matrix is a softmax over the Gram column ``j``.
        """
        W, b = self._w("W_a"), self._w("b_a")
        o = T.stack([T.tanh(T.linear(h, W, b)) for h in (h_q, h_d, h_qd)], axis=-2)  # [..., 3, 2m]
        attn = T.softmax(T.gram(o), axis=-2)  # column j: weights over components i
        # mean over j of sum_i attn[i, j] o_i == sum_i (mean_j attn[i, j]) o_i
        pooled = T.mean(attn, axis=-1, keepdims=True)
        return T.sum(T.mul(o, pooled), axis=-2)

    def doc_vectors(self, batch: Batch) -> T.Tensor:
        """``o(q, d)`` for every flat candidate of the batch, ``[M, 2m]``."""
        h_q = self.encode_query(batch.q_disc, batch.q_cont)
        h_d = self.encode_doc(batch.d_disc, batch.d_cont)
        h_qd = self.encode_qd(batch.qd_cont)
        return self.aggregate(T.take_rows(h_q, batch.doc_query), h_d, h_qd)


def to_padded(flat_scores: T.Tensor, batch: Batch) -> T.Tensor:
    """Scatter flat per-doc scores ``[M]`` into ``[B, N]``; padding reads 0."""
    ext = T.concat([flat_scores, T.Tensor(np.zeros(1))], axis=0)
    return T.take_rows(ext, batch.pad_index)


class NRM:
    kind = "nrm"

    def __init__(self, schema: FeatureSchema, seed: int = 0, emb_dim: int = 10, hidden: int = 64):
        rng = np.random.default_rng(seed)
        self.store = T.ParameterStore()
        self.encoder = FeatureEncoder(schema, self.store, rng, emb_dim, hidden)
        m = hidden
        self.store.add("nrm.W_s1", T.uniform_init(rng, (m, 2 * m), 2 * m))
        self.store.add("nrm.b_s1", np.zeros(m))
        self.store.add("nrm.W_s2", T.uniform_init(rng, (1, m), m))
        self.store.add("nrm.b_s2", np.zeros(1))
        self.train_rng: np.random.Generator | None = None

    def score_vectors(self, o: T.Tensor) -> T.Tensor:
        """``W_s2 tanh(W_s1 o)`` for rows of ``o``."""
        s = self.store
        hid = T.tanh(T.linear(o, s["nrm.W_s1"], s["nrm.b_s1"]))
        out = T.linear(hid, s["nrm.W_s2"], s["nrm.b_s2"])
        return T.reshape(out, out.shape[:-1])

    def scores(self, batch: Batch) -> T.Tensor:
        """Padded ranking scores ``[B, N]``."""
        return to_padded(self.score_vectors(self.encoder.doc_vectors(batch)), batch)
