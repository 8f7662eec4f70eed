import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxrank import tensor as T
from ctxrank.batch import make_batch
from ctxrank.context import CNRM, ContextConfig, export_context, format_context_rows, parse_context_rows
from ctxrank.data import build_history
from ctxrank.encoder import NRM
from ctxrank.unbiased import ExaminationModel, listwise_loss

from factories import random_records, small_schema


def _zero(store, prefix=""):
    for name, p in store.items():
        if name.startswith(prefix):
            p.data[...] = 0


@pytest.fixture
def schema():
    return small_schema()


@pytest.fixture
def records(schema):
    return random_records(3, schema, n_users=3, per_user=5)


# ---------------------------------------------------------------- encoder


def test_encoder_output_width(schema):
    m = NRM(schema, seed=0)
    enc = m.encoder
    assert enc.encode_query([[0, 1]], [[0.1, 0.2]]).shape == (1, 128)
    assert enc.encode_doc([[1, 0]], [[0.1, 0.2, 0.3]]).shape == (1, 128)
    assert enc.encode_qd([[0.1, 0.2, 0.3, 0.4]]).shape == (1, 128)
    h = enc.encode_query([[0, 1]], [[0.1, 0.2]])
    assert enc.aggregate(h, h, h).shape == (1, 128)


def test_zero_weights_give_zero_group_vectors(schema):
    m = NRM(schema, seed=0)
    _zero(m.store, "enc.")
    enc = m.encoder
    assert np.all(enc.encode_query([[1, 2]], [[3.0, -1.0]]).data == 0)
    assert np.all(enc.encode_doc([[1, 0]], [[1.0, 2.0, 3.0]]).data == 0)
    assert np.all(enc.encode_qd(np.zeros((1, 4))).data == 0)


def test_discrete_id_changes_query_vector(schema):
    enc = NRM(schema, seed=1).encoder
    a = enc.encode_query([[0, 1]], [[0.0, 0.0]]).data
    b = enc.encode_query([[1, 1]], [[0.0, 0.0]]).data
    assert not np.allclose(a, b)


def test_out_of_range_id_names_table(schema):
    enc = NRM(schema, seed=0).encoder
    with pytest.raises(IndexError, match="emb_q1"):
        enc.encode_query([[0, 3]], [[0.0, 0.0]])


def test_query_and_doc_paths_are_isolated(schema):
    m = NRM(schema, seed=0)
    before = m.encoder.encode_doc([[1, 0]], [[0.5, 0.1, -0.2]]).data.copy()
    m.store["enc.W_q_disc"].data[...] += 1.0
    after = m.encoder.encode_doc([[1, 0]], [[0.5, 0.1, -0.2]]).data
    assert np.array_equal(before, after)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_aggregate_fixed_point(seed):
    # identical inputs whose projection is the identity: tanh(W_a h) with W_a = I and h = artanh(v)
    m = NRM(small_schema(), seed=0)
    enc = m.encoder
    enc.store["enc.W_a"].data[...] = np.eye(128)
    v = np.random.default_rng(seed).uniform(-0.9, 0.9, size=(1, 128))
    h = T.Tensor(np.arctanh(v))
    out = enc.aggregate(h, h, h).data
    assert np.max(np.abs(out - v)) < 1e-5


def test_attention_columns_sum_to_one(schema):
    enc = NRM(schema, seed=2).encoder
    rng = np.random.default_rng(0)
    hs = [T.Tensor(rng.normal(size=(4, 128))) for _ in range(3)]
    W, b = enc.store["enc.W_a"], enc.store["enc.b_a"]
    o = T.stack([T.tanh(T.linear(h, W, b)) for h in hs], axis=-2)
    attn = T.softmax(T.gram(o), axis=-2).data
    assert np.allclose(attn.sum(axis=-2), 1.0, atol=1e-6)


def test_aggregate_matches_explicit_formula(schema, f64):
    enc = NRM(schema, seed=3).encoder
    rng = np.random.default_rng(1)
    hq, hd, hqd = (rng.normal(size=128) for _ in range(3))
    out = enc.aggregate(*(T.Tensor(x[None, :]) for x in (hq, hd, hqd))).data[0]
    W, b = enc.store["enc.W_a"].data, enc.store["enc.b_a"].data
    oc = np.stack([np.tanh(W @ x + b) for x in (hq, hd, hqd)], axis=1)  # 2m x 3
    gram = oc.T @ oc
    attn = np.exp(gram - gram.max(axis=0))
    attn /= attn.sum(axis=0)
    expected = (oc @ attn).mean(axis=1)
    assert np.allclose(out, expected, atol=1e-10)


def test_zero_head_scores_zero(schema, records):
    m = NRM(schema, seed=0)
    m.store["nrm.W_s2"].data[...] = 0
    m.store["nrm.b_s2"].data[...] = 0
    s = m.scores(make_batch(records[:4])).data
    assert np.all(s == 0)


def test_score_bounded_by_head_norm(schema, records):
    m = NRM(schema, seed=4)
    bound = np.abs(m.store["nrm.W_s2"].data).sum() + abs(m.store["nrm.b_s2"].data[0])
    s = m.scores(make_batch(records)).data
    assert np.all(np.abs(s) <= bound + 1e-6)


def test_candidate_permutation_permutes_scores(schema, records):
    from dataclasses import replace

    m = NRM(schema, seed=0)
    rec = records[0]
    perm = np.random.default_rng(0).permutation(rec.n_docs)
    shuffled = replace(
        rec, doc_ids=[rec.doc_ids[i] for i in perm], d_disc=rec.d_disc[perm], d_cont=rec.d_cont[perm],
        qd_cont=rec.qd_cont[perm], pos_r=rec.pos_r[perm], pos_t=rec.pos_t[perm],
        label_obs=rec.label_obs[perm], label_true=rec.label_true[perm],
    )
    a = m.scores(make_batch([rec])).data[0, : rec.n_docs]
    b = m.scores(make_batch([shuffled])).data[0, : rec.n_docs]
    assert np.allclose(a[perm], b, atol=1e-6)


# ---------------------------------------------------------------- gradient checks


def _batch_loss(model, batch):
    return lambda: listwise_loss(model.scores(batch), batch.labels + 1 * batch.mask, batch.mask)


@pytest.mark.parametrize("seed", range(5))
def test_nrm_gradient_check(schema, records, seed, f64):
    m = NRM(schema, seed=seed)
    batch = make_batch(records[:6])
    assert T.gradient_check(_batch_loss(m, batch), m.store, n_checks=20, seed=seed) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_cnrm_gradient_check(schema, records, seed, f64):
    m = CNRM(schema, ContextConfig(k=3, dropout=0.0), seed=seed)
    hist = build_history(records, 3)
    batch = make_batch(records[:8], hist, 3)
    assert T.gradient_check(_batch_loss(m, batch), m.store, n_checks=20, seed=seed) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_cnrm_gradient_check_context_parameters(schema, records, seed, f64):
    m = CNRM(schema, ContextConfig(k=3, dropout=0.0), seed=seed)
    hist = build_history(records, 3)
    batch = make_batch(records[:8], hist, 3)
    names = [n for n in m.store if n.startswith("ctx.")]
    assert T.gradient_check(_batch_loss(m, batch), m.store, n_checks=20, seed=seed, names=names) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_examination_gradient_check(seed, f64):
    exam = ExaminationModel(hidden=16, seed=seed)
    rng = np.random.default_rng(seed)
    pr = np.stack([rng.permutation(12) + 1 for _ in range(4)])
    pt = np.stack([rng.permutation(12) + 1 for _ in range(4)])
    y = rng.integers(0, 5, size=pr.shape)
    loss = lambda: listwise_loss(exam.score(pr, pt), y)  # noqa: E731
    assert T.gradient_check(loss, exam.store, n_checks=20, seed=seed) < 1e-3


# ---------------------------------------------------------------- context encoder


def _cnrm(schema, **kw):
    kw.setdefault("k", 4)
    kw.setdefault("dropout", 0.0)
    return CNRM(schema, ContextConfig(**kw), seed=0)


def test_context_shapes_and_sequence_length(schema, records):
    m = _cnrm(schema, k=10)
    hist = build_history(records, 10)
    batch = make_batch(records, hist, 10)
    idx, mask = batch.token_index()
    assert idx.shape == (len(records), 11)
    assert m.store["ctx.pos_emb"].shape == (11, 128)
    assert m.encode_context(batch).shape == (len(records), 128)


def test_history_longer_than_k_rejected(schema, records):
    m = _cnrm(schema, k=2)
    hist = build_history(records, 4)
    with pytest.raises(ValueError):
        m.scores(make_batch(records, hist, 4))


def test_masked_slots_do_not_change_context(schema, records):
    m = _cnrm(schema, k=6)
    hist = build_history(records, 3)
    a = m.encode_context(make_batch(records, hist, 3)).data
    b = m.encode_context(make_batch(records, hist, 6)).data
    assert np.allclose(a, b, atol=1e-5)


def test_empty_history_zero_transformer_depends_only_on_query(schema, records):
    m = _cnrm(schema)
    for name, p in m.store.items():
        if name.startswith("ctx.tf") and not name.endswith(("_g",)):
            p.data[...] = 0
    hist = {r.query_id: type(next(iter(build_history(records, 4).values())))() for r in records}
    batch = make_batch(records[:3], hist, 4)
    c = m.encode_context(batch).data
    h = m.encoder.encode_query(batch.q_disc, batch.q_cont) + T.index(m.store["ctx.pos_emb"], 0)
    expected = T.layer_norm(h, m.store["ctx.lnf_g"], m.store["ctx.lnf_b"]).data
    assert np.allclose(c, expected, atol=1e-5)


def test_pos_emb_off_changes_context(schema, records):
    hist = build_history(records, 4)
    batch = make_batch(records, hist, 4)
    on = _cnrm(schema, pos_emb=True)
    off = _cnrm(schema, pos_emb=False)
    with_hist = [i for i, r in enumerate(records) if len(hist[r.query_id])]
    assert not np.allclose(on.encode_context(batch).data[with_hist], off.encode_context(batch).data[with_hist])


def test_substitute_vector_ignores_query_features(schema, records):
    from dataclasses import replace

    m = _cnrm(schema, substitute_qvec=True)
    hist = build_history(records, 4)
    a = m.encode_context(make_batch(records, hist, 4)).data
    moved = [replace(r, q_disc=(r.q_disc + 1) % np.array(schema.q_disc_cards), q_cont=r.q_cont + 3.0)
             for r in records]
    b = m.encode_context(make_batch(moved, hist, 4)).data
    assert np.array_equal(a, b)


def test_zero_bilinear_disables_context(schema, records):
    m = _cnrm(schema)
    m.store["ctx.W_b"].data[...] = 0
    hist = build_history(records, 4)
    s = m.scores(make_batch(records, hist, 4)).data
    assert np.all(s == 0)


def test_bilinear_identity_examples(schema):
    m = _cnrm(schema)
    m.store["ctx.W_b"].data[...] = np.eye(128)
    e0, e1 = np.eye(128)[0:1], np.eye(128)[1:2]
    assert m.bilinear(T.Tensor(e0), T.Tensor(e1)).data[0] == 0
    assert m.bilinear(T.Tensor(e0), T.Tensor(e0)).data[0] == pytest.approx(1.0)


def test_positive_aggregation_single_and_duplicate(schema, records):
    m = _cnrm(schema)
    hist = build_history(records, 4)
    entry = next(h.entries[-1] for h in hist.values() if len(h))
    one = m.aggregate_positives(entry.pos_d_disc[:1], entry.pos_d_cont[:1], entry.pos_qd_cont[:1], np.zeros(1, int), 1)
    two = m.aggregate_positives(np.repeat(entry.pos_d_disc[:1], 2, 0), np.repeat(entry.pos_d_cont[:1], 2, 0),
                                np.repeat(entry.pos_qd_cont[:1], 2, 0), np.zeros(2, int), 1)
    for a, b in zip(one, two):
        assert np.allclose(a.data, b.data, atol=1e-6)
    s = m.store
    doc = m.encoder.encode_doc(entry.pos_d_disc[:1], entry.pos_d_cont[:1])
    direct = T.tanh(T.linear(doc, s["ctx.W_d"], s["ctx.b_d"])).data
    assert np.allclose(one[0].data, direct, atol=1e-6)


def test_positive_aggregation_shares_candidate_weights(schema, records):
    m = _cnrm(schema)
    hist = build_history(records, 4)
    entry = next(h.entries[-1] for h in hist.values() if len(h))
    args = (entry.pos_d_disc, entry.pos_d_cont, entry.pos_qd_cont, np.zeros(entry.n_pos, int), 1)
    before = m.aggregate_positives(*args)[1].data.copy()
    m.store["enc.W_qd_cont"].data[...] *= 1.5
    assert not np.allclose(before, m.aggregate_positives(*args)[1].data)


def test_history_entry_without_positive_rejected(schema):
    m = _cnrm(schema)
    with pytest.raises(ValueError):
        m.aggregate_positives(np.zeros((1, 2), int), np.zeros((1, 3)), np.zeros((1, 4)), np.array([1]), 2)


def test_ablation_equals_masked_forward(schema, records):
    m = _cnrm(schema, ablation="FD")
    hist = build_history(records, 4)
    entry = next(h.entries[-1] for h in hist.values() if len(h))
    got = m.entry_vector(entry).data
    h_d, _ = m.aggregate_positives(entry.pos_d_disc, entry.pos_d_cont, entry.pos_qd_cont,
                                   np.zeros(entry.n_pos, int), 1)
    zero = T.Tensor(np.zeros((1, 128)))
    expected = m.encoder.aggregate(zero, h_d, zero).data[0]
    assert np.allclose(got, expected, atol=1e-6)


def test_unknown_ablation_rejected():
    with pytest.raises(ValueError):
        ContextConfig(ablation="FX")


def test_context_export_rows_and_determinism(schema, records):
    m = _cnrm(schema)
    hist = build_history(records, 4)
    rows = export_context(m, records, hist)
    assert len(rows) == len(records)
    assert all(len(v) == 128 for _, _, v in rows)
    text = format_context_rows(rows)
    assert text == format_context_rows(export_context(m, records, hist))
    back = parse_context_rows(text)
    assert [q for q, _, _ in back] == [r.query_id for r in records]
    assert np.allclose(back[0][2], rows[0][2], rtol=1e-5, atol=1e-6)
