"""Small random datasets for unit tests."""

import numpy as np

from ctxrank.data import FeatureSchema, QueryRecord


def small_schema(**kw) -> FeatureSchema:
    args = dict(
        q_disc_cards=[2, 3],
        q_cont_dim=2,
        d_disc_cards=[2, 2],
        d_cont_dim=3,
        qd_cont_dim=4,
        q_disc_names=["user_type", "query_language"],
        q_cont_names=["query_length", "mailbox_size"],
        d_disc_names=["is_read", "flagged"],
        d_cont_names=["recency", "email_length", "attachment_count"],
        qd_cont_names=["bm25f", "subject_match", "to_cc_match", "body_match"],
    )
    args.update(kw)
    return FeatureSchema(**args)


def random_record(rng, schema, query_id, user_id, timestamp, n_docs=None, with_true=True, positives=None):
    n = int(n_docs if n_docs is not None else rng.integers(2, 8))
    labels = rng.integers(0, 5, size=n) * (rng.random(n) < 0.4)
    if positives == 0:
        labels = np.zeros(n, dtype=np.int64)
    return QueryRecord(
        query_id=str(query_id),
        user_id=str(user_id),
        timestamp=int(timestamp),
        q_disc=np.array([rng.integers(c) for c in schema.q_disc_cards]),
        q_cont=rng.normal(size=schema.q_cont_dim),
        doc_ids=[f"{query_id}-d{i}" for i in range(n)],
        d_disc=np.stack([rng.integers(0, c, size=n) for c in schema.d_disc_cards], axis=1),
        d_cont=rng.normal(size=(n, schema.d_cont_dim)),
        qd_cont=rng.normal(size=(n, schema.qd_cont_dim)),
        pos_r=rng.permutation(n) + 1,
        pos_t=rng.permutation(n) + 1,
        label_obs=labels.astype(np.int64),
        label_true=labels.astype(np.int64) if with_true else None,
    )


def random_records(seed, schema, n_users=4, per_user=6, **kw):
    rng = np.random.default_rng(seed)
    out = []
    for u in range(n_users):
        for j in range(per_user):
            out.append(random_record(rng, schema, f"u{u}q{j:02d}", f"u{u}", 1000 * j + u, **kw))
    return out
