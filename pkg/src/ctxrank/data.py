"""Feature schema, query records, normalisation, partitions and user history."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

MAX_CANDIDATES = 50
N_GRADES = 5


class SchemaError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class FeatureSchema:
    q_disc_cards: list[int]
    q_cont_dim: int
    d_disc_cards: list[int]
    d_cont_dim: int
    qd_cont_dim: int
    norm_stats: list[tuple[float, float]] | None = None
    q_disc_names: list[str] = field(default_factory=list)
    q_cont_names: list[str] = field(default_factory=list)
    d_disc_names: list[str] = field(default_factory=list)
    d_cont_names: list[str] = field(default_factory=list)
    qd_cont_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.q_disc_cards = [int(c) for c in self.q_disc_cards]
        self.d_disc_cards = [int(c) for c in self.d_disc_cards]
        for c in self.q_disc_cards + self.d_disc_cards:
            if c < 2:
                raise SchemaError(f"discrete cardinality must be >= 2, got {c}")
        for name in ("q_cont_dim", "d_cont_dim", "qd_cont_dim"):
            if getattr(self, name) < 1:
                raise SchemaError(f"{name} must be >= 1")
        if not self.q_disc_cards or not self.d_disc_cards:
            raise SchemaError("each discrete group needs at least one feature")
        if self.norm_stats is not None:
            self.norm_stats = [(float(m), float(s)) for m, s in self.norm_stats]
            if len(self.norm_stats) != self.n_cont:
                raise SchemaError(
                    f"norm_stats has {len(self.norm_stats)} entries, expected {self.n_cont}"
                )
        for attr, n in (
            ("q_disc_names", len(self.q_disc_cards)),
            ("q_cont_names", self.q_cont_dim),
            ("d_disc_names", len(self.d_disc_cards)),
            ("d_cont_names", self.d_cont_dim),
            ("qd_cont_names", self.qd_cont_dim),
        ):
            names = getattr(self, attr)
            if names and len(names) != n:
                raise SchemaError(f"{attr} has {len(names)} names, expected {n}")

    @property
    def n_cont(self) -> int:
        return self.q_cont_dim + self.d_cont_dim + self.qd_cont_dim

    def locate(self, name: str) -> tuple[str, int]:
        """Return ``(group, column)`` of a named feature."""
        for group in ("q_cont", "d_cont", "qd_cont", "q_disc", "d_disc"):
            names = getattr(self, f"{group}_names")
            if name in names:
                return group, names.index(name)
        raise SchemaError(f"feature {name!r} not in schema")

    def to_dict(self) -> dict:
        out = {
            "q_disc_cards": self.q_disc_cards,
            "q_cont_dim": self.q_cont_dim,
            "d_disc_cards": self.d_disc_cards,
            "d_cont_dim": self.d_cont_dim,
            "qd_cont_dim": self.qd_cont_dim,
            "norm_stats": [list(s) for s in self.norm_stats] if self.norm_stats else None,
        }
        for attr in ("q_disc_names", "q_cont_names", "d_disc_names", "d_cont_names", "qd_cont_names"):
            out[attr] = list(getattr(self, attr))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class CandidateDoc:
    doc_id: str
    d_disc: list[int]
    d_cont: list[float]
    qd_cont: list[float]
    pos_r: int
    pos_t: int
    label_obs: int
    label_true: int | None = None


@dataclass(eq=False)
class QueryRecord:
    """One impression; candidate features are stored column-wise as arrays."""

    query_id: str
    user_id: str
    timestamp: int
    q_disc: np.ndarray
    q_cont: np.ndarray
    doc_ids: list[str]
    d_disc: np.ndarray
    d_cont: np.ndarray
    qd_cont: np.ndarray
    pos_r: np.ndarray
    pos_t: np.ndarray
    label_obs: np.ndarray
    label_true: np.ndarray | None = None

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def has_positive(self) -> bool:
        return bool(np.any(self.label_obs > 0))

    @property
    def candidates(self) -> list[CandidateDoc]:
        return [
            CandidateDoc(
                doc_id=self.doc_ids[i],
                d_disc=self.d_disc[i].tolist(),
                d_cont=self.d_cont[i].tolist(),
                qd_cont=self.qd_cont[i].tolist(),
                pos_r=int(self.pos_r[i]),
                pos_t=int(self.pos_t[i]),
                label_obs=int(self.label_obs[i]),
                label_true=None if self.label_true is None else int(self.label_true[i]),
            )
            for i in range(self.n_docs)
        ]

    def __eq__(self, other):
        if not isinstance(other, QueryRecord):
            return NotImplemented
        if (self.query_id, self.user_id, self.timestamp, self.doc_ids) != (
            other.query_id,
            other.user_id,
            other.timestamp,
            other.doc_ids,
        ):
            return False
        if (self.label_true is None) != (other.label_true is None):
            return False
        arrays = ("q_disc", "q_cont", "d_disc", "d_cont", "qd_cont", "pos_r", "pos_t", "label_obs")
        if self.label_true is not None:
            arrays += ("label_true",)
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)

    @classmethod
    def from_candidates(cls, query_id, user_id, timestamp, q_disc, q_cont, candidates: Sequence[CandidateDoc]):
        has_true = all(c.label_true is not None for c in candidates) and len(candidates) > 0
        return cls(
            query_id=str(query_id),
            user_id=str(user_id),
            timestamp=int(timestamp),
            q_disc=np.asarray(q_disc, dtype=np.int64),
            q_cont=np.asarray(q_cont, dtype=np.float64),
            doc_ids=[str(c.doc_id) for c in candidates],
            d_disc=np.asarray([c.d_disc for c in candidates], dtype=np.int64),
            d_cont=np.asarray([c.d_cont for c in candidates], dtype=np.float64),
            qd_cont=np.asarray([c.qd_cont for c in candidates], dtype=np.float64),
            pos_r=np.asarray([c.pos_r for c in candidates], dtype=np.int64),
            pos_t=np.asarray([c.pos_t for c in candidates], dtype=np.int64),
            label_obs=np.asarray([c.label_obs for c in candidates], dtype=np.int64),
            label_true=np.asarray([c.label_true for c in candidates], dtype=np.int64) if has_true else None,
        )


def validate_record(rec: QueryRecord, schema: FeatureSchema) -> None:
    n = rec.n_docs
    if not 1 <= n <= MAX_CANDIDATES:
        raise DatasetError(f"query {rec.query_id}: {n} candidates, allowed 1..{MAX_CANDIDATES}")
    checks = (
        ("q_disc", rec.q_disc.shape, (len(schema.q_disc_cards),)),
        ("q_cont", rec.q_cont.shape, (schema.q_cont_dim,)),
        ("d_disc", rec.d_disc.shape, (n, len(schema.d_disc_cards))),
        ("d_cont", rec.d_cont.shape, (n, schema.d_cont_dim)),
        ("qd_cont", rec.qd_cont.shape, (n, schema.qd_cont_dim)),
    )
    for name, got, want in checks:
        if got != want:
            raise SchemaError(f"query {rec.query_id}: {name} has shape {got}, schema expects {want}")
    for ids, cards, name in ((rec.q_disc[None, :], schema.q_disc_cards, "q_disc"), (rec.d_disc, schema.d_disc_cards, "d_disc")):
        if np.any(ids < 0) or np.any(ids >= np.asarray(cards)[None, :]):
            raise SchemaError(f"query {rec.query_id}: {name} id outside schema cardinality")
    for labels, name in ((rec.label_obs, "label_obs"), (rec.label_true, "label_true")):
        if labels is not None and (np.any(labels < 0) or np.any(labels >= N_GRADES)):
            raise DatasetError(f"query {rec.query_id}: {name} outside 0..4")
    for pos, name in ((rec.pos_r, "pos_r"), (rec.pos_t, "pos_t")):
        if np.any(pos < 1) or len(np.unique(pos)) != n:
            raise DatasetError(f"query {rec.query_id}: {name} must be unique positive integers")


# ---------------------------------------------------------------- serialization


def record_to_dict(rec: QueryRecord) -> dict:
    cands = []
    for i in range(rec.n_docs):
        c = {
            "doc_id": rec.doc_ids[i],
            "d_disc": rec.d_disc[i].tolist(),
            "d_cont": rec.d_cont[i].tolist(),
            "qd_cont": rec.qd_cont[i].tolist(),
            "pos_r": int(rec.pos_r[i]),
            "pos_t": int(rec.pos_t[i]),
            "label_obs": int(rec.label_obs[i]),
            "label_true": None if rec.label_true is None else int(rec.label_true[i]),
        }
        cands.append(c)
    return {
        "query_id": rec.query_id,
        "user_id": rec.user_id,
        "timestamp": rec.timestamp,
        "q_disc": rec.q_disc.tolist(),
        "q_cont": rec.q_cont.tolist(),
        "candidates": cands,
    }


def record_from_dict(d: dict) -> QueryRecord:
    cands = [
        CandidateDoc(
            doc_id=c["doc_id"],
            d_disc=c["d_disc"],
            d_cont=c["d_cont"],
            qd_cont=c["qd_cont"],
            pos_r=c["pos_r"],
            pos_t=c["pos_t"],
            label_obs=c["label_obs"],
            label_true=c.get("label_true"),
        )
        for c in d["candidates"]
    ]
    if not cands:
        raise DatasetError(f"query {d['query_id']}: no candidates")
    return QueryRecord.from_candidates(d["query_id"], d["user_id"], d["timestamp"], d["q_disc"], d["q_cont"], cands)


def write_dataset(path, records: Iterable[QueryRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), separators=(",", ":")) + "\n")
            n += 1
    return n


def load_dataset(path, schema: FeatureSchema) -> Iterator[QueryRecord]:
    """Yield validated records in file order."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = record_from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, (SchemaError, DatasetError)):
                    raise type(exc)(f"line {lineno}: {exc}") from exc
                raise DatasetError(f"line {lineno}: malformed record ({exc})") from exc
            try:
                validate_record(rec, schema)
            except (SchemaError, DatasetError) as exc:
                raise type(exc)(f"line {lineno}: {exc}") from exc
            yield rec


# ---------------------------------------------------------------- normalisation


def fit_normalization(train: Sequence[QueryRecord]) -> list[tuple[float, float]]:
    """Per-feature (mean, std) of q_cont (per query), d_cont and qd_cont (per doc)."""
    q = np.stack([r.q_cont for r in train])
    d = np.concatenate([r.d_cont for r in train])
    qd = np.concatenate([r.qd_cont for r in train])
    stats = []
    for block in (q, d, qd):
        mu = block.mean(axis=0)
        sd = block.std(axis=0)
        stats.extend(zip(mu.tolist(), sd.tolist()))
    return stats


def _z(x: np.ndarray, stats: list[tuple[float, float]]) -> np.ndarray:
    mu = np.array([m for m, _ in stats])
    sd = np.array([s for _, s in stats])
    safe = np.where(sd > 1e-12, sd, 1.0)
    return np.where(sd > 1e-12, (x - mu) / safe, 0.0)


def apply_normalization(rec: QueryRecord, stats: list[tuple[float, float]], schema: FeatureSchema) -> QueryRecord:
    a = schema.q_cont_dim
    b = a + schema.d_cont_dim
    return replace(
        rec,
        q_cont=_z(rec.q_cont, stats[:a]),
        d_cont=_z(rec.d_cont, stats[a:b]),
        qd_cont=_z(rec.qd_cont, stats[b:]),
    )


def normalize_records(records: Sequence[QueryRecord], stats, schema: FeatureSchema) -> list[QueryRecord]:
    return [apply_normalization(r, stats, schema) for r in records]


# ---------------------------------------------------------------- partitions


def _three_way(n: int, frac: float = 0.8) -> tuple[int, int]:
    n_train = int(math.floor(frac * n + 1e-9))
    rest = n - n_train
    n_valid = (rest + 1) // 2
    return n_train, n_valid


def split_by_time(records: Sequence[QueryRecord]):
    ordered = sorted(records, key=lambda r: (r.timestamp, r.query_id))
    n_train, n_valid = _three_way(len(ordered))
    return ordered[:n_train], ordered[n_train : n_train + n_valid], ordered[n_train + n_valid :]


def split_by_user(records: Sequence[QueryRecord], seed: int):
    users = sorted({r.user_id for r in records})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(users))
    shuffled = [users[i] for i in order]
    n_train, n_valid = _three_way(len(shuffled))
    part = {}
    for i, u in enumerate(shuffled):
        part[u] = 0 if i < n_train else (1 if i < n_train + n_valid else 2)
    out: tuple[list, list, list] = ([], [], [])
    for r in sorted(records, key=lambda r: (r.timestamp, r.query_id)):
        out[part[r.user_id]].append(r)
    return out


# ---------------------------------------------------------------- history


@dataclass
class HistoryEntry:
    query_id: str
    timestamp: int
    q_disc: np.ndarray
    q_cont: np.ndarray
    pos_d_disc: np.ndarray
    pos_d_cont: np.ndarray
    pos_qd_cont: np.ndarray

    @property
    def n_pos(self) -> int:
        return len(self.pos_d_disc)


@dataclass
class UserHistory:
    entries: list[HistoryEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)


def history_entry(rec: QueryRecord) -> HistoryEntry:
    pos = rec.label_obs > 0
    return HistoryEntry(
        query_id=rec.query_id,
        timestamp=rec.timestamp,
        q_disc=rec.q_disc,
        q_cont=rec.q_cont,
        pos_d_disc=rec.d_disc[pos],
        pos_d_cont=rec.d_cont[pos],
        pos_qd_cont=rec.qd_cont[pos],
    )


def build_history(records: Iterable[QueryRecord], k: int) -> dict[str, UserHistory]:
    """Each query's ``k`` most recent strictly-earlier positive queries, oldest first."""
    by_user: dict[str, list[QueryRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    out: dict[str, UserHistory] = {}
    for recs in by_user.values():
        recs.sort(key=lambda r: (r.timestamp, r.query_id))
        done: list[HistoryEntry] = []
        i = 0
        while i < len(recs):
            # queries sharing a timestamp never see each other
            j = i
            while j < len(recs) and recs[j].timestamp == recs[i].timestamp:
                j += 1
            hist = UserHistory(list(done[-k:]) if k > 0 else [])
            for r in recs[i:j]:
                out[r.query_id] = hist
            for r in recs[i:j]:
                if r.has_positive:
                    done.append(history_entry(r))
            i = j
    return out
