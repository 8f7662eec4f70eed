"""Synthetic two-panel email-search logs with latent user cohorts.

Each user belongs to a home cohort; a sticky Markov chain lets the active
cohort drift between queries. A candidate's true utility is the active
cohort's weighted sum of normalised signals plus Gaussian noise, and grades
come from utility thresholds calibrated to target per-grade counts. Clicks
follow a two-panel examination model times a grade-dependent perception
probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FeatureSchema, QueryRecord

SIGNALS = ("recency", "bm25f", "subject_match", "to_cc_match", "email_length", "is_read", "flagged")

# column layout of the emitted schema
Q_DISC = ("user_type", "query_language")
Q_CONT = ("query_length", "mailbox_size")
D_DISC = ("is_read", "flagged", "has_attachment")
D_CONT = ("recency", "email_length", "recipient_count")
QD_CONT = ("bm25f", "subject_match", "to_cc_match", "from_match")
N_LANGUAGES = 4

PAPER_GRADE_COUNTS = (26.91, 1.87, 0.03, 0.55, 0.64)

DEFAULT_COHORTS = {
    "recency": (0.70, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05),
    "relevance": (0.20, 0.55, 0.05, 0.05, 0.05, 0.05, 0.05),
    "field_match": (0.20, 0.05, 0.30, 0.30, 0.05, 0.05, 0.05),
    "long_email": (0.20, 0.05, 0.05, 0.05, 0.55, 0.05, 0.05),
}
DEFAULT_PRIOR = (0.4, 0.2, 0.2, 0.2)
# P(user_type = commercial | cohort): weakly informative
COMMERCIAL_RATE = (0.35, 0.65, 0.6, 0.4)


class ConfigError(ValueError):
    pass


@dataclass
class CohortProfile:
    cohort_id: int
    name: str
    utility_weights: np.ndarray
    noise_std: float = 0.05

    def __post_init__(self):
        self.utility_weights = np.asarray(self.utility_weights, dtype=np.float64)
        if self.utility_weights.shape != (len(SIGNALS),):
            raise ConfigError(f"cohort {self.name}: expected {len(SIGNALS)} weights")
        if abs(self.utility_weights.sum() - 1.0) > 1e-9:
            raise ConfigError(f"cohort {self.name}: weights must sum to 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def perception_exponential(grade) -> np.ndarray:
    return (2.0 ** np.asarray(grade, dtype=np.float64) - 1.0) / 15.0


@dataclass
class ClickModelConfig:
    eta_r: float = 1.0
    eta_t: float = 1.0
    rho_r: float = 1.0
    rho_t: float = 1.0
    perception: tuple[float, ...] = tuple(perception_exponential(np.arange(5)).tolist())

    def __post_init__(self):
        if self.eta_r < 0 or self.eta_t < 0:
            raise ConfigError("position-decay exponents must be >= 0")
        if not (0 <= self.rho_r <= 1 and 0 <= self.rho_t <= 1):
            raise ConfigError("panel attention weights must lie in [0, 1]")
        p = np.asarray(self.perception, dtype=np.float64)
        if p.shape != (5,) or p[0] != 0 or np.any(np.diff(p) < 0) or np.any(p > 1):
            raise ConfigError("perception must be non-decreasing over 5 grades with perception(0) = 0")

    def examination(self, pos_r, pos_t) -> np.ndarray:
        pr = np.asarray(pos_r, dtype=np.float64)
        pt = np.asarray(pos_t, dtype=np.float64)
        return 1.0 - (1.0 - self.rho_r * pr ** (-self.eta_r)) * (1.0 - self.rho_t * pt ** (-self.eta_t))


@dataclass
class SimConfig:
    n_users: int = 2000
    queries_per_user: tuple[int, int] = (11, 13)
    candidates_mean: float = 30.0
    candidates_std: float = 9.0
    candidates_min: int = 5
    candidates_max: int = 50
    target_rate: float = 0.12
    cohorts: dict[str, Sequence[float]] = field(default_factory=lambda: dict(DEFAULT_COHORTS))
    cohort_prior: tuple[float, ...] | None = DEFAULT_PRIOR
    cohort_stay: float = 0.9
    noise_std: float = 0.05
    grade_counts: tuple[float, ...] = PAPER_GRADE_COUNTS
    grade_thresholds: tuple[float, ...] | None = None
    ranker_noise: float = 0.3
    click: ClickModelConfig = field(default_factory=ClickModelConfig)
    period_days: float = 14.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.queries_per_user
        if lo < 11 or hi < lo:
            raise ConfigError("queries_per_user needs 11 <= min <= max")
        if self.candidates_max > 50 or self.candidates_min < 1:
            raise ConfigError("candidates per query must lie in 1..50")
        if len(self.grade_counts) != 5 or any(c <= 0 for c in self.grade_counts):
            raise ConfigError("grade_counts needs five positive per-grade counts (empty grade band)")
        if self.grade_thresholds is not None:
            t = np.asarray(self.grade_thresholds, dtype=np.float64)
            if t.shape != (4,) or np.any(np.diff(t) <= 0):
                raise ConfigError("grade_thresholds must be 4 strictly increasing cut points")
        if not 0 <= self.cohort_stay <= 1:
            raise ConfigError("cohort_stay must lie in [0, 1]")
        if isinstance(self.click, dict):
            self.click = ClickModelConfig(**self.click)

    def profiles(self) -> list[CohortProfile]:
        return [CohortProfile(i, name, w, self.noise_std) for i, (name, w) in enumerate(self.cohorts.items())]

    def prior(self) -> np.ndarray:
        n = len(self.cohorts)
        p = np.full(n, 1.0 / n) if self.cohort_prior is None else np.asarray(self.cohort_prior, dtype=np.float64)
        if p.shape != (n,) or abs(p.sum() - 1) > 1e-9:
            raise ConfigError("cohort_prior must be a distribution over cohorts")
        return p


def make_schema() -> FeatureSchema:
    return FeatureSchema(
        q_disc_cards=[2, N_LANGUAGES],
        q_cont_dim=len(Q_CONT),
        d_disc_cards=[2, 2, 2],
        d_cont_dim=len(D_CONT),
        qd_cont_dim=len(QD_CONT),
        q_disc_names=list(Q_DISC),
        q_cont_names=list(Q_CONT),
        d_disc_names=list(D_DISC),
        d_cont_names=list(D_CONT),
        qd_cont_names=list(QD_CONT),
    )


@dataclass
class Truth:
    click: ClickModelConfig
    user_cohort: dict[str, int]
    query_cohort: dict[str, int]
    thresholds: np.ndarray
    profiles: list[CohortProfile]

    def propensity_table(self, max_pos: int = 50) -> list[tuple[int, int, float]]:
        rows = []
        for pr in range(1, max_pos + 1):
            for pt in range(1, max_pos + 1):
                rows.append((pr, pt, float(self.click.examination(pr, pt))))
        return rows


# ---------------------------------------------------------------- signals


def signal_matrix(d_disc: np.ndarray, d_cont: np.ndarray, qd_cont: np.ndarray) -> np.ndarray:
    """Normalised preference signals (columns in ``SIGNALS`` order) from raw features."""
    age = d_cont[:, 0]
    length = d_cont[:, 1]
    return np.stack(
        [
            np.exp(-age / 14.0),
            qd_cont[:, 0] / 20.0,
            qd_cont[:, 1],
            qd_cont[:, 2],
            1.0 / (1.0 + np.exp(-(np.log(length) - 7.0) / 0.8)),
            d_disc[:, 0].astype(np.float64),
            d_disc[:, 1].astype(np.float64),
        ],
        axis=1,
    )


def _beta_mix(rng, target, a_hit, b_hit, a_miss, b_miss):
    hit = rng.beta(a_hit, b_hit, size=target.shape)
    miss = rng.beta(a_miss, b_miss, size=target.shape)
    return np.where(target, hit, miss)


def _draw_candidates(rng, n: int, target_rate: float):
    target = rng.random(n) < target_rate
    if not target.any():
        target[rng.integers(n)] = True
    age = rng.exponential(30.0, size=n)
    age = np.where(target, age * 0.7, age)
    length = np.exp(rng.normal(7.0, 1.0, size=n))
    recipients = 1.0 + rng.poisson(np.where(target, 3.0, 2.0))
    bm25f = 20.0 * _beta_mix(rng, target, 5, 2, 1.5, 5)
    subject = _beta_mix(rng, target, 4, 2, 1, 6)
    to_cc = _beta_mix(rng, target, 3, 2, 1, 4)
    from_m = _beta_mix(rng, target, 2, 3, 1, 5)
    is_read = (rng.random(n) < np.where(target, 0.6, 0.75)).astype(np.int64)
    flagged = (rng.random(n) < np.where(target, 0.25, 0.08)).astype(np.int64)
    attach = (rng.random(n) < 0.2).astype(np.int64)
    d_disc = np.stack([is_read, flagged, attach], axis=1)
    d_cont = np.stack([age, length, recipients], axis=1)
    qd_cont = np.stack([bm25f, subject, to_cc, from_m], axis=1)
    return d_disc, d_cont, qd_cont


def _user_rng(seed: int, user_index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, user_index, stream])


# ---------------------------------------------------------------- positions and clicks


def heuristic_scores(record: QueryRecord, noise: float, rng: np.random.Generator) -> np.ndarray:
    def minmax(x):
        span = x.max() - x.min()
        return np.zeros_like(x) if span <= 0 else (x - x.min()) / span

    bm = minmax(record.qd_cont[:, 0])
    rec = minmax(-record.d_cont[:, 0])
    return 0.5 * bm + 0.5 * rec + (rng.normal(0.0, noise, size=record.n_docs) if noise > 0 else 0.0)


def _ranks_desc(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.int64)
    ranks[order] = np.arange(1, len(scores) + 1)
    return ranks


def assign_positions(record: QueryRecord, production_ranker_noise: float, seed) -> QueryRecord:
    """Relevance-panel rank from a noisy bm25f/recency heuristic; time-panel rank by recency."""
    rng = np.random.default_rng(seed)
    pos_t = _ranks_desc(-record.d_cont[:, 0])
    pos_r = _ranks_desc(heuristic_scores(record, production_ranker_noise, rng))
    return replace(record, pos_r=pos_r, pos_t=pos_t)


def simulate_clicks(record: QueryRecord, cm: ClickModelConfig, seed) -> QueryRecord:
    if record.label_true is None:
        raise ValueError(f"query {record.query_id} has no true grades to click on")
    rng = np.random.default_rng(seed)
    exam = cm.examination(record.pos_r, record.pos_t)
    perceive = np.asarray(cm.perception)[record.label_true]
    examined = rng.random(record.n_docs) < exam
    perceived = rng.random(record.n_docs) < perceive
    obs = np.where(examined & perceived, record.label_true, 0).astype(np.int64)
    return replace(record, label_obs=obs)


# ---------------------------------------------------------------- generation


def calibrate_thresholds(utilities: np.ndarray, grade_counts: Sequence[float]) -> np.ndarray:
    """Utility cut points whose grade shares match ``grade_counts`` proportions."""
    counts = np.asarray(grade_counts, dtype=np.float64)
    shares = counts / counts.sum()
    cum = np.cumsum(shares)[:-1]
    return np.quantile(utilities, cum)


def generate_log(cfg: SimConfig) -> tuple[list[QueryRecord], FeatureSchema, Truth]:
    profiles = cfg.profiles()
    weights = np.stack([p.utility_weights for p in profiles])
    prior = cfg.prior()
    n_cohorts = len(profiles)
    period = int(cfg.period_days * 86400)
    drafts = []
    user_cohort: dict[str, int] = {}
    query_cohort: dict[str, int] = {}
    for u in range(cfg.n_users):
        rng = _user_rng(cfg.seed, u)
        user_id = f"u{u:05d}"
        home = int(rng.choice(n_cohorts, p=prior))
        user_cohort[user_id] = home
        n_q = int(rng.integers(cfg.queries_per_user[0], cfg.queries_per_user[1] + 1))
        user_type = int(rng.random() < COMMERCIAL_RATE[home % len(COMMERCIAL_RATE)])
        language = int(rng.integers(N_LANGUAGES))
        mailbox = float(np.exp(rng.normal(8.0, 1.0)))
        times = np.sort(rng.integers(0, period, size=n_q))
        active = home
        for j in range(n_q):
            if j > 0 and rng.random() >= cfg.cohort_stay:
                active = int(rng.choice(n_cohorts, p=prior))
            qid = f"{user_id}-q{j:02d}"
            query_cohort[qid] = active
            n = int(np.clip(round(rng.normal(cfg.candidates_mean, cfg.candidates_std)), cfg.candidates_min, cfg.candidates_max))
            d_disc, d_cont, qd_cont = _draw_candidates(rng, n, cfg.target_rate)
            util = signal_matrix(d_disc, d_cont, qd_cont) @ weights[active]
            util = util + rng.normal(0.0, cfg.noise_std, size=n)
            q_cont = np.array([1.0 + rng.poisson(2.0), mailbox * math.exp(rng.normal(0, 0.05))])
            drafts.append((u, qid, user_id, int(times[j]), np.array([user_type, language]), q_cont,
                           d_disc, d_cont, qd_cont, util))
    all_util = np.concatenate([d[-1] for d in drafts])
    if cfg.grade_thresholds is not None:
        thresholds = np.asarray(cfg.grade_thresholds, dtype=np.float64)
    else:
        thresholds = calibrate_thresholds(all_util, cfg.grade_counts)
    if np.any(np.diff(thresholds) <= 0):
        raise ConfigError(f"grade thresholds collapse to an empty band: {thresholds}")
    records = []
    for i, (u, qid, user_id, ts, q_disc, q_cont, d_disc, d_cont, qd_cont, util) in enumerate(drafts):
        grades = np.searchsorted(thresholds, util, side="right").astype(np.int64)
        n = len(util)
        rec = QueryRecord(
            query_id=qid, user_id=user_id, timestamp=ts, q_disc=q_disc, q_cont=q_cont,
            doc_ids=[f"{qid}-d{j:02d}" for j in range(n)],
            d_disc=d_disc, d_cont=d_cont, qd_cont=qd_cont,
            pos_r=np.arange(1, n + 1), pos_t=np.arange(1, n + 1),
            label_obs=np.zeros(n, dtype=np.int64), label_true=grades,
        )
        rec = assign_positions(rec, cfg.ranker_noise, [cfg.seed, u, 1, i])
        rec = simulate_clicks(rec, cfg.click, [cfg.seed, u, 2, i])
        records.append(rec)
    truth = Truth(cfg.click, user_cohort, query_cohort, thresholds, profiles)
    return records, make_schema(), truth


# ---------------------------------------------------------------- truth files


def export_truth(truth: Truth, directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "propensity": directory / "propensity.tsv",
        "cohorts": directory / "cohorts.tsv",
        "query_cohorts": directory / "query_cohorts.tsv",
    }
    with open(paths["propensity"], "w") as fh:
        fh.write("pos_r\tpos_t\tprobability\n")
        for pr, pt, p in truth.propensity_table():
            fh.write(f"{pr}\t{pt}\t{p!r}\n")
    with open(paths["cohorts"], "w") as fh:
        fh.write("user_id\tcohort_id\n")
        for user, c in sorted(truth.user_cohort.items()):
            fh.write(f"{user}\t{c}\n")
    with open(paths["query_cohorts"], "w") as fh:
        fh.write("query_id\tcohort_id\n")
        for qid, c in sorted(truth.query_cohort.items()):
            fh.write(f"{qid}\t{c}\n")
    return paths


def load_propensity_table(path) -> dict[tuple[int, int], float]:
    table = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            pr, pt, p = line.rstrip("\n").split("\t")
            table[(int(pr), int(pt))] = float(p)
    return table


def load_cohorts(path) -> dict[str, int]:
    with open(path) as fh:
        next(fh)
        return {u: int(c) for u, c in (line.rstrip("\n").split("\t") for line in fh)}
