"""Ranking metrics and ex-ante / ex-post mean-variance efficiency metrics.

Two recommendation protocols share :func:`topk_recommend`:

* accuracy: rank every item outside the user's train and validation holdings
  and score hits against the test holdings (MAP@k, Recall@k);
* efficiency: rank every item outside all known holdings, add the top ``k``
  to the current portfolio with equal weights and compare Sharpe ratios.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError, InsufficientUniverseError
from .market_stats import MarketStats, ReturnsPanel

SCHEMA_VERSION = "1.0"
ZERO_RISK_RTOL = 1e-12


@dataclass
class RecommendationList:
    """Per-user ordered items and scores; rows of ``items`` are rank order."""

    items: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64).reshape(len(self.items), -1)
        self.scores = np.asarray(self.scores, dtype=float).reshape(self.items.shape)

    @property
    def k(self) -> int:
        return self.items.shape[1]

    def __len__(self):
        return self.items.shape[0]

    def user(self, u: int) -> list[int]:
        return self.items[u].tolist()

    def to_csv(self, path, user_ids, item_ids) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["user_id", "rank", "item_id", "score"])
            for u in range(len(self)):
                for r in range(self.k):
                    writer.writerow([user_ids[u], r + 1, item_ids[self.items[u, r]], repr(float(self.scores[u, r]))])

    @classmethod
    def from_csv(cls, path, user_ids, item_ids) -> "RecommendationList":
        uidx = {u: k for k, u in enumerate(user_ids)}
        iidx = {i: k for k, i in enumerate(item_ids)}
        rows: dict[int, list] = {u: [] for u in range(len(user_ids))}
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                rows[uidx[rec["user_id"]]].append((int(rec["rank"]), iidx[rec["item_id"]], float(rec["score"])))
        ks = {len(v) for v in rows.values()}
        if len(ks) != 1:
            raise DataError("recommendation lists have unequal lengths")
        k = ks.pop()
        items = np.zeros((len(user_ids), k), dtype=np.int64)
        scores = np.zeros((len(user_ids), k))
        for u, recs in rows.items():
            recs.sort()
            items[u] = [r[1] for r in recs]
            scores[u] = [r[2] for r in recs]
        return cls(items, scores)


def _top_k_row(scores, excluded, k):
    s = np.array(scores, dtype=float)
    if excluded is not None and len(excluded):
        s[np.asarray(list(excluded), dtype=int)] = -np.inf
    allowed = np.count_nonzero(np.isfinite(s))
    if k > allowed:
        raise InsufficientUniverseError(f"asked for {k} items but only {allowed} are eligible")
    # stable sort on -score: ties resolve by ascending item index
    order = np.argsort(-s, kind="stable")[:k]
    return order, s[order]


def topk_from_scores(score_rows, exclude, k: int) -> RecommendationList:
    """Top ``k`` per row of a score matrix, skipping each row's excluded items."""
    m = len(score_rows)
    items = np.zeros((m, k), dtype=np.int64)
    scores = np.zeros((m, k))
    for u in range(m):
        items[u], scores[u] = _top_k_row(score_rows[u], exclude[u] if exclude is not None else None, k)
    return RecommendationList(items, scores)


def topk_recommend(model, exclude, k: int) -> RecommendationList:
    """The ``k`` highest-rated items per user outside ``exclude[u]``."""
    m = model.m
    items = np.zeros((m, k), dtype=np.int64)
    scores = np.zeros((m, k))
    for lo in range(0, m, 256):
        block = model.scores(lo, min(lo + 256, m))
        for r, row in enumerate(block):
            u = lo + r
            items[u], scores[u] = _top_k_row(row, exclude[u] if exclude is not None else None, k)
    return RecommendationList(items, scores)


def average_precision(ranked, relevant, k: int) -> float:
    relevant = set(int(i) for i in relevant)
    hits, total = 0, 0.0
    for r, item in enumerate(list(ranked)[:k], start=1):
        if int(item) in relevant:
            hits += 1
            total += hits / r
    return total / min(len(relevant), k)


def map_at_k(recs: RecommendationList, relevant, k: int = 20) -> float:
    """Mean AP@k over users with at least one relevant item (NaN if none)."""
    aps = [average_precision(recs.items[u], rel, k) for u, rel in enumerate(relevant) if len(rel)]
    return float(np.mean(aps)) if aps else float("nan")


def recall_at_k(recs: RecommendationList, relevant, k: int = 20) -> float:
    vals = []
    for u, rel in enumerate(relevant):
        if len(rel):
            top = set(recs.items[u, :k].tolist())
            vals.append(len(top.intersection(int(i) for i in rel)) / len(rel))
    return float(np.mean(vals)) if vals else float("nan")


def equal_weights(n: int, items) -> np.ndarray:
    items = np.asarray(list(items), dtype=int)
    w = np.zeros(n)
    if items.size:
        w[items] = 1.0 / items.size
    return w


def _sr(ret, var):
    if var <= ZERO_RISK_RTOL * max(ret * ret, 1e-300) or var <= 0:
        return None
    return ret / math.sqrt(var)


@dataclass
class PortfolioSummary:
    """Mean deltas across users plus per-user rows.

    ``delta_sr`` and ``p_sr_improved`` use only users whose before and after
    portfolios both have nonzero risk; the rest are counted in ``n_zero_risk``.
    """

    delta_mu: float
    delta_sigma: float
    delta_sr: float
    p_sr_improved: float
    n_users: int
    n_zero_risk: int
    rows: list = field(default_factory=list)


def _summarize(rows):
    valid = [r for r in rows if r["sr_init"] is not None and r["sr_rec"] is not None]
    dsr = [r["sr_rec"] - r["sr_init"] for r in valid]
    return PortfolioSummary(
        delta_mu=float(np.mean([r["mu_rec"] - r["mu_init"] for r in rows])) if rows else 0.0,
        delta_sigma=float(np.mean([r["sigma_rec"] - r["sigma_init"] for r in rows])) if rows else 0.0,
        delta_sr=float(np.mean(dsr)) if dsr else float("nan"),
        p_sr_improved=float(np.mean([d > 0 for d in dsr])) if dsr else float("nan"),
        n_users=len(rows),
        n_zero_risk=len(rows) - len(valid),
        rows=rows,
    )


def _check_disjoint(holdings, recs):
    for u, held in enumerate(holdings):
        if len(held) == 0:
            raise DataError(f"user {u} has no holdings")
        if recs is not None and recs.k and set(recs.items[u].tolist()) & set(int(i) for i in held):
            raise DataError(f"recommendations for user {u} overlap its holdings")


def portfolio_metrics(holdings, recs: RecommendationList | None, stats: MarketStats) -> PortfolioSummary:
    """Equal-weight portfolio before and after adding the recommended items."""
    _check_disjoint(holdings, recs)
    n = stats.n_items
    rows = []
    for u, held in enumerate(holdings):
        held = np.asarray(list(held), dtype=int)
        added = recs.items[u] if recs is not None else np.zeros(0, dtype=int)
        w0 = equal_weights(n, held)
        w1 = equal_weights(n, np.concatenate([held, added]))
        mu0, var0 = float(stats.mu @ w0), float(w0 @ stats.sigma @ w0)
        mu1, var1 = float(stats.mu @ w1), float(w1 @ stats.sigma @ w1)
        rows.append({
            "user": u,
            "mu_init": mu0,
            "mu_rec": mu1,
            "sigma_init": math.sqrt(max(var0, 0.0)),
            "sigma_rec": math.sqrt(max(var1, 0.0)),
            "sr_init": _sr(mu0, var0),
            "sr_rec": _sr(mu1, var1),
        })
    return _summarize(rows)


def expost_metrics(holdings, recs: RecommendationList | None, expost_panel: ReturnsPanel, annualize: bool = False) -> PortfolioSummary | None:
    """Realized Sharpe ratios of the same equal-weight portfolios.

    Weights stay fixed over the panel (no drift). Realized SR is the mean
    over the unbiased standard deviation of portfolio returns, scaled by
    ``sqrt(periods_per_year)`` when ``annualize`` is set. Returns None when
    the panel has fewer than two periods.
    """
    if expost_panel is None or expost_panel.n_periods < 2:
        return None
    _check_disjoint(holdings, recs)
    R = expost_panel.returns
    n = R.shape[1]
    scale = expost_panel.periods_per_year if annualize else 1
    rows = []
    for u, held in enumerate(holdings):
        held = np.asarray(list(held), dtype=int)
        added = recs.items[u] if recs is not None else np.zeros(0, dtype=int)
        out = {"user": u}
        for tag, items in (("init", held), ("rec", np.concatenate([held, added]))):
            rp = R @ equal_weights(n, items)
            mean = float(rp.mean()) * scale
            var = float(rp.var(ddof=1)) * scale
            out[f"mu_{tag}"] = mean
            out[f"sigma_{tag}"] = math.sqrt(var)
            out[f"sr_{tag}"] = _sr(mean, var)
        rows.append(out)
    return _summarize(rows)


@dataclass
class EvalReport:
    map_at_k: float
    recall_at_k: float
    delta_mu: float
    delta_sigma: float
    delta_sr: float
    p_sr_improved: float
    expost_delta_sr: float | None = None
    expost_p_sr_improved: float | None = None
    k: int = 20
    n_users: int = 0
    n_users_no_test: int = 0
    n_zero_risk: int = 0
    expost_n_zero_risk: int | None = None
    expost_delta_mu: float | None = None
    expost_delta_sigma: float | None = None
    per_user: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        d = asdict(self)
        d.pop("per_user")
        d.pop("metadata")
        return d

    def to_json(self) -> str:
        doc = {"schema_version": SCHEMA_VERSION, "metrics": _clean(self.metrics()), "metadata": _clean(self.metadata)}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write_per_user(self, path, user_ids) -> None:
        if not self.per_user:
            return
        cols = list(self.per_user[0].keys())
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["user_id"] + [c for c in cols if c != "user"])
            for row in self.per_user:
                writer.writerow([user_ids[row["user"]]] + [_fmt(row[c]) for c in cols if c != "user"])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def evaluate(accuracy_recs, efficiency_recs, test_sets, holdings, stats, expost_panel=None, k: int = 20, annualize_expost: bool = False) -> EvalReport:
    """Assemble an :class:`EvalReport` from both recommendation protocols."""
    ex_ante = portfolio_metrics(holdings, efficiency_recs, stats)
    ex_post = expost_metrics(holdings, efficiency_recs, expost_panel, annualize_expost)
    per_user = []
    for u, row in enumerate(ex_ante.rows):
        rel = test_sets[u]
        out = {
            "user": u,
            "n_holdings": len(holdings[u]),
            "n_test": len(rel),
            "ap_at_k": average_precision(accuracy_recs.items[u], rel, k) if len(rel) else None,
            "recall_at_k": (len(set(accuracy_recs.items[u, :k].tolist()) & set(int(i) for i in rel)) / len(rel)) if len(rel) else None,
        }
        out.update({f"{key}": row[key] for key in ("mu_init", "mu_rec", "sigma_init", "sigma_rec", "sr_init", "sr_rec")})
        if ex_post is not None:
            out.update({f"expost_{key}": ex_post.rows[u][key] for key in ("sr_init", "sr_rec")})
        per_user.append(out)
    return EvalReport(
        map_at_k=map_at_k(accuracy_recs, test_sets, k),
        recall_at_k=recall_at_k(accuracy_recs, test_sets, k),
        delta_mu=ex_ante.delta_mu,
        delta_sigma=ex_ante.delta_sigma,
        delta_sr=ex_ante.delta_sr,
        p_sr_improved=ex_ante.p_sr_improved,
        expost_delta_sr=None if ex_post is None else ex_post.delta_sr,
        expost_p_sr_improved=None if ex_post is None else ex_post.p_sr_improved,
        expost_delta_mu=None if ex_post is None else ex_post.delta_mu,
        expost_delta_sigma=None if ex_post is None else ex_post.delta_sigma,
        expost_n_zero_risk=None if ex_post is None else ex_post.n_zero_risk,
        k=k,
        n_users=ex_ante.n_users,
        n_users_no_test=sum(1 for rel in test_sets if not len(rel)),
        n_zero_risk=ex_ante.n_zero_risk,
        per_user=per_user,
        metadata={
            "accuracy_protocol": "rank items outside train+validation holdings; hits scored against test holdings",
            "efficiency_protocol": "rank items outside all holdings; equal-weight portfolios before/after adding top-k",
            "ap_normalizer": "min(|relevant|, k)",
            "expost_available": ex_post is not None,
        },
    )
