"""Pairwise ranking: BPR, its novelty variant, and MV-efficient relabeling.

BPR minimizes ``sum -log sigmoid(yhat_ui - yhat_uj)`` over triples with ``i``
positive and ``j`` negative for user ``u``. The novelty variant draws a
``beta`` share of its triples from pairs whose return-correlation distance is
below ``tau_dist``. Relabeling turns the modified MVECF ratings into a new
positive/negative split that any ranking model can train on.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

from .errors import ConfigError, DataError, SamplingStarvationError, ThresholdUndefinedError
from .holdings_data import InteractionMatrix
from .market_stats import MAX_DISSIMILARITY, MarketStats
from .mv_model import MVTarget
from .wmf import FactorModel, Hyperparams, init_model

logger = logging.getLogger(__name__)

MAX_RETRIES = 100_000


@dataclass(frozen=True)
class RankingConfig:
    l: int = 30
    alpha: float = 0.001
    lambda_reg: float = 1e-5
    tau_dist: float = 0.9
    beta: float = 0.8
    epochs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if int(self.l) < 1:
            raise ConfigError("latent dimension l must be >= 1")
        if self.alpha <= 0 or self.lambda_reg < 0:
            raise ConfigError("alpha must be positive and lambda_reg nonnegative")
        if not 0.0 <= self.tau_dist <= MAX_DISSIMILARITY:
            raise ConfigError("tau_dist must lie in [0, sqrt(2)]")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must be a probability")
        if int(self.epochs) < 0:
            raise ConfigError("epochs must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_csr(positives, universe=None) -> sp.csr_matrix:
    if isinstance(positives, InteractionMatrix):
        mat = positives.matrix
    elif sp.issparse(positives):
        mat = sp.csr_matrix(positives, dtype=np.float64)
    else:
        pairs = np.asarray(list(positives), dtype=int).reshape(-1, 2)
        if universe is None:
            raise DataError("universe (m, n) is required for a pair list")
        mat = sp.csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=universe)
    mat = mat.copy()
    mat.sum_duplicates()
    mat.data[:] = 1.0
    mat.eliminate_zeros()
    mat.sort_indices()
    if universe is not None and mat.shape != tuple(universe):
        raise DataError(f"positives shape {mat.shape} does not match universe {tuple(universe)}")
    return mat


class TripleSampler:
    """Draws ``(u, i, j)`` triples, optionally favouring close item pairs.

    Unrestricted draws are uniform over all triples with ``i`` positive and
    ``j`` negative. With probability ``beta`` a draw is instead uniform over
    the triples whose item distance is below ``tau_dist``: the user is picked
    in proportion to its count of such triples, then pairs are rejected until
    one qualifies. Users without a positive or without a negative are
    skipped.
    """

    def __init__(self, positives, dist: np.ndarray | None = None, tau_dist: float = MAX_DISSIMILARITY, beta: float = 0.0):
        self.pos = _as_csr(positives)
        m, n = self.pos.shape
        self.m, self.n = m, n
        self.counts = np.diff(self.pos.indptr)
        valid = (self.counts > 0) & (self.counts < n)
        skipped = np.flatnonzero(~valid)
        if skipped.size:
            logger.warning("skipping %d users with no positive or no negative item", skipped.size)
        self.users = np.flatnonzero(valid)
        if self.users.size == 0:
            raise DataError("no user has both a positive and a negative item")
        weights = self.counts[self.users] * (n - self.counts[self.users]).astype(float)
        self.p_all = weights / weights.sum()
        self.keys = np.sort(np.repeat(np.arange(m), self.counts) * n + self.pos.indices)
        self.beta = float(beta)
        self.tau = float(tau_dist)
        self.close = None
        if self.beta > 0:
            if dist is None:
                raise DataError("a distance matrix is required when beta > 0")
            self.close = np.asarray(dist) < self.tau
            per_item = self.close.sum(axis=1)
            close_counts = np.zeros(self.users.size)
            for k, u in enumerate(self.users):
                items = self.pos.indices[self.pos.indptr[u]:self.pos.indptr[u + 1]]
                close_counts[k] = per_item[items].sum() - self.close[np.ix_(items, items)].sum()
            if close_counts.sum() == 0:
                logger.warning("no triple has distance below %.3f; sampling from all triples", self.tau)
                self.beta = 0.0
            else:
                self.p_close = close_counts / close_counts.sum()

    def _is_positive(self, u, j):
        keys = u * self.n + j
        loc = np.searchsorted(self.keys, keys)
        loc = np.minimum(loc, self.keys.size - 1)
        return self.keys[loc] == keys

    def _draw_pairs(self, rng, u):
        start = self.pos.indptr[u]
        i = self.pos.indices[start + (rng.random(u.size) * self.counts[u]).astype(int)]
        j = rng.integers(self.n, size=u.size)
        bad = self._is_positive(u, j)
        while bad.any():
            j[bad] = rng.integers(self.n, size=int(bad.sum()))
            bad[bad] = self._is_positive(u[bad], j[bad])
        return i, j

    def sample_batch(self, rng: np.random.Generator, size: int):
        """Return arrays ``(u, i, j, restricted)`` of length ``size``."""
        restricted = rng.random(size) < self.beta
        u = np.empty(size, dtype=np.int64)
        i = np.empty(size, dtype=np.int64)
        j = np.empty(size, dtype=np.int64)
        free = np.flatnonzero(~restricted)
        if free.size:
            uu = self.users[rng.choice(self.users.size, size=free.size, p=self.p_all)]
            u[free] = uu
            i[free], j[free] = self._draw_pairs(rng, uu)
        idx = np.flatnonzero(restricted)
        if idx.size:
            uu = self.users[rng.choice(self.users.size, size=idx.size, p=self.p_close)]
            ii, jj = self._draw_pairs(rng, uu)
            todo = ~self.close[ii, jj]
            retries = 0
            while todo.any():
                retries += 1
                if retries > MAX_RETRIES:
                    user = int(uu[np.flatnonzero(todo)[0]])
                    raise SamplingStarvationError(f"no close pair found for user {user} after {MAX_RETRIES} draws", user=user)
                ii[todo], jj[todo] = self._draw_pairs(rng, uu[todo])
                todo[todo] = ~self.close[ii[todo], jj[todo]]
            u[idx], i[idx], j[idx] = uu, ii, jj
        return u, i, j, restricted


def sample_triple_nov(positives, dist, cfg: RankingConfig, rng: np.random.Generator):
    """One novelty-BPR triple ``(u, i, j)``.

    ``positives`` may be a prepared :class:`TripleSampler`, which avoids
    recounting close pairs on every call.
    """
    if isinstance(positives, TripleSampler):
        sampler = positives
    else:
        sampler = TripleSampler(positives, dist, cfg.tau_dist, cfg.beta)
    u, i, j, _ = sampler.sample_batch(rng, 1)
    return int(u[0]), int(i[0]), int(j[0])


@njit(cache=True)
def _bpr_epoch(P, Q, users, pos, neg, alpha, lam):
    total = 0.0
    l = P.shape[1]
    for t in range(users.size):
        u, i, j = users[t], pos[t], neg[t]
        x = 0.0
        for k in range(l):
            x += P[u, k] * (Q[i, k] - Q[j, k])
        if x > -30.0:
            total += math.log1p(math.exp(-x))
        else:
            total += -x
        g = 1.0 / (1.0 + math.exp(x))
        for k in range(l):
            pu, qi, qj = P[u, k], Q[i, k], Q[j, k]
            P[u, k] += alpha * (g * (qi - qj) - lam * pu)
            Q[i, k] += alpha * (g * pu - lam * qi)
            Q[j, k] += alpha * (-g * pu - lam * qj)
    return total / max(users.size, 1)


def bpr_triple_loss(model: FactorModel, u, i, j) -> np.ndarray:
    x = np.einsum("tk,tk->t", model.P[u], model.Q[i] - model.Q[j])
    return np.logaddexp(0.0, -x)


def fit_bpr(positives, universe, cfg: RankingConfig, dist: np.ndarray | None = None, *, novelty: bool = False, history: list | None = None) -> FactorModel:
    """SGD over sampled triples, one update of ``p_u, q_i, q_j`` per triple.

    Each epoch draws as many triples as there are positives. With
    ``novelty`` set, triples come from the distance-aware sampler built on
    ``dist`` (needs ``cfg.beta`` and ``cfg.tau_dist``). Mean triple loss per
    epoch is appended to ``history`` when given.
    """
    m, n = universe
    pos = _as_csr(positives, (m, n))
    if novelty:
        sampler = TripleSampler(pos, dist, cfg.tau_dist, cfg.beta)
    else:
        sampler = TripleSampler(pos)
    model = init_model(m, n, cfg.l, cfg.seed)
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 2]))
    size = int(pos.nnz)
    for epoch in range(int(cfg.epochs)):
        u, i, j, _ = sampler.sample_batch(rng, size)
        loss = _bpr_epoch(model.P, model.Q, u, i, j, cfg.alpha, cfg.lambda_reg)
        if history is not None:
            history.append(float(loss))
    return model


@dataclass
class RelabeledInteractions:
    positives: sp.csr_matrix
    negatives: sp.csr_matrix
    tau_s: float
    conversion_stats: dict = field(default_factory=dict)
    user_ids: tuple = ()
    item_ids: tuple = ()

    def to_csv(self, path) -> None:
        """Write every pair as ``user_id,item_id,label`` (1 positive, 0 negative)."""
        m, n = self.positives.shape
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["user_id", "item_id", "label"])
            for u in range(m):
                row = np.zeros(n, dtype=int)
                row[self.positives.indices[self.positives.indptr[u]:self.positives.indptr[u + 1]]] = 1
                for i in range(n):
                    writer.writerow([self.user_ids[u], self.item_ids[i], row[i]])


def mv_efficient_relabel(train: InteractionMatrix, stats: MarketStats, hyper: Hyperparams, conversion_fraction: float = 0.01) -> RelabeledInteractions:
    """Relabel pairs by thresholding the modified rating ``y_tilde``.

    The threshold is chosen over originally negative pairs so that a
    ``conversion_fraction`` share of them lies strictly above it. Pairs above
    the threshold become positive and pairs below become negative, which can
    also demote held items; pairs exactly at the threshold keep their label.
    """
    if not 0.0 < conversion_fraction < 1.0:
        raise ConfigError("conversion_fraction must lie in (0, 1)")
    target = MVTarget(train, stats, hyper)
    neg_values = []
    for lo, hi in target.blocks():
        y = train.dense_rows(lo, hi)
        neg_values.append(target.block(lo, hi)[0][y == 0])
    neg_values = np.concatenate(neg_values)
    if neg_values.size == 0:
        raise ThresholdUndefinedError("there are no negative pairs to convert")
    k = int(round(conversion_fraction * neg_values.size))
    ordered = np.sort(neg_values)[::-1]
    if ordered[0] == ordered[-1] or k == 0:
        raise ThresholdUndefinedError("modified ratings of negative pairs are all equal" if k else "conversion count rounds to zero")
    tau = float(ordered[min(k, ordered.size - 1)])
    if not ordered[0] > tau:
        raise ThresholdUndefinedError("no negative pair lies above the threshold")

    rows, cols = [], []
    neg_to_pos = pos_to_neg = 0
    for lo, hi in target.blocks():
        y = train.dense_rows(lo, hi) > 0
        yt = target.block(lo, hi)[0]
        label = (yt > tau) | ((yt == tau) & y)
        neg_to_pos += int(np.sum(label & ~y))
        pos_to_neg += int(np.sum(~label & y))
        r, c = np.nonzero(label)
        rows.append(r + lo)
        cols.append(c)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    m, n = train.shape
    positives = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(m, n))
    negatives = sp.csr_matrix(np.ones((m, n)) - positives.toarray())
    n_neg = int(neg_values.size)
    stats_out = {
        "original_positives": int(train.nnz),
        "original_negatives": n_neg,
        "negatives_to_positive": neg_to_pos,
        "positives_to_negative": pos_to_neg,
        "converted_fraction": neg_to_pos / n_neg,
    }
    if neg_to_pos == 0:
        logger.warning("relabeling converted no negative pair")
    return RelabeledInteractions(positives, negatives, tau, stats_out, train.user_ids, train.item_ids)
