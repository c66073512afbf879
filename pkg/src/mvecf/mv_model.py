"""Matrix factorization with a mean-variance portfolio term.

Two trainable forms share one set of hyperparameters:

* the regularized model, WMF loss plus
  ``lambda_mv * sum_u (gamma/2 yhat_u' S yhat_u - mu' yhat_u)``, fitted by
  gradient descent (:func:`fit_mvecf_reg`);
* the restructured model, where the cross-covariance term uses the user's
  current holdings ``y_uj / h_u`` instead of predictions. That objective is an
  ordinary WMF over modified ratings ``y_tilde`` with confidences
  ``c_tilde`` and is fitted by ALS (:func:`fit_mvecf_wmf`).

``h_u`` is the number of items user ``u`` holds in the training data.
Modified ratings are built one block of user rows at a time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .holdings_data import InteractionMatrix
from .market_stats import MarketStats
from .wmf import (
    BLOCK_SIZE,
    Hyperparams,
    Penalty,
    RatingTarget,
    fit_als,
    fit_gd,
    wmf_targets,
)


@dataclass(frozen=True)
class ModifiedRatings:
    """Per-pair MV quantities for one user row (1-d) or a block of rows (2-d)."""

    c_mv: np.ndarray
    y_mv: np.ndarray
    c_tilde: np.ndarray
    y_tilde: np.ndarray


def _check_universe(train: InteractionMatrix, stats: MarketStats):
    if train.n != stats.n_items:
        raise DataError(f"holdings cover {train.n} items but stats cover {stats.n_items}")


def holdings_cross_cov(y: np.ndarray, stats: MarketStats) -> np.ndarray:
    """``sum_{j != i} y_uj sigma_ij / h_u`` for each row of ``y``."""
    h = y.sum(axis=1, keepdims=True)
    if np.any(h <= 0):
        raise DataError("every user needs at least one holding")
    cross = y @ stats.sigma - y * stats.variances
    return cross / h


def mv_rating_block(y: np.ndarray, stats: MarketStats, hyper: Hyperparams) -> ModifiedRatings:
    """Modified ratings for dense binary holdings rows ``y`` (b x n)."""
    y = np.asarray(y, dtype=float)
    c = np.where(y > 0, hyper.c_pos, hyper.c_neg)
    if hyper.lambda_mv == 0:
        # exact reduction to plain WMF targets
        zeros = np.zeros_like(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            y_mv = (stats.mu / hyper.gamma - 0.5 * holdings_cross_cov(y, stats)) / stats.variances
        return ModifiedRatings(zeros, y_mv, c, y.copy())
    var = stats.variances
    cross = holdings_cross_cov(y, stats)
    c_mv = np.broadcast_to(0.5 * hyper.gamma * hyper.lambda_mv * var, y.shape).copy()
    # c_mv * y_mv without dividing by the variance
    mv_mass = hyper.lambda_mv * (0.5 * stats.mu - 0.25 * hyper.gamma * cross)
    with np.errstate(divide="ignore", invalid="ignore"):
        y_mv = (stats.mu / hyper.gamma - 0.5 * cross) / var
    c_tilde = c + c_mv
    y_tilde = (c * y + mv_mass) / c_tilde
    return ModifiedRatings(c_mv, y_mv, c_tilde, y_tilde)


def mv_ratings(train: InteractionMatrix, stats: MarketStats, hyper: Hyperparams, u: int) -> ModifiedRatings:
    """Modified ratings for every item of user ``u``."""
    _check_universe(train, stats)
    if not 0 <= u < train.m:
        raise IndexError(f"user index {u} out of range")
    block = mv_rating_block(train.dense_rows(u, u + 1), stats, hyper)
    return ModifiedRatings(*(a[0] for a in (block.c_mv, block.y_mv, block.c_tilde, block.y_tilde)))


class MVTarget(RatingTarget):
    """``(y_tilde, c_tilde)`` rows computed on demand from sparse holdings."""

    def __init__(self, train: InteractionMatrix, stats: MarketStats, hyper: Hyperparams):
        _check_universe(train, stats)
        self.train = train
        self.stats = stats
        self.hyper = hyper
        self.m, self.n = train.shape

    def block(self, lo, hi):
        r = mv_rating_block(self.train.dense_rows(lo, hi), self.stats, self.hyper)
        return r.y_tilde, r.c_tilde

    def ratings(self, lo, hi) -> ModifiedRatings:
        return mv_rating_block(self.train.dense_rows(lo, hi), self.stats, self.hyper)


def fit_mvecf_wmf(train, stats, hyper, init=None, *, validation=None, threads: int = 1):
    """ALS on the modified ratings; the trace holds the restructured objective."""
    target = MVTarget(train, stats, hyper)
    return fit_als(target, hyper, init, validation=validation, threads=threads)


def _pairwise_fit(model, train, hyper):
    total = 0.0
    for lo in range(0, train.m, BLOCK_SIZE):
        hi = min(lo + BLOCK_SIZE, train.m)
        y = train.dense_rows(lo, hi)
        c = np.where(y > 0, hyper.c_pos, hyper.c_neg)
        r = y - model.P[lo:hi] @ model.Q.T
        total += float(np.sum(c * r * r))
    return total


def _l2(model, hyper):
    return hyper.lambda_reg * (float(np.sum(model.P ** 2)) + float(np.sum(model.Q ** 2)))


def loss_mv_reg(model, train: InteractionMatrix, stats: MarketStats, hyper: Hyperparams) -> float:
    """WMF loss plus the mean-variance regularizer on predicted holdings."""
    _check_universe(train, stats)
    loss = _pairwise_fit(model, train, hyper) + _l2(model, hyper)
    if hyper.lambda_mv:
        mv = 0.0
        for lo in range(0, train.m, BLOCK_SIZE):
            yhat = model.P[lo:lo + BLOCK_SIZE] @ model.Q.T
            mv += 0.5 * hyper.gamma * float(np.sum((yhat @ stats.sigma) * yhat)) - float(np.sum(yhat @ stats.mu))
        loss += hyper.lambda_mv * mv
    return loss


def loss_mv_wmf_form(model, train: InteractionMatrix, stats: MarketStats, hyper: Hyperparams) -> float:
    """The restructured objective before completing the square.

    ``sum_ui [c_tilde yhat^2 - (2 c y - gamma/2 lambda_mv X + lambda_mv mu_i) yhat + c y^2]``
    plus L2, where ``X`` is the holdings cross-covariance term.
    """
    _check_universe(train, stats)
    lam_mv, gamma = hyper.lambda_mv, hyper.gamma
    var = stats.variances
    total = 0.0
    for lo in range(0, train.m, BLOCK_SIZE):
        hi = min(lo + BLOCK_SIZE, train.m)
        y = train.dense_rows(lo, hi)
        c = np.where(y > 0, hyper.c_pos, hyper.c_neg)
        yhat = model.P[lo:hi] @ model.Q.T
        quad = c + 0.5 * gamma * lam_mv * var
        if lam_mv:
            lin = 2 * c * y - 0.5 * gamma * lam_mv * holdings_cross_cov(y, stats) + lam_mv * stats.mu
        else:
            lin = 2 * c * y
        total += float(np.sum(quad * yhat * yhat - lin * yhat + c * y * y))
    return total + _l2(model, hyper)


class MVPenalty(Penalty):
    """``lambda_mv * sum_u (gamma/2 yhat_u' S yhat_u - mu' yhat_u)`` with ``yhat_u = Q p_u``."""

    def __init__(self, stats: MarketStats, lambda_mv: float, gamma: float):
        self.stats = stats
        self.lambda_mv = float(lambda_mv)
        self.gamma = float(gamma)

    def value(self, P, Q):
        if not self.lambda_mv:
            return 0.0
        M = Q.T @ self.stats.sigma @ Q
        quad = float(np.sum((P @ M) * P))
        lin = float(P.sum(axis=0) @ (Q.T @ self.stats.mu))
        return self.lambda_mv * (0.5 * self.gamma * quad - lin)

    def grad_p(self, P_block, Q):
        M = Q.T @ self.stats.sigma @ Q
        return self.lambda_mv * (self.gamma * P_block @ M - Q.T @ self.stats.mu)

    def grad_q(self, P, Q):
        S = self.stats.sigma
        return self.lambda_mv * (self.gamma * S @ Q @ (P.T @ P) - np.outer(self.stats.mu, P.sum(axis=0)))


def fit_mvecf_reg(train, stats, hyper, init=None, *, validation=None):
    """Gradient descent on :func:`loss_mv_reg` with step ``hyper.alpha``."""
    _check_universe(train, stats)
    penalty = MVPenalty(stats, hyper.lambda_mv, hyper.gamma)
    return fit_gd(wmf_targets(train, hyper), hyper, penalty, init, validation=validation)
