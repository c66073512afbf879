"""Long-only mean-variance optimization and the two-step re-ranking baseline."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NonConvergenceError
from .market_stats import MarketStats

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MVProblem:
    """``min gamma/2 w'Sw - mu'w`` over the probability simplex."""

    candidate_items: tuple
    mu_sub: np.ndarray
    sigma_sub: np.ndarray
    gamma: float = 3.0

    def __post_init__(self):
        items = tuple(int(i) for i in self.candidate_items)
        mu = np.asarray(self.mu_sub, dtype=float).ravel()
        sigma = np.atleast_2d(np.asarray(self.sigma_sub, dtype=float))
        if not items:
            raise DataError("empty candidate list")
        if len(set(items)) != len(items):
            raise DataError("duplicate candidate items")
        if mu.size != len(items) or sigma.shape != (mu.size, mu.size):
            raise DataError("moment shapes do not match the candidate list")
        if np.max(np.abs(sigma - sigma.T)) > 1e-12:
            raise DataError("sigma_sub is not symmetric")
        if self.gamma <= 0:
            raise DataError("gamma must be positive")
        object.__setattr__(self, "candidate_items", items)
        object.__setattr__(self, "mu_sub", mu)
        object.__setattr__(self, "sigma_sub", sigma)

    @classmethod
    def from_stats(cls, stats: MarketStats, items, gamma: float) -> "MVProblem":
        idx = np.asarray(items, dtype=int)
        return cls(tuple(idx.tolist()), stats.mu[idx], stats.sigma[np.ix_(idx, idx)], gamma)

    def objective(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(0.5 * self.gamma * w @ self.sigma_sub @ w - self.mu_sub @ w)

    def gradient(self, w) -> np.ndarray:
        return self.gamma * self.sigma_sub @ w - self.mu_sub


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum w = 1}`` (sort-based, exact)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def kkt_gap(problem: MVProblem, w) -> float:
    """``max_{a: w_a > 0} grad_a - min_b grad_b``; zero at the optimum."""
    g = problem.gradient(w)
    support = w > 0
    return float(np.max(g[support]) - np.min(g))


def solve_mv(problem: MVProblem, tol: float = 1e-10, max_iters: int = 200_000, *, history: list | None = None) -> np.ndarray:
    """Projected gradient with step ``1/L``, ``L`` a Gershgorin bound on ``gamma * Sigma``.

    Stops once the simplex KKT gap is at most ``tol``. If ``history`` is a
    list, the objective after every iteration is appended to it.
    """
    k = problem.mu_sub.size
    if k == 1:
        return np.ones(1)
    L = problem.gamma * float(np.max(np.sum(np.abs(problem.sigma_sub), axis=1)))
    step = 1.0 / max(L, 1e-12 * (1.0 + float(np.max(np.abs(problem.mu_sub)))))
    w = np.full(k, 1.0 / k)
    best, best_gap = w, kkt_gap(problem, w)
    for _ in range(int(max_iters)):
        if best_gap <= tol:
            return best
        w = project_simplex(w - step * problem.gradient(w))
        if history is not None:
            history.append(problem.objective(w))
        gap = kkt_gap(problem, w)
        if gap < best_gap:
            best, best_gap = w, gap
    if best_gap <= tol:
        return best
    raise NonConvergenceError(f"KKT gap {best_gap:.3e} above tol after {max_iters} iterations", best=best)


def two_step_rerank(base_scores, holdings, stats: MarketStats, k_filter: int = 50, k_out: int = 20, gamma: float = 3.0, *, tol: float = 1e-8, max_iters: int = 200_000) -> list[int]:
    """Filter the ``k_filter`` best non-held items, then re-rank by MV weight.

    The MV problem is solved over the candidates together with the current
    holdings. Candidates are ordered by optimal weight, then base score, then
    item index.
    """
    scores = np.asarray(base_scores, dtype=float)
    held = np.unique(np.asarray(list(holdings), dtype=int))
    free = np.setdiff1d(np.arange(scores.size), held)
    if not 0 <= k_out <= k_filter <= free.size:
        raise DataError(f"need k_out <= k_filter <= {free.size} non-held items")
    if k_out == 0:
        return []
    order = np.lexsort((free, -scores[free]))
    candidates = free[order[:k_filter]]
    if k_filter == 1:
        return [int(candidates[0])]
    universe = np.concatenate([candidates, held])
    w = solve_mv(MVProblem.from_stats(stats, universe, gamma), tol=tol, max_iters=max_iters)
    # weights equal up to solver noise count as ties
    cand_w = np.round(w[:candidates.size], 9)
    rank = np.lexsort((candidates, -scores[candidates], -cand_w))
    return [int(i) for i in candidates[rank[:k_out]]]
