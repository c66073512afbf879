"""Return panels and the first two moments of the market.

Sharpe ratios here are raw ``mu @ w / sqrt(w @ sigma @ w)``: no risk-free
rate is subtracted. Whether moments are annualized is a caller choice made in
:func:`estimate_moments`.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    EmptyDataError,
    MomentUndefinedError,
    ParseError,
    UndefinedCorrelationError,
    ZeroRiskError,
)

logger = logging.getLogger(__name__)

MAX_DISSIMILARITY = np.sqrt(2.0)


@dataclass(frozen=True)
class ReturnsPanel:
    """``T x n`` simple returns, one column per item.

    ``period_labels`` are strings whose first four characters are the year
    (``"2015-03"``, ``"2015"``); :meth:`select_years` relies on that.
    """

    returns: np.ndarray
    period_labels: tuple = ()
    periods_per_year: int = 12
    item_ids: tuple = ()

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=float)
        if r.ndim == 1:
            r = r.reshape(-1, 1) if r.size else r.reshape(0, max(len(self.item_ids), 1))
        if r.ndim != 2:
            raise DataError(f"returns must be a 2-d array, got shape {r.shape}")
        if r.shape[1] < 1:
            raise DataError("returns panel needs at least one item")
        if not np.all(np.isfinite(r)):
            raise DataError("returns contain non-finite values")
        if np.any(r <= -1.0):
            raise DataError("returns must be greater than -1")
        if self.periods_per_year < 1:
            raise DataError("periods_per_year must be positive")
        labels = tuple(str(p) for p in self.period_labels) or tuple(str(t) for t in range(r.shape[0]))
        items = tuple(str(i) for i in self.item_ids) or tuple(str(i) for i in range(r.shape[1]))
        if len(labels) != r.shape[0]:
            raise DataError(f"{len(labels)} period labels for {r.shape[0]} periods")
        if len(items) != r.shape[1]:
            raise DataError(f"{len(items)} item ids for {r.shape[1]} items")
        r.setflags(write=False)
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "period_labels", labels)
        object.__setattr__(self, "item_ids", items)

    @property
    def n_periods(self) -> int:
        return self.returns.shape[0]

    @property
    def n_items(self) -> int:
        return self.returns.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.n_periods == 0

    def years(self) -> np.ndarray:
        try:
            return np.array([int(p[:4]) for p in self.period_labels], dtype=int)
        except ValueError as exc:
            raise DataError(f"period labels must start with a 4-digit year: {exc}") from None

    def select_years(self, first: int, last: int) -> "ReturnsPanel":
        """Periods whose year lies in ``[first, last]``."""
        if self.n_periods == 0:
            mask = np.zeros(0, dtype=bool)
        else:
            years = self.years()
            mask = (years >= first) & (years <= last)
        return ReturnsPanel(
            self.returns[mask],
            tuple(p for p, keep in zip(self.period_labels, mask) if keep),
            self.periods_per_year,
            self.item_ids,
        )

    def select_items(self, item_ids) -> "ReturnsPanel":
        index = {item: j for j, item in enumerate(self.item_ids)}
        cols = [index[i] for i in item_ids]
        return ReturnsPanel(self.returns[:, cols], self.period_labels, self.periods_per_year, tuple(item_ids))


@dataclass(frozen=True)
class MarketStats:
    """Expected returns ``mu`` and covariance ``sigma`` of ``n`` items."""

    mu: np.ndarray
    sigma: np.ndarray
    item_ids: tuple = ()
    _std: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        n = mu.size
        if sigma.shape != (n, n):
            raise DataError(f"sigma shape {sigma.shape} does not match mu length {n}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise DataError("moments contain non-finite values")
        if np.max(np.abs(sigma - sigma.T), initial=0.0) > 1e-12:
            raise DataError("sigma is not symmetric")
        diag = np.diag(sigma)
        if np.any(diag < 0):
            raise DataError("sigma has negative variances")
        scale = max(float(np.trace(sigma)) / n, np.finfo(float).tiny)
        min_eig = float(np.linalg.eigvalsh(sigma)[0])
        if min_eig < -1e-9 * scale:
            raise DataError(f"sigma is not positive semidefinite (min eigenvalue {min_eig:.3e})")
        items = tuple(str(i) for i in self.item_ids) or tuple(str(i) for i in range(n))
        if len(items) != n:
            raise DataError(f"{len(items)} item ids for {n} items")
        mu.setflags(write=False)
        sigma.setflags(write=False)
        std = np.sqrt(diag)
        std.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "item_ids", items)
        object.__setattr__(self, "_std", std)

    @property
    def n_items(self) -> int:
        return self.mu.size

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.sigma)

    def subset(self, idx) -> "MarketStats":
        idx = np.asarray(idx, dtype=int)
        return MarketStats(
            self.mu[idx], self.sigma[np.ix_(idx, idx)], tuple(self.item_ids[i] for i in idx)
        )

    def correlation(self) -> np.ndarray:
        std = self._std
        if np.any(std <= 0):
            bad = np.flatnonzero(std <= 0)
            raise UndefinedCorrelationError(f"zero-variance items: {bad[:10].tolist()}")
        rho = self.sigma / np.outer(std, std)
        np.fill_diagonal(rho, 1.0)
        return rho

    def dissimilarity_matrix(self) -> np.ndarray:
        """``sqrt(1 - rho)`` for every item pair, clamped into ``[0, sqrt(2)]``."""
        rho = self.correlation()
        d = np.sqrt(np.clip(1.0 - rho, 0.0, 2.0))
        np.fill_diagonal(d, 0.0)
        return d


def estimate_moments(panel: ReturnsPanel, annualize: bool = False, diagonal_loading: float | None = None) -> MarketStats:
    """Sample mean and unbiased sample covariance of a returns panel.

    Both moments are multiplied by ``periods_per_year`` when ``annualize`` is
    set. ``diagonal_loading`` is added to the covariance diagonal after
    scaling; when omitted it is ``1e-6`` times the mean variance.
    """
    r = panel.returns
    if r.shape[0] < 2:
        raise MomentUndefinedError(f"need at least 2 periods to estimate moments, got {r.shape[0]}")
    mu = r.mean(axis=0)
    centered = r - mu
    sigma = centered.T @ centered / (r.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T)
    if annualize:
        mu = mu * panel.periods_per_year
        sigma = sigma * panel.periods_per_year
    if diagonal_loading is None:
        diagonal_loading = 1e-6 * float(np.mean(np.diag(sigma)))
    if diagonal_loading < 0:
        raise DataError("diagonal_loading must be nonnegative")
    if diagonal_loading:
        sigma = sigma + diagonal_loading * np.eye(sigma.shape[0])
    return MarketStats(mu, sigma, panel.item_ids)


def portfolio_moments(weights, stats: MarketStats) -> tuple[float, float]:
    """Return ``(mu @ w, w @ sigma @ w)``."""
    w = np.asarray(weights, dtype=float)
    return float(stats.mu @ w), float(w @ stats.sigma @ w)


def sharpe_ratio(weights, stats: MarketStats) -> float:
    w = np.asarray(weights, dtype=float)
    if w.shape != stats.mu.shape:
        raise DataError(f"weights of shape {w.shape} for {stats.n_items} items")
    if not np.any(w):
        raise ZeroRiskError("weights are all zero")
    ret, var = portfolio_moments(w, stats)
    if var <= 0:
        raise ZeroRiskError("portfolio variance is zero")
    return ret / np.sqrt(var)


def dissimilarity(stats: MarketStats, i: int, j: int) -> float:
    """Return-correlation distance ``sqrt(1 - rho_ij)`` between two items."""
    var_i, var_j = stats.sigma[i, i], stats.sigma[j, j]
    if var_i <= 0 or var_j <= 0:
        raise UndefinedCorrelationError(f"item {i if var_i <= 0 else j} has zero variance")
    if i == j:
        return 0.0
    rho = stats.sigma[i, j] / np.sqrt(var_i * var_j)
    return float(np.clip(np.sqrt(max(1.0 - rho, 0.0)), 0.0, MAX_DISSIMILARITY))


def open_input(path):
    """Open a text input file, reporting failures as data errors."""
    try:
        return open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None


def load_returns_csv(path, periods_per_year: int = 12) -> ReturnsPanel:
    """Read a ``period,item_id,return`` file into a panel.

    Every item must report the same set of periods. Periods are ordered by
    their label, which therefore must sort chronologically (``YYYY-MM``).
    """
    values: dict[tuple[str, str], float] = {}
    with open_input(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDataError(f"{path} is empty")
        if [h.strip() for h in header] != ["period", "item_id", "return"]:
            raise ParseError(f"expected header period,item_id,return, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            period, item, raw = (x.strip() for x in row)
            if not period or not item:
                raise ParseError("empty period or item id", line=lineno)
            try:
                value = float(raw)
            except ValueError:
                raise ParseError(f"bad return value {raw!r}", line=lineno) from None
            if (period, item) in values:
                raise ParseError(f"duplicate row for period {period}, item {item}", line=lineno)
            values[(period, item)] = value
    if not values:
        raise EmptyDataError(f"{path} has no data rows")
    periods = sorted({p for p, _ in values})
    items = sorted({i for _, i in values})
    if len(values) != len(periods) * len(items):
        per_item = {i: 0 for i in items}
        for _, i in values:
            per_item[i] += 1
        short = [i for i, c in per_item.items() if c < len(periods)]
        raise DataError(f"items with missing periods: {short[:10]}")
    r = np.array([[values[(p, i)] for i in items] for p in periods])
    return ReturnsPanel(r, tuple(periods), periods_per_year, tuple(items))


def write_returns_csv(panel: ReturnsPanel, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["period", "item_id", "return"])
        for t, period in enumerate(panel.period_labels):
            for j, item in enumerate(panel.item_ids):
                writer.writerow([period, item, repr(float(panel.returns[t, j]))])
