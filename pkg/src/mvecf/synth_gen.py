"""Synthetic factor-model returns and sector-concentrated holdings.

All draws come from ``numpy.random.PCG64`` seeded with ``(seed, stream)``,
one stream per generated object, so returns and holdings can be regenerated
independently and match across platforms.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .holdings_data import InteractionMatrix
from .market_stats import ReturnsPanel

RNG_ALGORITHM = "PCG64"
_RETURNS_STREAM = 1
_HOLDINGS_STREAM = 2


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 300
    m_users: int = 200
    T_periods: int = 120
    K_factors: int = 8
    factor_vol: float = 0.04
    idio_vol: float = 0.06
    mean_level: float = 0.008
    mean_spread: float = 0.004
    n_sectors: int = 8
    holdings_range: tuple = (10, 30)
    sector_bias: float = 0.8
    start_year: int = 2011
    periods_per_year: int = 12
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "holdings_range", tuple(int(h) for h in self.holdings_range))
        for name in ("n_items", "m_users", "T_periods", "K_factors", "n_sectors", "periods_per_year"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("factor_vol", "idio_vol", "mean_spread"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        lo, hi = self.holdings_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid holdings_range {self.holdings_range}")
        if hi > self.n_items:
            raise ConfigError("holdings_range max exceeds n_items")
        if not 0.0 <= self.sector_bias <= 1.0:
            raise ConfigError("sector_bias must be a probability")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["holdings_range"] = list(self.holdings_range)
        return d


def _rng(cfg: SynthConfig, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([cfg.seed, stream]))


def item_ids(cfg: SynthConfig) -> tuple:
    width = len(str(cfg.n_items - 1))
    return tuple(f"S{i:0{width}d}" for i in range(cfg.n_items))


def user_ids(cfg: SynthConfig) -> tuple:
    width = len(str(cfg.m_users - 1))
    return tuple(f"U{u:0{width}d}" for u in range(cfg.m_users))


def item_sectors(cfg: SynthConfig) -> np.ndarray:
    """Contiguous, near-equal sector blocks."""
    return np.arange(cfg.n_items) * cfg.n_sectors // cfg.n_items


def period_labels(cfg: SynthConfig) -> tuple:
    ppy = cfg.periods_per_year
    if ppy == 12:
        return tuple(f"{cfg.start_year + t // 12}-{t % 12 + 1:02d}" for t in range(cfg.T_periods))
    return tuple(f"{cfg.start_year + t // ppy}-{t % ppy + 1:03d}" for t in range(cfg.T_periods))


def gen_returns(cfg: SynthConfig) -> ReturnsPanel:
    """``r_t = a + B f_t + e_t`` with sector-block loadings.

    Items in sector ``s`` load only on factor ``s mod K`` with a loading drawn
    from ``U(0.5, 1.5)``.
    """
    rng = _rng(cfg, _RETURNS_STREAM)
    n, T, K = cfg.n_items, cfg.T_periods, cfg.K_factors
    a = cfg.mean_level + cfg.mean_spread * rng.standard_normal(n)
    B = np.zeros((n, K))
    B[np.arange(n), item_sectors(cfg) % K] = rng.uniform(0.5, 1.5, size=n)
    f = cfg.factor_vol * rng.standard_normal((T, K))
    eps = cfg.idio_vol * rng.standard_normal((T, n))
    r = a + f @ B.T + eps
    # keep the panel valid (returns above -100%) under extreme configs
    r = np.maximum(r, -0.99)
    return ReturnsPanel(r, period_labels(cfg), cfg.periods_per_year, item_ids(cfg))


def gen_holdings(cfg: SynthConfig) -> InteractionMatrix:
    """Under-diversified holdings: each user favours a home sector."""
    rng = _rng(cfg, _HOLDINGS_STREAM)
    sectors = item_sectors(cfg)
    members = [np.flatnonzero(sectors == s) for s in range(cfg.n_sectors)]
    lo, hi = cfg.holdings_range
    rows, cols = [], []
    for u in range(cfg.m_users):
        home = members[rng.integers(cfg.n_sectors)]
        count = int(rng.integers(lo, hi + 1))
        held: set = set()
        while len(held) < count:
            from_home = rng.random() < cfg.sector_bias
            pool = home if from_home else None
            if pool is not None and len(held.intersection(pool.tolist())) == pool.size:
                pool = None
            if pool is None:
                item = int(rng.integers(cfg.n_items))
            else:
                item = int(pool[rng.integers(pool.size)])
            held.add(item)
        items = sorted(held)
        rows.extend([u] * len(items))
        cols.extend(items)
    mat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(cfg.m_users, cfg.n_items))
    return InteractionMatrix(mat, user_ids(cfg), item_ids(cfg))


def holdings_year(cfg: SynthConfig, post_years: int = 5) -> int:
    """Snapshot year that leaves ``post_years`` of ex-post data in the panel."""
    return cfg.start_year + cfg.T_periods // cfg.periods_per_year - 1 - post_years
