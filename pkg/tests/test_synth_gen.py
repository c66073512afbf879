import numpy as np
import pytest

from mvecf.errors import ConfigError
from mvecf.market_stats import estimate_moments
from mvecf.synth_gen import RNG_ALGORITHM, SynthConfig, gen_holdings, gen_returns, holdings_year, item_sectors


SMALL = dict(n_items=60, m_users=30, T_periods=48, K_factors=4, n_sectors=4, holdings_range=(4, 8))


class TestReturns:
    def test_pure_factor_panel_has_low_rank(self):
        cfg = SynthConfig(**{**SMALL, "K_factors": 2, "n_sectors": 2}, idio_vol=0.0)
        r = gen_returns(cfg).returns
        s = np.linalg.svd(np.cov(r, rowvar=False), compute_uv=False)
        assert np.all(s[2:] < 1e-8 * s[0])

    def test_deterministic(self):
        cfg = SynthConfig(**SMALL, seed=5)
        np.testing.assert_array_equal(gen_returns(cfg).returns, gen_returns(cfg).returns)

    def test_seed_matters(self):
        a = gen_returns(SynthConfig(**SMALL, seed=1)).returns
        b = gen_returns(SynthConfig(**SMALL, seed=2)).returns
        assert not np.array_equal(a, b)

    def test_noise_free_panel_is_constant(self):
        cfg = SynthConfig(**SMALL, factor_vol=0.0, idio_vol=0.0, mean_spread=0.0)
        r = gen_returns(cfg).returns
        np.testing.assert_array_equal(r, cfg.mean_level)
        stats = estimate_moments(gen_returns(cfg), diagonal_loading=0.0)
        np.testing.assert_allclose(stats.sigma, 0.0, atol=1e-30)

    def test_sector_correlation_structure(self):
        cfg = SynthConfig(seed=0)
        stats = estimate_moments(gen_returns(cfg))
        rho = stats.correlation()
        sec = item_sectors(cfg)
        same = sec[:, None] == sec[None, :]
        off = ~np.eye(cfg.n_items, dtype=bool)
        assert rho[same & off].mean() > rho[~same].mean() + 0.05

    def test_labels_and_year(self):
        cfg = SynthConfig()
        panel = gen_returns(cfg)
        assert panel.period_labels[0] == "2011-01"
        assert panel.period_labels[-1] == "2020-12"
        assert holdings_year(cfg) == 2015
        assert RNG_ALGORITHM == "PCG64"


class TestHoldings:
    def test_single_sector_is_uniform(self):
        cfg = SynthConfig(**{**SMALL, "n_sectors": 1, "K_factors": 1, "m_users": 400}, sector_bias=1.0)
        counts = np.asarray(gen_holdings(cfg).matrix.sum(axis=0)).ravel()
        # every item reachable; spread consistent with uniform draws
        assert counts.min() > 0
        assert counts.max() < 4 * counts.mean()

    def test_fixed_count(self):
        cfg = SynthConfig(**{**SMALL, "holdings_range": (5, 5)})
        np.testing.assert_array_equal(gen_holdings(cfg).counts(), 5)

    def test_full_bias_stays_in_one_sector(self):
        cfg = SynthConfig(**{**SMALL, "n_sectors": 10, "n_items": 100, "holdings_range": (3, 8)}, sector_bias=1.0)
        h = gen_holdings(cfg)
        sec = item_sectors(cfg)
        for items in h.item_sets():
            assert len(set(sec[items].tolist())) == 1

    def test_deterministic(self):
        cfg = SynthConfig(**SMALL, seed=3)
        assert gen_holdings(cfg).pairs() == gen_holdings(cfg).pairs()

    def test_counts_in_range(self):
        cfg = SynthConfig()
        c = gen_holdings(cfg).counts()
        assert c.min() >= 10 and c.max() <= 30


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(n_items=0), dict(holdings_range=(5, 3)), dict(sector_bias=1.5), dict(idio_vol=-1.0), dict(n_items=10, holdings_range=(5, 20))])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            SynthConfig(**bad)
