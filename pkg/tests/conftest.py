"""Shared fixtures and small instance builders."""
import numpy as np
import pytest

from mvecf.holdings_data import InteractionMatrix, build_yearly
from mvecf.market_stats import MarketStats
from mvecf.synth_gen import SynthConfig, gen_holdings, gen_returns, holdings_year


def random_psd(rng, n, rank=None, scale=0.01):
    """A random covariance matrix with strictly positive diagonal."""
    rank = n if rank is None else rank
    A = rng.normal(size=(n, rank)) * np.sqrt(scale / max(rank, 1))
    S = A @ A.T + 1e-3 * scale * np.eye(n)
    return 0.5 * (S + S.T)


def random_stats(rng, n, scale=0.01):
    mu = rng.normal(0.01, 0.01, size=n)
    return MarketStats(mu, random_psd(rng, n, scale=scale))


def random_holdings(rng, m, n, density=0.3):
    """Binary holdings where every user holds at least one and not every item."""
    y = rng.random((m, n)) < density
    for u in range(m):
        if not y[u].any():
            y[u, rng.integers(n)] = True
        if y[u].all():
            y[u, rng.integers(n)] = False
    pairs = [(f"u{u:03d}", f"i{i:03d}") for u, i in zip(*np.nonzero(y))]
    return InteractionMatrix.from_pairs(pairs, item_ids=[f"i{i:03d}" for i in range(n)])


def modified_ratings_oracle(y, stats, hyper):
    """Per-pair modified ratings from scalar loops."""
    m, n = y.shape
    S, mu = stats.sigma, stats.mu
    lam, gam = hyper.lambda_mv, hyper.gamma
    out = {k: np.zeros((m, n)) for k in ("c", "c_mv", "y_mv", "c_tilde", "y_tilde")}
    for u in range(m):
        h = sum(y[u])
        for i in range(n):
            c = hyper.c_pos if y[u, i] else hyper.c_neg
            cross = sum(y[u, j] * S[i, j] for j in range(n) if j != i) / h
            c_mv = gam / 2 * lam * S[i, i]
            y_mv = (mu[i] / gam - 0.5 * cross) / S[i, i]
            c_t = c + c_mv
            out["c"][u, i] = c
            out["c_mv"][u, i] = c_mv
            out["y_mv"][u, i] = y_mv
            out["c_tilde"][u, i] = c_t
            out["y_tilde"][u, i] = (c * y[u, i] + c_mv * y_mv) / c_t
    return out


@pytest.fixture(scope="session")
def synth_dataset():
    """The default synthetic sub-dataset, built once per session."""
    cfg = SynthConfig()
    year = holdings_year(cfg)
    return build_yearly({year: gen_holdings(cfg)}, gen_returns(cfg), year, seed=0, min_holdings=2)


# --- acceptance reporting -----------------------------------------------------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _ACCEPTANCE[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        line = f"criterion {number:>2}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
