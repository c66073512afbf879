import logging
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from conftest import modified_ratings_oracle, random_holdings, random_psd, random_stats
from mvecf import ranking
from mvecf.errors import ConfigError, DataError, SamplingStarvationError, ThresholdUndefinedError
from mvecf.holdings_data import InteractionMatrix
from mvecf.market_stats import MarketStats
from mvecf.ranking import (
    RankingConfig,
    TripleSampler,
    bpr_triple_loss,
    fit_bpr,
    mv_efficient_relabel,
    sample_triple_nov,
)
from mvecf.wmf import FactorModel, Hyperparams, init_model


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def all_triples(pos, close=None):
    """Enumerate D_s (or its close subset) by brute force."""
    dense = pos.toarray() > 0
    out = []
    for u in range(dense.shape[0]):
        if dense[u].all() or not dense[u].any():
            continue
        for i in np.flatnonzero(dense[u]):
            for j in np.flatnonzero(~dense[u]):
                if close is None or close[i, j]:
                    out.append((u, i, j))
    return out


def toy_positives(seed=1, m=4, n=6):
    r = rng(seed)
    y = r.random((m, n)) < 0.4
    y[:, 0] = True
    y[:, -1] = False
    return sp.csr_matrix(y.astype(float))


def toy_dist(n, seed=2):
    A = rng(seed).normal(size=(n, 3))
    return MarketStats(np.zeros(n), A @ A.T + 0.1 * np.eye(n)).dissimilarity_matrix()


# --- config -----------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"l": 0}, {"alpha": 0.0}, {"lambda_reg": -1.0}, {"tau_dist": -0.1},
    {"tau_dist": 1.5}, {"beta": 1.2}, {"beta": -0.1}, {"epochs": -1},
])
def test_invalid_ranking_config(kwargs):
    with pytest.raises(ConfigError):
        RankingConfig(**kwargs)


def test_tau_upper_bound_is_allowed():
    assert RankingConfig(tau_dist=math.sqrt(2)).tau_dist == math.sqrt(2)


# --- loss and training --------------------------------------------------------

def test_equal_scores_give_log_two():
    model = FactorModel(np.ones((1, 2)), np.ones((3, 2)))
    loss = bpr_triple_loss(model, np.array([0]), np.array([1]), np.array([2]))
    assert loss[0] == pytest.approx(math.log(2.0), abs=1e-15)
    assert loss[0] == pytest.approx(0.6931, abs=1e-4)


def test_triple_loss_matches_sigmoid_form():
    r = rng(3)
    model = FactorModel(r.normal(size=(4, 3)), r.normal(size=(5, 3)))
    u, i, j = np.array([0, 1, 3]), np.array([0, 2, 4]), np.array([1, 3, 0])
    got = bpr_triple_loss(model, u, i, j)
    for t in range(3):
        x = model.P[u[t]] @ (model.Q[i[t]] - model.Q[j[t]])
        assert got[t] == pytest.approx(-math.log(1.0 / (1.0 + math.exp(-x))), rel=1e-12)


def separable_toy(m=6):
    # item 0 held by everyone, item 1 by nobody
    return [(u, 0) for u in range(m)], (m, 2)


def test_separable_toy_ranks_positive_above_negative():
    pairs, universe = separable_toy()
    history = []
    cfg = RankingConfig(l=4, alpha=0.05, epochs=300, seed=5)
    model = fit_bpr(pairs, universe, cfg, history=history)
    scores = model.P @ model.Q.T
    assert np.all(scores[:, 0] > scores[:, 1])
    # averaged over windows of 10 epochs the loss never goes up
    windows = np.asarray(history).reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(windows) <= 0.0)
    assert history[-1] < 0.5 * history[0]


def test_zero_epochs_returns_seeded_init():
    pairs, universe = separable_toy()
    cfg = RankingConfig(l=3, epochs=0, seed=11)
    assert fit_bpr(pairs, universe, cfg) == init_model(6, 2, 3, 11)


def test_fit_bpr_is_deterministic():
    pos = toy_positives()
    cfg = RankingConfig(l=3, alpha=0.05, epochs=20, seed=4)
    a = fit_bpr(pos, pos.shape, cfg)
    b = fit_bpr(pos, pos.shape, cfg)
    assert np.array_equal(a.P, b.P) and np.array_equal(a.Q, b.Q)
    c = fit_bpr(pos, pos.shape, RankingConfig(l=3, alpha=0.05, epochs=20, seed=5))
    assert not np.array_equal(a.P, c.P)


def test_user_with_all_items_positive_is_skipped(caplog):
    pairs = [(0, 0), (0, 1), (0, 2), (1, 0)]
    cfg = RankingConfig(l=2, alpha=0.1, epochs=10, seed=0)
    with caplog.at_level(logging.WARNING, logger="mvecf.ranking"):
        model = fit_bpr(pairs, (2, 3), cfg)
    assert "skipping 1 users" in caplog.text
    # user 0 never appears in a triple, so its embedding is untouched
    assert np.array_equal(model.P[0], init_model(2, 3, 2, 0).P[0])


def test_pair_list_needs_universe():
    with pytest.raises(DataError):
        TripleSampler([(0, 0), (1, 1)])


def test_universe_mismatch_rejected():
    with pytest.raises(DataError):
        fit_bpr(sp.csr_matrix(np.eye(3)), (3, 4), RankingConfig(epochs=0))


def test_no_valid_user_raises():
    with pytest.raises(DataError):
        TripleSampler(sp.csr_matrix(np.ones((2, 3))))


# --- sampling -----------------------------------------------------------------

def test_unrestricted_draws_are_uniform_over_ds():
    pos = toy_positives()
    triples = all_triples(pos)
    u, i, j, restricted = TripleSampler(pos).sample_batch(rng(7), 40 * len(triples) * 50)
    assert not restricted.any()
    index = {t: k for k, t in enumerate(triples)}
    counts = np.bincount([index[t] for t in zip(u.tolist(), i.tolist(), j.tolist())], minlength=len(triples))
    assert counts.min() > 0
    assert sps.chisquare(counts).pvalue > 1e-3


def test_restricted_draws_are_uniform_over_close_triples():
    pos = toy_positives()
    dist = toy_dist(pos.shape[1])
    tau = float(np.median(dist[dist > 0]))
    close = dist < tau
    triples = all_triples(pos, close)
    sampler = TripleSampler(pos, dist, tau_dist=tau, beta=1.0)
    u, i, j, restricted = sampler.sample_batch(rng(8), 2000 * len(triples))
    assert restricted.all()
    index = {t: k for k, t in enumerate(triples)}
    counts = np.bincount([index[t] for t in zip(u.tolist(), i.tolist(), j.tolist())], minlength=len(triples))
    assert counts.min() > 0
    assert sps.chisquare(counts).pvalue > 1e-3


def test_max_threshold_makes_branches_identical():
    pos = toy_positives()
    dist = toy_dist(pos.shape[1])
    sampler = TripleSampler(pos, dist, tau_dist=math.sqrt(2), beta=0.5)
    assert sampler.close[~np.eye(pos.shape[1], dtype=bool)].all()
    assert np.allclose(sampler.p_close, sampler.p_all, rtol=0, atol=1e-15)


def test_beta_zero_is_plain_sampling():
    pos = toy_positives()
    dist = toy_dist(pos.shape[1])
    plain = TripleSampler(pos).sample_batch(rng(9), 500)
    for tau in (0.0, 0.5, math.sqrt(2)):
        got = TripleSampler(pos, dist, tau_dist=tau, beta=0.0).sample_batch(rng(9), 500)
        for a, b in zip(plain, got):
            assert np.array_equal(a, b)


def test_beta_one_respects_threshold(synth_dataset):
    dist = synth_dataset.stats.dissimilarity_matrix()
    sampler = TripleSampler(synth_dataset.train, dist, tau_dist=0.9, beta=1.0)
    u, i, j, _ = sampler.sample_batch(rng(10), 10_000)
    assert np.all(dist[i, j] < 0.9)
    held = synth_dataset.train.matrix.toarray() > 0
    assert held[u, i].all() and not held[u, j].any()


def test_branch_fraction_tracks_beta(synth_dataset):
    dist = synth_dataset.stats.dissimilarity_matrix()
    sampler = TripleSampler(synth_dataset.train, dist, tau_dist=0.9, beta=0.8)
    _, i, j, restricted = sampler.sample_batch(rng(11), 10_000)
    assert abs(restricted.mean() - 0.8) <= 0.02
    assert np.all(dist[i[restricted], j[restricted]] < 0.9)


def test_sample_triple_nov_single_draw():
    pos = toy_positives()
    dist = toy_dist(pos.shape[1])
    cfg = RankingConfig(tau_dist=0.9, beta=1.0)
    u, i, j = sample_triple_nov(pos, dist, cfg, rng(12))
    assert pos[u, i] == 1 and pos[u, j] == 0
    assert dist[i, j] < 0.9
    sampler = TripleSampler(pos, dist, 0.9, 1.0)
    assert sample_triple_nov(sampler, None, cfg, rng(12)) == (u, i, j)


def test_no_close_pair_falls_back_with_warning(caplog):
    pos = toy_positives()
    dist = np.ones((pos.shape[1], pos.shape[1]))
    np.fill_diagonal(dist, 0.0)
    with caplog.at_level(logging.WARNING, logger="mvecf.ranking"):
        sampler = TripleSampler(pos, dist, tau_dist=0.5, beta=0.8)
    assert sampler.beta == 0.0
    assert "no triple has distance below" in caplog.text
    assert not sampler.sample_batch(rng(0), 100)[3].any()


def test_missing_distance_matrix():
    with pytest.raises(DataError):
        TripleSampler(toy_positives(), None, tau_dist=0.5, beta=0.5)


def test_starvation_names_user(monkeypatch):
    n = 40
    y = np.zeros((1, n))
    y[0, :20] = 1
    pos = sp.csr_matrix(y)
    dist = np.ones((n, n))
    np.fill_diagonal(dist, 0.0)
    dist[0, 39] = dist[39, 0] = 0.1
    monkeypatch.setattr(ranking, "MAX_RETRIES", 3)
    with pytest.raises(SamplingStarvationError) as info:
        TripleSampler(pos, dist, tau_dist=0.5, beta=1.0).sample_batch(rng(1), 50)
    assert info.value.user == 0


# --- relabeling ---------------------------------------------------------------

HYPER = Hyperparams(lambda_mv=10.0, gamma=3.0)


@pytest.fixture(scope="module")
def relabeled(synth_dataset):
    return mv_efficient_relabel(synth_dataset.train, synth_dataset.stats, HYPER, 0.01)


def test_relabel_converts_one_percent(relabeled, synth_dataset):
    cs = relabeled.conversion_stats
    assert 0.009 <= cs["converted_fraction"] <= 0.011
    m, n = synth_dataset.train.shape
    assert cs["original_positives"] == synth_dataset.train.nnz
    assert cs["original_negatives"] == m * n - synth_dataset.train.nnz


def test_relabel_partition(relabeled, synth_dataset):
    P = relabeled.positives.toarray() > 0
    N = relabeled.negatives.toarray() > 0
    assert not (P & N).any()
    assert (P | N).all()
    y = synth_dataset.train.matrix.toarray() > 0
    cs = relabeled.conversion_stats
    assert cs["negatives_to_positive"] == int(np.sum(P & ~y))
    assert cs["positives_to_negative"] == int(np.sum(~P & y))


def test_relabel_threshold_matches_oracle():
    r = rng(21)
    train = random_holdings(r, 12, 15)
    stats = random_stats(r, 15)
    y = train.matrix.toarray()
    yt = modified_ratings_oracle(y, stats, HYPER)["y_tilde"]
    out = mv_efficient_relabel(train, stats, HYPER, 0.1)
    neg = np.sort(yt[y == 0])[::-1]
    k = round(0.1 * neg.size)
    assert out.tau_s == pytest.approx(neg[k], rel=1e-12, abs=1e-15)
    P = out.positives.toarray() > 0
    margin = np.abs(yt - out.tau_s) > 1e-12
    assert np.array_equal(P[margin], (yt > out.tau_s)[margin])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), frac=st.sampled_from([0.05, 0.1, 0.3]))
def test_relabel_is_monotone_and_partitions(seed, frac):
    r = rng(seed)
    train = random_holdings(r, 8, 10)
    stats = random_stats(r, 10)
    yt = modified_ratings_oracle(train.matrix.toarray(), stats, HYPER)["y_tilde"]
    try:
        out = mv_efficient_relabel(train, stats, HYPER, frac)
    except ThresholdUndefinedError:
        return
    P = out.positives.toarray() > 0
    N = out.negatives.toarray() > 0
    assert not (P & N).any() and (P | N).all()
    # anything clearly above a positive pair is positive too
    lowest_pos = yt[P].min()
    assert P[yt > lowest_pos + 1e-12].all()


class FixedTarget:
    """Stands in for the modified-rating target with preset values."""

    values = None

    def __init__(self, train, stats, hyper):
        pass

    def blocks(self):
        yield 0, self.values.shape[0]

    def block(self, lo, hi):
        return self.values[lo:hi], np.ones_like(self.values[lo:hi])


def test_ties_keep_original_label(monkeypatch):
    pairs = [("a", "0"), ("a", "1"), ("b", "2"), ("b", "3")]
    train = InteractionMatrix.from_pairs(pairs, item_ids=[str(i) for i in range(5)])
    y = train.matrix.toarray() > 0
    # negatives sorted descending: 0.9, 0.7, 0.5, 0.5, 0.1, 0.1 so tau = 0.5
    FixedTarget.values = np.array([
        [0.5, 0.8, 0.9, 0.5, 0.1],
        [0.5, 0.1, 0.5, 0.2, 0.7],
    ])
    monkeypatch.setattr(ranking, "MVTarget", FixedTarget)
    out = mv_efficient_relabel(train, random_stats(rng(0), 5), HYPER, 2 / 6)
    assert out.tau_s == 0.5
    P = out.positives.toarray() > 0
    expected = np.array([
        [True, True, True, False, False],
        [False, False, True, False, True],
    ])
    assert np.array_equal(P, expected)
    tied = FixedTarget.values == 0.5
    assert np.array_equal(P[tied], y[tied])
    assert out.conversion_stats["negatives_to_positive"] == 2
    assert out.conversion_stats["positives_to_negative"] == 1


def test_lambda_zero_has_no_threshold(synth_dataset):
    with pytest.raises(ThresholdUndefinedError):
        mv_efficient_relabel(synth_dataset.train, synth_dataset.stats, Hyperparams(lambda_mv=0.0))


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.5, 2.0])
def test_conversion_fraction_range(frac, synth_dataset):
    with pytest.raises(ConfigError):
        mv_efficient_relabel(synth_dataset.train, synth_dataset.stats, HYPER, frac)


def adverse_instance():
    """Twenty diversified items plus a toxic pair: item 1 moves with item 0 and loses money."""
    r = rng(31)
    n = 22
    mu = r.normal(0.01, 0.005, size=n)
    sigma = np.zeros((n, n))
    sigma[2:, 2:] = random_psd(r, n - 2)
    sigma[0, 0] = sigma[1, 1] = 1.0
    sigma[0, 1] = sigma[1, 0] = 0.99
    mu[0], mu[1] = 0.01, -5.0
    stats = MarketStats(mu, sigma, tuple(f"i{k:03d}" for k in range(n)))
    pairs = [("adverse", "i000"), ("adverse", "i001")]
    for u in range(15):
        for k in r.choice(np.arange(2, n), size=3, replace=False):
            pairs.append((f"u{u:02d}", f"i{k:03d}"))
    train = InteractionMatrix.from_pairs(pairs, item_ids=stats.item_ids)
    return train, stats


def test_adverse_held_item_flipped_negative():
    train, stats = adverse_instance()
    out = mv_efficient_relabel(train, stats, HYPER, 0.01)
    u = train.user_ids.index("adverse")
    yt = modified_ratings_oracle(train.matrix.toarray(), stats, HYPER)["y_tilde"]
    assert yt[u, 1] < out.tau_s
    assert train.matrix[u, 1] == 1
    assert out.positives[u, 1] == 0 and out.negatives[u, 1] == 1
    assert out.conversion_stats["positives_to_negative"] >= 1


def test_relabel_csv(tmp_path):
    train, stats = adverse_instance()
    out = mv_efficient_relabel(train, stats, HYPER, 0.05)
    path = tmp_path / "relabeled.csv"
    out.to_csv(path)
    lines = path.read_text().splitlines()
    m, n = train.shape
    assert lines[0] == "user_id,item_id,label"
    assert len(lines) == 1 + m * n
    P = out.positives.toarray()
    for line in lines[1:]:
        uid, iid, label = line.split(",")
        assert int(label) == P[train.user_ids.index(uid), train.item_ids.index(iid)]
