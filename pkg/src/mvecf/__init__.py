"""Matrix factorization recommenders with a mean-variance portfolio term."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, MVECFError, NumericalError
from .evaluation import EvalReport, RecommendationList, map_at_k, portfolio_metrics, recall_at_k, topk_recommend
from .holdings_data import InteractionMatrix, SubDataset, build_yearly, load_holdings, split_dataset
from .market_stats import MarketStats, ReturnsPanel, dissimilarity, estimate_moments, sharpe_ratio
from .mv_model import fit_mvecf_reg, fit_mvecf_wmf, loss_mv_reg, loss_mv_wmf_form, mv_ratings
from .mvopt import MVProblem, solve_mv, two_step_rerank
from .ranking import RankingConfig, fit_bpr, mv_efficient_relabel, sample_triple_nov
from .synth_gen import SynthConfig, gen_holdings, gen_returns
from .wmf import FactorModel, Hyperparams, fit_als, predict, wmf_targets

__all__ = [
    "ConfigError", "DataError", "MVECFError", "NumericalError",
    "EvalReport", "RecommendationList", "map_at_k", "portfolio_metrics", "recall_at_k", "topk_recommend",
    "InteractionMatrix", "SubDataset", "build_yearly", "load_holdings", "split_dataset",
    "MarketStats", "ReturnsPanel", "dissimilarity", "estimate_moments", "sharpe_ratio",
    "fit_mvecf_reg", "fit_mvecf_wmf", "loss_mv_reg", "loss_mv_wmf_form", "mv_ratings",
    "MVProblem", "solve_mv", "two_step_rerank",
    "RankingConfig", "fit_bpr", "mv_efficient_relabel", "sample_triple_nov",
    "SynthConfig", "gen_holdings", "gen_returns",
    "FactorModel", "Hyperparams", "fit_als", "predict", "wmf_targets",
]
