"""End-to-end runs: build data, fit, recommend, evaluate and write outputs.

Every run directory gets a ``manifest.json``. If a stage fails, an
``INCOMPLETE`` marker naming the stage is left next to whatever was
written, and outputs from earlier successful runs are not mixed in because
each stage removes its own stale files before writing.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
import os
import platform
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import scipy
import yaml

from . import __version__
from .config import ExperimentConfig
from .errors import ConfigError, DataError, MVECFError
from .evaluation import EvalReport, RecommendationList, evaluate, topk_recommend
from .holdings_data import SubDataset, build_yearly, load_holdings_dir, write_holdings_csv
from .market_stats import load_returns_csv, write_returns_csv
from .mv_model import fit_mvecf_reg, fit_mvecf_wmf
from .mvopt import two_step_rerank
from .ranking import fit_bpr, mv_efficient_relabel
from .synth_gen import gen_holdings, gen_returns, holdings_year
from .wmf import FactorModel, LossTrace, fit_als, wmf_targets

logger = logging.getLogger(__name__)

MODEL_FILE = "model.bin"
TRACE_FILE = "loss_trace.csv"
REPORT_FILE = "report.json"
PER_USER_FILE = "per_user.csv"
SUMMARY_FILE = "summary_table.csv"
MANIFEST_FILE = "manifest.json"
INCOMPLETE_FILE = "INCOMPLETE"
RECS_ACCURACY = "recs_accuracy.csv"
RECS_EFFICIENCY = "recs_efficiency.csv"

SUMMARY_COLUMNS = ("model", "parameter", "value", "lambda_mv", "gamma", "delta_mu", "delta_sigma", "delta_sr", "p_sr_improved")


class StageError(Exception):
    """Wraps a module error with the pipeline stage it came from."""

    def __init__(self, stage: str, error: MVECFError):
        super().__init__(f"stage '{stage}' failed: {error}")
        self.stage = stage
        self.error = error


@contextmanager
def stage(name: str, out_dir: Path | None = None):
    logger.info("stage %s", name)
    try:
        yield
    except MVECFError as exc:
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / INCOMPLETE_FILE).write_text(f"stage: {name}\nerror: {type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise StageError(name, exc) from exc


@dataclass
class FitResult:
    model: FactorModel
    trace: LossTrace
    extra: dict


# -- data ---------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig) -> SubDataset:
    d = cfg.data
    if d.source == "synthetic":
        synth = cfg.synth_config()
        panel = gen_returns(synth)
        year = d.year if d.year is not None else holdings_year(synth, d.post_years)
        holdings = {year: gen_holdings(synth)}
    else:
        panel = load_returns_csv(d.returns_csv, d.periods_per_year)
        holdings = load_holdings_dir(d.holdings_dir)
        year = int(d.year)
    return build_yearly(
        holdings, panel, year, d.est_years, d.post_years,
        seed=cfg.seed, ratios=tuple(d.split), min_holdings=d.min_holdings,
        annualize=cfg.eval.annualize, diagonal_loading=cfg.eval.diagonal_loading,
    )


def generate(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Write the synthetic returns panel and holdings as CSV inputs."""
    synth = cfg.synth_config()
    out_dir.mkdir(parents=True, exist_ok=True)
    year = holdings_year(synth, cfg.data.post_years)
    write_returns_csv(gen_returns(synth), out_dir / "returns.csv")
    hold_dir = out_dir / "holdings"
    hold_dir.mkdir(exist_ok=True)
    write_holdings_csv(gen_holdings(synth), hold_dir / f"holdings_{year}.csv")
    return {"returns_csv": str(out_dir / "returns.csv"), "holdings_dir": str(hold_dir), "year": year}


# -- fitting ------------------------------------------------------------

def _bpr_trace(history) -> LossTrace:
    trace = LossTrace(initial=history[0] if history else float("nan"))
    trace.steps = list(history)
    trace.epochs = [(e + 1, loss, None) for e, loss in enumerate(history)]
    return trace


def fit_model(cfg: ExperimentConfig, ds: SubDataset, model_name: str | None = None) -> FitResult:
    name = model_name or cfg.model
    hyper = cfg.hyperparams()
    rank_cfg = cfg.ranking_config()
    shape = ds.train.shape
    extra = {}
    if name in ("wmf", "two_step_wmf"):
        model, trace = fit_als(wmf_targets(ds.train, hyper), hyper, validation=ds.validation, threads=cfg.threads)
    elif name == "mvecf_wmf":
        model, trace = fit_mvecf_wmf(ds.train, ds.stats, hyper, validation=ds.validation, threads=cfg.threads)
    elif name == "mvecf_reg":
        model, trace = fit_mvecf_reg(ds.train, ds.stats, hyper, validation=ds.validation)
    elif name in ("bpr", "bpr_nov"):
        history = []
        dist = ds.stats.dissimilarity_matrix() if name == "bpr_nov" else None
        model = fit_bpr(ds.train, shape, rank_cfg, dist, novelty=name == "bpr_nov", history=history)
        trace = _bpr_trace(history)
    elif name == "bpr_mvecf_sampled":
        relabeled = mv_efficient_relabel(ds.train, ds.stats, hyper, cfg.eval.conversion_fraction)
        extra["relabel"] = dict(relabeled.conversion_stats, tau_s=relabeled.tau_s)
        history = []
        model = fit_bpr(relabeled.positives, shape, rank_cfg, history=history)
        trace = _bpr_trace(history)
    else:  # guarded by config validation
        raise DataError(f"unknown model {name}")
    return FitResult(model, trace, extra)


# -- recommending -------------------------------------------------------

def _two_step(model: FactorModel, exclude, ds: SubDataset, cfg: ExperimentConfig) -> RecommendationList:
    k, gamma = cfg.eval.k, cfg.hyperparams().gamma
    items = np.zeros((model.m, k), dtype=np.int64)
    scores = np.zeros((model.m, k))
    for u in range(model.m):
        base = model.predict(u)
        items[u] = two_step_rerank(base, exclude[u], ds.stats, cfg.eval.k_filter, k, gamma)
        scores[u] = base[items[u]]
    return RecommendationList(items, scores)


def recommend(cfg: ExperimentConfig, ds: SubDataset, model: FactorModel, model_name: str | None = None):
    """Return ``(accuracy_recs, efficiency_recs)``.

    Accuracy lists exclude train and validation holdings; efficiency lists
    exclude everything the user holds.
    """
    name = model_name or cfg.model
    known = (ds.train + ds.validation).item_sets()
    held = ds.full.item_sets()
    if name == "two_step_wmf":
        return _two_step(model, known, ds, cfg), _two_step(model, held, ds, cfg)
    return topk_recommend(model, known, cfg.eval.k), topk_recommend(model, held, cfg.eval.k)


def score(cfg: ExperimentConfig, ds: SubDataset, acc: RecommendationList, eff: RecommendationList) -> EvalReport:
    expost = ds.expost_panel if ds.expost_panel is not None and not ds.expost_panel.is_empty else None
    return evaluate(acc, eff, ds.test.item_sets(), ds.full.item_sets(), ds.stats, expost, cfg.eval.k, cfg.eval.annualize)


# -- outputs ------------------------------------------------------------

def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _clear(out_dir: Path, names) -> None:
    for name in names:
        p = out_dir / name
        if p.exists():
            p.unlink()


def write_manifest(cfg: ExperimentConfig, out_dir: Path, command: str, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "versions": {
            "mvecf": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
            "pyyaml": yaml.__version__,
        },
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        doc.update(extra)
    _write_text(out_dir / MANIFEST_FILE, json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def report_document(cfg: ExperimentConfig, report: EvalReport, ds: SubDataset, model_name: str, extra: dict) -> EvalReport:
    report.metadata.update({
        "model": model_name,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "holdings_year": ds.year_label,
        "n_items": ds.train.n,
        "n_train_pairs": ds.train.nnz,
        "n_validation_pairs": ds.validation.nnz,
        "n_test_pairs": ds.test.nnz,
    })
    report.metadata.update(extra)
    return report


def _prepare(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _clear(out_dir, [INCOMPLETE_FILE])


def run_fit(cfg: ExperimentConfig, out_dir: Path, ds: SubDataset | None = None, model_name: str | None = None) -> tuple[SubDataset, FitResult]:
    _prepare(out_dir)
    _clear(out_dir, [MODEL_FILE, TRACE_FILE])
    if ds is None:
        with stage("data", out_dir):
            ds = load_dataset(cfg)
    with stage("fit", out_dir):
        result = fit_model(cfg, ds, model_name)
    result.model.save(out_dir / MODEL_FILE)
    result.trace.to_csv(out_dir / TRACE_FILE)
    return ds, result


def run_recommend(cfg: ExperimentConfig, out_dir: Path, ds: SubDataset | None = None, model: FactorModel | None = None, model_name: str | None = None):
    _prepare(out_dir)
    _clear(out_dir, [RECS_ACCURACY, RECS_EFFICIENCY])
    if ds is None:
        with stage("data", out_dir):
            ds = load_dataset(cfg)
    if model is None:
        with stage("recommend", out_dir):
            path = out_dir / MODEL_FILE
            if not path.exists():
                raise DataError(f"no fitted model at {path}; run 'fit' first")
            model = FactorModel.load(path)
            if model.m != ds.train.m or model.n != ds.train.n:
                raise DataError("stored model does not match the dataset shape")
    with stage("recommend", out_dir):
        acc, eff = recommend(cfg, ds, model, model_name)
    acc.to_csv(out_dir / RECS_ACCURACY, ds.train.user_ids, ds.train.item_ids)
    eff.to_csv(out_dir / RECS_EFFICIENCY, ds.train.user_ids, ds.train.item_ids)
    return ds, acc, eff


def run_eval(cfg: ExperimentConfig, out_dir: Path, ds: SubDataset | None = None, recs=None, model_name: str | None = None, extra: dict | None = None) -> EvalReport:
    _prepare(out_dir)
    _clear(out_dir, [REPORT_FILE, PER_USER_FILE])
    if ds is None:
        with stage("data", out_dir):
            ds = load_dataset(cfg)
    with stage("evaluate", out_dir):
        if recs is None:
            paths = [out_dir / RECS_ACCURACY, out_dir / RECS_EFFICIENCY]
            for p in paths:
                if not p.exists():
                    raise DataError(f"missing {p}; run 'recommend' first")
            recs = tuple(RecommendationList.from_csv(p, ds.train.user_ids, ds.train.item_ids) for p in paths)
        report = score(cfg, ds, *recs)
    report_document(cfg, report, ds, model_name or cfg.model, extra or {})
    report.write_per_user(out_dir / PER_USER_FILE, ds.train.user_ids)
    _write_text(out_dir / REPORT_FILE, report.to_json())
    return report


def run_experiment(cfg: ExperimentConfig, out_dir: Path | None = None, model_name: str | None = None, command: str = "experiment") -> EvalReport:
    """Build data, fit, recommend both protocols, evaluate, write all outputs."""
    out_dir = Path(out_dir or cfg.output_dir)
    _prepare(out_dir)
    _clear(out_dir, [REPORT_FILE, PER_USER_FILE, SUMMARY_FILE])
    ds, result = run_fit(cfg, out_dir, model_name=model_name)
    _, acc, eff = run_recommend(cfg, out_dir, ds, result.model, model_name)
    extra = dict(result.extra)
    extra["training_epochs"] = len(result.trace.epochs)
    extra["training_converged"] = bool(result.trace.converged)
    report = run_eval(cfg, out_dir, ds, (acc, eff), model_name, extra)
    write_manifest(cfg, out_dir, command)
    return report


def sweep_points(cfg: ExperimentConfig):
    """``(parameter, value, lambda_mv, gamma)`` rows in table order."""
    s = cfg.sweep
    if not s.lambda_mv or not s.gamma:
        raise ConfigError("sweep lists must be nonempty")
    rows = [("lambda_mv", lam, float(lam), float(s.gamma_fixed)) for lam in s.lambda_mv]
    rows += [("gamma", g, float(s.lambda_mv_fixed), float(g)) for g in s.gamma]
    return rows


def run_sweep(cfg: ExperimentConfig, out_dir: Path | None = None) -> list[dict]:
    """Run one experiment per grid point and write ``summary_table.csv``."""
    out_dir = Path(out_dir or cfg.output_dir)
    _prepare(out_dir)
    _clear(out_dir, [SUMMARY_FILE])
    k = cfg.eval.k
    columns = list(SUMMARY_COLUMNS) + [f"map_at_{k}", f"recall_at_{k}", "expost_delta_sr", "expost_p_sr_improved"]
    with stage("data", out_dir):
        ds = load_dataset(cfg)
    rows = []
    for parameter, value, lam, gamma in sweep_points(cfg):
        point = cfg.with_overrides(**{"model": cfg.sweep.model, "hyper.lambda_mv": lam, "hyper.gamma": gamma})
        sub = out_dir / f"{parameter}={value}"
        _prepare(sub)
        _, result = run_fit(point, sub, ds)
        _, acc, eff = run_recommend(point, sub, ds, result.model)
        report = run_eval(point, sub, ds, (acc, eff), extra=dict(result.extra))
        write_manifest(point, sub, "sweep")
        m = report.metrics()
        rows.append({
            "model": point.model, "parameter": parameter, "value": value, "lambda_mv": lam, "gamma": gamma,
            "delta_mu": m["delta_mu"], "delta_sigma": m["delta_sigma"], "delta_sr": m["delta_sr"],
            "p_sr_improved": m["p_sr_improved"], f"map_at_{k}": m["map_at_k"], f"recall_at_{k}": m["recall_at_k"],
            "expost_delta_sr": m["expost_delta_sr"], "expost_p_sr_improved": m["expost_p_sr_improved"],
        })
    tmp = out_dir / (SUMMARY_FILE + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: ("" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c]) for c in columns})
    os.replace(tmp, out_dir / SUMMARY_FILE)
    write_manifest(cfg, out_dir, "sweep", {"grid": [list(p) for p in sweep_points(cfg)]})
    return rows
