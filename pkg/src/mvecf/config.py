"""Experiment configuration: YAML file plus dotted command-line overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError, MVECFError
from .ranking import RankingConfig
from .synth_gen import SynthConfig
from .wmf import Hyperparams

MODELS = ("wmf", "mvecf_reg", "mvecf_wmf", "bpr", "bpr_nov", "bpr_mvecf_sampled", "two_step_wmf")
SOURCES = ("synthetic", "csv")


@dataclass
class DataConfig:
    source: str = "synthetic"
    synthetic: dict = field(default_factory=dict)
    returns_csv: str | None = None
    holdings_dir: str | None = None
    year: int | None = None
    est_years: int = 5
    post_years: int = 5
    periods_per_year: int = 12
    min_holdings: int = 2
    split: list = field(default_factory=lambda: [8, 1, 1])


@dataclass
class EvalConfig:
    k: int = 20
    annualize: bool = False
    diagonal_loading: float | None = None
    k_filter: int = 50
    conversion_fraction: float = 0.01


@dataclass
class SweepConfig:
    model: str = "mvecf_wmf"
    lambda_mv: list = field(default_factory=lambda: [0.1, 1, 10])
    gamma: list = field(default_factory=lambda: [1, 3, 5])
    gamma_fixed: float = 3.0
    lambda_mv_fixed: float = 10.0


@dataclass
class ExperimentConfig:
    """Everything a run needs.

    ``seed`` drives the split, model initialization and sampling; the
    ``seed`` fields inside ``hyper`` and ``ranking`` are overwritten by it.
    The synthetic generator keeps its own ``data.synthetic.seed``.
    """

    seed: int = 0
    model: str = "mvecf_wmf"
    output_dir: str = "runs/default"
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    hyper: dict = field(default_factory=dict)
    ranking: dict = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.data.source not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}")
        if self.data.source == "csv":
            if not self.data.returns_csv or not self.data.holdings_dir or self.data.year is None:
                raise ConfigError("csv source needs data.returns_csv, data.holdings_dir and data.year")
            if self.data.synthetic:
                raise ConfigError("give exactly one data source: drop data.synthetic for csv input")
        elif self.data.returns_csv or self.data.holdings_dir:
            raise ConfigError("give exactly one data source: drop csv paths for synthetic input")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.eval.k < 0 or self.eval.k_filter < self.eval.k:
            raise ConfigError("need 0 <= eval.k <= eval.k_filter")
        if self.sweep.model not in MODELS:
            raise ConfigError(f"unknown sweep model {self.sweep.model!r}")
        # build once to surface invalid values as config errors
        self.hyperparams()
        self.ranking_config()
        if self.data.source == "synthetic":
            self.synth_config()

    def hyperparams(self) -> Hyperparams:
        return _build(Hyperparams, {**self.hyper, "seed": self.seed}, "hyper")

    def ranking_config(self) -> RankingConfig:
        return _build(RankingConfig, {**self.ranking, "seed": self.seed}, "ranking")

    def synth_config(self) -> SynthConfig:
        return _build(SynthConfig, self.data.synthetic, "data.synthetic")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyper"] = self.hyperparams().to_dict()
        d["ranking"] = self.ranking_config().to_dict()
        if self.data.source == "synthetic":
            d["data"]["synthetic"] = self.synth_config().to_dict()
        return d

    def config_hash(self) -> str:
        """Hash of every field that can change results (not paths or threads)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("threads")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return from_dict(apply_overrides(self.to_dict(), changes))


def _build(cls, values: dict, where: str):
    names = {f.name for f in fields(cls) if f.init}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (MVECFError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    nested = {"data": DataConfig, "eval": EvalConfig, "sweep": SweepConfig}
    kwargs = {}
    for key, value in raw.items():
        if key in nested:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a mapping")
            kwargs[key] = _build(nested[key], value, key)
        else:
            kwargs[key] = value
    return _build(ExperimentConfig, kwargs, "config")


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
    return from_dict(apply_overrides(raw, overrides or {}))


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Set ``{"hyper.lambda_mv": 10}``-style dotted keys in a nested dict."""
    out = copy.deepcopy(raw)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {part} is not a mapping")
        node[parts[-1]] = value
    return out


def parse_override_args(tokens) -> dict:
    """Turn ``["--hyper.gamma", "5", "--model=wmf"]`` into an override dict."""
    out = {}
    tokens = list(tokens)
    k = 0
    while k < len(tokens):
        tok = tokens[k]
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if k + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}")
            k += 1
            value = tokens[k]
        try:
            out[key.replace("-", "_")] = yaml.safe_load(value)
        except yaml.YAMLError:
            out[key.replace("-", "_")] = value
        k += 1
    return out
