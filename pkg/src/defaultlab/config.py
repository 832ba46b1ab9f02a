"""Run configuration: a YAML document validated into frozen dataclasses.

Every error names the offending field as a dotted path, e.g.
``model.gbt.max_depth: must be >= 1``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import yaml

from . import nn, trees
from .data import SplitSpec
from .economics import SavingsSpec, ValueAddedParams
from .errors import ConfigError, DefaultLabError
from .metrics import RiskBandSpec
from .synth import SyntheticPanelConfig

MODEL_KINDS = ("dnn", "gbt", "cart", "forest", "logistic", "hybrid")


def _section(cls, raw, path, **fixed):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", path)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError("unknown key", f"{path}.{key}" if path else key)
    kwargs = dict(raw)
    kwargs.update(fixed)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        return cls(**kwargs)
    except ConfigError as e:
        sub = f"{path}.{e.field}" if e.field and path else (e.field or path)
        raise ConfigError(str(e).split(": ", 1)[-1] if e.field else str(e), sub) from None
    except (DefaultLabError, TypeError, ValueError) as e:
        raise ConfigError(str(e), path) from None


@dataclass(frozen=True)
class CsvSource:
    path: str
    schema: str


@dataclass(frozen=True)
class DnnSpec:
    preset: Optional[str] = None
    layer_sizes: Optional[tuple] = None
    activation: Optional[str] = None
    dropout_rate: Optional[float] = None
    use_batchnorm: Optional[bool] = None
    batch_size: Optional[int] = None
    max_epochs: Optional[int] = None
    patience: Optional[int] = None
    learning_rate: Optional[float] = None

    def __post_init__(self):
        if self.preset is not None and self.preset not in nn.PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(nn.PRESETS)}", "preset")
        self.resolve(0)

    def resolve(self, seed, logistic=False):
        if self.preset is not None:
            arch, train = nn.PRESETS[self.preset]
        else:
            arch, train = nn.NetworkArchitecture((64, 32), "relu", 0.2, True), nn.TrainConfig(
                batch_size=512, max_epochs=40, patience=5, learning_rate=0.003
            )
        a = {k: getattr(self, k) for k in ("layer_sizes", "activation", "dropout_rate", "use_batchnorm")
             if getattr(self, k) is not None}
        if logistic:
            a = {"layer_sizes": (), "dropout_rate": 0.0, "use_batchnorm": False}
        t = {k: getattr(self, k) for k in ("batch_size", "max_epochs", "patience", "learning_rate")
             if getattr(self, k) is not None}
        try:
            arch = dataclasses.replace(arch, **a)
            train = dataclasses.replace(train, seed=seed, **t)
        except (DefaultLabError, TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return arch, train


@dataclass(frozen=True)
class GbtSpec:
    preset: Optional[str] = None
    n_trees: Optional[int] = None
    max_depth: Optional[int] = None
    learning_rate: Optional[float] = None
    max_bins: Optional[int] = None
    min_child_weight: Optional[float] = None
    reg_lambda: Optional[float] = None
    early_stopping_rounds: Optional[int] = None

    def __post_init__(self):
        if self.preset is not None and self.preset not in trees.GBT_PRESETS:
            raise ConfigError(
                f"unknown preset {self.preset!r}; choose from {sorted(trees.GBT_PRESETS)}", "preset"
            )
        self.resolve(0)

    def resolve(self, seed):
        base = trees.GBT_PRESETS[self.preset] if self.preset else trees.GbtConfig(
            n_trees=200, learning_rate=0.1, early_stopping_rounds=20
        )
        over = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if f.name != "preset" and getattr(self, f.name) is not None}
        try:
            return dataclasses.replace(base, seed=seed, **over)
        except (DefaultLabError, TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


@dataclass(frozen=True)
class CartSpec:
    max_depth: int = trees.CART_DEPTH
    min_leaf: int = 50

    def __post_init__(self):
        if self.max_depth < 0:
            raise ConfigError("must be >= 0", "max_depth")
        if self.min_leaf < 1:
            raise ConfigError("must be >= 1", "min_leaf")


@dataclass(frozen=True)
class ForestSpec:
    n_trees: int = 100
    max_depth: int = trees.FOREST_DEPTH
    min_leaf: int = 20
    max_bins: Optional[int] = 256

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("must be >= 1", "n_trees")
        if self.max_depth < 0:
            raise ConfigError("must be >= 0", "max_depth")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "hybrid"
    dnn: DnnSpec = DnnSpec()
    logistic: DnnSpec = DnnSpec()
    gbt: GbtSpec = GbtSpec()
    cart: CartSpec = CartSpec()
    forest: ForestSpec = ForestSpec()
    weight_dnn: float = 0.5

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"must be one of {list(MODEL_KINDS)}", "kind")
        if not 0.0 <= self.weight_dnn <= 1.0:
            raise ConfigError("must lie in [0, 1]", "weight_dnn")


@dataclass(frozen=True)
class EvaluateSpec:
    threshold: float = 0.5
    calibration_bins: int = 10
    per_quarter: bool = True
    current_only: bool = True
    sweep_grid: tuple = tuple(round(0.1 * k, 1) for k in range(1, 10))

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("must lie in [0, 1]", "threshold")
        if self.calibration_bins < 1:
            raise ConfigError("must be >= 1", "calibration_bins")


@dataclass(frozen=True)
class InterpretSpec:
    n_repeats: int = 3
    sample_size: Optional[int] = 5000
    n_instances: int = 20
    background_size: int = 100
    n_permutations: int = 50
    group_threshold: float = 0.7

    def __post_init__(self):
        for name in ("n_instances", "background_size", "n_permutations"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        if self.n_repeats < 0:
            raise ConfigError("must be >= 0", "n_repeats")


@dataclass(frozen=True)
class EconomicsSpec:
    r: float = 0.10
    n_periods: int = 3
    runup: float = 1.2
    r_grid: tuple = (0.02, 0.04, 0.06, 0.08, 0.10, 0.12, 0.14, 0.16, 0.18, 0.20)
    runup_grid: tuple = (1.05, 1.1, 1.2, 1.3, 1.4, 1.5, 1.75, 2.0, 2.5, 3.0)
    rate_means: tuple = SavingsSpec().rate_means
    rate_stds: tuple = SavingsSpec().rate_stds
    rate_low: float = 0.0
    rate_high: float = 0.36

    def __post_init__(self):
        ValueAddedParams(self.r, self.n_periods, self.runup)
        if not self.r_grid or not self.runup_grid:
            raise ConfigError("grids must be nonempty", "r_grid")

    def params(self, threshold):
        return ValueAddedParams(self.r, self.n_periods, self.runup, threshold)

    def savings(self, seed):
        return SavingsSpec(RiskBandSpec(), tuple(self.rate_means), tuple(self.rate_stds),
                           self.rate_low, self.rate_high, seed=seed)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    synthetic: Optional[SyntheticPanelConfig]
    csv: Optional[CsvSource]
    split: SplitSpec
    model: ModelSpec
    evaluate: EvaluateSpec
    interpret: InterpretSpec
    economics: EconomicsSpec
    output_dir: str
    source_text: str = field(default="", repr=False)

    def digest(self):
        return hashlib.sha256(self.source_text.encode()).hexdigest()


_TOP_KEYS = ("seed", "data", "split", "model", "evaluate", "interpret", "economics", "output_dir")


def parse_config(text, seed_override=None, out_override=None) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError("unknown key", key)
    seed = raw.get("seed", 0) if seed_override is None else seed_override
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0 or seed >= 2 ** 64:
        raise ConfigError("must be an integer in [0, 2**64)", "seed")

    data = raw.get("data") or {}
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", "data")
    for key in data:
        if key not in ("synthetic", "csv"):
            raise ConfigError("unknown key", f"data.{key}")
    if ("synthetic" in data) == ("csv" in data):
        raise ConfigError("exactly one of data.synthetic or data.csv is required", "data")
    synthetic = csv = None
    if "synthetic" in data:
        syn = dict(data["synthetic"] or {})
        syn.setdefault("seed", seed)
        synthetic = _section(SyntheticPanelConfig, syn, "data.synthetic")
    else:
        csv = _section(CsvSource, data["csv"], "data.csv")

    split_raw = dict(raw.get("split") or {})
    split_raw.setdefault("seed", seed)
    split = _section(SplitSpec, split_raw, "split")

    m = dict(raw.get("model") or {})
    subs = {"dnn": DnnSpec, "logistic": DnnSpec, "gbt": GbtSpec, "cart": CartSpec, "forest": ForestSpec}
    for key, cls in subs.items():
        if key in m:
            m[key] = _section(cls, m[key], f"model.{key}")
    model = _section(ModelSpec, m, "model")

    out = raw.get("output_dir", "out") if out_override is None else out_override
    if not isinstance(out, str) or not out:
        raise ConfigError("must be a nonempty path", "output_dir")

    return RunConfig(
        seed=seed,
        synthetic=synthetic,
        csv=csv,
        split=split,
        model=model,
        evaluate=_section(EvaluateSpec, raw.get("evaluate"), "evaluate"),
        interpret=_section(InterpretSpec, raw.get("interpret"), "interpret"),
        economics=_section(EconomicsSpec, raw.get("economics"), "economics"),
        output_dir=out,
        source_text=json.dumps(raw, sort_keys=True, default=str) + f"|seed={seed}",
    )


def load_config(path, seed_override=None, out_override=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e.strerror}", "--config") from None
    return parse_config(text, seed_override, out_override)
