"""Versioned YAML experiment configuration.

A config file is a mapping with ``config_version: 1``; every section is
optional and missing keys take their defaults, so ``dump_config`` of the
defaults enumerates every hyperparameter. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .cfm import CfmConfig
from .dynamics import ConfigError, DatasetSpec
from .forecaster import ExpertTrainConfig, ForecasterConfig
from .graphs import GraphSpec
from .vae import VaeConfig

CONFIG_VERSION = 1
METHODS = ("fnfm", "one_per_env", "unconditional", "flat_tokenizer")


@dataclass(frozen=True)
class EvalConfig:
    methods: tuple = ("fnfm", "one_per_env")
    # score the CFM on val environments every this many epochs and keep the best; 0 keeps the last
    val_every: int = 0
    # token length for the flatten ablation; None matches the structural token count
    flat_token_dim: int | None = None
    export_splits: tuple = ("train", "val", "test_in", "test_out")

    def __post_init__(self):
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown evaluation methods {sorted(bad)}")
        if self.val_every < 0:
            raise ConfigError("val_every must be >= 0")


@dataclass(frozen=True)
class RobustnessConfig:
    data_ratio_levels: tuple = (1.0, 0.5, 0.25, 0.1)
    coeff_noise_levels: tuple = (0.0, 0.05, 0.1, 0.15, 0.2)
    # "stratified" keeps one environment per contiguous coefficient stratum, "random" draws uniformly
    data_ratio_sampling: str = "stratified"
    # retrain data-ratio subsets with as many optimizer steps as the full corpus
    match_steps: bool = True

    def __post_init__(self):
        for lv in self.data_ratio_levels:
            if not 0.0 < lv <= 1.0:
                raise ConfigError(f"data_ratio level {lv} outside (0, 1]")
        for lv in self.coeff_noise_levels:
            if lv < 0:
                raise ConfigError(f"coeff_noise level {lv} is negative")
        if self.data_ratio_sampling not in ("stratified", "random"):
            raise ConfigError(f"unknown data_ratio_sampling {self.data_ratio_sampling!r}")


def collab_analog() -> DatasetSpec:
    """Collab analog with the published coefficient ranges: beta fixed, gamma swept."""
    return DatasetSpec(
        name="collab", kind="sis", graph=GraphSpec("ba", n=30, m=8, seed=0),
        train_box={"beta": (0.02, 0.02, 1), "gamma": (0.2, 0.4264, 40)},
        ood_box={"beta": (0.02, 0.02, 1), "gamma": (0.4728, 0.9302, 10)},
    )


def hill_analog() -> DatasetSpec:
    """Hill analog: OOD sits on the training boundary a = 0.6 with h in the upper sub-range."""
    return DatasetSpec(
        name="hill", kind="hill", graph=GraphSpec("ba", n=30, m=2, seed=0),
        train_box={"a": (0.5, 0.6, 5), "h": (0.33, 2.0, 20)},
        ood_box={"a": (0.6, 0.6, 1), "h": (1.258, 2.0, 10)},
    )


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=collab_analog)
    forecaster: ForecasterConfig = field(default_factory=ForecasterConfig)
    expert: ExpertTrainConfig = field(default_factory=ExpertTrainConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    cfm: CfmConfig = field(default_factory=CfmConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    robustness: RobustnessConfig = field(default_factory=RobustnessConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    base_seed: int = 0
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")


# ---------------------------------------------------------------------------
# dict <-> dataclass
# ---------------------------------------------------------------------------

def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {"config_version": CONFIG_VERSION, **_to_plain(cfg)}


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _dataset(data) -> DatasetSpec:
    data = dict(data or {})
    graph = _build(GraphSpec, data.pop("graph", None), "dataset.graph")
    for key in ("train_box", "ood_box"):
        if data.get(key) is not None:
            data[key] = {k: tuple(v) for k, v in data[key].items()}
    spec = _build(DatasetSpec, data, "dataset")
    spec.graph = graph
    return spec


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = dict(data)
    version = data.pop("config_version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version!r} (expected {CONFIG_VERSION})")
    sections = {
        "forecaster": ForecasterConfig, "expert": ExpertTrainConfig, "vae": VaeConfig, "cfm": CfmConfig,
        "evaluation": EvalConfig, "robustness": RobustnessConfig,
    }
    kwargs = {}
    for key, value in data.items():
        if key == "dataset":
            kwargs[key] = _dataset(value)
        elif key in sections:
            kwargs[key] = _build(sections[key], value, key)
        elif key == "seeds":
            kwargs[key] = tuple(int(s) for s in value)
        elif key in ("name", "output_dir"):
            kwargs[key] = str(value)
        elif key == "base_seed":
            kwargs[key] = int(value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "graph" in (data.get("dataset") or {}) and kwargs["dataset"].graph.path:
        if not Path(kwargs["dataset"].graph.path).exists():
            raise ConfigError(f"graph file {kwargs['dataset'].graph.path} does not exist")
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def collab_desk(output_dir: str = "runs/collab_desk") -> ExperimentConfig:
    """Desk-scale Collab analog: fixed beta, gamma swept across the epidemic threshold."""
    ds = DatasetSpec(
        name="collab_desk", kind="sis", graph=GraphSpec("ba", n=30, m=8, seed=0),
        train_box={"beta": (0.02, 0.02, 1), "gamma": (0.2, 0.4264, 40)},
        ood_box={"beta": (0.02, 0.02, 1), "gamma": (0.4728, 0.9302, 10)},
        T=200, dt=0.1, vary_x0=False,
    )
    return ExperimentConfig(
        name="collab_desk",
        dataset=ds,
        forecaster=ForecasterConfig(H=20, N=20),
        expert=ExpertTrainConfig(epochs=60, batch=8, lr=1e-2, stride=4),
        vae=VaeConfig(d_model=64, heads=4, d_z=4, epochs=300, lr=6e-3, batch=8),
        cfm=CfmConfig(d_model=64, layers=2, heads=2, dropout=0.0, epochs=3000, lr=3e-3, batch=8, n_steps=50),
        evaluation=EvalConfig(methods=("fnfm", "one_per_env", "unconditional"), val_every=100),
        robustness=RobustnessConfig(data_ratio_levels=(1.0, 0.5, 0.25), coeff_noise_levels=(0.0, 0.05, 0.1, 0.2)),
        seeds=(0, 1, 2),
        output_dir=output_dir,
    )


def tiny(output_dir: str = "runs/tiny") -> ExperimentConfig:
    """Seconds-scale smoke configuration for tests."""
    ds = DatasetSpec(
        name="tiny", kind="sis", graph=GraphSpec("ba", n=8, m=2, seed=0),
        train_box={"beta": (0.3, 0.3, 1), "gamma": (0.2, 0.4, 8)},
        ood_box={"beta": (0.3, 0.3, 1), "gamma": (0.5, 0.6, 2)},
        T=40, dt=0.2, vary_x0=False, fractions=(0.5, 0.25, 0.25),
    )
    return ExperimentConfig(
        name="tiny",
        dataset=ds,
        forecaster=ForecasterConfig(H=10, N=5, channels=4, k_t=2, blocks=1),
        expert=ExpertTrainConfig(epochs=3, batch=8, lr=1e-2, stride=2),
        vae=VaeConfig(d_model=16, layers=1, heads=2, d_z=2, epochs=3, lr=1e-3, batch=4),
        cfm=CfmConfig(d_model=16, layers=1, heads=2, dropout=0.1, epochs=3, lr=1e-3, batch=4, n_steps=4),
        evaluation=EvalConfig(methods=METHODS, val_every=2),
        robustness=RobustnessConfig(data_ratio_levels=(1.0, 0.5), coeff_noise_levels=(0.0, 0.2)),
        seeds=(0, 1),
        output_dir=output_dir,
    )


PRESETS = {"paper_defaults": ExperimentConfig, "collab_desk": collab_desk, "tiny": tiny}
