"""Run configuration: nested dataclass sections loaded from YAML/JSON with
strict key checking and dotted ``--set`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import Dataset, Split, load_cifar10_bin, load_idx, synth_blobs
from .lrpet import RankPlan, TrainConfig
from .nn import BUILDERS, Flatten, Network
from .search import SearchConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    arch: str = "desk_cnn"
    widths: list = field(default_factory=lambda: [16, 32])
    hidden: list = field(default_factory=lambda: [64])
    shortcut: str = "A"
    bias: bool = False
    seed: int = 0


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | idx | cifar10
    classes: int = 10
    per_class: int = 1000
    test_per_class: int = 200
    image_shape: list = field(default_factory=lambda: [1, 12, 12])
    noise: float = 3.0
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    cifar_train: list = field(default_factory=list)
    cifar_test: list = field(default_factory=list)
    n_train: int | None = None
    n_test: int | None = None
    normalize: bool = True
    # number of train samples held out as the validation split for search
    validation: int = 2000


@dataclass
class LrpetSection:
    enabled: bool = True
    ratio: float = 0.5
    ratios: dict | None = None
    min_rank: dict = field(default_factory=dict)
    keep_dense: list = field(default_factory=lambda: [9])


@dataclass
class SearchSection:
    lam: float = 1.0
    budget: int = 20
    initial: int = 5
    pool_size: int = 2000
    local_share: float = 0.5
    lower: float = 0.1
    upper: float = 0.95
    noise: float = 1e-4
    seed: int = 0
    proxy_epochs: int = 15
    objective: str = "train"  # train | quadratic
    optimum: list = field(default_factory=list)


@dataclass
class OutputSection:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    lrpet: LrpetSection = field(default_factory=LrpetSection)
    search: SearchSection = field(default_factory=SearchSection)
    output: OutputSection = field(default_factory=OutputSection)


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


_TYPES = {"int": (int,), "float": (int, float), "str": (str,), "bool": (bool,), "list": (list, tuple),
          "dict": (dict,), "None": (type(None),)}


def _type_ok(value, annotation: str) -> bool:
    for name in (a.strip() for a in annotation.split("|")):
        allowed = _TYPES.get(name)
        if allowed is None:
            return True  # nested or exotic annotation, left to the section's own checks
        if isinstance(value, bool) and bool not in allowed:
            continue
        if isinstance(value, allowed):
            return True
    return False


def _build(section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    factory = SECTIONS[section]
    known = {f.name: f for f in dataclasses.fields(factory())}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        if not _type_ok(value, str(known[key].type)):
            raise ConfigError(f"{section}.{key}: expected {known[key].type}, got {value!r}")
    try:
        return dataclasses.replace(factory(), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in section {section!r}: {exc}") from exc


def from_dict(d: dict | None) -> RunConfig:
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigError("config document must be a mapping")
    for key in d:
        if key not in SECTIONS:
            raise ConfigError(f"unknown key {key}")
    return RunConfig(**{name: _build(name, d.get(name, {})) for name in SECTIONS})


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in (raw or {}).items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must look like section.key")
        section, name = parts
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        raw[section][name] = yaml.safe_load(value)
    return raw


def load(path=None, overrides=(), seed=None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    raw = apply_overrides(raw, list(overrides))
    if seed is not None:
        for section in ("train", "model", "search"):
            raw.setdefault(section, {})["seed"] = int(seed)
    cfg = from_dict(raw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.model.arch not in BUILDERS:
        raise ConfigError(f"model.arch must be one of {sorted(BUILDERS)}")
    if cfg.data.source not in ("synthetic", "idx", "cifar10"):
        raise ConfigError("data.source must be synthetic, idx or cifar10")
    if cfg.search.objective not in ("train", "quadratic"):
        raise ConfigError("search.objective must be train or quadratic")
    if not 0.0 <= cfg.lrpet.ratio <= 1.0:
        raise ConfigError("lrpet.ratio must lie in [0, 1]")
    if cfg.search.budget < cfg.search.initial:
        raise ConfigError("search.budget must be at least search.initial")
    try:
        TrainConfig(**dataclasses.asdict(cfg.train))
        search_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- builders


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        data = synth_blobs(d.classes, d.per_class, tuple(d.image_shape), d.noise, d.test_per_class, d.seed)
    elif d.source == "idx":
        train = load_idx(d.train_images, d.train_labels)
        test = load_idx(d.test_images, d.test_labels)
        data = Dataset.from_splits(train, test, d.classes)
    else:
        data = Dataset.from_splits(load_cifar10_bin(*d.cifar_train), load_cifar10_bin(*d.cifar_test), d.classes)
    if d.n_train is not None or d.n_test is not None:
        data = Dataset.from_splits(
            Split(data.train.images[: d.n_train], data.train.labels[: d.n_train]),
            Split(data.test.images[: d.n_test], data.test.labels[: d.n_test]),
            data.num_classes,
        )
    return data.normalized() if d.normalize else data


def validation_dataset(data: Dataset, count: int) -> Dataset:
    """Hold out the last ``count`` train samples as the evaluation split."""
    if not 0 < count < len(data.train):
        raise ConfigError(f"validation size {count} must be in (0, {len(data.train)})")
    tr = data.train
    return Dataset(
        Split(tr.images[:-count], tr.labels[:-count]),
        Split(tr.images[-count:], tr.labels[-count:]),
        data.num_classes,
        data.mean,
        data.std,
    )


def build_network(cfg: RunConfig, input_shape, classes) -> Network:
    m = cfg.model
    if m.arch == "desk_cnn":
        layers = BUILDERS["desk_cnn"](tuple(input_shape), classes, tuple(m.widths), m.bias)
    elif m.arch == "small_resnet":
        layers = BUILDERS["small_resnet"](tuple(input_shape), classes, tuple(m.widths), m.shortcut)
    else:
        n_in = 1
        for s in input_shape:
            n_in *= s
        layers = [Flatten()] + BUILDERS["mlp"](n_in, tuple(m.hidden), classes)
    return Network(layers, tuple(input_shape), seed=m.seed)


def build_plan(cfg: RunConfig, net: Network) -> RankPlan:
    min_rank = {int(k): int(v) for k, v in (cfg.lrpet.min_rank or {}).items()}
    keep = {int(i) for i in cfg.lrpet.keep_dense or ()}
    if cfg.lrpet.ratios:
        plan = RankPlan({int(k): float(v) for k, v in cfg.lrpet.ratios.items()}, min_rank, keep)
    else:
        plan = RankPlan.uniform(net, cfg.lrpet.ratio, min_rank, keep)
    plan.validate(net)
    return plan


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(**dataclasses.asdict(cfg.train))


def search_config(cfg: RunConfig) -> SearchConfig:
    s = cfg.search
    proxy = dataclasses.replace(
        train_config(cfg),
        epochs=s.proxy_epochs,
        milestones=[(s.proxy_epochs // 3, 10), (2 * s.proxy_epochs // 3, 10)],
        seed=s.seed,
    )
    min_rank = {int(k): int(v) for k, v in (cfg.lrpet.min_rank or {}).items()}
    return SearchConfig(
        lam=s.lam, budget=s.budget, initial=s.initial, pool_size=s.pool_size, local_share=s.local_share,
        lower=s.lower, upper=s.upper, noise=s.noise, seed=s.seed, proxy_epochs=s.proxy_epochs,
        proxy=proxy, min_rank=min_rank, keep_dense={int(i) for i in cfg.lrpet.keep_dense or ()},
    )
