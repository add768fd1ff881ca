"""Desk-scale experiment drivers shared by the acceptance suite and scripts/."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .compress import truncate_and_factor
from .config import validation_dataset
from .data import Dataset, synth_blobs
from .lrpet import RankPlan, TrainConfig, train_lrpet, truncation_errors
from .nn import Network, desk_cnn
from .search import SearchConfig, evaluate_objective, search_rank_plan

DESK_SHAPE = (1, 12, 12)
HEAD = 9  # index of the classifier layer in desk_cnn


@dataclass(frozen=True)
class DeskSetup:
    classes: int = 10
    per_class: int = 1000
    test_per_class: int = 200
    noise: float = 3.0
    data_seed: int = 0
    epochs: int = 20
    lr: float = 0.1
    ratio: float = 0.5


# ablation variants: name -> TrainConfig overrides (None means plain SGD)
VARIANTS = {
    "sgd": None,
    "lrpet": {},
    "projection-only": {"energy_transfer": False, "bn_rectify": False},
    "alpha=1.0": {"fixed_alpha": 1.0},
    "alpha=1.5": {"fixed_alpha": 1.5},
}


@lru_cache(maxsize=4)
def desk_data(setup: DeskSetup = DeskSetup()) -> Dataset:
    return synth_blobs(
        setup.classes, setup.per_class, DESK_SHAPE, setup.noise, setup.test_per_class, setup.data_seed
    ).normalized()


def desk_net(seed: int, setup: DeskSetup = DeskSetup()) -> Network:
    return Network(desk_cnn(DESK_SHAPE, setup.classes), DESK_SHAPE, seed=seed)


def desk_plan(net: Network, ratio: float) -> RankPlan:
    return RankPlan.uniform(net, ratio, keep_dense={HEAD})


@dataclass(frozen=True)
class RunResult:
    variant: str
    seed: int
    accuracy: float
    factorized_accuracy: float | None
    truncation_errors: dict
    epoch_seconds: float


def run_variant(variant: str, seed: int, setup: DeskSetup = DeskSetup()) -> RunResult:
    data = desk_data(setup)
    net = desk_net(seed, setup)
    cfg = TrainConfig(epochs=setup.epochs, lr=setup.lr, seed=seed)
    overrides = VARIANTS[variant]
    plan = None if overrides is None else desk_plan(net, setup.ratio)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    net, metrics = train_lrpet(net, data, cfg, plan)
    net.eval()
    errs, fact_acc = {}, None
    if plan is not None:
        errs = truncation_errors(net, plan.ranks(net))
        factored, _ = truncate_and_factor(net, plan, warn_tol=1.0)
        fact_acc = factored.accuracy(data.test.images, data.test.labels)
    secs = float(np.mean([r["epoch_seconds"] for r in metrics.rows]))
    return RunResult(variant, seed, metrics.final_accuracy, fact_acc, errs, secs)


def overhead_ratio(epochs: int = 3, seed: int = 0, setup: DeskSetup = DeskSetup()) -> dict:
    """Mean training-epoch wall-clock of LRPET over plain SGD from identical starts."""
    data = desk_data(setup)
    cfg = TrainConfig(epochs=epochs, lr=setup.lr, seed=seed)
    net = desk_net(seed, setup)
    _, base = train_lrpet(net.clone(), data, cfg, None)
    _, ours = train_lrpet(net.clone(), data, cfg, desk_plan(net, setup.ratio))
    # first epoch includes one-off warm-up costs on both sides; median is robust to stragglers
    t_base = float(np.median([r["epoch_seconds"] for r in base.rows]))
    t_ours = float(np.median([r["epoch_seconds"] for r in ours.rows]))
    return {"sgd": t_base, "lrpet": t_ours, "ratio": t_ours / t_base}


def desk_search(budget: int = 20, seed: int = 0, proxy_epochs: int = 15, setup: DeskSetup = DeskSetup()):
    """GP-EI plan search on the desk CNN plus the uniform-grid baseline under the same evaluator."""
    val = validation_dataset(desk_data(setup), 2000)
    template = desk_net(seed, setup)
    e = proxy_epochs
    proxy = TrainConfig(epochs=e, lr=setup.lr, milestones=[(e // 3, 10), (2 * e // 3, 10)], seed=seed)
    cfg = SearchConfig(budget=budget, seed=seed, proxy_epochs=e, proxy=proxy, keep_dense={HEAD})
    plan, state = search_rank_plan(template, val, cfg)
    dim = len(plan.ratios)
    grid = {p: evaluate_objective(np.full(dim, p), template, val, cfg) for p in (0.3, 0.5, 0.7)}
    return plan, state, grid
