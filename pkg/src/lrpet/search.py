"""Per-layer pruning-ratio search: minimize error + lambda * compression rate
with a Gaussian-process surrogate and expected improvement."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc

from .compress import compression_report
from .data import Dataset
from .lrpet import DivergenceError, RankPlan, TrainConfig, train_lrpet
from .nn import Network

log = logging.getLogger(__name__)

LENGTHSCALES = np.geomspace(0.05, 2.0, 12)
SIGNAL_VARIANCES = np.geomspace(0.1, 10.0, 7)


@dataclass
class SearchConfig:
    lam: float = 1.0
    budget: int = 20
    initial: int = 5
    pool_size: int = 2000
    # share of the candidate pool drawn around the incumbent instead of uniformly
    local_share: float = 0.5
    lower: float = 0.1
    upper: float = 0.95
    noise: float = 1e-4
    seed: int = 0
    proxy_epochs: int = 15
    proxy: TrainConfig | None = None
    min_rank: dict = field(default_factory=dict)
    keep_dense: set = field(default_factory=set)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if not 0.0 <= self.lower < self.upper <= 1.0:
            raise ValueError("ratio bounds must satisfy 0 <= lower < upper <= 1")

    def proxy_config(self) -> TrainConfig:
        if self.proxy is not None:
            return self.proxy
        e = self.proxy_epochs
        return TrainConfig(epochs=e, milestones=[(e // 3, 10), (2 * e // 3, 10)], seed=self.seed)


@dataclass(frozen=True)
class Evaluation:
    p: np.ndarray
    error: float
    compression: float
    objective: float


@dataclass
class SearchState:
    evaluations: list[Evaluation] = field(default_factory=list)
    best_so_far: list[float] = field(default_factory=list)
    lengthscale: float = float("nan")
    signal_variance: float = float("nan")
    noise: float = 1e-4
    fallbacks: int = 0

    @property
    def best(self) -> Evaluation:
        return min(self.evaluations, key=lambda e: e.objective)

    def record(self, ev: Evaluation):
        if not np.isfinite(ev.objective):
            raise ValueError("objective must be finite")
        self.evaluations.append(ev)
        prev = self.best_so_far[-1] if self.best_so_far else np.inf
        self.best_so_far.append(min(prev, ev.objective))

    def write_csv(self, path):
        dim = len(self.evaluations[0].p) if self.evaluations else 0
        cols = ["iteration"] + [f"p{k}" for k in range(dim)] + ["E", "C", "objective", "best_so_far"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for it, (ev, best) in enumerate(zip(self.evaluations, self.best_so_far), 1):
                w.writerow([it, *map(repr, map(float, ev.p)), repr(ev.error), repr(ev.compression),
                            repr(ev.objective), repr(best)])


# ---------------------------------------------------------------- surrogate


def se_kernel(a, b, lengthscale, variance):
    d2 = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return variance * np.exp(-0.5 * np.maximum(d2, 0.0) / lengthscale**2)


class GaussianProcess:
    """Zero-mean GP on standardized targets with a squared-exponential kernel.

    Length-scale and signal variance are picked by maximum marginal
    likelihood over a fixed grid; the noise variance is fixed.
    """

    def __init__(self, noise=1e-4, lengthscales=LENGTHSCALES, variances=SIGNAL_VARIANCES):
        self.noise = noise
        self.lengthscales = lengthscales
        self.variances = variances

    def fit(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y_mean = y.mean()
        std = y.std()
        self.y_std = std if std > 0 else 1.0
        z = (y - self.y_mean) / self.y_std
        best = None
        for ls in self.lengthscales:
            for var in self.variances:
                k = se_kernel(x, x, ls, var) + self.noise * np.eye(len(x))
                try:
                    chol = np.linalg.cholesky(k)
                except np.linalg.LinAlgError:
                    continue
                alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, z))
                ll = -0.5 * z @ alpha - np.log(np.diag(chol)).sum()
                if np.isfinite(ll) and (best is None or ll > best[0]):
                    best = (ll, ls, var, chol, alpha)
        if best is None:
            raise np.linalg.LinAlgError("kernel matrix not positive definite for any hyperparameters")
        _, self.lengthscale, self.variance, self.chol, self.alpha = best
        self.x = x
        return self

    def predict(self, xs):
        ks = se_kernel(np.asarray(xs, dtype=np.float64), self.x, self.lengthscale, self.variance)
        mu = ks @ self.alpha
        v = np.linalg.solve(self.chol, ks.T)
        var = self.variance - np.sum(v * v, axis=0)
        # below this the difference is rounding error of the subtraction
        var[var <= 1e-12 * self.variance] = 0.0
        return self.y_mean + self.y_std * mu, self.y_std * np.sqrt(var)


def expected_improvement(mu, sd, best):
    """EI for minimization; exact max(best - mu, 0) where the posterior is certain."""
    mu = np.asarray(mu, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    imp = best - mu
    out = np.maximum(imp, 0.0)
    pos = sd > 1e-12 * max(1.0, abs(best))
    z = imp[pos] / sd[pos]
    out[pos] = imp[pos] * ndtr(z) + sd[pos] * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------- search loop


def initial_design(dim, cfg: SearchConfig, rng) -> np.ndarray:
    mid = np.full((1, dim), 0.5 * (cfg.lower + cfg.upper))
    if cfg.initial <= 1:
        return mid[: cfg.initial]
    halton = qmc.Halton(d=dim, scramble=True, seed=rng)
    pts = cfg.lower + (cfg.upper - cfg.lower) * halton.random(cfg.initial - 1)
    return np.vstack([mid, pts])


def bo_search(objective: Callable[[np.ndarray], Evaluation], dim: int, cfg: SearchConfig) -> SearchState:
    """Run GP-EI over the box [lower, upper]^dim for ``cfg.budget`` evaluations."""
    if cfg.budget < cfg.initial:
        raise ValueError(f"budget {cfg.budget} smaller than the initial design ({cfg.initial})")
    rng = np.random.default_rng(cfg.seed)
    state = SearchState(noise=cfg.noise)
    span = cfg.upper - cfg.lower
    for p in initial_design(dim, cfg, rng):
        state.record(objective(p))
    gp = GaussianProcess(noise=cfg.noise)
    while len(state.evaluations) < cfg.budget:
        x = np.array([e.p for e in state.evaluations])
        y = np.array([e.objective for e in state.evaluations])
        n_local = int(cfg.pool_size * cfg.local_share)
        pool = cfg.lower + span * rng.random((cfg.pool_size - n_local, dim))
        local = state.best.p + 0.05 * span * rng.standard_normal((n_local, dim))
        pool = np.vstack([pool, np.clip(local, cfg.lower, cfg.upper)])
        try:
            gp.fit((x - cfg.lower) / span, y)
            mu, sd = gp.predict((pool - cfg.lower) / span)
            ei = expected_improvement(mu, sd, y.min())
            pick = pool[int(np.argmax(ei))]
            state.lengthscale, state.signal_variance = gp.lengthscale, gp.variance
        except np.linalg.LinAlgError:
            log.warning("GP fit failed at evaluation %d; falling back to a random candidate", len(y) + 1)
            state.fallbacks += 1
            pick = pool[rng.integers(len(pool))]
        state.record(objective(pick))
    return state


# ---------------------------------------------------------------- rank-plan objective


def compression_rate(plan: RankPlan, net: Network) -> float:
    """C(p) = D(p) / D_ori from the factorization accounting."""
    return compression_report(net, plan).compression_rate


def evaluate_objective(p, template: Network, data: Dataset, cfg: SearchConfig) -> Evaluation:
    """Proxy-train a copy of ``template`` under ratios ``p`` and score it.

    The error is top-1 error on ``data.test`` (pass a validation split there).
    """
    p = np.clip(np.asarray(p, dtype=np.float64), cfg.lower, cfg.upper)
    net = template.clone()
    plan = RankPlan.from_vector(net, p, cfg.min_rank, cfg.keep_dense)
    c = compression_rate(plan, net)
    try:
        net, metrics = train_lrpet(net, data, cfg.proxy_config(), plan)
        err = 1.0 - (metrics.final_accuracy if metrics.rows else net.accuracy(data.test.images, data.test.labels))
    except DivergenceError as exc:
        log.warning("proxy training diverged for p=%s: %s", np.round(p, 3).tolist(), exc)
        err = 1.0
    return Evaluation(p, float(err), float(c), float(err + cfg.lam * c))


def search_rank_plan(template: Network, data: Dataset, cfg: SearchConfig):
    """Bayesian search over per-layer ratios; returns (best plan, state)."""
    dim = len(set(template.compressible()) - set(cfg.keep_dense))
    state = bo_search(lambda p: evaluate_objective(p, template, data, cfg), dim, cfg)
    plan = RankPlan.from_vector(template, state.best.p, cfg.min_rank, cfg.keep_dense)
    return plan, state


def quadratic_bowl(optimum, lam=0.0):
    """Analytic test objective |p - optimum|^2 (no training involved)."""
    optimum = np.asarray(optimum, dtype=np.float64)

    def objective(p):
        e = float(np.sum((np.asarray(p) - optimum) ** 2))
        return Evaluation(np.asarray(p, dtype=np.float64), e, 0.0, e)

    return objective
