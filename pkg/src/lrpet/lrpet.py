"""Low-rank projection with energy transfer, BN rectification, and the
projected-SGD training schedule built on them."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, augment_pad_crop_flip, iterate_batches
from .nn import Network, bn_param_names, cross_entropy_loss, sgd_step
from .tensor import DomainError, ParameterError, as_matrix, frobenius_norm, svd

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5


class DegenerateSpectrumError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, epoch, iteration):
        super().__init__(f"loss became non-finite in epoch {epoch} (iteration {iteration})")
        self.epoch = epoch
        self.iteration = iteration


class PlanError(ValueError):
    pass


# ---------------------------------------------------------------- rank plans


def ratio_to_rank(p: float, m: int, n: int, min_rank: int = 1) -> int:
    full = min(m, n)
    # round half up so uniform ratios give the same rank on equal-sized layers
    r = int(math.floor((1.0 - p) * full + 0.5))
    return min(full, max(1, min_rank, r))


@dataclass
class RankPlan:
    """Pruning ratio per compressible layer (keyed by layer index).

    Layers listed in ``keep_dense`` are left alone: never projected and
    never factorized.
    """

    ratios: dict[int, float]
    min_rank: dict[int, int] = field(default_factory=dict)
    keep_dense: set[int] = field(default_factory=set)

    @classmethod
    def uniform(cls, net: Network, p: float, min_rank=None, keep_dense=()) -> "RankPlan":
        keep = {int(i) for i in keep_dense}
        return cls({i: float(p) for i in net.compressible() if i not in keep}, dict(min_rank or {}), keep)

    @classmethod
    def from_vector(cls, net: Network, p, min_rank=None, keep_dense=()) -> "RankPlan":
        keep = {int(i) for i in keep_dense}
        idx = [i for i in net.compressible() if i not in keep]
        p = np.asarray(p, dtype=np.float64).ravel()
        if len(p) != len(idx):
            raise PlanError(f"{len(p)} ratios for {len(idx)} planned layers")
        return cls({i: float(v) for i, v in zip(idx, p)}, dict(min_rank or {}), keep)

    def vector(self) -> np.ndarray:
        return np.array([self.ratios[i] for i in sorted(self.ratios)])

    def validate(self, net: Network):
        idx = set(net.compressible())
        covered = set(self.ratios) | set(self.keep_dense)
        if covered != idx or set(self.ratios) & set(self.keep_dense):
            raise PlanError(
                f"plan covers layers {sorted(self.ratios)} (dense: {sorted(self.keep_dense)}), "
                f"network has compressible layers {sorted(idx)}"
            )
        for i, p in self.ratios.items():
            if not 0.0 <= p <= 1.0:
                raise PlanError(f"layer {i}: pruning ratio {p} outside [0, 1]")
        for i, r in self.min_rank.items():
            if i not in self.ratios:
                if i in idx:
                    continue
                raise PlanError(f"min-rank floor for non-compressible layer {i}")
            m, n = net.weight_matrix(i).shape
            if not 1 <= r <= min(m, n):
                raise PlanError(f"layer {i}: min rank {r} outside [1, {min(m, n)}]")

    def ranks(self, net: Network) -> dict[int, int]:
        self.validate(net)
        out = {}
        for i, p in self.ratios.items():
            m, n = net.weight_matrix(i).shape
            out[i] = ratio_to_rank(p, m, n, self.min_rank.get(i, 1))
        return out

    def to_dict(self) -> dict:
        return {
            "ratios": {str(k): v for k, v in sorted(self.ratios.items())},
            "min_rank": {str(k): v for k, v in sorted(self.min_rank.items())},
            "keep_dense": sorted(self.keep_dense),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankPlan":
        return cls(
            {int(k): float(v) for k, v in d["ratios"].items()},
            {int(k): int(v) for k, v in (d.get("min_rank") or {}).items()},
            {int(i) for i in d.get("keep_dense") or ()},
        )


# ---------------------------------------------------------------- projection


@dataclass(frozen=True)
class EnergyTransferResult:
    alpha: float
    matrix: np.ndarray
    retained: float  # |s_{1:r}|^2 / |s|^2


def energy_transfer_coeff(s, r: int) -> float:
    """alpha = |s| / |s_{1:r}| for descending singular values ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if not 1 <= r <= len(s):
        raise ParameterError(f"rank {r} outside [1, {len(s)}]")
    head = frobenius_norm(s[:r])
    if head == 0.0:
        raise DegenerateSpectrumError("leading singular values are all zero")
    return frobenius_norm(s) / head


def project_with_energy_transfer(w, r: int, alpha: float | None = None, transfer: bool = True):
    """Project onto rank ``r`` and rescale the kept singular values.

    By default the scale is the adaptive coefficient that preserves the
    Frobenius norm; ``alpha`` pins a fixed value and ``transfer=False``
    disables rescaling (plain truncation).
    """
    w = as_matrix(w)
    k = min(w.shape)
    if not 1 <= r <= k:
        raise ParameterError(f"rank {r} outside [1, {k}]")
    f = svd(w)
    total = frobenius_norm(f.s)
    head = frobenius_norm(f.s[:r])
    if head == 0.0:
        if total > 0.0:
            log.warning("degenerate spectrum: top-%d singular values vanish; layer left unchanged", r)
        return EnergyTransferResult(1.0, w.copy(), 1.0 if total == 0.0 else 0.0)
    if alpha is not None:
        coef = float(alpha)
    elif transfer:
        coef = total / head
    else:
        coef = 1.0
    mat = (f.u[:, :r] * (coef * f.s[:r])) @ f.v[:, :r].T
    return EnergyTransferResult(coef, mat, (head / total) ** 2)


def _check_bn(w, gamma, sigma):
    gamma = np.asarray(gamma, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if gamma.shape != (w.shape[0],) or sigma.shape != (w.shape[0],):
        raise ParameterError(f"BN vectors must have length {w.shape[0]}")
    if np.any(sigma <= 0):
        raise DomainError("BN standard deviations must be positive")
    return gamma, sigma


def bn_fold(w, gamma, sigma) -> np.ndarray:
    """Row-scale ``w`` by gamma/sigma (the BN affine map merged into the weight)."""
    w = as_matrix(w)
    gamma, sigma = _check_bn(w, gamma, sigma)
    return (gamma / sigma)[:, None] * w


def bn_unfold(w_folded, gamma, sigma, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Ridge-regularized inverse of ``bn_fold``: row i scaled by d_i / (d_i^2 + eps)."""
    w_folded = as_matrix(w_folded)
    if eps <= 0:
        raise ParameterError("eps must be positive")
    gamma, sigma = _check_bn(w_folded, gamma, sigma)
    d = gamma / sigma
    return (d / (d * d + eps))[:, None] * w_folded


def _layer_step(w, gamma, sigma, r, eps, alpha, transfer):
    if gamma is None:
        res = project_with_energy_transfer(w, r, alpha, transfer)
        return res.matrix, res
    res = project_with_energy_transfer(bn_fold(w, gamma, sigma), r, alpha, transfer)
    return bn_unfold(res.matrix, gamma, sigma, eps), res


def lrpet_layer_step(w, gamma, sigma, r: int, eps: float = DEFAULT_EPS, alpha=None, transfer=True):
    """One layer's projection update. Pass ``gamma=sigma=None`` for layers
    without a trailing BN; they are projected directly with no fold/unfold."""
    if (gamma is None) != (sigma is None):
        raise ParameterError("gamma and sigma must be given together")
    return _layer_step(as_matrix(w), gamma, sigma, r, eps, alpha, transfer)[0]


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    # (epoch, divisor): from that epoch on the rate is divided by divisor;
    # None means divide by 10 at 50% and 75% of the run
    milestones: list | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    bn_weight_decay: bool = False
    projection_interval: int | str = "epoch"
    eps: float = DEFAULT_EPS
    seed: int = 0
    augment: bool = False
    augment_pad: int = 4
    energy_transfer: bool = True
    bn_rectify: bool = True
    fixed_alpha: float | None = None
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.eps <= 0:
            raise ParameterError("eps must be positive")
        if self.projection_interval != "epoch" and (
            not isinstance(self.projection_interval, int) or self.projection_interval < 1
        ):
            raise ParameterError("projection_interval must be 'epoch' or a positive integer")

    def schedule(self) -> list:
        if self.milestones is not None:
            return [(int(e), float(d)) for e, d in self.milestones]
        return [(int(round(self.epochs * 0.5)), 10.0), (int(round(self.epochs * 0.75)), 10.0)]

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e, d in self.schedule():
            if epoch >= e:
                lr /= d
        return lr


@dataclass
class MetricsLog:
    layers: list[int]
    rows: list[dict] = field(default_factory=list)
    seed: int = 0
    data_digest: str = ""

    @property
    def columns(self) -> list[str]:
        return (
            ["epoch", "iteration", "train_loss", "test_acc"]
            + [f"energy_L{i}" for i in self.layers]
            + ["epoch_seconds"]
        )

    def write_csv(self, path, timing=True):
        cols = self.columns if timing else self.columns[:-1]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(row.get(k)) for k in cols})

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1]["test_acc"] if self.rows else float("nan")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def bn_for_layer(net: Network, i: int):
    """(gamma, sigma) of the BN directly after layer ``i``, or (None, None)."""
    j = net.following_bn(i)
    if j is None:
        return None, None
    bn = net.layers[j]
    return net.params[f"{j}.weight"], bn.sigma(net.layer_buffers(j))


def project_network(net: Network, ranks: dict[int, int], cfg: TrainConfig) -> dict[int, EnergyTransferResult]:
    """Apply the projection update to every planned layer in place."""

    def job(i):
        gamma, sigma = bn_for_layer(net, i) if cfg.bn_rectify else (None, None)
        transfer = cfg.energy_transfer
        return i, _layer_step(net.weight_matrix(i), gamma, sigma, ranks[i], cfg.eps, cfg.fixed_alpha, transfer)

    layers = sorted(ranks)
    if cfg.threads > 1 and len(layers) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(job, layers))
    else:
        results = [job(i) for i in layers]
    out = {}
    for i, (mat, res) in results:
        net.set_weight_matrix(i, mat)
        out[i] = res
    return out


def train_lrpet(net: Network, data: Dataset, cfg: TrainConfig, plan: RankPlan | None = None):
    """Train ``net`` in place with SGD; with a plan, project every T iterations.

    Without a plan this is plain SGD. Returns the network and its metrics log.
    """
    if len(data.train) == 0:
        raise ParameterError("empty training split")
    ranks = plan.ranks(net) if plan is not None else {}
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng, aug_rng = (np.random.default_rng(s) for s in seeds)
    per_epoch = math.ceil(len(data.train) / cfg.batch_size)
    interval = per_epoch if cfg.projection_interval == "epoch" else cfg.projection_interval
    no_decay = set() if cfg.bn_weight_decay else bn_param_names(net)
    velocity: dict = {}
    metrics = MetricsLog(layers=sorted(ranks), seed=cfg.seed, data_digest="")
    it = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        net.train()
        start = time.perf_counter()
        loss_sum, seen = 0.0, 0
        energies = {}
        for xb, yb in iterate_batches(data.train, cfg.batch_size, shuffle_rng):
            if cfg.augment:
                xb = augment_pad_crop_flip(xb, aug_rng, pad=cfg.augment_pad)
            logits, tape = net.forward(xb)
            loss, dlogits = cross_entropy_loss(logits, yb)
            if not math.isfinite(loss) or not np.all(np.isfinite(logits)):
                raise DivergenceError(epoch, it)
            grads = net.backward(tape, dlogits)
            sgd_step(net.params, grads, velocity, lr, cfg.momentum, cfg.weight_decay, no_decay)
            net.mark_updated()
            it += 1
            loss_sum += loss * len(yb)
            seen += len(yb)
            if ranks and it % interval == 0:
                for i, res in project_network(net, ranks, cfg).items():
                    energies[i] = res.retained
        elapsed = time.perf_counter() - start
        row = {
            "epoch": epoch + 1,
            "iteration": it,
            "train_loss": loss_sum / seen,
            "test_acc": net.accuracy(data.test.images, data.test.labels),
            "epoch_seconds": elapsed,
        }
        for i in ranks:
            row[f"energy_L{i}"] = energies.get(i)
        metrics.rows.append(row)
        log.info("epoch %d loss %.4f acc %.4f (%.2fs)", epoch + 1, row["train_loss"], row["test_acc"], elapsed)
    return net, metrics


def truncation_errors(net: Network, ranks: dict[int, int]) -> dict[int, float]:
    """|W - P_r(W)|_F / |W|_F for each planned layer's raw weight matrix."""
    out = {}
    for i, r in ranks.items():
        w = net.weight_matrix(i)
        s = svd(w).s
        total = frobenius_norm(s)
        out[i] = frobenius_norm(s[r:]) / total if total > 0 else 0.0
    return out


# ---------------------------------------------------------------- gradient energy


@dataclass(frozen=True)
class GradientEnergyEstimate:
    mean_sq_norm: float
    mean_norm: float
    se_sq_norm: float
    se_norm: float


def monte_carlo_gradient_energy(w, sigma: float, n: int, seed=0, chunk=50_000) -> GradientEnergyEstimate:
    """Sample upstream gradients g ~ N(0, sigma^2 I) and average |W^T g|^2 and |W^T g|."""
    w = as_matrix(w)
    if n < 1:
        raise ParameterError("need at least one sample")
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    rng = np.random.default_rng(seed)
    sq = np.empty(n)
    for s in range(0, n, chunk):
        g = sigma * rng.standard_normal((min(chunk, n - s), w.shape[0]))
        back = g @ w
        sq[s : s + len(g)] = np.einsum("ij,ij->i", back, back)
    norms = np.sqrt(sq)
    denom = math.sqrt(n)
    se = lambda v: float(v.std(ddof=1) / denom) if n > 1 else 0.0  # noqa: E731
    return GradientEnergyEstimate(float(sq.mean()), float(norms.mean()), se(sq), se(norms))
