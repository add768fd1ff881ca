"""Seeded property suites behind ``lrpet verify``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracles
from .lrpet import bn_unfold, monte_carlo_gradient_energy, project_with_energy_transfer
from .nn import Network, cross_entropy_loss, desk_cnn
from .tensor import frobenius_norm, low_rank_project, svd


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (tol {self.tolerance:.1e})"


def eckart_young(count=200, candidates=50, seed=0) -> list[Check]:
    """Truncated SVD error vs the Gram-eigenvalue optimum and vs random rank-r candidates."""
    rng = np.random.default_rng(seed)
    worst_gap = 0.0
    worst_beaten = -np.inf  # max over cases of (projection error - best candidate error)
    worst_growth = -np.inf  # max of |P(W)| - |W|
    for _ in range(count):
        m, n = int(rng.integers(2, 33)), int(rng.integers(2, 25))
        w = rng.standard_normal((m, n))
        r = int(rng.integers(1, min(m, n)))
        proj = low_rank_project(w, r)
        err = frobenius_norm(proj - w)
        worst_gap = max(worst_gap, abs(err - oracles.best_rank_error(w, r)))
        for _ in range(candidates):
            b = rng.standard_normal((m, r)) @ rng.standard_normal((r, n))
            b *= frobenius_norm(w) / max(frobenius_norm(b), 1e-300) * rng.uniform(0.2, 1.2)
            worst_beaten = max(worst_beaten, err - frobenius_norm(b - w))
        worst_growth = max(worst_growth, frobenius_norm(proj) - frobenius_norm(w))
    checks = [Check(f"projection error vs Jacobi-eigensolver optimum ({count} matrices)", worst_gap, 1e-9)]
    if candidates:
        checks.append(Check("projection error minus best random rank-r candidate", worst_beaten, 1e-9))
    checks.append(Check("projected norm minus original norm", worst_growth, 1e-12))
    return checks


def energy_transfer(count=500, seed=1, extras=True) -> list[Check]:
    """Norm preservation; with ``extras`` also the rank bound and alpha monotonicity."""
    rng = np.random.default_rng(seed)
    worst_norm = 0.0
    worst_rank = 0.0
    worst_mono = -np.inf
    for _ in range(count):
        m, n = int(rng.integers(2, 25)), int(rng.integers(2, 17))
        w = rng.standard_normal((m, n)) * rng.uniform(0.01, 100)
        k = min(m, n)
        r = int(rng.integers(1, k + 1))
        res = project_with_energy_transfer(w, r)
        norm = frobenius_norm(w)
        worst_norm = max(worst_norm, abs(frobenius_norm(res.matrix) - norm) / norm)
        if not extras:
            continue
        if r < k:
            s = svd(res.matrix).s
            worst_rank = max(worst_rank, s[r] / s[0])
        if r > 1:
            smaller = project_with_energy_transfer(w, r - 1).alpha
            worst_mono = max(worst_mono, res.alpha - smaller)
    checks = [Check(f"relative norm change after energy transfer ({count} cases)", worst_norm, 1e-10)]
    if extras:
        checks += [
            Check("(r+1)-th singular value / largest after transfer", worst_rank, 1e-10),
            Check("alpha increase when rank grows", max(worst_mono, 0.0), 1e-12),
        ]
    return checks


def theorem1(count=10, sigmas=(0.5, 1.0), samples=100_000, seed=2) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst_rel = 0.0
    worst_norm_excess = -np.inf
    for k in range(count):
        w = rng.standard_normal((16, 16))
        fro2 = frobenius_norm(w) ** 2
        for sigma in sigmas:
            est = monte_carlo_gradient_energy(w, sigma, samples, seed=1000 * seed + 10 * k + int(sigma * 4))
            target = sigma**2 * fro2
            worst_rel = max(worst_rel, abs(est.mean_sq_norm - target) / target)
            bound = sigma * np.sqrt(fro2) + 3 * est.se_norm
            worst_norm_excess = max(worst_norm_excess, est.mean_norm - bound)
    return [
        Check(f"Monte-Carlo E|W^T g|^2 vs sigma^2 |W|_F^2, relative ({count} matrices)", worst_rel, 0.02),
        Check("E|W^T g| minus (sigma |W|_F + 3 s.e.)", worst_norm_excess, 0.0),
    ]


def bn_rectify(count=100, eps=1e-5, seed=3) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        m, n = int(rng.integers(1, 13)), int(rng.integers(1, 13))
        gamma = rng.uniform(0.5, 2.0, m) * rng.choice([-1.0, 1.0], m)
        near_zero = rng.random(m) < 0.3
        gamma[near_zero] = rng.choice([0.0, 1e-12, 1e-6, 1e-3, 3e-3], near_zero.sum())
        sigma = rng.uniform(0.2, 3.0, m)
        wt = rng.standard_normal((m, n))
        d = np.diag(gamma / sigma)
        dense = oracles.gaussian_solve(d.T @ d + eps * np.eye(m), d.T @ wt)
        worst = max(worst, float(np.max(np.abs(bn_unfold(wt, gamma, sigma, eps) - dense))))
    return [Check(f"ridge unfold vs dense Gaussian elimination ({count} cases)", worst, 1e-12)]


def finite_difference_grads(net: Network, x, y, h=1e-5) -> dict:
    grads = {}
    for name, p in net.params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = cross_entropy_loss(net.forward(x)[0], y)[0]
            p[idx] = old - h
            down = cross_entropy_loss(net.forward(x)[0], y)[0]
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def gradient_relative_error(analytic: dict, numeric: dict, floor=1e-7) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|), ignoring entries where both are below ``floor``."""
    worst = 0.0
    for k, a in analytic.items():
        nu = numeric[k]
        scale = np.maximum(np.abs(a), np.abs(nu))
        mask = scale > floor
        if mask.any():
            worst = max(worst, float(np.max(np.abs(a - nu)[mask] / scale[mask])))
    return worst


def gradcheck(seed=4) -> list[Check]:
    net = Network(desk_cnn((2, 8, 8), classes=3, widths=(3, 4)), (2, 8, 8), seed=seed)
    rng = np.random.default_rng(seed)
    for k, v in net.params.items():  # move BN/bias away from their trivial init
        net.params[k] = v + 0.1 * rng.standard_normal(v.shape)
    x = rng.standard_normal((5, 2, 8, 8))
    y = rng.integers(0, 3, 5)
    net.train()
    logits, tape = net.forward(x)
    _, dlogits = cross_entropy_loss(logits, y)
    analytic = net.backward(tape, dlogits)
    numeric = finite_difference_grads(net, x, y)
    return [Check("conv-BN-ReLU-pool-linear gradients vs central differences", gradient_relative_error(analytic, numeric), 1e-4)]


SUITES = {
    "eckart-young": eckart_young,
    "energy-transfer": energy_transfer,
    "theorem1": theorem1,
    "bn-rectify": bn_rectify,
    "gradcheck": gradcheck,
}


def run(name: str) -> list[Check]:
    if name == "all":
        return [c for suite in SUITES.values() for c in suite()]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join([*SUITES, 'all'])}")
    return SUITES[name]()
