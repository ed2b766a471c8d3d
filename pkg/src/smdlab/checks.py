"""Self-checks run by ``smdlab gmm-check``.

Each check compares a library routine against a direct oracle (pointwise
multiplication, trapezoid-grid integration, or Bayes' rule on a grid) and
reports its worst error next to a tolerance. Tolerances can be overridden
through ``SMD_GMM_CHECK_TOL``: either one number applied to every check or a
comma-separated list of ``name=value`` pairs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .forward import make_schedule, marginal_q_xt, posterior_true
from .gmm import (
    Gaussian,
    GaussianMixture,
    cross_entropy_mixture_gaussian,
    gaussian_log_pdf,
    gaussian_product,
    gaussian_rescale,
    kl_gaussian_gaussian,
    mixture_entropy_mc,
    mixture_entropy_upper_bound,
    mixture_log_pdf,
)

TOL_ENV = "SMD_GMM_CHECK_TOL"


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error)) and self.max_error <= self.tolerance


def random_spd(rng: np.random.Generator, d: int, lo: float = 0.2, hi: float = 2.0) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * rng.uniform(lo, hi, d)) @ q.T


def random_gaussian(rng: np.random.Generator, d: int) -> Gaussian:
    return Gaussian(rng.uniform(-1.0, 1.0, d), random_spd(rng, d))


def trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.trapezoid(y, x))


def _product_identity(rng) -> float:
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 4))
        g1, g2 = random_gaussian(rng, d), random_gaussian(rng, d)
        prod = gaussian_product(g1, g2)
        x = rng.uniform(-2.0, 2.0, (20, d))
        direct = gaussian_log_pdf(x, g1) + gaussian_log_pdf(x, g2)
        worst = max(worst, float(np.max(np.abs(np.expm1(prod.log_eval(x) - direct)))))
    return worst


def _rescale_identity(rng) -> float:
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 4))
        g = random_gaussian(rng, d)
        lam = float(rng.uniform(0.3, 3.0))
        x = rng.uniform(-2.0, 2.0, (20, d))
        lhs = gaussian_log_pdf(x, Gaussian(lam * g.mean, g.cov))
        rhs = gaussian_rescale(lam, g).log_eval(x / lam)
        worst = max(worst, float(np.max(np.abs(np.expm1(rhs - lhs)))))
    return worst


def _grid_1d(center: float, scale: float, half_width: float = 8.0, step: float = 0.01):
    u = np.arange(-half_width, half_width + step / 2, step)
    return center + scale * u


def _kl_grid(rng) -> float:
    worst = 0.0
    for _ in range(20):
        p, q = random_gaussian(rng, 1), random_gaussian(rng, 1)
        x = _grid_1d(float(p.mean[0]), float(np.sqrt(p.cov[0, 0])))
        lp, lq = gaussian_log_pdf(x[:, None], p), gaussian_log_pdf(x[:, None], q)
        worst = max(worst, abs(trapezoid(np.exp(lp) * (lp - lq), x) - kl_gaussian_gaussian(p, q)))
    return worst


def _kl_nonneg(rng) -> float:
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 4))
        worst = max(worst, -kl_gaussian_gaussian(random_gaussian(rng, d), random_gaussian(rng, d)))
    return worst


def _ce_grid(rng) -> float:
    worst = 0.0
    for _ in range(20):
        m = GaussianMixture.from_arrays([0.3, 0.7], rng.uniform(-2, 2, (2, 1)), rng.uniform(0.2, 1.0, (2, 1, 1)))
        g = random_gaussian(rng, 1)
        x = np.arange(-12.0, 12.0, 0.005)
        dens = np.exp(mixture_log_pdf(x[:, None], m))
        oracle = -trapezoid(dens * gaussian_log_pdf(x[:, None], g), x)
        worst = max(worst, abs(oracle - cross_entropy_mixture_gaussian(m, g)))
    return worst


def _entropy_sandwich(rng) -> float:
    """Largest excess of the MC entropy over the upper bound plus 3 SE (0 when the sandwich holds)."""
    worst = 0.0
    for _ in range(50):
        k, d = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        m = GaussianMixture.from_arrays(rng.dirichlet(np.ones(k)), rng.uniform(-3, 3, (k, d)), [random_spd(rng, d) for _ in range(k)])
        est = mixture_entropy_mc(m, rng, 4000)
        worst = max(worst, est.value - (mixture_entropy_upper_bound(m) + 3.0 * est.se))
    return worst


def random_1d_mixture(rng, k: int | None = None) -> GaussianMixture:
    k = int(rng.integers(1, 4)) if k is None else k
    return GaussianMixture.from_arrays(rng.dirichlet(np.ones(k)), rng.uniform(-3, 3, (k, 1)), rng.uniform(0.05, 1.5, (k, 1, 1)))


def grid_bayes_tv(data: GaussianMixture, x_t: float, t: int, s) -> float:
    """TV distance between posterior_true and Bayes' rule evaluated on a fine 1D grid."""
    a = s.alpha[t - 1]
    prev = data if t == 1 else marginal_q_xt(data, t - 1, s)
    post = posterior_true(data, np.array([x_t]), t, s)
    centre = float(np.sum(post.mixture.weights * post.mixture.means[:, 0]))
    spread = float(np.sqrt(np.max(post.mixture.covs[:, 0, 0]))) + float(np.ptp(post.mixture.means[:, 0]))
    y = np.linspace(centre - 8.0 * spread, centre + 8.0 * spread, 40001)
    log_prior = mixture_log_pdf(y[:, None], prev)
    log_lik = -0.5 * (x_t - np.sqrt(a) * y) ** 2 / (1.0 - a)
    lp = log_prior + log_lik
    oracle = np.exp(lp - lp.max())
    oracle /= trapezoid(oracle, y)
    ours = np.exp(mixture_log_pdf(y[:, None], post.mixture))
    return 0.5 * trapezoid(np.abs(oracle - ours), y)


def _posterior_grid(rng) -> float:
    s = make_schedule(100, 1e-3, 0.2, "beta")
    worst = 0.0
    for _ in range(30):
        data = random_1d_mixture(rng)
        t = int(rng.integers(1, 101))
        x_t = float(rng.uniform(-3, 3))
        worst = max(worst, grid_bayes_tv(data, x_t, t, s))
    return worst


def _posterior_weight_sum(rng) -> float:
    s = make_schedule(100, 1e-3, 0.2, "beta")
    worst = 0.0
    for _ in range(500):
        d = int(rng.integers(1, 4))
        k = int(rng.integers(1, 5))
        data = GaussianMixture.from_arrays(rng.dirichlet(np.ones(k)), rng.uniform(-3, 3, (k, d)), [random_spd(rng, d) for _ in range(k)])
        post = posterior_true(data, rng.uniform(-3, 3, d), int(rng.integers(1, 101)), s)
        worst = max(worst, abs(float(np.sum(post.mixture.weights)) - 1.0))
    return worst


def _posterior_delta_one(rng) -> float:
    s = make_schedule(100, 1e-3, 0.2, "beta")
    worst = 0.0
    for t in range(1, 101):
        d = int(rng.integers(1, 4))
        data = GaussianMixture.from_arrays([1.0], rng.uniform(-3, 3, (1, d)), [np.eye(d)])
        post = posterior_true(data, rng.uniform(-3, 3, d), t, s)
        worst = max(worst, float(np.max(np.abs(post.mixture.covs[0] - s.beta[t - 1] * np.eye(d)))))
    return worst


def _schedule_identities(rng) -> float:
    worst = 0.0
    for mode in ("beta", "beta_tilde"):
        for T, lo, hi in ((1, 0.1, 0.1), (100, 1e-3, 0.2), (1000, 1e-4, 0.02)):
            s = make_schedule(T, lo, hi, mode)
            worst = max(worst, float(np.max(s.beta_tilde - s.beta)), float(-np.min(s.gamma)))
            if not np.all(np.isfinite(s.gamma)):
                return float("inf")
    return max(worst, 0.0)


def _marginal_consistency(rng) -> float:
    s = make_schedule(100, 1e-3, 0.2, "beta")
    worst = 0.0
    for _ in range(3):
        data = random_1d_mixture(rng)
        t = int(rng.integers(2, 101))
        xs = np.linspace(-10.0, 10.0, 801)
        q_t = np.exp(mixture_log_pdf(xs[:, None], marginal_q_xt(data, t, s)))
        ys = np.linspace(-10.0, 10.0, 801)
        acc = np.zeros_like(ys)
        for x, w in zip(xs, q_t):
            acc += w * np.exp(mixture_log_pdf(ys[:, None], posterior_true(data, np.array([x]), t, s).mixture))
        acc *= xs[1] - xs[0]
        target = np.exp(mixture_log_pdf(ys[:, None], marginal_q_xt(data, t - 1, s)))
        worst = max(worst, 0.5 * trapezoid(np.abs(acc - target), ys))
    return worst


CHECKS: dict[str, tuple[Callable[[np.random.Generator], float], float]] = {
    "product_identity": (_product_identity, 1e-9),
    "rescale_identity": (_rescale_identity, 1e-10),
    "kl_grid": (_kl_grid, 1e-4),
    "kl_nonnegative": (_kl_nonneg, 1e-12),
    "cross_entropy_grid": (_ce_grid, 1e-4),
    "entropy_sandwich": (_entropy_sandwich, 0.0),
    "posterior_grid_tv": (_posterior_grid, 1e-3),
    "posterior_weight_sum": (_posterior_weight_sum, 1e-8),
    "posterior_delta_one_cov": (_posterior_delta_one, 1e-12),
    "schedule_identities": (_schedule_identities, 0.0),
    "marginal_consistency_tv": (_marginal_consistency, 1e-2),
}


def tolerance_overrides(text: str | None) -> dict[str, float]:
    if not text:
        return {}
    text = text.strip()
    try:
        value = float(text)
    except ValueError:
        pass
    else:
        return {name: value for name in CHECKS}
    out = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        name = name.strip()
        if name not in CHECKS:
            raise ValueError(f"{TOL_ENV}: unknown check {name!r}")
        out[name] = float(value)
    return out


def run_checks(seed: int = 0, overrides: dict[str, float] | None = None, only=None) -> list[CheckResult]:
    if overrides is None:
        overrides = tolerance_overrides(os.environ.get(TOL_ENV))
    results = []
    for i, (name, (fn, tol)) in enumerate(CHECKS.items()):
        if only is not None and name not in only:
            continue
        err = float(fn(np.random.default_rng([seed, i])))
        results.append(CheckResult(name, err, overrides.get(name, tol)))
    return results
