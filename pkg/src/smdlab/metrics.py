"""Local/global denoising-error estimators and toy-experiment quality metrics.

The infimum over parameters in M_t and E is not computed: estimates are
taken at whatever parameters the model carries, so for a trained network they
upper-bound the true quantities.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .denoiser import SmdDenoiser, VanillaDenoiser, mean_from_eps, predict_eps_smd, predict_eps_vanilla
from .forward import NoiseSchedule, PosteriorParams, marginal_q_xt, posterior_params, posterior_true
from .gmm import LOG_2PI, Estimate, GaussianMixture, mixture_log_pdf, mixture_sample

# Backward kernels: objects describing p(x_{t-1} | x_t) for a batch of x_t.
# ``log_prob(y, x, t)`` takes y (n, M, D) and x (n, D) and returns (n, M).
# Kernels that are a single Gaussian also expose ``gaussian(x, t)`` returning
# (means (n, D), variance) which enables the analytic cross-entropy path.


class DenoiserKernel:
    """Vanilla network: N(mu_theta(x_t, t), v I) with v from the schedule."""

    def __init__(self, model: VanillaDenoiser, s: NoiseSchedule, noise_mode: str = "sqrt"):
        self.model, self.s, self.noise_mode = model, s, noise_mode

    def gaussian(self, x, t):
        eps = predict_eps_vanilla(self.model, x, self.s.model_t[t - 1])
        if not np.all(np.isfinite(eps)):
            raise FloatingPointError("model produced non-finite outputs")
        return mean_from_eps(x, t, eps, self.s), float(self.s.backward_var(t, self.noise_mode))

    def log_prob(self, y, x, t):
        mean, var = self.gaussian(x, t)
        return _iso_log_pdf(y, mean[:, None, :], var)


class SmdKernel:
    """SMD network: log p estimated by log-mean-exp over ``n_eta`` latent draws per x_t."""

    def __init__(self, model: SmdDenoiser, s: NoiseSchedule, n_eta: int, rng, noise_mode: str = "sqrt"):
        self.model, self.s, self.n_eta, self.rng, self.noise_mode = model, s, n_eta, rng, noise_mode

    def component_means(self, x, t):
        n, j = x.shape[0], self.n_eta
        eta = self.rng.standard_normal((n * j, self.model.latent_dim))
        xr = np.repeat(x, j, axis=0)
        eps = predict_eps_smd(self.model, xr, self.s.model_t[t - 1], eta)
        if not np.all(np.isfinite(eps)):
            raise FloatingPointError("model produced non-finite outputs")
        return mean_from_eps(xr, t, eps, self.s).reshape(n, j, -1)

    def log_prob(self, y, x, t):
        means = self.component_means(x, t)
        var = float(self.s.backward_var(t, self.noise_mode))
        d = y.shape[-1]
        j = means.shape[1]
        prec = np.broadcast_to(np.eye(d) / np.sqrt(var), (j, d, d))
        coef = np.full(j, -np.log(j) - 0.5 * d * (LOG_2PI + np.log(var)))
        return np.stack([kernels.mixture_logpdf(y[i], means[i], prec, coef) for i in range(x.shape[0])])


class ExactPosteriorKernel:
    """The true posterior itself, evaluated through per-point mixture objects."""

    def __init__(self, data: GaussianMixture, s: NoiseSchedule):
        self.data, self.s = data, s

    def log_prob(self, y, x, t):
        return np.stack([mixture_log_pdf(y[i], posterior_true(self.data, x[i], t, self.s).mixture) for i in range(x.shape[0])])


class PosteriorMeanKernel:
    """Best fixed-variance Gaussian: posterior mean, schedule variance."""

    def __init__(self, data: GaussianMixture, s: NoiseSchedule, noise_mode: str = "sqrt"):
        self.data, self.s, self.noise_mode = data, s, noise_mode

    def gaussian(self, x, t):
        pp = posterior_params(self.data, x, t, self.s)
        return np.einsum("nk,nkd->nd", pp.weights, pp.means), float(self.s.backward_var(t, self.noise_mode))

    def log_prob(self, y, x, t):
        mean, var = self.gaussian(x, t)
        return _iso_log_pdf(y, mean[:, None, :], var)


def _iso_log_pdf(y, mean, var):
    d = y.shape[-1]
    r = y - mean
    return -0.5 * (d * (LOG_2PI + np.log(var)) + np.sum(r * r, axis=-1) / var)


def as_kernel(model, s: NoiseSchedule, n_inner: int, rng, noise_mode: str = "sqrt"):
    if isinstance(model, SmdDenoiser):
        return SmdKernel(model, s, n_inner, rng, noise_mode)
    if isinstance(model, VanillaDenoiser):
        return DenoiserKernel(model, s, noise_mode)
    if hasattr(model, "log_prob"):
        return model
    raise TypeError(f"cannot build a backward kernel from {type(model).__name__}")


def _sample_posteriors(pp: PosteriorParams, rng, m: int) -> np.ndarray:
    """m draws from each row's posterior mixture -> (n, m, D)."""
    n, k, d = pp.means.shape
    u = rng.random((n, m))
    cum = np.cumsum(pp.weights, axis=1)
    cum[:, -1] = 1.0
    labels = (u[:, :, None] > cum[:, None, :]).sum(axis=2)
    chols = np.linalg.cholesky(pp.covs)
    z = rng.standard_normal((n, m, d))
    rows = np.arange(n)[:, None]
    return pp.means[rows, labels] + np.einsum("nmij,nmj->nmi", chols[labels], z)


def _posterior_log_prob(pp: PosteriorParams, y) -> np.ndarray:
    n, k, d = pp.means.shape
    chols = np.linalg.cholesky(pp.covs)
    prec = np.linalg.inv(chols)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(pp.weights)
    base = -0.5 * (d * LOG_2PI + logdet)
    return np.stack([kernels.mixture_logpdf(y[i], pp.means[i], prec, logw[i] + base) for i in range(n)])


def _analytic_cross_entropy(pp: PosteriorParams, mean, var) -> np.ndarray:
    """Per-row sum_k w'_k [KL(N(mu'_k, S'_k) || N(mean, v I)) + H(N(mu'_k, S'_k))]."""
    d = mean.shape[1]
    tr = np.trace(pp.covs, axis1=1, axis2=2)
    sq = np.sum((pp.means - mean[:, None, :]) ** 2, axis=2)
    # KL + H collapses to the Gaussian cross-entropy; the log-det terms cancel
    ce = 0.5 * (d * (LOG_2PI + np.log(var)) + (sq + tr[None, :]) / var)
    return np.sum(pp.weights * ce, axis=1)


def local_error_mt(
    data: GaussianMixture,
    model,
    t: int,
    s: NoiseSchedule,
    n_outer: int,
    n_inner: int,
    rng,
    noise_mode: str = "sqrt",
) -> Estimate:
    """MC estimate of E_{x_t ~ q(x_t)} KL(q(x_{t-1}|x_t) || p(x_{t-1}|x_t)).

    Gaussian backward kernels use the analytic cross-entropy minus an MC
    posterior entropy; other kernels (SMD, stubs) use a plain MC log-ratio.
    """
    kernel = as_kernel(model, s, n_inner, rng, noise_mode)
    xs = mixture_sample(marginal_q_xt(data, t, s), rng, n_outer)
    pp = posterior_params(data, xs, t, s)
    y = _sample_posteriors(pp, rng, n_inner)
    log_q = _posterior_log_prob(pp, y)
    if hasattr(kernel, "gaussian"):
        mean, var = kernel.gaussian(xs, t)
        kl = _analytic_cross_entropy(pp, mean, var) + log_q.mean(axis=1)
    else:
        log_p = kernel.log_prob(y, xs, t)
        if not np.all(np.isfinite(log_p)):
            raise FloatingPointError("backward kernel returned non-finite log densities")
        kl = (log_q - log_p).mean(axis=1)
    se = float(kl.std(ddof=1) / np.sqrt(n_outer)) if n_outer > 1 else float("nan")
    return Estimate(float(kl.mean()), se)


def local_error_table(data, model, s, n_outer, n_inner, rng, steps=None, noise_mode="sqrt") -> list[tuple[int, Estimate]]:
    steps = range(1, s.T + 1) if steps is None else steps
    return [(int(t), local_error_mt(data, model, int(t), s, n_outer, n_inner, rng, noise_mode)) for t in steps]


def pooled(table: list[tuple[int, Estimate]]) -> Estimate:
    return Estimate(float(sum(e.value for _, e in table)), float(np.sqrt(sum(e.se**2 for _, e in table))))


def global_error_e(data, model, s, n_outer, n_inner, rng, noise_mode="sqrt") -> Estimate:
    """Sum over t of M_t estimates with pooled SE (assumes q(x_T) = p(x_T))."""
    return pooled(local_error_table(data, model, s, n_outer, n_inner, rng, None, noise_mode))


@dataclass
class Theorem1Config:
    lambda_values: list[float]
    delta: list[float]
    base_means: list[list[float]]
    weights: list[float]
    t: int = 1

    def denominators(self, s: NoiseSchedule) -> np.ndarray:
        return 1.0 + (np.asarray(self.delta, dtype=np.float64) - 1.0) * s.alpha_bar[self.t - 1]

    def check(self, s: NoiseSchedule) -> None:
        s.check_step(self.t)
        mu = np.atleast_2d(np.asarray(self.base_means, dtype=np.float64))
        w = np.asarray(self.weights, dtype=np.float64)
        if mu.shape[0] != w.size or len(self.delta) != w.size:
            raise ValueError("weights, delta and base_means must have one entry per component")
        if np.any(np.asarray(self.lambda_values) < 0):
            raise ValueError("lambda values must be non-negative")
        resid = (w / self.denominators(s)) @ mu
        if np.max(np.abs(resid)) > 1e-10:
            raise ValueError(f"zero-sum mean constraint violated: {resid}")

    def mixture(self, lam: float) -> GaussianMixture:
        mu = np.atleast_2d(np.asarray(self.base_means, dtype=np.float64))
        d = mu.shape[1]
        covs = np.asarray(self.delta, dtype=np.float64)[:, None, None] * np.eye(d)
        return GaussianMixture.from_arrays(self.weights, lam * mu, covs)


def theorem1_lower_bound(cfg: Theorem1Config, s: NoiseSchedule) -> np.ndarray:
    """The closed-form lower bound on M_t at means lam * mu_k, one value per lambda."""
    cfg.check(s)
    t = cfg.t
    a = s.alpha[t - 1]
    ab_prev = float(s.alpha_bar_prev(t))
    sig = s.sigma[t - 1]
    mu = np.atleast_2d(np.asarray(cfg.base_means, dtype=np.float64))
    w = np.asarray(cfg.weights, dtype=np.float64)
    d = mu.shape[1]
    spread = float(np.sum(w * np.sum((mu / cfg.denominators(s)[:, None]) ** 2, axis=1)))
    lead = (1.0 - a) ** 2 * ab_prev / (2.0 * sig) * spread
    const = -np.log(w.size) + 0.5 * d * (np.log(sig * a / (1.0 - a)) + (1.0 - a) / sig - 1.0)
    lam = np.asarray(cfg.lambda_values, dtype=np.float64)
    return lead * lam**2 + const


def theorem1_table(cfg: Theorem1Config, s: NoiseSchedule, n_outer: int, n_inner: int, rng):
    """Rows (lambda, bound, mc M_t of the posterior-mean Gaussian, se)."""
    bounds = theorem1_lower_bound(cfg, s)
    rows = []
    for lam, b in zip(cfg.lambda_values, bounds):
        data = cfg.mixture(lam)
        est = local_error_mt(data, PosteriorMeanKernel(data, s), cfg.t, s, n_outer, n_inner, rng)
        rows.append((float(lam), float(b), est.value, est.se))
    return rows


def mode_metrics(samples, truth: GaussianMixture, min_samples: int = 1000) -> tuple[float, float]:
    """(mode_recall, mean_nll).

    Samples go to the nearest component mean (ties to the lowest index). A
    mode is covered when it gets >= 0.25 n/K samples whose mean distance to
    its centre is below 3 sqrt(largest eigenvalue of its covariance).
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = x.shape[0]
    if n == 0:
        raise ValueError("no samples")
    if n < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {n}")
    means = truth.means
    k = means.shape[0]
    d2 = np.sum((x[:, None, :] - means[None]) ** 2, axis=2)
    label = np.argmin(d2, axis=1)
    dist = np.sqrt(d2[np.arange(n), label])
    counts = np.bincount(label, minlength=k)
    sums = np.bincount(label, weights=dist, minlength=k)
    radius = 3.0 * np.sqrt([np.linalg.eigvalsh(c.cov).max() for c in truth.components])
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_dist = sums / counts
    covered = (counts >= 0.25 * n / k) & (mean_dist < radius)
    nll = -float(np.mean(mixture_log_pdf(x, truth)))
    return float(covered.sum()) / k, nll


@dataclass
class MetricReport:
    m_t: list[dict] = field(default_factory=list)
    e_global: dict = field(default_factory=dict)
    mode_recall: float | None = None
    mean_nll: float | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def build(cls, table, recall=None, nll=None, metadata=None) -> "MetricReport":
        e = pooled(table) if table else None
        return cls(
            [{"t": t, "m_t": est.value, "se": est.se} for t, est in table],
            {"value": e.value, "se": e.se} if e else {},
            recall,
            nll,
            metadata or {},
        )

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    def write_mt_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["t", "m_t", "se"])
            for row in self.m_t:
                w.writerow([row["t"], repr(row["m_t"]), repr(row["se"])])
