"""Exact Gaussian and Gaussian-mixture algebra.

Everything works in the log domain. Covariances are full matrices with a
cached Cholesky factor; a failed factorization raises
:class:`NotPositiveDefiniteError` instead of being repaired.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from . import kernels

LOG_2PI = np.log(2.0 * np.pi)


class NotPositiveDefiniteError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class Estimate(NamedTuple):
    """A Monte-Carlo estimate with its standard error."""

    value: float
    se: float


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"covariance is not positive definite: {exc}") from None


class Gaussian:
    """Multivariate normal N(mean, cov) with a cached Cholesky factor."""

    __slots__ = ("mean", "cov", "chol", "_prec_chol", "_logdet")

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionMismatchError(f"mean {mean.shape} and cov {cov.shape} disagree")
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(mean)):
            raise ValueError("non-finite Gaussian parameters")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12:
            raise ValueError("covariance is not symmetric")
        self.mean = mean
        self.cov = cov
        self.chol = _cholesky(cov)
        self._prec_chol = None
        self._logdet = 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def logdet(self) -> float:
        return self._logdet

    @property
    def prec_chol(self) -> np.ndarray:
        """L^{-1}, so that |L^{-1}(x - mean)|^2 is the Mahalanobis distance."""
        if self._prec_chol is None:
            self._prec_chol = solve_triangular(self.chol, np.eye(self.dim), lower=True)
        return self._prec_chol

    @property
    def precision(self) -> np.ndarray:
        p = self.prec_chol
        return p.T @ p

    def entropy(self) -> float:
        return 0.5 * (self.dim * (1.0 + LOG_2PI) + self._logdet)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self.chol.T

    def __repr__(self) -> str:
        return f"Gaussian(mean={self.mean!r}, cov={self.cov!r})"


@dataclass(frozen=True)
class ScaledGaussian:
    """The function x -> exp(log_scale) * pdf(gaussian)(x)."""

    log_scale: float
    gaussian: Gaussian

    def __post_init__(self):
        if not np.isfinite(self.log_scale):
            raise ValueError("log_scale must be finite")

    def log_eval(self, x) -> np.ndarray | float:
        return self.log_scale + gaussian_log_pdf(x, self.gaussian)


@dataclass
class GaussianMixture:
    weights: np.ndarray
    components: list[Gaussian]
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.components = list(self.components)
        if len(self.components) == 0:
            raise ValueError("empty mixture")
        if self.weights.shape != (len(self.components),):
            raise DimensionMismatchError("one weight per component required")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValueError("weights must be positive and sum to 1")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise DimensionMismatchError(f"components of differing dimension {sorted(dims)}")

    @classmethod
    def from_arrays(cls, weights, means, covs) -> "GaussianMixture":
        means = np.asarray(means, dtype=np.float64)
        if means.ndim == 1:
            means = means[:, None]
        covs = np.asarray(covs, dtype=np.float64)
        if covs.ndim <= 1:
            covs = np.broadcast_to(covs, (means.shape[0],))
            covs = covs[:, None, None] * np.eye(means.shape[1])
        return cls(np.asarray(weights, dtype=np.float64), [Gaussian(m, c) for m, c in zip(means, covs)])

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def covs(self) -> np.ndarray:
        return np.stack([c.cov for c in self.components])

    def packed(self):
        """(means, prec_chol, log_coef) arrays for the batched density kernel."""
        if self._packed is None:
            prec = np.stack([c.prec_chol for c in self.components])
            log_coef = np.array(
                [np.log(w) - 0.5 * (c.dim * LOG_2PI + c.logdet) for w, c in zip(self.weights, self.components)]
            )
            self._packed = (self.means, prec, log_coef)
        return self._packed

    def log_pdf(self, x) -> np.ndarray | float:
        return mixture_log_pdf(x, self)


def _as_rows(x, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim <= 1
    rows = x.reshape(1, -1) if single else x
    if rows.shape[-1] != dim:
        raise DimensionMismatchError(f"point dimension {rows.shape[-1]} != {dim}")
    return rows, single


def gaussian_log_pdf(x, g: Gaussian):
    """log N(x; mean, cov). ``x`` may be one point or a (n, D) batch."""
    rows, single = _as_rows(x, g.dim)
    maha = (rows - g.mean) @ g.prec_chol.T
    out = -0.5 * (g.dim * LOG_2PI + g.logdet + np.sum(maha * maha, axis=1))
    return float(out[0]) if single else out


def gaussian_product(g1: Gaussian, g2: Gaussian) -> ScaledGaussian:
    """N(x; m1, S1) N(x; m2, S2) = N(m2; m1, S1 + S2) N(x; m, S), S = (S1^-1 + S2^-1)^-1."""
    if g1.dim != g2.dim:
        raise DimensionMismatchError("gaussian_product needs equal dimensions")
    log_scale = gaussian_log_pdf(g2.mean, Gaussian(g1.mean, g1.cov + g2.cov))
    p1, p2 = g1.precision, g2.precision
    cov = np.linalg.inv(p1 + p2)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (p1 @ g1.mean + p2 @ g2.mean)
    return ScaledGaussian(log_scale, Gaussian(mean, cov))


def gaussian_rescale(lam: float, g: Gaussian) -> ScaledGaussian:
    """Rewrite N(x; lam*mean, cov) as (1/lam)^D N(x/lam; mean, cov/lam^2).

    The returned ScaledGaussian is a function of ``x / lam``: evaluate it as
    ``sg.log_eval(x / lam)``.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if lam == 1.0:
        return ScaledGaussian(0.0, g)
    return ScaledGaussian(-g.dim * np.log(lam), Gaussian(g.mean, g.cov / lam**2))


def kl_gaussian_gaussian(p: Gaussian, q: Gaussian) -> float:
    if p.dim != q.dim:
        raise DimensionMismatchError("KL needs equal dimensions")
    pq = q.prec_chol
    diff = pq @ (p.mean - q.mean)
    trace = float(np.sum((pq @ p.chol) ** 2))
    return 0.5 * (q.logdet - p.logdet - p.dim + float(diff @ diff) + trace)


def mixture_log_pdf(x, m: GaussianMixture):
    """log sum_k w_k N(x; mu_k, S_k), stable in the far tails."""
    rows, single = _as_rows(x, m.dim)
    out = kernels.mixture_logpdf(rows, *m.packed())
    return float(out[0]) if single else out


def mixture_sample(m: GaussianMixture, rng: np.random.Generator, n: int, return_labels: bool = False):
    """Draw ``n`` points: categorical component choice, then a Cholesky-affine normal draw."""
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = rng.choice(m.n_components, size=n, p=m.weights)
    z = rng.standard_normal((n, m.dim))
    chols = np.stack([c.chol for c in m.components])
    x = m.means[labels] + np.einsum("nij,nj->ni", chols[labels], z)
    return (x, labels) if return_labels else x


def cross_entropy_mixture_gaussian(m: GaussianMixture, g: Gaussian) -> float:
    """-E_{x~m}[log g(x)] = sum_k w_k (KL(N_k || g) + H(N_k))."""
    if m.dim != g.dim:
        raise DimensionMismatchError("cross entropy needs equal dimensions")
    return float(sum(w * (kl_gaussian_gaussian(c, g) + c.entropy()) for w, c in zip(m.weights, m.components)))


def mixture_entropy_upper_bound(m: GaussianMixture) -> float:
    """Huber et al. upper bound sum_k w_k (-ln w_k + H(N_k)); exact for K = 1."""
    return float(sum(w * (-np.log(w) + c.entropy()) for w, c in zip(m.weights, m.components)))


def mixture_entropy_mc(m: GaussianMixture, rng: np.random.Generator, n: int) -> Estimate:
    x = mixture_sample(m, rng, n)
    nll = -mixture_log_pdf(x, m)
    return Estimate(float(nll.mean()), float(nll.std(ddof=1) / np.sqrt(n)))


def kl_mixture_target_mc(
    target: GaussianMixture,
    approx_log_pdf: Callable[[np.ndarray], np.ndarray],
    rng: np.random.Generator,
    n: int,
) -> Estimate:
    """Unbiased MC estimate of KL(target || approx) from ``n`` target draws.

    ``approx_log_pdf`` maps an (n, D) batch to n log densities.
    """
    if n < 100:
        raise ValueError("need at least 100 samples")
    x = mixture_sample(target, rng, n)
    lp = np.asarray(approx_log_pdf(x), dtype=np.float64).reshape(-1)
    if lp.shape != (n,) or not np.all(np.isfinite(lp)):
        bad = int(np.sum(~np.isfinite(lp))) if lp.shape == (n,) else -1
        raise FloatingPointError(f"approx_log_pdf returned non-finite or misshaped values ({bad} bad)")
    d = mixture_log_pdf(x, target) - lp
    return Estimate(float(d.mean()), float(d.std(ddof=1) / np.sqrt(n)))


def moment_match(m: GaussianMixture) -> Gaussian:
    """The single Gaussian with the mixture's mean and covariance."""
    mu = m.weights @ m.means
    dev = m.means - mu
    cov = np.einsum("k,kij->ij", m.weights, m.covs) + np.einsum("k,ki,kj->ij", m.weights, dev, dev)
    return Gaussian(mu, 0.5 * (cov + cov.T))


def grid_mixture(grid_size: int = 7, spacing: float = 2.0, std: float = 0.1) -> GaussianMixture:
    """Equal-weight square grid of isotropic 2D Gaussians centred on the origin."""
    ticks = (np.arange(grid_size) - (grid_size - 1) / 2.0) * spacing
    means = np.array([(a, b) for a in ticks for b in ticks])
    k = len(means)
    return GaussianMixture.from_arrays(np.full(k, 1.0 / k), means, np.full(k, std**2))


def log_mean_exp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    return logsumexp(a, axis=axis) - np.log(a.shape[axis])


__all__: Sequence[str] = [
    "Estimate",
    "Gaussian",
    "GaussianMixture",
    "ScaledGaussian",
    "NotPositiveDefiniteError",
    "DimensionMismatchError",
    "gaussian_log_pdf",
    "gaussian_product",
    "gaussian_rescale",
    "kl_gaussian_gaussian",
    "mixture_log_pdf",
    "mixture_sample",
    "cross_entropy_mixture_gaussian",
    "mixture_entropy_upper_bound",
    "mixture_entropy_mc",
    "kl_mixture_target_mc",
    "moment_match",
    "grid_mixture",
]
