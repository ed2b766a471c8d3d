"""Noise schedules, forward marginals and exact backward posteriors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gmm import DimensionMismatchError, Gaussian, GaussianMixture, gaussian_log_pdf

SIGMA_MODES = ("beta", "beta_tilde")
NOISE_MODES = ("sqrt", "literal")
SIGMA_FLOOR = 1e-12


class StepOutOfRangeError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables for a T-step chain; step t = 1..T lives at index t - 1.

    ``sigma`` holds the backward variance sigma_t (covariance sigma_t * I).
    ``model_t`` maps schedule steps to the timestep the denoiser was trained
    on; it differs from 1..T only for respaced (strided) schedules.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    sigma_mode: str
    model_t: np.ndarray
    model_T: int

    @property
    def T(self) -> int:
        return self.beta.size

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise StepOutOfRangeError(f"step out of range 1..{self.T}: {t}")

    def alpha_bar_prev(self, t):
        """alpha_bar_{t-1} with alpha_bar_0 = 1."""
        self.check_step(t)
        ab = np.concatenate([[1.0], self.alpha_bar])
        return ab[np.asarray(t) - 1]

    def noise_scale(self, t, noise_mode: str = "sqrt"):
        """Multiplier of the fresh normal draw in a backward step.

        ``sqrt`` treats sigma_t as a variance (noise sqrt(sigma_t)); ``literal``
        multiplies the draw by sigma_t itself.
        """
        s = self.sigma[np.asarray(t) - 1]
        if noise_mode == "sqrt":
            return np.sqrt(s)
        if noise_mode == "literal":
            return s
        raise ValueError(f"unknown noise_mode {noise_mode!r}")

    def backward_var(self, t, noise_mode: str = "sqrt"):
        return self.noise_scale(t, noise_mode) ** 2

    def respace(self, T_used: int) -> "NoiseSchedule":
        """Evenly strided subset of T_used steps, alpha_bar re-read at the kept steps."""
        if not 1 <= T_used <= self.T:
            raise ValueError(f"T_used must lie in 1..{self.T}")
        keep = np.rint(np.arange(1, T_used + 1) * self.T / T_used).astype(int)
        if np.any(np.diff(keep) <= 0):
            raise ValueError("strided step set is not strictly increasing")
        ab = self.alpha_bar[keep - 1]
        prev = np.concatenate([[1.0], ab[:-1]])
        return schedule_from_betas(1.0 - ab / prev, self.sigma_mode, self.model_t[keep - 1], self.model_T)


def schedule_from_betas(betas, sigma_mode: str = "beta", model_t=None, model_T: int | None = None) -> NoiseSchedule:
    beta = np.asarray(betas, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ValueError("betas must be a non-empty vector")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("betas must lie in (0, 1)")
    if sigma_mode not in SIGMA_MODES:
        raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta
    if sigma_mode == "beta":
        sigma = beta.copy()
    else:
        sigma = np.maximum(beta_tilde, SIGMA_FLOOR)
    gamma = beta**2 / (2.0 * sigma * alpha * (1.0 - alpha_bar))
    T = beta.size
    model_t = np.arange(1, T + 1) if model_t is None else np.asarray(model_t, dtype=int)
    return NoiseSchedule(beta, alpha, alpha_bar, beta_tilde, sigma, gamma, sigma_mode, model_t, model_T or T)


def make_schedule(T: int, beta_min: float, beta_max: float, sigma_mode: str = "beta") -> NoiseSchedule:
    """Linear beta schedule from beta_min to beta_max over T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    return schedule_from_betas(np.linspace(beta_min, beta_max, T), sigma_mode)


def default_beta_range(T: int) -> tuple[float, float]:
    """The standard 1e-4..0.02 range at T=1000, rescaled to keep sum(beta) fixed."""
    return 0.1 / T, min(20.0 / T, 0.999)


def sample_forward(x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    s.check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionMismatchError("x0 and eps must share a shape")
    ab = s.alpha_bar[np.asarray(t) - 1]
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def marginal_q_xt(data: GaussianMixture, t: int, s: NoiseSchedule) -> GaussianMixture:
    """q(x_t): component k becomes N(sqrt(ab) mu_k, (1 - ab) I + ab S_k)."""
    s.check_step(t)
    ab = s.alpha_bar[t - 1]
    eye = np.eye(data.dim)
    comps = [Gaussian(np.sqrt(ab) * c.mean, (1.0 - ab) * eye + ab * c.cov) for c in data.components]
    return GaussianMixture(data.weights.copy(), comps)


@dataclass
class PosteriorMixture:
    mixture: GaussianMixture
    lambda_mats: list[np.ndarray]


@dataclass(frozen=True)
class PosteriorParams:
    """Batched q(x_{t-1} | x_t) for n conditioning points sharing step t.

    weights (n, K), means (n, K, D), covs (K, D, D), lambda_mats (K, D, D).
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    lambda_mats: np.ndarray


def posterior_params(data: GaussianMixture, x_t, t: int, s: NoiseSchedule) -> PosteriorParams:
    s.check_step(t)
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if x.shape[1] != data.dim:
        raise DimensionMismatchError("x_t dimension differs from data")
    if not np.all(np.isfinite(x)):
        raise ValueError("x_t must be finite")
    a = s.alpha[t - 1]
    ab = s.alpha_bar[t - 1]
    ab_prev = float(s.alpha_bar_prev(t))
    eye = np.eye(data.dim)
    lam = np.stack([((a - ab) * eye + ab * c.cov) / (1.0 - a) for c in data.components])
    try:
        # (I + L^-1)^-1 = L (I + L)^-1 and (I + L)^-1, both from one solve
        inv_i_plus = np.linalg.inv(eye + lam)
    except np.linalg.LinAlgError:
        raise ValueError("singular I + Lambda_k") from None
    a_mat = lam @ inv_i_plus
    covs = (1.0 - a) / a * a_mat
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    means = np.einsum("kij,nj->nki", a_mat, x / np.sqrt(a)) + np.sqrt(ab_prev) * np.einsum(
        "kij,kj->ki", inv_i_plus, data.means
    )[None]
    marg = marginal_q_xt(data, t, s)
    logw = np.log(data.weights)[None, :] + np.stack([gaussian_log_pdf(x, c) for c in marg.components], axis=1)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    return PosteriorParams(w, means, covs, lam)


def posterior_true(data: GaussianMixture, x_t, t: int, s: NoiseSchedule) -> PosteriorMixture:
    """Exact q(x_{t-1} | x_t) for mixture data, as a K-component mixture."""
    pp = posterior_params(data, np.asarray(x_t, dtype=np.float64).reshape(1, -1), t, s)
    w = pp.weights[0]
    keep = w > 0
    # components with underflowed weight are dropped; the mixture type needs w > 0
    comps = [Gaussian(m, c) for m, c, k in zip(pp.means[0], pp.covs, keep) if k]
    w = w[keep] / w[keep].sum()
    return PosteriorMixture(GaussianMixture(w, comps), [l for l, k in zip(pp.lambda_mats, keep) if k])


def ddpm_posterior_given_x0(x_t, x0, t: int, s: NoiseSchedule) -> Gaussian:
    """q(x_{t-1} | x_t, x_0) = N(mu_tilde, beta_tilde I); beta_tilde_1 = 0 is floored."""
    s.check_step(t)
    x_t = np.atleast_1d(np.asarray(x_t, dtype=np.float64))
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    b = s.beta[t - 1]
    ab = s.alpha_bar[t - 1]
    ab_prev = float(s.alpha_bar_prev(t))
    mean = np.sqrt(ab_prev) * b / (1.0 - ab) * x0 + np.sqrt(s.alpha[t - 1]) * (1.0 - ab_prev) / (1.0 - ab) * x_t
    var = max(s.beta_tilde[t - 1], SIGMA_FLOOR)
    return Gaussian(mean, var * np.eye(x_t.size))
