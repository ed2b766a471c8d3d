"""Pure-numpy reference versions of the compiled kernels."""

import numpy as np
from scipy.special import logsumexp


def mixture_logpdf(x, means, prec_chol, log_coef):
    diff = x[:, None, :] - means[None, :, :]
    # prec_chol is lower triangular: row r only touches diff[:r+1]
    maha = np.einsum("krc,nkc->nkr", prec_chol, diff)
    terms = log_coef[None, :] - 0.5 * np.sum(maha * maha, axis=-1)
    return logsumexp(terms, axis=1)


def _sigmoid(a):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


def silu(a):
    with np.errstate(over="ignore"):
        return a / (1.0 + np.exp(-a))


def silu_film(a, scale, shift):
    act = silu(a)
    return act, act * (1.0 + scale) + shift


def silu_grad(a, dact):
    s = _sigmoid(a)
    return dact * s * (1.0 + a * (1.0 - s))


def silu_film_grad(a, act, scale, dh):
    return silu_grad(a, dh * (1.0 + scale)), dh * act


def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
    """In-place bias-corrected Adam update on matching 1-D arrays."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
