import csv
import json

import numpy as np
import pytest

from conftest import grid, npdf1
from smdlab.denoiser import HYPER, SmdDenoiser, VanillaDenoiser
from smdlab.forward import default_beta_range, make_schedule, schedule_from_betas
from smdlab.gmm import GaussianMixture, grid_mixture, mixture_entropy_mc, mixture_sample
from smdlab.metrics import (
    ExactPosteriorKernel,
    MetricReport,
    PosteriorMeanKernel,
    Theorem1Config,
    as_kernel,
    global_error_e,
    local_error_mt,
    local_error_table,
    mode_metrics,
    theorem1_lower_bound,
    theorem1_table,
)
from smdlab.training import TrainConfig, train

S10 = make_schedule(10, 0.02, 0.3)
BIMODAL = GaussianMixture.from_arrays([0.4, 0.6], [[-1.5], [1.0]], [[[0.2]], [[0.5]]])
THM = Theorem1Config([1.0, 2.0, 4.0, 8.0], [1.0, 1.0], [[-1.0], [1.0]], [0.5, 0.5], 1)
S_THM = schedule_from_betas([0.1])


class AffineStub:
    """p(x_{t-1} | x_t) = N(a x_t + b, v), exposing the Gaussian fast path."""

    def __init__(self, a, b, v):
        self.a, self.b, self.v = a, b, v

    def gaussian(self, x, t):
        return self.a * x + self.b, self.v

    def log_prob(self, y, x, t):
        m = (self.a * x + self.b)[:, None, :]
        return np.sum(-0.5 * np.log(2 * np.pi * self.v) - 0.5 * (y - m) ** 2 / self.v, axis=-1)


class LogProbOnly:
    """Same density, but only through log_prob so the generic MC path runs."""

    def __init__(self, stub):
        self.log_prob = stub.log_prob


def grid_mt(w, mu, var, t, s, a, b, v):
    """E_{x_t} KL(q(x_{t-1}|x_t) || N(a x_t + b, v)) by double trapezoid integration, 1D."""
    ab_prev = 1.0 if t == 1 else s.alpha_bar[t - 2]
    al = s.alpha[t - 1]
    y = grid(-10, 10, 0.01)
    prior = sum(wk * npdf1(y, np.sqrt(ab_prev) * m, ab_prev * vk + 1 - ab_prev) for wk, m, vk in zip(w, mu, var))
    xs = grid(-10, 10, 0.02)
    lik = npdf1(xs[:, None], np.sqrt(al) * y[None, :], 1 - al)
    joint = lik * prior[None, :]
    qx = np.trapezoid(joint, y, axis=1)
    keep = qx > 1e-300
    post = joint[keep] / qx[keep, None]
    log_p = -0.5 * np.log(2 * np.pi * v) - 0.5 * (y[None, :] - (a * xs[keep, None] + b)) ** 2 / v
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = np.where(post > 0, post * (np.log(post) - log_p), 0.0)
    kl = np.trapezoid(integrand, y, axis=1)
    return float(np.trapezoid(qx[keep] * kl, xs[keep]))


def test_exact_posterior_stub_zero_for_every_step():
    rng = np.random.default_rng(0)
    table = local_error_table(BIMODAL, ExactPosteriorKernel(BIMODAL, S10), S10, 200, 32, rng)
    for _, est in table:
        assert abs(est.value) <= 3 * est.se + 1e-12


def test_single_gaussian_matched_variance_zero():
    # K=1 with unit data covariance: the posterior is Gaussian with variance beta_t,
    # which is sigma_t in beta mode, so the posterior-mean kernel is exact
    data = GaussianMixture.from_arrays([1.0], [[0.7, -0.2]], [np.eye(2)])
    rng = np.random.default_rng(1)
    for t in (1, 4, 10):
        est = local_error_mt(data, PosteriorMeanKernel(data, S10), t, S10, 2000, 64, rng)
        assert abs(est.value) < 3 * est.se + 1e-12


@pytest.mark.parametrize("path", ["analytic", "mc"])
def test_mc_matches_grid_for_random_stubs(path):
    rng = np.random.default_rng(2024 if path == "analytic" else 2025)
    for _ in range(10):
        mu = rng.uniform(-2, 2, 2)
        var = rng.uniform(0.1, 1.0, 2)
        w = rng.dirichlet([2.0, 2.0])
        data = GaussianMixture.from_arrays(w, mu[:, None], var[:, None, None])
        t = int(rng.integers(1, S10.T + 1))
        a, b, v = rng.uniform(0.8, 1.2), rng.uniform(-0.3, 0.3), rng.uniform(0.05, 0.5)
        stub = AffineStub(a, b, v)
        model = stub if path == "analytic" else LogProbOnly(stub)
        est = local_error_mt(data, model, t, S10, 4000, 64, rng)
        ref = grid_mt(w, mu, var, t, S10, a, b, v)
        assert abs(est.value - ref) < 3 * est.se, (est, ref)


def test_estimates_nonnegative_within_se():
    rng = np.random.default_rng(3)
    v = VanillaDenoiser.create(1, hidden=(8,), time_embed_dim=4, num_steps=S10.T, rng=rng)
    table = local_error_table(BIMODAL, v, S10, 500, 32, rng)
    assert all(e.value >= -3 * e.se for _, e in table)
    e = global_error_e(BIMODAL, v, S10, 500, 32, rng)
    assert e.value >= max(x.value for _, x in table)


def test_exact_stub_global_error_zero():
    est = global_error_e(BIMODAL, ExactPosteriorKernel(BIMODAL, S10), S10, 100, 16, np.random.default_rng(4))
    assert abs(est.value) <= 3 * est.se + 1e-12


def test_global_error_grows_with_separation():
    s = make_schedule(20, *default_beta_range(20))
    values = []
    for lam in THM.lambda_values:
        data = THM.mixture(lam)
        values.append(global_error_e(data, PosteriorMeanKernel(data, s), s, 2000, 256, np.random.default_rng(5)).value)
    assert all(b > a for a, b in zip(values, values[1:])), values


def test_fresh_smd_kernel_agrees_with_vanilla():
    rng = np.random.default_rng(6)
    m = SmdDenoiser.create(1, hidden=(16,), time_embed_dim=4, num_steps=S10.T, latent_dim=2, latent_hidden=(8,), hyper_hidden=(8,), rng=rng)
    a = local_error_mt(BIMODAL, m, 5, S10, 3000, 32, np.random.default_rng(7))
    b = local_error_mt(BIMODAL, m.vanilla_copy(), 5, S10, 3000, 32, np.random.default_rng(7))
    assert abs(a.value - b.value) < 3 * np.hypot(a.se, b.se)


def test_smd_inner_sample_drift_small():
    rng = np.random.default_rng(8)
    m = SmdDenoiser.create(1, hidden=(16,), time_embed_dim=4, num_steps=S10.T, latent_dim=2, latent_hidden=(8,), hyper_hidden=(8,), rng=rng)
    for name in (f"{HYPER}W1", f"{HYPER}b1"):
        m.params.set(name, 0.3 * rng.standard_normal(m.params[name].shape))
    a = local_error_mt(BIMODAL, m, 3, S10, 2000, 256, np.random.default_rng(9))
    b = local_error_mt(BIMODAL, m, 3, S10, 2000, 512, np.random.default_rng(9))
    assert abs(b.value - a.value) < a.se


def test_kernel_dispatch():
    v = VanillaDenoiser.create(1, hidden=(4,), time_embed_dim=2, num_steps=10)
    assert type(as_kernel(v, S10, 8, None)).__name__ == "DenoiserKernel"
    with pytest.raises(TypeError):
        as_kernel(object(), S10, 8, None)


def test_nan_model_rejected():
    v = VanillaDenoiser.create(1, hidden=(4,), time_embed_dim=2, num_steps=10)
    v.params.set("base.b1", np.array([np.nan]))
    with pytest.raises(FloatingPointError):
        local_error_mt(BIMODAL, v, 2, S10, 10, 4, np.random.default_rng(0))


# Theorem 1 construction


def test_bound_scalar_example():
    a, ab_prev, sig = 0.9, 1.0, 0.1
    lead = (1 - a) ** 2 * ab_prev / (2 * sig) * (0.5 * 1.0 + 0.5 * 1.0)
    const = -np.log(2) + 0.5 * (np.log(sig * a / (1 - a)) + (1 - a) / sig - 1)
    expected = [lead * lam**2 + const for lam in THM.lambda_values]
    got = theorem1_lower_bound(THM, S_THM)
    assert np.allclose(got, expected, rtol=1e-14, atol=1e-15)
    assert got[0] == pytest.approx(-0.69582, abs=1e-5)


def test_bound_lambda_zero_is_constant():
    cfg = Theorem1Config([0.0], THM.delta, THM.base_means, THM.weights, 1)
    got = theorem1_lower_bound(cfg, S_THM)[0]
    assert got == pytest.approx(-np.log(2) + 0.5 * np.log(0.9), rel=1e-14)


def test_bound_quadratic_scaling():
    b = theorem1_lower_bound(THM, S_THM)
    c = theorem1_lower_bound(Theorem1Config([0.0], THM.delta, THM.base_means, THM.weights, 1), S_THM)[0]
    term = b - c
    assert np.all(np.diff(b) > 0)
    assert np.allclose(term[1:] / term[:-1], 4.0, rtol=1e-13)


def test_constraint_enforced():
    bad = Theorem1Config([1.0], [1.0, 1.0], [[-1.0], [2.0]], [0.5, 0.5], 1)
    with pytest.raises(ValueError, match="zero-sum"):
        theorem1_lower_bound(bad, S_THM)
    # unequal variances shift the constraint through the denominators
    s = schedule_from_betas([0.1, 0.1])
    ab = s.alpha_bar[1]
    d = [1.0, 3.0]
    mu2 = 1.0 * (1 + (d[1] - 1) * ab) / (1 + (d[0] - 1) * ab)
    ok = Theorem1Config([1.0, 2.0], d, [[-1.0], [mu2]], [0.5, 0.5], 2)
    assert np.all(np.isfinite(theorem1_lower_bound(ok, s)))


@pytest.fixture(scope="module")
def thm_table():
    return theorem1_table(THM, S_THM, 4000, 256, np.random.default_rng([0, 4]))


@pytest.mark.parametrize(
    "i",
    [
        0,
        1,
        pytest.param(2, marks=pytest.mark.xfail(strict=True, reason="closed-form bound exceeds the true M_1 at lambda=4; see decisions ledger")),
        pytest.param(3, marks=pytest.mark.xfail(strict=True, reason="closed-form bound exceeds the true M_1 at lambda=8; see decisions ledger")),
    ],
)
def test_best_gaussian_exceeds_bound(thm_table, i):
    lam, bound, mc, se = thm_table[i]
    assert mc + 3 * se >= bound


def test_best_gaussian_m1_small_and_shrinking(thm_table):
    # the quantity the bound claims to dominate: tiny, and not growing with lambda
    mcs = [r[2] for r in thm_table]
    assert all(abs(m) < 5e-3 for m in mcs)
    assert mcs[3] < mcs[0] + 3 * np.hypot(thm_table[3][3], thm_table[0][3])


@pytest.mark.xfail(strict=True, reason="separating the lobes makes the t=1 posterior unimodal; see decisions ledger")
def test_trained_vanilla_m1_grows_tenfold():
    est = {}
    for lam in (1.0, 8.0):
        data = THM.mixture(lam)
        m = VanillaDenoiser.create(1, hidden=(64, 64), time_embed_dim=8, num_steps=1, rng=np.random.default_rng(0))
        train(m, data, S_THM, TrainConfig(steps=3000, batch_size=256, lr=2e-3, seed=0, eval_every=3000))
        est[lam] = local_error_mt(data, m, 1, S_THM, 4000, 256, np.random.default_rng(3))
    lo, hi = est[1.0], est[8.0]
    assert hi.value - 3 * hi.se >= 10 * (lo.value + 3 * lo.se)


# toy quality metrics


def test_mode_metrics_truth_samples():
    truth = grid_mixture()
    x = mixture_sample(truth, np.random.default_rng(0), 10_000)
    recall, nll = mode_metrics(x, truth)
    assert recall == 1.0
    h = mixture_entropy_mc(truth, np.random.default_rng(1), 10_000)
    resid = -np.asarray(truth.log_pdf(x))
    se = np.hypot(h.se, resid.std(ddof=1) / np.sqrt(x.shape[0]))
    assert abs(nll - h.value) < 3 * se


def test_mode_metrics_collapse_and_errors():
    truth = grid_mixture()
    x = np.tile(truth.means[10], (2000, 1)) + 0.01 * np.random.default_rng(0).standard_normal((2000, 2))
    recall, _ = mode_metrics(x, truth)
    assert recall == pytest.approx(1 / 49)
    with pytest.raises(ValueError):
        mode_metrics(np.zeros((0, 2)), truth)
    with pytest.raises(ValueError):
        mode_metrics(x[:999], truth)


def test_mode_metrics_radius_and_ties():
    truth = GaussianMixture.from_arrays([0.5, 0.5], [[-1.0], [1.0]], [[[0.01]], [[0.01]]])
    # the midpoint ties to component 0 and is far from its centre
    x = np.concatenate([np.zeros((600, 1)), np.full((600, 1), 1.0)])
    recall, _ = mode_metrics(x, truth)
    assert recall == 0.5


def test_report_outputs(tmp_path):
    from smdlab.gmm import Estimate

    table = [(1, Estimate(0.5, 0.1)), (2, Estimate(0.25, 0.2))]
    r = MetricReport.build(table, 0.9, 3.2, {"seed": 1})
    assert r.e_global["value"] == 0.75
    assert r.e_global["se"] == pytest.approx(np.hypot(0.1, 0.2))
    r.to_json(tmp_path / "r.json")
    back = json.loads((tmp_path / "r.json").read_text())
    assert back["mode_recall"] == 0.9 and back["metadata"] == {"seed": 1}
    r.write_mt_csv(tmp_path / "mt.csv")
    rows = list(csv.reader((tmp_path / "mt.csv").read_text().splitlines()))
    assert rows == [["t", "m_t", "se"], ["1", "0.5", "0.1"], ["2", "0.25", "0.2"]]
