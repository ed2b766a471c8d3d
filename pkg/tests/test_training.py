import csv

import numpy as np
import pytest

from smdlab.denoiser import HYPER, SmdDenoiser, VanillaDenoiser, predict_eps_vanilla
from smdlab.forward import make_schedule, sample_forward
from smdlab.gmm import GaussianMixture, grid_mixture
from smdlab.nn import adam_step
from smdlab.training import (
    TrainConfig,
    TrainingDivergedError,
    ddpm_loss_batch,
    draw_batch,
    loss_batch,
    smd_loss_batch,
    step_rngs,
    train,
    write_trace_csv,
)

S = make_schedule(20, 5e-3, 0.5)
DATA = GaussianMixture.from_arrays([0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], [0.1 * np.eye(2)] * 2)


def vanilla(seed=0, hidden=(16, 16)):
    return VanillaDenoiser.create(2, hidden=hidden, time_embed_dim=4, num_steps=S.T, rng=np.random.default_rng(seed))


def smd(seed=0, active=False):
    d = SmdDenoiser.create(2, hidden=(16, 16), time_embed_dim=4, num_steps=S.T, latent_dim=3, latent_hidden=(8,), hyper_hidden=(8,), rng=np.random.default_rng(seed))
    if active:
        rng = np.random.default_rng(seed + 100)
        last = len(d.hyper_spec.hidden_dims)
        for name in (f"{HYPER}W{last}", f"{HYPER}b{last}"):
            d.params.set(name, 0.5 * rng.standard_normal(d.params[name].shape))
    return d


def test_config_validation():
    for bad in (dict(steps=-1), dict(batch_size=0), dict(n_eta=0), dict(lr=0.0), dict(weight_mode="x"), dict(eval_every=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig(steps=0).steps == 0


def test_zero_network_loss_is_chi_square_mean():
    d = vanilla()
    for name in ("base.W2", "base.b2"):
        d.params.set(name, np.zeros_like(d.params[name]))
    n = 8192
    loss, _ = ddpm_loss_batch(d, DATA, S, TrainConfig(batch_size=n), np.random.default_rng(3))
    # per-example |eps|^2 is chi-square with 2 dof: mean 2, variance 4
    assert abs(loss - 2.0) < 4 * 2.0 / np.sqrt(n)


class OracleStub(VanillaDenoiser):
    """Returns the exact noise of a pre-drawn batch."""

    eps = None

    def forward(self, x_t, t, modulation=None):
        _, tape = super().forward(x_t, t, modulation)
        return self.eps.copy(), tape


def test_oracle_stub_loss_zero_with_zero_grads():
    base = vanilla()
    stub = OracleStub(base.spec, base.params, base.num_steps)
    cfg = TrainConfig(batch_size=64)
    batch = draw_batch(DATA, S, 64, np.random.default_rng(0))
    stub.eps = batch[2]
    loss, grads = ddpm_loss_batch(stub, DATA, S, cfg, None, batch=batch)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_loss_matches_direct_evaluation():
    d = vanilla(1)
    for mode in ("simple", "gamma_weighted"):
        cfg = TrainConfig(batch_size=50, weight_mode=mode)
        batch = draw_batch(DATA, S, 50, np.random.default_rng(8))
        x0, t, eps = batch
        loss, _ = ddpm_loss_batch(d, DATA, S, cfg, None, batch=batch)
        r = eps - predict_eps_vanilla(d, sample_forward(x0, t, eps, S), t)
        w = S.gamma[t - 1] if mode == "gamma_weighted" else 1.0
        assert loss == pytest.approx(float(np.mean(w * np.sum(r * r, axis=1))), rel=1e-13)
        assert np.isfinite(loss)


def test_zero_modulation_reduction_bitwise():
    m = smd(2)
    v = m.vanilla_copy()
    cfg = TrainConfig(batch_size=128, seed=11)
    for step in (1, 7, 1000):
        ls, gs = loss_batch(m, DATA, S, cfg, step)
        lv, gv = loss_batch(v, DATA, S, cfg, step)
        assert ls == lv
        for name in v.params.names():
            assert np.array_equal(gs[name], gv[name])


def test_zero_modulation_training_reduction_bitwise():
    m = smd(2)
    v = m.vanilla_copy()
    cfg = TrainConfig(steps=30, batch_size=64, lr=1e-2, seed=4, eval_every=10)
    train(v, DATA, S, cfg)
    for step in range(1, 31):
        _, grads = loss_batch(m, DATA, S, cfg, step)
        # pin the hypernetwork output at zero; Adam leaves zero-gradient entries untouched
        for name in m.params.names(HYPER):
            grads[name][...] = 0.0
        adam_step(m.params, cfg.lr, step_index=step)
    for name in v.params.names():
        assert np.array_equal(m.params[name], v.params[name])


def test_gradients_reach_all_groups():
    m = smd(3, active=True)
    _, grads = loss_batch(m, DATA, S, TrainConfig(batch_size=32), 1)
    for prefix in ("base.", "latent.", "hyper."):
        assert sum(float(np.abs(grads[n]).sum()) for n in m.params.names(prefix)) > 0


def test_smd_loss_gradient_matches_fd():
    m = smd(5, active=True)
    cfg = TrainConfig(batch_size=16, n_eta=2)
    batch = draw_batch(DATA, S, 16, np.random.default_rng(1))

    def loss_at():
        return smd_loss_batch(m, DATA, S, cfg, None, np.random.default_rng(2), batch=batch)[0]

    _, grads = smd_loss_batch(m, DATA, S, cfg, None, np.random.default_rng(2), batch=batch)
    grads = {k: g.copy() for k, g in grads.items()}
    rng = np.random.default_rng(0)
    h = 1e-5
    for prefix in ("base.", "latent.", "hyper."):
        for name in m.params.names(prefix):
            w = m.params[name]
            for i in rng.choice(w.size, size=min(4, w.size), replace=False):
                idx = np.unravel_index(i, w.shape)
                orig = w[idx]
                w[idx] = orig + h
                fp = loss_at()
                w[idx] = orig - h
                fm = loss_at()
                w[idx] = orig
                fd = (fp - fm) / (2 * h)
                a = grads[name][idx]
                assert abs(fd - a) / max(abs(fd) + abs(a), 1e-7) < 1e-4, (name, fd, a)


def _frozen_losses(m, n_eta, batches, seed):
    cfg = TrainConfig(batch_size=32, n_eta=n_eta)
    out = []
    for i, batch in enumerate(batches):
        loss, _ = smd_loss_batch(m, DATA, S, cfg, None, np.random.default_rng([seed, i]), batch=batch)
        out.append(loss)
    return np.array(out)


def test_multi_eta_variance_decreases():
    m = smd(6, active=True)
    # one shared data batch so the spread comes from eta alone
    batch = draw_batch(DATA, S, 32, np.random.default_rng(0))
    l1 = _frozen_losses(m, 1, [batch] * 200, 1)
    l5 = _frozen_losses(m, 5, [batch] * 200, 2)
    assert l5.var(ddof=1) < l1.var(ddof=1)


def test_multi_eta_unbiased():
    m = smd(7, active=True)
    batches = [draw_batch(DATA, S, 32, np.random.default_rng([9, i])) for i in range(500)]
    l1 = _frozen_losses(m, 1, batches, 3)
    l3 = _frozen_losses(m, 3, batches, 4)
    diff = l1 - l3
    assert abs(diff.mean()) < 3 * diff.std(ddof=1) / np.sqrt(diff.size)


def test_steps_zero_leaves_model_unchanged():
    d = vanilla()
    before = {n: d.params[n].copy() for n in d.params.names()}
    _, trace = train(d, DATA, S, TrainConfig(steps=0))
    assert trace == []
    assert all(np.array_equal(before[n], d.params[n]) for n in before)


def test_training_deterministic():
    cfg = TrainConfig(steps=40, batch_size=32, lr=1e-2, seed=3, eval_every=10)
    a, ta = train(smd(1, active=True), DATA, S, cfg)
    b, tb = train(smd(1, active=True), DATA, S, cfg)
    assert [r[:2] for r in ta] == [r[:2] for r in tb]
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params.names())
    c, tc = train(smd(1, active=True), DATA, S, TrainConfig(steps=40, batch_size=32, lr=1e-2, seed=4, eval_every=10))
    assert [r[1] for r in tc] != [r[1] for r in ta]


def test_step_rngs_streams_distinct():
    a, b = step_rngs(0, 5)
    assert a.random() != b.random()
    assert step_rngs(0, 5)[0].random() == np.random.default_rng([0, 5, 0]).random()


def test_loss_decreases_on_single_gaussian():
    data = GaussianMixture.from_arrays([1.0], [[1.0, -1.0]], [np.diag([0.05, 0.1])])
    s = make_schedule(20, 5e-3, 0.3)
    d = VanillaDenoiser.create(2, hidden=(32, 32), time_embed_dim=8, num_steps=20, rng=np.random.default_rng(0))
    _, trace = train(d, data, s, TrainConfig(steps=2000, batch_size=128, lr=2e-3, seed=1, eval_every=100))
    assert trace[-1][1] < 0.5 * trace[0][1]


def test_divergence_raises():
    data = GaussianMixture.from_arrays([1.0], [[1e160, 0.0]], [np.eye(2)])
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError, match="step 1"):
        train(vanilla(), data, S, TrainConfig(steps=3, batch_size=8))


def test_trace_cadence_and_csv(tmp_path):
    _, trace = train(vanilla(), DATA, S, TrainConfig(steps=25, batch_size=8, eval_every=10))
    assert [r[0] for r in trace] == [10, 20, 25]
    path = tmp_path / "loss.csv"
    write_trace_csv(path, trace[:2])
    write_trace_csv(path, trace[2:], append=True)
    raw = path.read_bytes()
    assert b"\r" not in raw
    rows = list(csv.reader(raw.decode().splitlines()))
    assert rows[0] == ["step", "loss", "wall_ms"]
    assert [int(r[0]) for r in rows[1:]] == [10, 20, 25]
    assert float(rows[1][1]) == trace[0][1]


def test_grid_data_batch_shapes():
    x0, t, eps = draw_batch(grid_mixture(), S, 100, np.random.default_rng(0))
    assert x0.shape == eps.shape == (100, 2)
    assert t.min() >= 1 and t.max() <= S.T
