"""Simplified-loss training for vanilla and SMD denoisers.

Every step draws from two generators seeded by (seed, step): one for
(x0, t, eps) and one for eta. A vanilla run and a zero-modulation SMD run with
the same seed therefore see the same data tape. The additive constant of the
SMD bound is never computed; it does not affect optimization.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .denoiser import SmdDenoiser, VanillaDenoiser
from .forward import NoiseSchedule, sample_forward
from .gmm import GaussianMixture, mixture_sample
from .nn import adam_step, mlp_backward

log = logging.getLogger(__name__)

WEIGHT_MODES = ("simple", "gamma_weighted")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 256
    lr: float = 2e-4
    n_eta: int = 1
    weight_mode: str = "simple"
    seed: int = 0
    eval_every: int = 1000

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        for name in ("batch_size", "n_eta", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")


def step_rngs(seed: int, step: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(data generator, latent generator) for one optimization step."""
    return np.random.default_rng([seed, step, 0]), np.random.default_rng([seed, step, 1])


def draw_batch(data: GaussianMixture, s: NoiseSchedule, batch_size: int, rng: np.random.Generator):
    x0 = mixture_sample(data, rng, batch_size)
    t = rng.integers(1, s.T + 1, size=batch_size)
    eps = rng.standard_normal(x0.shape)
    return x0, t, eps


def _weights(s: NoiseSchedule, t: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    if cfg.weight_mode == "gamma_weighted":
        return s.gamma[t - 1]
    return np.ones(t.size)


def ddpm_loss_batch(d: VanillaDenoiser, data: GaussianMixture, s: NoiseSchedule, cfg: TrainConfig, rng, batch=None):
    """Mean over the batch of |eps - eps_theta(x_t, t)|^2; gradients land in d.params.grads.

    ``batch`` optionally supplies a pre-drawn (x0, t, eps) triple.
    """
    x0, t, eps = draw_batch(data, s, cfg.batch_size, rng) if batch is None else batch
    x_t = sample_forward(x0, t, eps, s)
    out, tape = d.forward(x_t, s.model_t[t - 1])
    resid = eps - out
    w = _weights(s, t, cfg)
    per_example = w * np.sum(resid * resid, axis=1)
    loss = float(np.mean(per_example))
    d.params.zero_grad()
    mlp_backward(tape, -2.0 * w[:, None] * resid / t.size)
    return loss, d.params.grads


def smd_loss_batch(d: SmdDenoiser, data: GaussianMixture, s: NoiseSchedule, cfg: TrainConfig, rng, eta_rng=None, batch=None):
    """SMD simplified loss; each example's loss is the mean over n_eta eta draws."""
    eta_rng = rng if eta_rng is None else eta_rng
    x0, t, eps = draw_batch(data, s, cfg.batch_size, rng) if batch is None else batch
    x_t = sample_forward(x0, t, eps, s)
    n, k = t.size, cfg.n_eta
    eta = eta_rng.standard_normal((n * k, d.latent_dim))
    rep = np.repeat(np.arange(n), k)
    out, tapes = d.forward(x_t[rep], s.model_t[t[rep] - 1], eta)
    resid = eps[rep] - out
    w = _weights(s, t, cfg)
    per_draw = np.sum(resid * resid, axis=1).reshape(n, k)
    per_example = w * per_draw.mean(axis=1)
    loss = float(np.mean(per_example))
    d.params.zero_grad()
    d.backward(tapes, -2.0 * w[rep, None] * resid / (n * k))
    return loss, d.params.grads


def loss_batch(model, data, s, cfg: TrainConfig, step: int):
    rng, eta_rng = step_rngs(cfg.seed, step)
    if isinstance(model, SmdDenoiser):
        return smd_loss_batch(model, data, s, cfg, rng, eta_rng)
    return ddpm_loss_batch(model, data, s, cfg, rng)


def train(
    model,
    data: GaussianMixture,
    s: NoiseSchedule,
    cfg: TrainConfig,
    start_step: int = 0,
    callback: Callable[[int, object, float], None] | None = None,
    betas=(0.9, 0.999),
):
    """Adam on the simplified loss for steps start_step+1 .. cfg.steps.

    Returns (model, trace) where trace rows are (step, loss, wall_ms) recorded
    every ``eval_every`` steps; ``loss`` and ``wall_ms`` are per-step means over
    the steps since the previous row. ``callback(step, model, loss)`` fires on the same cadence.
    """
    trace: list[tuple[int, float, float]] = []
    tick = time.perf_counter()
    since, window = 0, 0.0
    for step in range(start_step + 1, cfg.steps + 1):
        loss, _ = loss_batch(model, data, s, cfg, step)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} at step {step}")
        adam_step(model.params, cfg.lr, betas, 1e-8, step)
        since += 1
        window += loss
        if step % cfg.eval_every == 0 or step == cfg.steps:
            now = time.perf_counter()
            mean_loss = window / since
            trace.append((step, mean_loss, 1000.0 * (now - tick) / since))
            since, window = 0, 0.0
            log.debug("step %d loss %.5f", step, mean_loss)
            if callback is not None:
                callback(step, model, mean_loss)
            tick = time.perf_counter()
    return model, trace


def write_trace_csv(path, trace, append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if not append:
            w.writerow(["step", "loss", "wall_ms"])
        for step, loss, ms in trace:
            w.writerow([step, repr(float(loss)), f"{ms:.6f}"])
