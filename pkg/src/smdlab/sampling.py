"""Ancestral sampling for vanilla and SMD denoisers."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .denoiser import SmdDenoiser, mean_from_eps, predict_eps
from .forward import NOISE_MODES, NoiseSchedule


class NonFiniteStateError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SampleRun:
    n: int = 10000
    keep_trajectory: bool = False
    seed: int = 0
    T_used: int | None = None
    noise_mode: str = "sqrt"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.T_used is not None and self.T_used < 1:
            raise ValueError("T_used must be >= 1")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")


def chain_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(noise generator, latent generator); eta never shares a stream with x_T or eps."""
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def denoise_step(model, x_t, t: int, s: NoiseSchedule, rng, latent_rng=None, noise_mode: str = "sqrt") -> np.ndarray:
    """One backward step x_t -> x_{t-1}; no noise is added at t = 1.

    ``model`` is anything accepted by :func:`predict_eps`; SMD models draw a
    fresh eta per row from ``latent_rng`` (``rng`` if not given).
    """
    s.check_step(t)
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    eta = None
    if isinstance(model, SmdDenoiser):
        eta = (rng if latent_rng is None else latent_rng).standard_normal((x.shape[0], model.latent_dim))
    eps_hat = predict_eps(model, x, s.model_t[t - 1], eta)
    mean = mean_from_eps(x, t, eps_hat, s)
    if t > 1:
        mean = mean + s.noise_scale(t, noise_mode) * rng.standard_normal(x.shape)
    return mean[0] if np.ndim(x_t) == 1 else mean


def sample_chain(model, run: SampleRun, s: NoiseSchedule):
    """x_T ~ N(0, I), then denoise down the (possibly strided) step set.

    Returns samples (n, D), or (samples, trajectory) with trajectory of shape
    (steps + 1, n, D) when ``run.keep_trajectory``; trajectory[0] is x_T.
    """
    sched = s if run.T_used is None or run.T_used == s.T else s.respace(run.T_used)
    rng, latent_rng = chain_rngs(run.seed)
    x = rng.standard_normal((run.n, model.data_dim))
    traj = [x] if run.keep_trajectory else None
    for t in range(sched.T, 0, -1):
        x = denoise_step(model, x, t, sched, rng, latent_rng, run.noise_mode)
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(f"non-finite state after step t={t}")
        if traj is not None:
            traj.append(x)
    if traj is not None:
        return x, np.stack(traj)
    return x


def write_samples_csv(path, samples: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", *[f"x{j}" for j in range(samples.shape[1])]])
        for i, row in enumerate(samples):
            w.writerow([i, *map(repr, map(float, row))])


def write_trajectory_csv(path, trajectory: np.ndarray, steps) -> None:
    """One row per (step, sample); ``steps`` labels trajectory[i] with its schedule step."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "index", *[f"x{j}" for j in range(trajectory.shape[2])]])
        for step, block in zip(steps, trajectory):
            for i, row in enumerate(block):
                w.writerow([int(step), i, *map(repr, map(float, row))])
