"""Vanilla and soft-mixture noise predictors.

The SMD head runs a latent sampler g(eta, x_t, t) -> z and a hypernetwork
f(z, t) whose output is read as per-hidden-layer (scale, shift) modulation of
the base network. f's last layer starts at zero, so a fresh SMD model
predicts exactly what its base network predicts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .forward import NoiseSchedule
from .nn import MlpSpec, ParamStore, init_mlp, join_modulation, mlp_backward, mlp_forward, split_modulation, time_embedding

BASE, LATENT, HYPER = "base.", "latent.", "hyper."


def _steps(t, n: int) -> np.ndarray:
    t = np.asarray(t)
    return np.full(n, int(t)) if t.ndim == 0 else t.astype(int)


@dataclass
class VanillaDenoiser:
    spec: MlpSpec
    params: ParamStore
    num_steps: int

    @property
    def data_dim(self) -> int:
        return self.spec.output_dim

    @classmethod
    def create(cls, data_dim: int, hidden=(128, 128, 128), time_embed_dim: int = 16, num_steps: int = 100, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        spec = MlpSpec(data_dim + time_embed_dim, tuple(hidden), data_dim, "silu", time_embed_dim)
        params = ParamStore()
        init_mlp(spec, params, rng, BASE)
        return cls(spec, params, num_steps)

    def net_input(self, x_t, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        emb = time_embedding(_steps(t, x.shape[0]), self.num_steps, self.spec.time_embed_dim)
        return np.concatenate([x, emb], axis=1)

    def forward(self, x_t, t, modulation=None):
        return mlp_forward(self.spec, self.params, self.net_input(x_t, t), modulation, BASE)


def predict_eps_vanilla(d: VanillaDenoiser, x_t, t) -> np.ndarray:
    """eps_theta([x_t, emb(t)]). ``x_t`` is (D,) or (n, D); ``t`` a model timestep."""
    out, _ = d.forward(x_t, t)
    return out[0] if np.ndim(x_t) == 1 else out


@dataclass
class SmdDenoiser:
    base: VanillaDenoiser
    latent_spec: MlpSpec
    hyper_spec: MlpSpec
    latent_dim: int

    @property
    def params(self) -> ParamStore:
        return self.base.params

    @property
    def data_dim(self) -> int:
        return self.base.data_dim

    @property
    def num_steps(self) -> int:
        return self.base.num_steps

    @classmethod
    def create(
        cls,
        data_dim: int,
        hidden=(128, 128, 128),
        time_embed_dim: int = 16,
        num_steps: int = 100,
        latent_dim: int = 8,
        latent_hidden=(64, 64),
        hyper_hidden=(64,),
        rng=None,
    ):
        rng = np.random.default_rng(0) if rng is None else rng
        base = VanillaDenoiser.create(data_dim, hidden, time_embed_dim, num_steps, rng)
        latent_spec = MlpSpec(latent_dim + data_dim + time_embed_dim, tuple(latent_hidden), latent_dim, "silu", time_embed_dim)
        hyper_spec = MlpSpec(latent_dim + time_embed_dim, tuple(hyper_hidden), base.spec.modulation_dim, "silu", time_embed_dim)
        init_mlp(latent_spec, base.params, rng, LATENT)
        init_mlp(hyper_spec, base.params, rng, HYPER, zero_last=True)
        return cls(base, latent_spec, hyper_spec, latent_dim)

    def vanilla_copy(self) -> VanillaDenoiser:
        """A standalone vanilla model with a copy of this model's base weights."""
        return VanillaDenoiser(self.base.spec, self.params.copy(BASE), self.num_steps)

    def _emb(self, t, n):
        return time_embedding(_steps(t, n), self.num_steps, self.base.spec.time_embed_dim)

    def forward(self, x_t, t, eta):
        """Returns (eps_hat, tapes) for a batch; eta is (n, L)."""
        x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        eta = np.atleast_2d(np.asarray(eta, dtype=np.float64))
        if eta.shape != (x.shape[0], self.latent_dim):
            raise ValueError(f"eta must be ({x.shape[0]}, {self.latent_dim}), got {eta.shape}")
        emb = self._emb(t, x.shape[0])
        z, lt = mlp_forward(self.latent_spec, self.params, np.concatenate([eta, x, emb], axis=1), None, LATENT)
        mod, ht = mlp_forward(self.hyper_spec, self.params, np.concatenate([z, emb], axis=1), None, HYPER)
        out, bt = mlp_forward(self.base.spec, self.params, np.concatenate([x, emb], axis=1), split_modulation(self.base.spec, mod), BASE)
        return out, (lt, ht, bt)

    def backward(self, tapes, output_grad) -> None:
        lt, ht, bt = tapes
        _, mod_grads = mlp_backward(bt, output_grad)
        dhyper_in, _ = mlp_backward(ht, join_modulation(mod_grads))
        mlp_backward(lt, dhyper_in[:, : self.latent_dim])


def sample_latent(d: SmdDenoiser, eta, x_t, t) -> np.ndarray:
    """z_t = g(eta, x_t, t)."""
    single = np.ndim(x_t) == 1
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    e = np.atleast_2d(np.asarray(eta, dtype=np.float64))
    z, _ = mlp_forward(d.latent_spec, d.params, np.concatenate([e, x, d._emb(t, x.shape[0])], axis=1), None, LATENT)
    return z[0] if single else z


def predict_eps_smd(d: SmdDenoiser, x_t, t, eta) -> np.ndarray:
    out, _ = d.forward(x_t, t, eta)
    return out[0] if np.ndim(x_t) == 1 else out


def predict_eps(model, x_t, t, eta=None) -> np.ndarray:
    if isinstance(model, SmdDenoiser):
        return predict_eps_smd(model, x_t, t, eta)
    return predict_eps_vanilla(model, x_t, t)


def mean_from_eps(x_t, t, eps_hat, s: NoiseSchedule) -> np.ndarray:
    """(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)."""
    s.check_step(t)
    idx = np.asarray(t) - 1
    a, b, ab = s.alpha[idx], s.beta[idx], s.alpha_bar[idx]
    if np.ndim(a):
        a, b, ab = a[:, None], b[:, None], ab[:, None]
    return (np.asarray(x_t) - b / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(a)


def model_to_dict(model) -> dict:
    if isinstance(model, SmdDenoiser):
        return {
            "kind": "smd",
            "num_steps": model.num_steps,
            "latent_dim": model.latent_dim,
            "base": asdict(model.base.spec),
            "latent": asdict(model.latent_spec),
            "hyper": asdict(model.hyper_spec),
        }
    return {"kind": "vanilla", "num_steps": model.num_steps, "base": asdict(model.spec)}


def model_from_dict(desc: dict):
    """Rebuild a model skeleton (zero parameters) from its JSON description."""

    def spec(d):
        return MlpSpec(d["input_dim"], tuple(d["hidden_dims"]), d["output_dim"], d["activation"], d["time_embed_dim"])

    def zeros(sp: MlpSpec, params: ParamStore, prefix: str):
        for i, (fi, fo) in enumerate(sp.layer_dims):
            params.add(f"{prefix}W{i}", np.zeros((fi, fo)))
            params.add(f"{prefix}b{i}", np.zeros(fo))

    params = ParamStore()
    base_spec = spec(desc["base"])
    zeros(base_spec, params, BASE)
    base = VanillaDenoiser(base_spec, params, int(desc["num_steps"]))
    if desc["kind"] == "vanilla":
        return base
    if desc["kind"] != "smd":
        raise ValueError(f"unknown model kind {desc['kind']!r}")
    latent, hyper = spec(desc["latent"]), spec(desc["hyper"])
    zeros(latent, params, LATENT)
    zeros(hyper, params, HYPER)
    return SmdDenoiser(base, latent, hyper, int(desc["latent_dim"]))


def save_sidecar(path, model) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model), f, indent=2)
