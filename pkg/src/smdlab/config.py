"""Experiment configuration: one JSON document with dotted-path overrides.

Every section is a dataclass; unknown keys and invalid values raise
:class:`ConfigError` naming the offending field before any compute starts.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .denoiser import SmdDenoiser, VanillaDenoiser
from .forward import NOISE_MODES, SIGMA_MODES, NoiseSchedule, default_beta_range, make_schedule, schedule_from_betas
from .gmm import GaussianMixture, grid_mixture
from .metrics import Theorem1Config
from .sampling import SampleRun
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    T: int = 100
    beta_min: float | None = None
    beta_max: float | None = None
    sigma_mode: str = "beta"


@dataclass
class DataSection:
    kind: str = "grid"
    grid_size: int = 7
    spacing: float = 2.0
    component_std: float = 0.1
    K: int | None = None
    weights: list | None = None
    means: list | None = None
    covs: list | None = None


@dataclass
class ModelSection:
    kind: str = "vanilla"
    hidden: list = field(default_factory=lambda: [128, 128, 128])
    time_embed_dim: int = 16
    latent_dim: int = 8
    latent_hidden: list = field(default_factory=lambda: [64, 64])
    hyper_hidden: list = field(default_factory=lambda: [64])


@dataclass
class TrainSection:
    steps: int = 20000
    batch_size: int = 256
    lr: float = 2e-4
    n_eta: int = 1
    weight_mode: str = "simple"
    seed: int | None = None
    eval_every: int = 1000
    val_batch: int = 2048


@dataclass
class SampleSection:
    n: int = 10000
    keep_trajectory: bool = False
    seed: int | None = None
    T_used: int | None = None
    noise_mode: str = "sqrt"


@dataclass
class MetricsSection:
    n_outer: int = 256
    n_inner: int = 256
    steps: list | None = None
    n_samples: int = 10000


@dataclass
class TheoremSection:
    lambda_values: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    base_means: list = field(default_factory=lambda: [[-1.0], [1.0]])
    weights: list = field(default_factory=lambda: [0.5, 0.5])
    delta: list = field(default_factory=lambda: [1.0, 1.0])
    t: int = 1
    beta: float | None = 0.1
    n_outer: int = 4000
    n_inner: int = 256


SECTIONS = {
    "schedule": ScheduleSection,
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "sample": SampleSection,
    "metrics": MetricsSection,
    "theorem": TheoremSection,
}


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{where}: {msg}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    theorem: TheoremSection = field(default_factory=TheoremSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be a JSON object")
        kwargs = {}
        for key, value in doc.items():
            if key == "seed":
                kwargs["seed"] = value
                continue
            if key not in SECTIONS:
                raise ConfigError(f"{key}: unknown section (expected one of {sorted(SECTIONS)} or seed)")
            section = SECTIONS[key]
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: must be an object")
            known = {f.name for f in fields(section)}
            for sub in value:
                if sub not in known:
                    raise ConfigError(f"{key}.{sub}: unknown key")
            kwargs[key] = section(**value)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        _require(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a non-negative integer")
        sc = self.schedule
        _require(isinstance(sc.T, int) and sc.T >= 1, "schedule.T", "must be an integer >= 1")
        _require(sc.sigma_mode in SIGMA_MODES, "schedule.sigma_mode", f"must be one of {SIGMA_MODES}")
        lo, hi = self.beta_range()
        _require(0 < lo <= hi < 1, "schedule.beta_min", f"need 0 < beta_min <= beta_max < 1, got ({lo}, {hi})")

        d = self.data
        _require(d.kind in ("grid", "custom"), "data.kind", "must be grid or custom")
        if d.kind == "grid":
            _require(isinstance(d.grid_size, int) and d.grid_size >= 1, "data.grid_size", "must be an integer >= 1")
            _require(d.spacing > 0, "data.spacing", "must be positive")
            _require(d.component_std > 0, "data.component_std", "must be positive")
        else:
            _require(bool(d.means), "data.means", "required for custom data")
            if d.K is not None:
                _require(d.K == len(d.means), "data.K", f"is {d.K} but {len(d.means)} means were given")
        try:
            self.build_data()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"data: {exc}") from exc

        m = self.model
        _require(m.kind in ("vanilla", "smd"), "model.kind", "must be vanilla or smd")
        for name in ("hidden", "latent_hidden", "hyper_hidden"):
            widths = getattr(m, name)
            _require(
                isinstance(widths, list) and len(widths) >= 1 and all(isinstance(w, int) and w >= 1 for w in widths),
                f"model.{name}",
                "must be a non-empty list of positive integers",
            )
        _require(m.time_embed_dim >= 2 and m.time_embed_dim % 2 == 0, "model.time_embed_dim", "must be even and >= 2")
        _require(m.latent_dim >= 1, "model.latent_dim", "must be >= 1")

        _require(self.train.val_batch >= 1, "train.val_batch", "must be >= 1")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc
        _require(self.sample.T_used is None or self.sample.T_used <= sc.T, "sample.T_used", f"must be <= schedule.T = {sc.T}")
        _require(self.sample.noise_mode in NOISE_MODES, "sample.noise_mode", f"must be one of {NOISE_MODES}")
        try:
            self.sample_run()
        except ValueError as exc:
            raise ConfigError(f"sample: {exc}") from exc

        mt = self.metrics
        _require(mt.n_outer >= 2, "metrics.n_outer", "must be >= 2")
        _require(mt.n_inner >= 2, "metrics.n_inner", "must be >= 2")
        _require(mt.n_samples >= 1000, "metrics.n_samples", "must be >= 1000")
        if mt.steps is not None:
            _require(all(isinstance(t, int) and 1 <= t <= sc.T for t in mt.steps), "metrics.steps", f"entries must lie in 1..{sc.T}")

        th = self.theorem
        _require(th.beta is None or 0 < th.beta < 1, "theorem.beta", "must lie in (0, 1) or be null")
        _require(th.n_outer >= 2 and th.n_inner >= 2, "theorem.n_outer", "n_outer and n_inner must be >= 2")
        try:
            self.theorem_config().check(self.theorem_schedule())
        except ValueError as exc:
            raise ConfigError(f"theorem: {exc}") from exc

    def beta_range(self) -> tuple[float, float]:
        lo, hi = default_beta_range(self.schedule.T)
        sc = self.schedule
        return (lo if sc.beta_min is None else sc.beta_min, hi if sc.beta_max is None else sc.beta_max)

    def build_schedule(self) -> NoiseSchedule:
        lo, hi = self.beta_range()
        return make_schedule(self.schedule.T, lo, hi, self.schedule.sigma_mode)

    def build_data(self) -> GaussianMixture:
        d = self.data
        if d.kind == "grid":
            return grid_mixture(d.grid_size, d.spacing, d.component_std)
        means = np.atleast_2d(np.asarray(d.means, dtype=np.float64))
        k, dim = means.shape
        weights = np.full(k, 1.0 / k) if d.weights is None else np.asarray(d.weights, dtype=np.float64)
        if d.covs is None:
            covs = np.broadcast_to(np.eye(dim), (k, dim, dim))
        else:
            _require(len(d.covs) == k, "data.covs", f"need {k} entries")
            covs = [np.asarray(c, dtype=np.float64) for c in d.covs]
        return GaussianMixture.from_arrays(weights, means, covs)

    def train_seed(self) -> int:
        return self.seed if self.train.seed is None else self.train.seed

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.steps, t.batch_size, t.lr, t.n_eta, t.weight_mode, self.train_seed(), t.eval_every)

    def sample_run(self) -> SampleRun:
        s = self.sample
        seed = self.seed if s.seed is None else s.seed
        return SampleRun(s.n, s.keep_trajectory, seed, s.T_used, s.noise_mode)

    def build_model(self, data_dim: int):
        m = self.model
        rng = np.random.default_rng([self.train_seed(), 7])
        if m.kind == "vanilla":
            return VanillaDenoiser.create(data_dim, tuple(m.hidden), m.time_embed_dim, self.schedule.T, rng)
        return SmdDenoiser.create(
            data_dim, tuple(m.hidden), m.time_embed_dim, self.schedule.T, m.latent_dim, tuple(m.latent_hidden), tuple(m.hyper_hidden), rng
        )

    def theorem_config(self) -> Theorem1Config:
        th = self.theorem
        return Theorem1Config(list(th.lambda_values), list(th.delta), [list(r) for r in th.base_means], list(th.weights), th.t)

    def theorem_schedule(self) -> NoiseSchedule:
        """Constant-beta chain of length t when theorem.beta is set, else the experiment schedule."""
        th = self.theorem
        if th.beta is None:
            return self.build_schedule()
        _require(isinstance(th.t, int) and th.t >= 1, "theorem.t", "must be an integer >= 1")
        return schedule_from_betas(np.full(th.t, th.beta), self.schedule.sigma_mode)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Return a copy of ``doc`` with each ``a.b=value`` applied; values parse as JSON when they can."""
    out = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(raw)
    return out


def load_config(path=None, overrides: list[str] | None = None, seed: int | None = None) -> ExperimentConfig:
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    doc = apply_overrides(doc, overrides or [])
    if seed is not None:
        doc["seed"] = seed
    return ExperimentConfig.from_dict(doc)


__all__ = ["ConfigError", "ExperimentConfig", "SECTIONS", "apply_overrides", "load_config"]
