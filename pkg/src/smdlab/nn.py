"""Dense SiLU networks with hand-written reverse mode, Adam, and checkpoint I/O."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

CHECKPOINT_MAGIC = b"SMD1"
CHECKPOINT_VERSION = 1


class StaleTapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class ParamStore:
    """Ordered name -> float64 array map with gradient and Adam moment slots."""

    def __init__(self):
        self.entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        # bumped on every in-place update; tapes remember it
        self.version = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.entries[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.entries if n.startswith(prefix)]

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.entries[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self.entries[name].shape}")
        self.entries[name][...] = value
        self.version += 1

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self, prefix: str = "") -> "ParamStore":
        out = ParamStore()
        for n in self.names(prefix):
            out.add(n, self.entries[n])
            out.m[n][...] = self.m[n]
            out.v[n][...] = self.v[n]
        out.step = self.step
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.entries.values()])


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "silu"
    time_embed_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all MLP dims must be >= 1")
        if self.activation != "silu":
            raise ValueError("only silu activation is supported")
        if self.time_embed_dim < 0:
            raise ValueError("time_embed_dim must be >= 0")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def modulation_dim(self) -> int:
        return 2 * sum(self.hidden_dims)


def init_mlp(spec: MlpSpec, params: ParamStore, rng: np.random.Generator, prefix: str = "", zero_last: bool = False):
    """Normal(0, 1/fan_in) weights, zero biases."""
    n = len(spec.layer_dims)
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        if zero_last and i == n - 1:
            w[...] = 0.0
        params.add(f"{prefix}W{i}", w)
        params.add(f"{prefix}b{i}", np.zeros(fan_out))


@dataclass
class Tape:
    spec: MlpSpec
    params: ParamStore
    prefix: str
    version: int
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    act: list[np.ndarray] = field(default_factory=list)
    modulation: list[tuple[np.ndarray, np.ndarray]] | None = None
    single: bool = False


def split_modulation(spec: MlpSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Cut an (n, 2*sum(hidden)) block into per-layer (scale, shift) pairs."""
    flat = np.atleast_2d(flat)
    if flat.shape[1] != spec.modulation_dim:
        raise ShapeError(f"modulation width {flat.shape[1]} != {spec.modulation_dim}")
    out, pos = [], 0
    for w in spec.hidden_dims:
        out.append((flat[:, pos : pos + w], flat[:, pos + w : pos + 2 * w]))
        pos += 2 * w
    return out


def join_modulation(parts: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Inverse of :func:`split_modulation`."""
    n = parts[0][0].shape[0]
    out = np.empty((n, sum(2 * a.shape[1] for a, _ in parts)))
    pos = 0
    for a, b in parts:
        w = a.shape[1]
        out[:, pos : pos + w] = a
        out[:, pos + w : pos + 2 * w] = b
        pos += 2 * w
    return out


def mlp_forward(spec: MlpSpec, params: ParamStore, x, modulation=None, prefix: str = ""):
    """Affine+SiLU stack; with modulation, h <- silu(a) * (1 + scale) + shift per hidden layer.

    ``x`` is (D,) or (n, D). ``modulation`` is a list of (scale, shift) pairs,
    one per hidden layer, each (n, width) or (width,).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x.reshape(1, -1) if single else x
    if h.shape[1] != spec.input_dim:
        raise ShapeError(f"input width {h.shape[1]} != {spec.input_dim}")
    n = h.shape[0]
    if modulation is not None:
        if len(modulation) != len(spec.hidden_dims):
            raise ShapeError("one (scale, shift) pair per hidden layer required")
        mods = []
        for (sc, sh), w in zip(modulation, spec.hidden_dims):
            sc = np.broadcast_to(np.asarray(sc, dtype=np.float64), (n, w))
            sh = np.broadcast_to(np.asarray(sh, dtype=np.float64), (n, w))
            mods.append((sc, sh))
        modulation = mods
    tape = Tape(spec, params, prefix, params.version, modulation=modulation, single=single)
    last = len(spec.layer_dims) - 1
    for i in range(last):
        tape.inputs.append(h)
        a = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        if modulation is None:
            act = kernels.silu(a)
            h = act
        else:
            act, h = kernels.silu_film(a, *modulation[i])
        tape.pre.append(a)
        tape.act.append(act)
    tape.inputs.append(h)
    out = h @ params[f"{prefix}W{last}"] + params[f"{prefix}b{last}"]
    return (out[0] if single else out), tape


def mlp_backward(tape: Tape, output_grad):
    """Accumulate d(sum(out * output_grad))/dparams into the store.

    Returns (input_grad, modulation_grads) where modulation_grads mirrors the
    forward modulation list, or is None for an unmodulated pass.
    """
    params, spec, prefix = tape.params, tape.spec, tape.prefix
    if params.version != tape.version:
        raise StaleTapeError("parameters changed since the forward pass")
    g = np.asarray(output_grad, dtype=np.float64)
    g = g.reshape(1, -1) if tape.single else g
    last = len(spec.layer_dims) - 1
    params.grads[f"{prefix}W{last}"] += tape.inputs[last].T @ g
    params.grads[f"{prefix}b{last}"] += g.sum(axis=0)
    dh = g @ params[f"{prefix}W{last}"].T
    mod_grads = [] if tape.modulation is not None else None
    for i in range(last - 1, -1, -1):
        if tape.modulation is None:
            da = kernels.silu_grad(tape.pre[i], dh)
        else:
            da, dscale = kernels.silu_film_grad(tape.pre[i], tape.act[i], tape.modulation[i][0], dh)
            mod_grads.append((dscale, dh))
        params.grads[f"{prefix}W{i}"] += tape.inputs[i].T @ da
        params.grads[f"{prefix}b{i}"] += da.sum(axis=0)
        dh = da @ params[f"{prefix}W{i}"].T
    if mod_grads is not None:
        mod_grads.reverse()
    if tape.single:
        dh = dh[0]
        if mod_grads is not None:
            mod_grads = [(a[0], b[0]) for a, b in mod_grads]
    return dh, mod_grads


def adam_step(params: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, step_index: int | None = None):
    """Bias-corrected Adam update in place; ``step_index`` is 1-based."""
    b1, b2 = betas
    k = params.step + 1 if step_index is None else int(step_index)
    c1 = 1.0 - b1**k
    c2 = 1.0 - b2**k
    for name, p in params.entries.items():
        kernels.adam_update(p, params.grads[name], params.m[name], params.v[name], lr, b1, b2, c1, c2, eps)
    params.step = k
    params.version += 1
    return params


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t/T; (dim,) for scalar t, (n, dim) for an array.

    Frequencies run geometrically from half a turn over [0, 1] (which keeps
    the lowest pair injective in t) up to T/8 turns.
    """
    if dim % 2 or dim < 2:
        raise ValueError("time embedding dim must be even and >= 2")
    half = dim // 2
    lo, hi = 0.5, max(T / 8.0, 0.5)
    freqs = lo * (hi / lo) ** (np.arange(half) / max(half - 1, 1))
    t_arr = np.asarray(t, dtype=np.float64)
    ang = 2.0 * np.pi * (t_arr[..., None] / T) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def save_checkpoint(path, params: ParamStore) -> None:
    """Write entries as: magic, u32 version, then per entry u32 name length,
    name bytes, u32 rank, u32 dims, little-endian f64 payload."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, value in params.entries.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an SMD1 checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return out


def save_training_state(path, params: ParamStore) -> None:
    """Parameters plus Adam moments and step counter, in the same format."""
    state = ParamStore()
    for n, v in params.entries.items():
        state.add(n, v)
    for n in params.entries:
        state.add(f"adam.m/{n}", params.m[n])
        state.add(f"adam.v/{n}", params.v[n])
    state.add("adam.step", np.array(float(params.step)))
    save_checkpoint(path, state)


def load_into(params: ParamStore, entries) -> ParamStore:
    """Copy checkpoint entries (and Adam state if present) into a matching store."""
    for n in params.entries:
        if n not in entries:
            raise KeyError(f"checkpoint lacks parameter {n!r}")
        params.entries[n][...] = entries[n]
        if f"adam.m/{n}" in entries:
            params.m[n][...] = entries[f"adam.m/{n}"]
            params.v[n][...] = entries[f"adam.v/{n}"]
    if "adam.step" in entries:
        params.step = int(entries["adam.step"])
    params.version += 1
    return params
