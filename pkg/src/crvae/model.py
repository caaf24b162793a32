"""Encoder/decoder with a Gaussian latent and two decoder heads.

The trunk is a stack of affine layers over the flattened grid. The encoder
sees two channels (sparse occupancy evidence and its validity mask) and emits
``mu`` and ``logvar``; the decoder maps a latent sample to an occupancy grid
(sigmoid) and a curvature grid (linear) through two separate output layers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ad

CKPT_MAGIC = b"CKPT1"


@dataclass(frozen=True)
class ModelConfig:
    grid_n: int = 16
    latent_dim: int = 32
    encoder_widths: tuple = (256, 128)
    decoder_widths: tuple = (128, 256)
    activation: str = "relu"
    logvar_min: float = -20.0
    logvar_max: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be at least 2")
        if self.grid_n < 3:
            raise ValueError("grid_n must be at least 3")
        if any(w < 1 for w in self.encoder_widths + self.decoder_widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.logvar_min < self.logvar_max:
            raise ValueError("logvar_min must be below logvar_max")

    @property
    def voxels(self) -> int:
        return self.grid_n ** 3


def layer_shapes(config: ModelConfig) -> list[tuple[str, int, int]]:
    """(name, fan_in, fan_out) for every affine layer, in parameter order."""
    layers = []
    width = 2 * config.voxels
    for i, w in enumerate(config.encoder_widths):
        layers.append((f"enc{i}", width, w))
        width = w
    layers.append(("enc_mu", width, config.latent_dim))
    layers.append(("enc_logvar", width, config.latent_dim))
    width = config.latent_dim
    for i, w in enumerate(config.decoder_widths):
        layers.append((f"dec{i}", width, w))
        width = w
    layers.append(("head_occ", width, config.voxels))
    layers.append(("head_curv", width, config.voxels))
    return layers


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases."""
    params = {}
    for name, fan_in, fan_out in layer_shapes(config):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{name}.b"] = np.zeros(fan_out)
    return params


def parameter_count(config: ModelConfig) -> int:
    return sum(fi * fo + fo for _, fi, fo in layer_shapes(config))


def attach(tape: ad.Tape, params: dict[str, np.ndarray]) -> dict[str, ad.Tensor]:
    return {k: tape.watch(v) for k, v in params.items()}


def _as_params(params) -> dict[str, ad.Tensor]:
    return {k: v if isinstance(v, ad.Tensor) else ad.Tensor._wrap(v) for k, v in params.items()}


def _act(config: ModelConfig):
    return ad.relu if config.activation == "relu" else ad.tanh


def _layer(p, name, x):
    return ad.affine(x, p[f"{name}.w"], p[f"{name}.b"])


def encode(config: ModelConfig, params, observation):
    """Map a ``(batch, 2, N, N, N)`` observation to ``(mu, logvar)``."""
    obs = observation if isinstance(observation, ad.Tensor) else ad.Tensor(observation)
    n = config.grid_n
    if obs.ndim == 4:
        obs = obs.reshape(1, *obs.shape)
    if obs.shape[1:] != (2, n, n, n):
        raise ad.ShapeError(f"observation must be (batch, 2, {n}, {n}, {n}), got {obs.shape}")
    if np.isnan(obs.data).any():
        raise ValueError("observation contains NaN")
    p = _as_params(params)
    act = _act(config)
    h = obs.reshape(obs.shape[0], 2 * config.voxels)
    for i in range(len(config.encoder_widths)):
        h = act(_layer(p, f"enc{i}", h))
    mu = _layer(p, "enc_mu", h)
    logvar = ad.clamp(_layer(p, "enc_logvar", h), config.logvar_min, config.logvar_max)
    return mu, logvar


def reparameterize(mu, logvar, rng: np.random.Generator | None = None, eps=None):
    """``mu + exp(logvar / 2) * eps``; ``eps`` is drawn from ``rng`` unless given."""
    if mu.shape != logvar.shape:
        raise ad.ShapeError(f"reparameterize: mu {mu.shape} vs logvar {logvar.shape}")
    if eps is None:
        if rng is None:
            raise ValueError("reparameterize needs rng or eps")
        eps = rng.standard_normal(mu.shape)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), mu.shape)
    return mu + ad.exp(logvar * 0.5) * ad.Tensor(eps)


def decode(config: ModelConfig, params, z):
    """Latent ``(batch, d)`` to ``(occupancy, curvature)``, each ``(batch, N, N, N)``."""
    z = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    if z.shape[1] != config.latent_dim:
        raise ad.ShapeError(f"latent must have {config.latent_dim} dims, got {z.shape}")
    p = _as_params(params)
    act = _act(config)
    h = z
    for i in range(len(config.decoder_widths)):
        h = act(_layer(p, f"dec{i}", h))
    n = config.grid_n
    shape = (z.shape[0], n, n, n)
    occ = ad.sigmoid(_layer(p, "head_occ", h)).reshape(shape)
    curv = _layer(p, "head_curv", h).reshape(shape)
    return occ, curv


def forward(config: ModelConfig, params, observation, rng=None, eps=None):
    """encode, sample, decode. Returns ``(occupancy, curvature, mu, logvar)``."""
    mu, logvar = encode(config, params, observation)
    z = reparameterize(mu, logvar, rng=rng, eps=eps)
    occ, curv = decode(config, params, z)
    return occ, curv, mu, logvar


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, header: dict, params: dict[str, np.ndarray]) -> None:
    """Write ``CKPT1`` + header lines + name-prefixed little-endian float64 tensors."""
    text = "".join(f"{k} = {v}\n" for k, v in header.items()).encode()
    out = [CKPT_MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        key = name.encode()
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:5] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a CKPT1 checkpoint")
    pos = 5

    def u32():
        nonlocal pos
        (v,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        return v

    hlen = u32()
    text = raw[pos:pos + hlen].decode()
    pos += hlen
    header = {}
    for line in text.splitlines():
        k, _, v = line.partition(" = ")
        header[k] = v
    params = {}
    for _ in range(u32()):
        klen = u32()
        name = raw[pos:pos + klen].decode()
        pos += klen
        ndim = u32()
        shape = tuple(u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{path}: non-finite values in {name}")
        params[name] = arr.astype(np.float64)
    return header, params
