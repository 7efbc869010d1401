"""Fully connected autoencoder, reconstruction loss, and Adam with step decay.

Layers are ``(W, b)`` pairs with ``W`` of shape ``(in, out)`` and ``b`` of
shape ``(1, out)``. Hidden layers use ReLU; the latent and output layers are
linear. The same forward code runs on plain arrays and on tape variables.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, as_matrix
from .errors import ContractError, ShapeError

MNIST_DIMS = (784, 500, 250, 10)


def _relu(x):
    return ad.relu(x) if isinstance(x, Var) else np.maximum(x, 0.0)


def _forward(layers, x):
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        x = x @ w + b
        if i < last:
            x = _relu(x)
    return x


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class Autoencoder:
    """Encoder through ``layer_dims`` and a mirrored decoder back to the input."""

    layer_dims: tuple[int, ...]
    encoder: list[tuple[np.ndarray, np.ndarray]]
    decoder: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        dims = self.layer_dims
        if len(dims) < 2:
            raise ShapeError("need at least input and latent dimensions")
        expected = list(zip(dims[:-1], dims[1:])) + list(zip(dims[::-1][:-1], dims[::-1][1:]))
        layers = self.encoder + self.decoder
        if len(layers) != len(expected):
            raise ShapeError(f"expected {len(expected)} layers, got {len(layers)}")
        for (w, b), (i, o) in zip(layers, expected):
            if w.shape != (i, o) or b.shape != (1, o):
                raise ShapeError(f"layer shapes {w.shape}/{b.shape} do not chain as {i}->{o}")

    @classmethod
    def init(cls, layer_dims: Sequence[int] = MNIST_DIMS, seed: int = 0) -> "Autoencoder":
        """Glorot-uniform weights and zero biases from a seeded generator."""
        rng = np.random.default_rng(seed)
        dims = tuple(layer_dims)
        rev = dims[::-1]
        enc = [(_glorot(rng, i, o), np.zeros((1, o))) for i, o in zip(dims[:-1], dims[1:])]
        dec = [(_glorot(rng, i, o), np.zeros((1, o))) for i, o in zip(rev[:-1], rev[1:])]
        return cls(dims, enc, dec)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def latent_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[np.ndarray]:
        """Flat list: encoder ``W0, b0, ...`` then decoder in the same order."""
        return [p for layer in self.encoder + self.decoder for p in layer]

    def with_parameters(self, flat: Sequence[np.ndarray]) -> "Autoencoder":
        flat = [as_matrix(p) for p in flat]
        pairs = list(zip(flat[0::2], flat[1::2]))
        n_enc = len(self.encoder)
        return Autoencoder(self.layer_dims, pairs[:n_enc], pairs[n_enc:])

    def on_tape(self, tape: Tape) -> list[Var]:
        """Register every parameter as a tape leaf, in :meth:`parameters` order."""
        return [tape.leaf(p) for p in self.parameters()]

    def _split(self, flat):
        pairs = list(zip(flat[0::2], flat[1::2]))
        n_enc = len(self.encoder)
        return pairs[:n_enc], pairs[n_enc:]

    def encode(self, params: Sequence[Var], x: Var) -> Var:
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"batch width {x.shape[1]} != input dim {self.input_dim}")
        return _forward(self._split(params)[0], x)

    def decode(self, params: Sequence[Var], z: Var) -> Var:
        if z.shape[1] != self.latent_dim:
            raise ShapeError(f"embedding width {z.shape[1]} != latent dim {self.latent_dim}")
        return _forward(self._split(params)[1], z)

    def reconstruction_from_embedding(self, params: Sequence[Var], x: Var, z: Var) -> Var:
        diff = x - self.decode(params, z)
        return ad.total_sum(diff * diff)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())


def encoder_forward(params: Autoencoder, batch) -> np.ndarray:
    batch = as_matrix(batch)
    if batch.shape[1] != params.input_dim:
        raise ShapeError(f"batch width {batch.shape[1]} != input dim {params.input_dim}")
    return _forward(params.encoder, batch)


def decoder_forward(params: Autoencoder, embedded) -> np.ndarray:
    embedded = as_matrix(embedded)
    if embedded.shape[1] != params.latent_dim:
        raise ShapeError(f"embedding width {embedded.shape[1]} != latent dim {params.latent_dim}")
    return _forward(params.decoder, embedded)


def reconstruction_loss(params: Autoencoder, batch) -> float:
    """Sum over the batch of squared reconstruction errors (not averaged)."""
    batch = as_matrix(batch)
    diff = batch - decoder_forward(params, encoder_forward(params, batch))
    return float(np.sum(diff * diff))


def reconstruction_loss_on_tape(params: Autoencoder, batch) -> tuple[Var, list[Var], Tape]:
    tape = Tape()
    leaves = params.on_tape(tape)
    x = tape.constant(batch)
    z = params.encode(leaves, x)
    return params.reconstruction_from_embedding(leaves, x, z), leaves, tape


# -- optimizer -----------------------------------------------------------------

@dataclass(frozen=True)
class StepDecay:
    """Multiply the learning rate by ``factor`` every ``every`` epochs."""

    factor: float = 0.5
    every: int = 40

    def __call__(self, epoch: int) -> float:
        if self.every <= 0:
            return 1.0
        return self.factor ** (epoch // self.every)


@dataclass
class AdamState:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    decay: StepDecay = field(default_factory=StepDecay)
    step_count: int = 0
    first_moment: Optional[list[np.ndarray]] = None
    second_moment: Optional[list[np.ndarray]] = None

    def lr(self, epoch: int) -> float:
        return self.base_lr * self.decay(epoch)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              epoch: int = 0) -> list[np.ndarray]:
    """One bias-corrected Adam update. Moments in ``state`` are updated in place;
    the returned parameters are new arrays."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if state.first_moment is None:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr = state.lr(epoch)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.first_moment[i] + (1.0 - b1) * g
        v = b2 * state.second_moment[i] + (1.0 - b2) * (g * g)
        state.first_moment[i], state.second_moment[i] = m, v
        out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat))
    return out


# -- checkpoints ---------------------------------------------------------------
#
# Layout: one line of UTF-8 JSON header terminated by b"\n", followed by the
# parameters as little-endian float64 in Autoencoder.parameters() order, then
# the cluster centers (row-major) when present.

def save_checkpoint(path, params: Autoencoder, centers: Optional[np.ndarray] = None,
                    proportions: Optional[np.ndarray] = None, seed: Optional[int] = None,
                    epoch: Optional[int] = None) -> None:
    arrays = params.parameters()
    header = {
        "format": "sinkclust-checkpoint",
        "version": 1,
        "layer_dims": list(params.layer_dims),
        "seed": seed,
        "epoch": epoch,
        "centers_shape": None if centers is None else list(np.shape(centers)),
        "proportions": None if proportions is None else [float(x) for x in proportions],
    }
    if centers is not None:
        arrays = arrays + [as_matrix(centers)]
    payload = np.concatenate([a.reshape(-1) for a in arrays]).astype("<f8")
    header["payload_floats"] = int(payload.size)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload.tobytes())


def load_checkpoint(path) -> tuple[Autoencoder, Optional[np.ndarray], dict]:
    """Return ``(autoencoder, centers or None, header)``."""
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ContractError(f"{path}: missing checkpoint header")
    header = json.loads(head.decode("utf-8"))
    if header.get("format") != "sinkclust-checkpoint":
        raise ContractError(f"{path}: not a sinkclust checkpoint")
    data = np.frombuffer(body, dtype="<f8")
    if data.size != header["payload_floats"]:
        raise ContractError(f"{path}: expected {header['payload_floats']} floats, found {data.size}")
    template = Autoencoder.init(header["layer_dims"], seed=0)
    flat, offset = [], 0
    for p in template.parameters():
        flat.append(data[offset:offset + p.size].reshape(p.shape).astype(np.float64))
        offset += p.size
    centers = None
    if header.get("centers_shape"):
        shape = tuple(header["centers_shape"])
        centers = data[offset:offset + shape[0] * shape[1]].reshape(shape).astype(np.float64)
    return template.with_parameters(flat), centers, header
