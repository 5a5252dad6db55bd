"""Server-side hypernetwork mapping a client embedding to a full parameter vector.

``theta = W2 @ relu(W1 @ e + b1) + b2``, with all four blocks packed into one
flat vector ``phi`` in the order W1 (d x hidden), b1, W2 (hidden x P), b2.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .nn import NetSpec, init_params


@dataclass
class HypernetState:
    phi: np.ndarray
    embed_dim: int
    hidden: int
    target: NetSpec

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden < 1:
            raise InputError("embed_dim and hidden must be >= 1")
        want = hypernet_size(self.embed_dim, self.hidden, self.target.n_params)
        if self.phi.shape != (want,):
            raise ShapeError(f"phi has shape {self.phi.shape}, expected ({want},)")

    @property
    def n_out(self) -> int:
        return self.target.n_params

    def blocks(self, vec: np.ndarray | None = None):
        """Views (W1, b1, W2, b2) into ``vec`` (defaults to ``phi``)."""
        vec = self.phi if vec is None else vec
        d, h, P = self.embed_dim, self.hidden, self.n_out
        o1 = d * h
        o2 = o1 + h
        o3 = o2 + h * P
        return vec[:o1].reshape(d, h), vec[o1:o2], vec[o2:o3].reshape(h, P), vec[o3 : o3 + P]

    def copy(self) -> "HypernetState":
        return HypernetState(self.phi.copy(), self.embed_dim, self.hidden, self.target)


@dataclass(frozen=True)
class ClientEmbedding:
    client_id: int
    vector: np.ndarray


def hypernet_size(embed_dim: int, hidden: int, n_out: int) -> int:
    return embed_dim * hidden + hidden + hidden * n_out + n_out


def init_hypernet(
    target: NetSpec, embed_dim: int, hidden: int, rng: np.random.Generator, head_scale: float = 0.1
) -> HypernetState:
    """Output bias starts at a Glorot-initialized target network; the output
    weights are small so early generated models are perturbations of it."""
    phi = np.zeros(hypernet_size(embed_dim, hidden, target.n_params))
    state = HypernetState(phi, embed_dim, hidden, target)
    W1, b1, W2, b2 = state.blocks()
    bound = math.sqrt(6.0 / (embed_dim + hidden))
    W1[...] = rng.uniform(-bound, bound, size=W1.shape)
    W2[...] = rng.uniform(-head_scale, head_scale, size=W2.shape) / math.sqrt(hidden)
    b2[...] = init_params(target, rng)
    return state


def _check_embedding(h: HypernetState, e) -> np.ndarray:
    v = e.vector if isinstance(e, ClientEmbedding) else np.asarray(e, dtype=np.float64)
    if v.shape != (h.embed_dim,):
        raise ShapeError(f"embedding has shape {v.shape}, expected ({h.embed_dim},)")
    return v


def generate(h: HypernetState, e) -> np.ndarray:
    v = _check_embedding(h, e)
    W1, b1, W2, b2 = h.blocks()
    a = np.maximum(v @ W1 + b1, 0.0)
    return a @ W2 + b2


def backprop(h: HypernetState, e, delta_theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pull a cotangent on the generated parameters back to ``phi`` and ``e``."""
    v = _check_embedding(h, e)
    delta_theta = np.asarray(delta_theta, dtype=np.float64)
    if delta_theta.shape != (h.n_out,):
        raise ShapeError(f"delta_theta has shape {delta_theta.shape}, expected ({h.n_out},)")
    W1, b1, W2, b2 = h.blocks()
    z = v @ W1 + b1
    a = np.maximum(z, 0.0)
    grad = np.zeros_like(h.phi)
    gW1, gb1, gW2, gb2 = h.blocks(grad)
    gW2[...] = np.outer(a, delta_theta)
    gb2[...] = delta_theta
    dz = (W2 @ delta_theta) * (z > 0.0)
    gW1[...] = np.outer(v, dz)
    gb1[...] = dz
    return grad, W1 @ dz


def client_seed(seed: int, client_id) -> list[int]:
    cid = client_id if isinstance(client_id, int) else zlib.crc32(str(client_id).encode())
    return [int(seed), int(cid)]


def init_embedding(client_id, d: int, seed: int) -> ClientEmbedding:
    """Entries i.i.d. normal with std 1/sqrt(d), seeded by (seed, client id)."""
    if d < 1:
        raise InputError("embedding dimension must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(client_seed(seed, client_id)))
    return ClientEmbedding(client_id, rng.normal(0.0, 1.0 / math.sqrt(d), size=d))
