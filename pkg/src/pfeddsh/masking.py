"""Batch-specific relaxed-binary parameter masks.

A mask holds real logits ``s``; its soft value is ``sigmoid(gamma * s)`` and
its hard value the indicator ``sigmoid(gamma * s) >= 0.5``. Masks train while
their batch is active and are frozen (logits and hardened bits fixed) when
the batch closes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import hypernet
from .errors import ShapeError, StateError
from .nn import NetSpec, loss_and_grads

# keeps sigmoid strictly inside (0, 1) in float64
_LOGIT_CLIP = 36.0
_MAGIC = b"PMSK"


@dataclass
class MaskState:
    batch: int
    logits: np.ndarray
    gamma: float = 10.0
    frozen: bool = False
    hard: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.logits)


def new_mask(batch: int, length: int, gamma: float = 10.0, init_logit: float = 0.0) -> MaskState:
    return MaskState(batch, np.full(length, float(init_logit)), float(gamma))


def reuse_biased_mask(
    batch: int, previous: list[MaskState], length: int, gamma: float = 10.0, reuse_logit: float = 1.0, fresh_logit: float = 0.0
) -> MaskState:
    """Logits start at ``reuse_logit`` where any earlier frozen mask is on."""
    used = np.zeros(length, dtype=bool)
    for m in previous:
        used |= materialize(m, "hard").astype(bool)
    return MaskState(batch, np.where(used, float(reuse_logit), float(fresh_logit)), float(gamma))


def _soft(logits: np.ndarray, gamma: float) -> np.ndarray:
    return expit(np.clip(gamma * logits, -_LOGIT_CLIP, _LOGIT_CLIP))


def materialize(m: MaskState, mode: str = "soft") -> np.ndarray:
    if mode == "soft":
        return _soft(m.logits, m.gamma)
    if mode == "hard":
        if m.frozen and m.hard is not None:
            return m.hard.copy()
        return (m.logits >= 0.0).astype(np.float64)
    raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")


def apply(mask_values: np.ndarray, theta: np.ndarray) -> np.ndarray:
    mask_values = np.asarray(mask_values, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if mask_values.shape != theta.shape:
        raise ShapeError(f"mask length {mask_values.shape} != parameter length {theta.shape}")
    return mask_values * theta


def mask_grads(
    spec: NetSpec,
    h: hypernet.HypernetState,
    e,
    m: MaskState,
    inputs: np.ndarray,
    labels: np.ndarray,
    lam: float,
    stats=None,
    mode: str = "train",
    theta: np.ndarray | None = None,
) -> tuple[np.ndarray, float, float]:
    """Gradient of ``task_loss(sigmoid(gamma*s) * H(e)) + lam * |sigmoid(gamma*s)|_1``
    with respect to the logits ``s``.

    Returns ``(grad_s, task_loss, l1_term)``. ``theta`` may carry a
    precomputed ``H(e)``.
    """
    if m.frozen:
        raise StateError(f"mask of batch {m.batch} is frozen")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if theta is None:
        theta = hypernet.generate(h, e)
    soft = materialize(m, "soft")
    loss, g_hat, _ = loss_and_grads(spec, apply(soft, theta), inputs, labels, stats, mode)
    dsoft = m.gamma * soft * (1.0 - soft)
    grad = dsoft * (theta * g_hat + lam)
    return grad, loss, float(lam * soft.sum())


def update(m: MaskState, grad: np.ndarray, lr: float) -> None:
    """In-place logit step ``s <- s - lr * grad``; rejected on frozen masks."""
    if m.frozen:
        raise StateError(f"mask of batch {m.batch} is frozen")
    if grad.shape != m.logits.shape:
        raise ShapeError("mask gradient length mismatch")
    m.logits -= lr * grad


def freeze(m: MaskState) -> MaskState:
    if m.frozen:
        return m
    logits = m.logits.copy()
    logits.flags.writeable = False
    hard = (logits >= 0.0).astype(np.float64)
    hard.flags.writeable = False
    return replace(m, logits=logits, frozen=True, hard=hard)


def to_bytes(m: MaskState) -> bytes:
    """Header (magic, batch, gamma, length), packed hard bits, float64 logits."""
    hard = materialize(m, "hard").astype(np.uint8)
    return (
        _MAGIC
        + struct.pack("<IdQ?", m.batch, m.gamma, len(m), m.frozen)
        + np.packbits(hard).tobytes()
        + m.logits.astype("<f8").tobytes()
    )


def from_bytes(blob: bytes) -> MaskState:
    if blob[:4] != _MAGIC:
        raise ValueError("not a mask blob")
    batch, gamma, n, frozen = struct.unpack_from("<IdQ?", blob, 4)
    off = 4 + struct.calcsize("<IdQ?")
    nbytes = (n + 7) // 8
    hard = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, off))[:n].astype(np.float64)
    logits = np.frombuffer(blob, "<f8", n, off + nbytes).astype(np.float64)
    m = MaskState(batch, logits, gamma)
    return freeze(m) if frozen else m


def active_fraction(m: MaskState) -> float:
    return float(materialize(m, "hard").mean())


@dataclass
class BatchCapacity:
    batch: int
    active: int
    new: int
    reused: int
    reuse_fraction: float
    neurons_active: int
    neurons_new: int
    neurons_reused: int
    per_layer: dict[int, tuple[int, int, int]]  # layer -> (active, new, reused)


@dataclass
class CapacityReport:
    length: int
    neuron_total: int
    batches: list[BatchCapacity]

    @property
    def total_consumed(self) -> list[int]:
        """Cumulative count of positions ever activated, per batch."""
        out, acc = [], 0
        for b in self.batches:
            acc += b.new
            out.append(acc)
        return out

    def rows(self) -> list[dict]:
        out = []
        for b, total in zip(self.batches, self.total_consumed):
            out.append(
                {
                    "batch": b.batch,
                    "active": b.active,
                    "new": b.new,
                    "reused": b.reused,
                    "reuse_fraction": b.reuse_fraction,
                    "total_consumed": total,
                    "active_fraction": b.active / self.length if self.length else 0.0,
                    "neurons_active": b.neurons_active,
                    "neurons_new": b.neurons_new,
                    "neurons_reused": b.neurons_reused,
                    "neuron_total": self.neuron_total,
                }
            )
        return out


def _neuron_usage(spec: NetSpec, hard: np.ndarray) -> np.ndarray:
    """One flag per dense output unit: on if any incoming weight is on."""
    flags = []
    views = spec.unpack(hard)
    for layer, v in zip(spec.layers, views):
        if layer.kind == "dense":
            flags.append(v[0].any(axis=0))
    return np.concatenate(flags) if flags else np.zeros(0, dtype=bool)


def capacity_report(masks: list[MaskState], spec: NetSpec | None = None) -> CapacityReport:
    if any(not m.frozen for m in masks):
        raise StateError("capacity report needs frozen masks")
    if len({len(m) for m in masks}) > 1:
        raise ShapeError("masks differ in length")
    length = len(masks[0]) if masks else 0
    if spec is not None and spec.n_params != length:
        raise ShapeError("mask length does not match the network")
    layer_of = spec.layer_of() if spec is not None else np.zeros(length, dtype=np.int64)
    seen = np.zeros(length, dtype=bool)
    seen_neurons = None
    rows = []
    neuron_total = 0
    for m in masks:
        on = materialize(m, "hard").astype(bool)
        reused = on & seen
        per_layer = {}
        for li in np.unique(layer_of):
            sel = layer_of == li
            a, r = int(on[sel].sum()), int(reused[sel].sum())
            per_layer[int(li)] = (a, a - r, r)
        if spec is not None:
            nu = _neuron_usage(spec, on.astype(np.float64))
            neuron_total = len(nu)
            if seen_neurons is None:
                seen_neurons = np.zeros_like(nu)
            n_reused = nu & seen_neurons
            n_stats = (int(nu.sum()), int(nu.sum() - n_reused.sum()), int(n_reused.sum()))
            seen_neurons |= nu
        else:
            n_stats = (0, 0, 0)
        active, n_re = int(on.sum()), int(reused.sum())
        rows.append(BatchCapacity(m.batch, active, active - n_re, n_re, n_re / active if active else 0.0, *n_stats, per_layer))
        seen |= on
    return CapacityReport(length, neuron_total, rows)
