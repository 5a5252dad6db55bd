"""Server-side data-free replay.

Synthetic inputs are optimized from noise so that the statistics they induce
inside a model match stored batch-norm statistics; the resulting labelled pool
fine-tunes earlier batches' frozen subnetworks. Nothing here accepts a client
dataset: inputs are BN statistics, parameter vectors and masks only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import nn
from .errors import InputError, NumericError, ShapeError, StateError
from .masking import MaskState, materialize
from .nn import BnStat, BnStatSet, NetSpec


@dataclass(frozen=True)
class ReplayHyperparams:
    beta_tv: float = 1e-5
    beta_l2: float = 1e-4
    beta_feature: float = 1e-2
    iterations: int = 250
    step_size: float = 0.1
    images_per_class: int = 20
    batch_size: int = 32
    ce_weight: float = 1.0
    clamp: float = 3.0
    finetune_epochs: int = 5
    finetune_lr: float = 0.01

    def __post_init__(self):
        if self.iterations < 1:
            raise InputError("iterations must be >= 1")
        if not self.step_size > 0:
            raise InputError("step size must be positive")
        for name in ("beta_tv", "beta_l2", "beta_feature", "ce_weight"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")
        if self.images_per_class < 0 or self.batch_size < 1:
            raise InputError("images_per_class must be >= 0 and batch_size >= 1")


@dataclass
class SyntheticPool:
    source_batch: int
    x: np.ndarray
    y: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    def restrict(self, counts) -> "SyntheticPool":
        """Sub-pool whose label mix follows ``counts`` (a per-class histogram).

        The most frequent available class keeps all its samples; every other
        class keeps a proportional share, at least one if it has any weight.
        Classes with zero weight are dropped.
        """
        counts = np.asarray(counts, dtype=np.float64)
        have = np.bincount(self.y, minlength=len(counts))[: len(counts)]
        w = np.where(have > 0, counts, 0.0)
        keep = np.zeros(len(self.y), dtype=bool)
        if w.max(initial=0.0) > 0:
            for c in np.flatnonzero(w):
                k = max(1, int(round(have[c] * w[c] / w.max())))
                keep[np.flatnonzero(self.y == c)[:k]] = True
        return SyntheticPool(self.source_batch, self.x[keep], self.y[keep], dict(self.provenance))

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = directory / f"pool_batch{self.source_batch}"
        stem.with_suffix(".bin").write_bytes(self.x.astype("<f8").tobytes())
        meta = {"source_batch": self.source_batch, "shape": list(self.x.shape), "labels": self.y.tolist(), "provenance": self.provenance}
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory: Path, source_batch: int) -> "SyntheticPool":
        stem = Path(directory) / f"pool_batch{source_batch}"
        meta = json.loads(stem.with_suffix(".json").read_text())
        x = np.frombuffer(stem.with_suffix(".bin").read_bytes(), "<f8").reshape(meta["shape"]).copy()
        return cls(meta["source_batch"], x, np.asarray(meta["labels"], dtype=np.int64), meta["provenance"])


def capture_bn_stats(contributions: list[BnStatSet]) -> BnStatSet:
    """Pool client statistics: count-weighted means, variance by the law of
    total variance (within-client plus between-client spread)."""
    if not contributions:
        raise InputError("no client statistics to combine")
    n_layers = len(contributions[0].layers)
    if any(len(c.layers) != n_layers for c in contributions):
        raise ShapeError("clients disagree on the number of BN layers")
    counts = np.array([c.layers[0].count if n_layers else 0 for c in contributions], dtype=np.float64)
    w = counts / counts.sum() if counts.sum() > 0 else np.full(len(contributions), 1.0 / len(contributions))
    out = []
    for k in range(n_layers):
        means = np.stack([c.layers[k].mean for c in contributions])
        vars_ = np.stack([c.layers[k].var for c in contributions])
        mean = w @ means
        var = w @ (vars_ + (means - mean) ** 2)
        out.append(BnStat(mean, var, int(sum(c.layers[k].count for c in contributions))))
    return BnStatSet(tuple(out))


def tv_penalty(x: np.ndarray) -> float:
    """Sum of squared differences between adjacent coordinates (batch mean for 2-D input)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return float(np.sum(np.diff(x) ** 2))
    return float(np.sum(np.diff(x, axis=1) ** 2) / x.shape[0])


def _tv_grad(x: np.ndarray) -> np.ndarray:
    d = np.diff(x, axis=1)
    g = np.zeros_like(x)
    g[:, 1:] += 2.0 * d
    g[:, :-1] -= 2.0 * d
    return g / x.shape[0]


def _moment_loss(a: np.ndarray, mu: np.ndarray, var: np.ndarray) -> tuple[float, np.ndarray]:
    """``|mean(a) - mu|^2 + |var(a) - var|^2`` over features, with d/da."""
    n = a.shape[0]
    m = a.mean(axis=0)
    c = a - m
    v = (c * c).mean(axis=0)
    dm, dv = m - mu, v - var
    loss = float(dm @ dm + dv @ dv)
    grad = (2.0 * dm) / n + (4.0 / n) * dv * c
    return loss, grad


def _rectified_moments(m: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of relu(N(m, s^2)), elementwise."""
    s = np.maximum(s, 1e-12)
    z = m / s
    cdf = ndtr(z)
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    mean = m * cdf + s * pdf
    second = (m * m + s * s) * cdf + m * s * pdf
    return mean, np.maximum(second - mean * mean, 0.0)


def feature_targets(spec: NetSpec, params: np.ndarray, target: BnStatSet) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Expected post-ReLU moments for every ReLU fed directly by a BN layer.

    If a BN input follows ``N(mu, v)`` its eval-mode output is
    ``N(beta, gamma^2 v / (v + eps))``; the ReLU output moments follow from the
    rectified-Gaussian formulas. Keys are activation indices (ReLU outputs).
    """
    views = spec.unpack(np.asarray(params, dtype=np.float64))
    bn_pos = {i: k for k, i in enumerate(spec.bn_layers)}
    out = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "relu" and i > 0 and (i - 1) in bn_pos:
            gamma, beta = views[i - 1]
            st = target.layers[bn_pos[i - 1]]
            s = np.abs(gamma) * np.sqrt(st.var / (st.var + nn.BN_EPS))
            out[i + 1] = _rectified_moments(beta, s)
    return out


@dataclass
class InversionObjective:
    total: float
    bn: float
    feature: float
    tv: float
    l2: float
    ce: float


def inversion_objective(
    spec: NetSpec,
    theta_hat: np.ndarray,
    target: BnStatSet,
    x: np.ndarray,
    labels: np.ndarray,
    hp: ReplayHyperparams,
    feat: dict | None = None,
) -> tuple[InversionObjective, np.ndarray]:
    """Objective value and its gradient with respect to the synthetic batch."""
    if feat is None:
        feat = feature_targets(spec, theta_hat, target)
    logits, trace = nn.forward(spec, theta_hat, x, target, "eval")
    act_grads: dict[int, np.ndarray] = {}
    bn_loss = 0.0
    for st, i in zip(target.layers, spec.bn_layers):
        v, g = _moment_loss(trace.acts[i], st.mean, st.var)
        bn_loss += v
        act_grads[i] = act_grads.get(i, 0.0) + g
    feat_loss = 0.0
    if hp.beta_feature > 0:
        for k, (mu, var) in feat.items():
            v, g = _moment_loss(trace.acts[k], mu, var)
            feat_loss += v
            act_grads[k] = act_grads.get(k, 0.0) + hp.beta_feature * g
    if hp.ce_weight > 0:
        ce, d_logits = nn._backend.kernels.softmax_xent(logits, labels)
        d_logits = hp.ce_weight * d_logits
    else:
        ce, d_logits = 0.0, np.zeros_like(logits)
    _, gx = nn.backward(spec, theta_hat, trace, d_logits, act_grads)
    tv = tv_penalty(x)
    l2 = float(np.sum(x * x) / x.shape[0])
    gx = gx + hp.beta_tv * _tv_grad(x) + hp.beta_l2 * (2.0 * x / x.shape[0])
    total = bn_loss + hp.beta_feature * feat_loss + hp.beta_tv * tv + hp.beta_l2 * l2 + hp.ce_weight * float(ce)
    return InversionObjective(total, bn_loss, feat_loss, tv, l2, float(ce)), gx


def synthesize(
    spec: NetSpec,
    theta_hat: np.ndarray,
    target: BnStatSet,
    labels,
    hp: ReplayHyperparams,
    seed,
    return_info: bool = False,
):
    """Optimize a batch of inputs (one per label) against ``target``.

    Starts from seeded standard-normal noise and runs ``hp.iterations`` Adam
    steps with a cosine-decayed step size, clamping to ``[-clamp, clamp]``
    after each step. The lowest-objective iterate is returned.
    """
    theta_hat = nn._check_params(spec, theta_hat)
    target.check(spec)
    labels = nn.check_labels(labels, spec.n_classes, len(labels))
    rng = np.random.default_rng(seed)
    x = np.clip(rng.standard_normal((len(labels), spec.input_dim)), -hp.clamp, hp.clamp)
    feat = feature_targets(spec, theta_hat, target)
    m1 = np.zeros_like(x)
    m2 = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    first = best = None
    best_x = x
    for it in range(hp.iterations + 1):
        obj, g = inversion_objective(spec, theta_hat, target, x, labels, hp, feat)
        if not np.isfinite(obj.total) or not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite inversion objective at iteration {it}", phase="synthesis", iteration=it)
        if first is None:
            first = obj
        if best is None or obj.total < best.total:
            best, best_x = obj, x
        if it == hp.iterations:
            break
        lr = nn.cosine_lr(it, hp.iterations, hp.step_size)
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        step = (m1 / (1 - b1 ** (it + 1))) / (np.sqrt(m2 / (1 - b2 ** (it + 1))) + eps)
        x = np.clip(x - lr * step, -hp.clamp, hp.clamp)
    if return_info:
        return best_x, {"initial": first, "final": best}
    return best_x


def pool_labels(n_classes: int, images_per_class: int, classes=None) -> np.ndarray:
    """Round-robin labels so every synthesis chunk is close to class-balanced."""
    classes = np.arange(n_classes) if classes is None else np.unique(np.asarray(classes, dtype=np.int64))
    if classes.size and (classes.min() < 0 or classes.max() >= n_classes):
        raise InputError(f"classes must lie in [0, {n_classes})")
    return np.tile(classes, images_per_class)


def build_pool(
    spec: NetSpec,
    theta_hat: np.ndarray,
    target: BnStatSet | None,
    hp: ReplayHyperparams,
    seed: int,
    source_batch: int,
    provenance: dict | None = None,
    classes=None,
) -> SyntheticPool:
    """Synthesize ``images_per_class`` labelled samples per class for batch
    ``source_batch``. ``classes`` limits synthesis to classes the batch has
    evidence for; the others are listed as missing in the provenance."""
    if source_batch <= 1:
        raise StateError("replay pools are only built for batches after the first")
    if target is None:
        raise StateError(f"no BN statistics captured for batch {source_batch}")
    labels = pool_labels(spec.n_classes, hp.images_per_class, classes)
    xs = []
    ss = np.random.SeedSequence([int(seed), int(source_batch)])
    chunks = [labels[i : i + hp.batch_size] for i in range(0, len(labels), hp.batch_size)]
    for chunk, child in zip(chunks, ss.spawn(len(chunks))):
        xs.append(synthesize(spec, theta_hat, target, chunk, hp, child))
    x = np.concatenate(xs) if xs else np.zeros((0, spec.input_dim))
    missing = sorted(set(range(spec.n_classes)) - set(labels.tolist()))
    prov = {"seed": int(seed), "missing_classes": missing}
    prov.update(provenance or {})
    return SyntheticPool(source_batch, x, labels.astype(np.int64), prov)


def pool_loss(spec: NetSpec, theta: np.ndarray, mask: MaskState, pool: SyntheticPool, stats: BnStatSet | None) -> float:
    loss, _, _ = nn.loss_and_grads(spec, theta * materialize(mask, "hard"), pool.x, pool.y, stats, "eval")
    return loss


def finetune_prior(
    spec: NetSpec,
    theta: np.ndarray,
    mask: MaskState,
    pool: SyntheticPool,
    epochs: int,
    lr: float,
    stats: BnStatSet | None = None,
    momentum: float = 0.9,
    batch_size: int = 32,
    seed: int = 0,
) -> np.ndarray:
    """SGD on the pool through ``theta * hard(mask)``; positions the mask turns
    off get exactly zero update. BN runs in eval mode on ``stats``."""
    if not mask.frozen:
        raise StateError("fine-tuning needs a frozen mask")
    if len(pool) == 0:
        raise InputError("empty synthetic pool")
    theta = nn._check_params(spec, theta).copy()
    hard = materialize(mask, "hard")
    if hard.shape != theta.shape:
        raise ShapeError("mask length does not match parameters")
    if epochs <= 0 or not hard.any():
        return theta
    rng = np.random.default_rng(seed)
    vel = np.zeros_like(theta)
    n = len(pool)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            _, g, _ = nn.loss_and_grads(spec, theta * hard, pool.x[idx], pool.y[idx], stats, "eval")
            theta, vel = nn.sgd_step(theta, g * hard, lr, momentum, vel)
    return theta


def hyperparams_dict(hp: ReplayHyperparams) -> dict:
    return asdict(hp)
