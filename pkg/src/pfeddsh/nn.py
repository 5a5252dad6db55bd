"""Small differentiable MLP over flat parameter vectors.

A network is described by a :class:`NetSpec` (a chain of dense, batchnorm and
relu layers) and evaluated against a flat float64 parameter vector. Gradients
come from an explicit reverse sweep over the :class:`ForwardTrace`, with
respect to both the parameters and the inputs.

Parameter layout, layer by layer: dense ``W`` (fan_in x fan_out, row-major)
then ``b``; batchnorm ``gamma`` then ``beta``; relu has no parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _backend
from .errors import InputError, NumericError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

KINDS = ("dense", "batchnorm", "relu")


@dataclass(frozen=True)
class Layer:
    kind: str
    fan_in: int
    fan_out: int

    @property
    def n_params(self) -> int:
        if self.kind == "dense":
            return self.fan_in * self.fan_out + self.fan_out
        if self.kind == "batchnorm":
            return 2 * self.fan_out
        return 0


@dataclass(frozen=True)
class NetSpec:
    layers: tuple[Layer, ...]
    input_dim: int
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.kind not in KINDS:
                raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.fan_in != width:
                raise ShapeError(f"layer {i}: fan_in {layer.fan_in} != incoming width {width}")
            if layer.kind != "dense" and layer.fan_in != layer.fan_out:
                raise ShapeError(f"layer {i}: {layer.kind} must preserve width")
            width = layer.fan_out
        if width != self.n_classes:
            raise ShapeError(f"final width {width} != class count {self.n_classes}")

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        out, pos = [], 0
        for layer in self.layers:
            out.append(pos)
            pos += layer.n_params
        out.append(pos)
        return tuple(out)

    @property
    def n_params(self) -> int:
        return self.offsets[-1]

    @cached_property
    def bn_layers(self) -> tuple[int, ...]:
        return tuple(i for i, layer in enumerate(self.layers) if layer.kind == "batchnorm")

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, ...]]:
        """Views into ``params``, one tuple per layer."""
        out = []
        for i, layer in enumerate(self.layers):
            o = self.offsets[i]
            if layer.kind == "dense":
                k = layer.fan_in * layer.fan_out
                W = params[o : o + k].reshape(layer.fan_in, layer.fan_out)
                out.append((W, params[o + k : o + k + layer.fan_out]))
            elif layer.kind == "batchnorm":
                w = layer.fan_out
                out.append((params[o : o + w], params[o + w : o + 2 * w]))
            else:
                out.append(())
        return out

    def layer_of(self) -> np.ndarray:
        """Layer index owning each parameter position."""
        idx = np.empty(self.n_params, dtype=np.int64)
        for i in range(len(self.layers)):
            idx[self.offsets[i] : self.offsets[i + 1]] = i
        return idx

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "layers": [[l.kind, l.fan_in, l.fan_out] for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(tuple(Layer(k, int(a), int(b)) for k, a, b in d["layers"]), int(d["input_dim"]), int(d["n_classes"]))


def mlp_spec(input_dim: int, n_classes: int, hidden: int = 32, depth: int = 2) -> NetSpec:
    """input -> [dense -> BN -> ReLU] * depth -> dense."""
    layers, w = [], input_dim
    for _ in range(depth):
        layers += [Layer("dense", w, hidden), Layer("batchnorm", hidden, hidden), Layer("relu", hidden, hidden)]
        w = hidden
    layers.append(Layer("dense", w, n_classes))
    return NetSpec(tuple(layers), input_dim, n_classes)


def init_params(spec: NetSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform dense weights, zero biases, unit BN scale."""
    params = np.zeros(spec.n_params)
    for layer, views in zip(spec.layers, spec.unpack(params)):
        if layer.kind == "dense":
            bound = math.sqrt(6.0 / (layer.fan_in + layer.fan_out))
            views[0][...] = rng.uniform(-bound, bound, size=views[0].shape)
        elif layer.kind == "batchnorm":
            views[0][...] = 1.0
    return params


@dataclass(frozen=True)
class BnStat:
    mean: np.ndarray
    var: np.ndarray
    count: int = 0


@dataclass(frozen=True)
class BnStatSet:
    """Stored per-BN-layer statistics, in layer order."""

    layers: tuple[BnStat, ...]

    @classmethod
    def identity(cls, spec: NetSpec) -> "BnStatSet":
        return cls(tuple(BnStat(np.zeros(spec.layers[i].fan_out), np.ones(spec.layers[i].fan_out), 0) for i in spec.bn_layers))

    def check(self, spec: NetSpec) -> None:
        if len(self.layers) != len(spec.bn_layers):
            raise ShapeError(f"{len(self.layers)} BN stat entries for {len(spec.bn_layers)} BN layers")
        for st, i in zip(self.layers, spec.bn_layers):
            w = spec.layers[i].fan_out
            if st.mean.shape != (w,) or st.var.shape != (w,):
                raise ShapeError(f"BN layer {i}: stats width mismatch")

    def to_dict(self) -> list:
        return [{"mean": s.mean.tolist(), "var": s.var.tolist(), "count": s.count} for s in self.layers]

    @classmethod
    def from_dict(cls, d: list) -> "BnStatSet":
        return cls(tuple(BnStat(np.asarray(s["mean"], float), np.asarray(s["var"], float), int(s["count"])) for s in d))


@dataclass
class ForwardTrace:
    mode: str
    acts: list[np.ndarray]  # acts[0] = input, acts[i + 1] = output of layer i
    bn_cache: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)  # xhat, inv_std
    bn_batch: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)  # batch mean, var

    @property
    def logits(self) -> np.ndarray:
        return self.acts[-1]


def _check_params(spec: NetSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    return params


def forward(
    spec: NetSpec,
    params: np.ndarray,
    inputs: np.ndarray,
    stats: BnStatSet | None = None,
    mode: str = "eval",
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network. ``train`` normalizes with batch statistics, ``eval``
    with ``stats``. Never mutates ``stats``; see :func:`commit_stats`."""
    params = _check_params(spec, params)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"inputs must be (n, {spec.input_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network input", phase="forward")
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be 'train' or 'eval', got {mode!r}")
    if stats is None:
        stats = BnStatSet.identity(spec)
    stats.check(spec)
    K = _backend.kernels
    trace = ForwardTrace(mode, [x])
    bn_k = 0
    for i, (layer, views) in enumerate(zip(spec.layers, spec.unpack(params))):
        if layer.kind == "dense":
            x = K.dense_forward(x, views[0], views[1])
        elif layer.kind == "relu":
            x = K.relu_forward(x)
        else:
            bmean, bvar = K.batch_moments(x)
            trace.bn_batch[i] = (bmean, bvar)
            if mode == "train":
                mean, var = bmean, bvar
            else:
                mean, var = stats.layers[bn_k].mean, stats.layers[bn_k].var
            x, xhat, inv_std = K.bn_forward(x, views[0], views[1], mean, var, BN_EPS)
            trace.bn_cache[i] = (xhat, inv_std)
            bn_k += 1
        trace.acts.append(x)
    return x, trace


def backward(
    spec: NetSpec,
    params: np.ndarray,
    trace: ForwardTrace,
    d_logits: np.ndarray,
    act_grads: dict[int, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse sweep. ``act_grads[k]`` is an extra cotangent added to
    ``trace.acts[k]`` (used by the replay regularizers).

    Returns ``(param_grads, input_grads)``.
    """
    params = _check_params(spec, params)
    K = _backend.kernels
    act_grads = act_grads or {}
    grads = np.zeros(spec.n_params)
    gviews = spec.unpack(grads)
    n_layers = len(spec.layers)
    dy = np.asarray(d_logits, dtype=np.float64)
    if n_layers in act_grads:
        dy = dy + act_grads[n_layers]
    for i in range(n_layers - 1, -1, -1):
        layer = spec.layers[i]
        x_in = trace.acts[i]
        if layer.kind == "dense":
            W = params[spec.offsets[i] : spec.offsets[i] + layer.fan_in * layer.fan_out].reshape(layer.fan_in, layer.fan_out)
            dy, dW, db = K.dense_backward(x_in, W, dy)
            gviews[i][0][...] = dW
            gviews[i][1][...] = db
        elif layer.kind == "relu":
            dy = K.relu_backward(x_in, dy)
        else:
            gamma = params[spec.offsets[i] : spec.offsets[i] + layer.fan_out]
            xhat, inv_std = trace.bn_cache[i]
            bwd = K.bn_backward_train if trace.mode == "train" else K.bn_backward_eval
            dy, dgamma, dbeta = bwd(dy, xhat, inv_std, gamma)
            gviews[i][0][...] = dgamma
            gviews[i][1][...] = dbeta
        if i in act_grads:
            dy = dy + act_grads[i]
    return grads, dy


def check_labels(labels, n_classes: int, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise InputError("empty batch")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InputError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def loss_and_grads(
    spec: NetSpec,
    params: np.ndarray,
    inputs: np.ndarray,
    labels,
    stats: BnStatSet | None = None,
    mode: str = "train",
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy with gradients w.r.t. params and inputs."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = check_labels(labels, spec.n_classes, inputs.shape[0] if inputs.ndim == 2 else -1)
    logits, trace = forward(spec, params, inputs, stats, mode)
    loss, d_logits = _backend.kernels.softmax_xent(logits, labels)
    pg, xg = backward(spec, params, trace, d_logits)
    return max(float(loss), 0.0), pg, xg


def commit_stats(stats: BnStatSet, trace: ForwardTrace, momentum: float = BN_MOMENTUM) -> BnStatSet:
    """Fold a train-mode trace's batch statistics into running statistics."""
    if trace.mode != "train":
        return stats
    n = trace.acts[0].shape[0]
    new = []
    for st, i in zip(stats.layers, sorted(trace.bn_batch)):
        bmean, bvar = trace.bn_batch[i]
        new.append(BnStat((1 - momentum) * st.mean + momentum * bmean, (1 - momentum) * st.var + momentum * bvar, st.count + n))
    return BnStatSet(tuple(new))


def population_stats(spec: NetSpec, params: np.ndarray, inputs: np.ndarray, eps: float = BN_EPS) -> BnStatSet:
    """Exact BN input moments over a whole dataset (one full-batch train pass)."""
    _, trace = forward(spec, params, inputs, None, "train")
    n = np.asarray(inputs).shape[0]
    return BnStatSet(tuple(BnStat(trace.bn_batch[i][0].copy(), np.maximum(trace.bn_batch[i][1], eps), n) for i in spec.bn_layers))


def predict(spec: NetSpec, params: np.ndarray, inputs: np.ndarray, stats: BnStatSet | None) -> np.ndarray:
    logits, _ = forward(spec, params, inputs, stats, "eval")
    return logits.argmax(axis=1)


def accuracy(spec: NetSpec, params: np.ndarray, inputs: np.ndarray, labels, stats: BnStatSet | None) -> float:
    return float(np.mean(predict(spec, params, inputs, stats) == np.asarray(labels)))


def sgd_step(
    params: np.ndarray, grads: np.ndarray, lr: float, momentum: float, velocity: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Heavy-ball SGD: ``v <- momentum*v + g``; ``p <- p - lr*v``."""
    if not lr > 0:
        raise InputError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise InputError(f"momentum must be in [0, 1), got {momentum}")
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("params, grads and velocity lengths differ")
    velocity = momentum * velocity + grads
    return params - lr * velocity, velocity


def cosine_lr(round: int, total_rounds: int, lr0: float) -> float:
    if not 0 <= round <= total_rounds:
        raise InputError(f"round {round} outside [0, {total_rounds}]")
    if not lr0 > 0:
        raise InputError("lr0 must be positive")
    if total_rounds == 0:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * round / total_rounds)) / 2.0
