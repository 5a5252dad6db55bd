"""Pure-numpy layer kernels.

Reference implementation of the per-layer forward/backward rules used by
:mod:`pfeddsh.nn`. The compiled twin in ``_ckernels.pyx`` exposes the same
functions with the same signatures; :mod:`pfeddsh._backend` picks one at
import time.

All arrays are float64. Dense weights are stored row-major as
``(fan_in, fan_out)`` so that ``y = x @ W + b``.
"""

import numpy as np

NAME = "numpy"


def dense_forward(x, W, b):
    return x @ W + b


def dense_backward(x, W, dy):
    """Return ``(dx, dW, db)`` for ``y = x @ W + b``."""
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    return np.where(x > 0.0, dy, 0.0)


def batch_moments(x):
    """Per-feature mean and biased variance over the batch axis."""
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)
    return mean, var


def bn_forward(x, gamma, beta, mean, var, eps):
    """Normalize with the given statistics; return ``(y, xhat, inv_std)``."""
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, xhat, inv_std


def bn_backward_train(dy, xhat, inv_std, gamma):
    # statistics depend on x, so the gradient flows through mean and variance
    n = dy.shape[0]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def bn_backward_eval(dy, xhat, inv_std, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    return dy * (gamma * inv_std), dgamma, dbeta


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    idx = np.arange(n)
    loss = -logp[idx, labels].mean()
    d = np.exp(logp)
    d[idx, labels] -= 1.0
    return float(loss), d / n
