"""Central finite-difference checks for the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hypernet, masking, nn


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def central_diff(f, x: np.ndarray, h: float = 1e-6, coords=None) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (only at ``coords`` if given)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max-norm relative error, with an absolute floor for near-zero gradients."""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def _instance(rng: np.random.Generator):
    d = int(rng.integers(3, 6))
    k = int(rng.integers(2, 4))
    spec = nn.mlp_spec(d, k, hidden=int(rng.integers(3, 6)), depth=int(rng.integers(1, 3)))
    params = nn.init_params(spec, rng)
    # move BN affine params off their init so they are exercised
    params = params + 0.1 * rng.standard_normal(spec.n_params)
    n = int(rng.integers(4, 9))
    x = rng.standard_normal((n, d))
    y = rng.integers(0, k, size=n)
    return spec, params, x, y


def check_nn(n_instances: int = 20, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = {"params/train": 0.0, "params/eval": 0.0, "inputs/train": 0.0}
    for _ in range(n_instances):
        spec, params, x, y = _instance(rng)
        stats = nn.population_stats(spec, params, x + 0.3 * rng.standard_normal(x.shape))
        for mode in ("train", "eval"):
            st = stats if mode == "eval" else None
            _, pg, xg = nn.loss_and_grads(spec, params, x, y, st, mode)
            num = central_diff(lambda p: nn.loss_and_grads(spec, p, x, y, st, mode)[0], params)
            worst[f"params/{mode}"] = max(worst[f"params/{mode}"], rel_error(pg, num))
            if mode == "train":
                num_x = central_diff(lambda z: nn.loss_and_grads(spec, params, z, y, None, "train")[0], x)
                worst["inputs/train"] = max(worst["inputs/train"], rel_error(xg, num_x))
    return [CheckResult(f"nn {k}", n_instances, v) for k, v in worst.items()]


def check_hypernet(n_instances: int = 20, seed: int = 1) -> CheckResult:
    """Chain rule through ``generate``: loss(H(e; phi)) against FD in phi and e."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        spec, _, x, y = _instance(rng)
        h = hypernet.init_hypernet(spec, int(rng.integers(2, 5)), int(rng.integers(3, 7)), rng, head_scale=0.5)
        h.phi += 0.05 * rng.standard_normal(h.phi.size)
        e = rng.standard_normal(h.embed_dim)

        def loss_phi(phi):
            hh = hypernet.HypernetState(phi, h.embed_dim, h.hidden, h.target)
            return nn.loss_and_grads(spec, hypernet.generate(hh, e), x, y)[0]

        _, g_theta, _ = nn.loss_and_grads(spec, hypernet.generate(h, e), x, y)
        g_phi, g_e = hypernet.backprop(h, e, g_theta)
        coords = rng.choice(h.phi.size, size=min(60, h.phi.size), replace=False)
        num_phi = central_diff(loss_phi, h.phi, coords=coords)
        num_e = central_diff(lambda v: nn.loss_and_grads(spec, hypernet.generate(h, v), x, y)[0], e)
        worst = max(worst, rel_error(g_phi[coords], num_phi[coords]), rel_error(g_e, num_e))
    return CheckResult("hypernet chain rule", n_instances, worst)


def check_masks(n_instances: int = 20, seed: int = 2) -> CheckResult:
    """Mask-logit gradient of task loss plus the L1 penalty on the soft mask."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        spec, _, x, y = _instance(rng)
        h = hypernet.init_hypernet(spec, 3, 4, rng, head_scale=0.5)
        e = rng.standard_normal(3)
        gamma = float(rng.uniform(1.0, 5.0))
        lam = float(rng.choice([0.0, 1e-3, 1e-1]))
        m = masking.new_mask(1, spec.n_params, gamma, 0.0)
        m.logits[:] = rng.normal(0.0, 0.5, spec.n_params)
        grad, _, _ = masking.mask_grads(spec, h, e, m, x, y, lam)
        theta = hypernet.generate(h, e)

        def objective(s):
            soft = 1.0 / (1.0 + np.exp(-gamma * s))
            return nn.loss_and_grads(spec, soft * theta, x, y)[0] + lam * soft.sum()

        num = central_diff(objective, m.logits.copy())
        worst = max(worst, rel_error(grad, num))
    return CheckResult("mask logits", n_instances, worst)


def run_all(n_instances: int = 20) -> list[CheckResult]:
    return [*check_nn(n_instances), check_hypernet(n_instances), check_masks(n_instances)]
