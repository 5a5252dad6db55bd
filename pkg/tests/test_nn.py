import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfeddsh import nn
from pfeddsh.errors import InputError, ShapeError

from fd import assert_grad_close, numeric_grad, smooth_coords


def dense_only(d, k):
    return nn.NetSpec((nn.Layer("dense", d, k),), d, k)


def test_zero_params_give_zero_logits(backend, rng):
    spec = dense_only(4, 3)
    logits, _ = nn.forward(spec, np.zeros(spec.n_params), rng.standard_normal((5, 4)))
    assert np.array_equal(logits, np.zeros((5, 3)))


def test_identity_dense_layer(backend, rng):
    spec = dense_only(3, 3)
    params = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    x = rng.standard_normal((4, 3))
    logits, _ = nn.forward(spec, params, x)
    assert np.allclose(logits, x, atol=1e-15)


def test_eval_forward_is_deterministic_and_pure(backend, rng):
    spec = nn.mlp_spec(5, 3, hidden=6)
    params = nn.init_params(spec, rng)
    x = rng.standard_normal((4, 5))
    stats = nn.population_stats(spec, params, rng.standard_normal((20, 5)))
    before = [(s.mean.copy(), s.var.copy()) for s in stats.layers]
    a, _ = nn.forward(spec, params, x, stats, "eval")
    b, _ = nn.forward(spec, params, x, stats, "eval")
    assert a.tobytes() == b.tobytes()
    for (m, v), s in zip(before, stats.layers):
        assert np.array_equal(m, s.mean) and np.array_equal(v, s.var)


def test_uniform_logits_loss_is_log_classes(backend):
    spec = dense_only(2, 10)
    loss, _, _ = nn.loss_and_grads(spec, np.zeros(spec.n_params), np.ones((3, 2)), [0, 4, 9])
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert loss == pytest.approx(2.302585, abs=1e-6)


def test_large_margin_loss_vanishes(backend):
    spec = dense_only(1, 2)
    # logits = [20, 0] for input 1
    params = np.array([20.0, 0.0, 0.0, 0.0])
    loss, _, _ = nn.loss_and_grads(spec, params, np.ones((1, 1)), [0])
    assert loss < 1e-8


def test_batchnorm_train_normalizes(backend, rng):
    spec = nn.NetSpec((nn.Layer("batchnorm", 4, 4),), 4, 4)
    params = np.concatenate([np.ones(4), np.zeros(4)])
    x = 3.0 + 5.0 * rng.standard_normal((16, 4))
    out, trace = nn.forward(spec, params, x, None, "train")
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    # variance of xhat is var / (var + eps)
    assert np.all(np.abs(out.var(axis=0) - 1.0) < 1e-5)


def test_commit_stats_only_in_train_mode(backend, rng):
    spec = nn.mlp_spec(3, 2, hidden=4, depth=1)
    params = nn.init_params(spec, rng)
    stats = nn.BnStatSet.identity(spec)
    _, tr = nn.forward(spec, params, rng.standard_normal((6, 3)), stats, "eval")
    assert nn.commit_stats(stats, tr) is stats
    _, tr = nn.forward(spec, params, rng.standard_normal((6, 3)), stats, "train")
    new = nn.commit_stats(stats, tr)
    assert new.layers[0].count == 6
    assert np.allclose(new.layers[0].mean, 0.1 * tr.bn_batch[spec.bn_layers[0]][0])


def relu_pattern(spec, params, x, stats, mode):
    _, trace = nn.forward(spec, params, x, stats, mode)
    return np.concatenate([trace.acts[i].ravel() > 0 for i, layer in enumerate(spec.layers) if layer.kind == "relu"])


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    depth=st.integers(1, 2),
    width=st.integers(2, 16),
    batch=st.integers(2, 8),
    mode=st.sampled_from(["train", "eval"]),
)
def test_gradients_match_finite_differences(seed, depth, width, batch, mode):
    from pfeddsh import _backend

    if mode == "train":
        # two-sample batch norm maps any input pair to about +-1, leaving
        # input gradients at the eps scale where differencing cannot resolve them
        batch = max(batch, 3)
    rng = np.random.default_rng(seed)
    spec = nn.mlp_spec(3, 3, hidden=width, depth=depth)
    params = nn.init_params(spec, rng) + 0.1 * rng.standard_normal(spec.n_params)
    x = rng.standard_normal((batch, 3))
    y = rng.integers(0, 3, batch)
    stats = nn.population_stats(spec, params, rng.standard_normal((10, 3))) if mode == "eval" else None
    coords = rng.choice(spec.n_params, size=min(40, spec.n_params), replace=False)
    coords = smooth_coords(lambda p: relu_pattern(spec, p, x, stats, mode), params, coords=coords)
    x_coords = smooth_coords(lambda z: relu_pattern(spec, params, z, stats, mode), x)
    assert len(coords) >= 20 and len(x_coords) >= x.size // 2
    for b in _backend.available():
        with _backend.using(b):
            _, pg, xg = nn.loss_and_grads(spec, params, x, y, stats, mode)
            num = numeric_grad(lambda p: nn.loss_and_grads(spec, p, x, y, stats, mode)[0], params, coords=coords)
            # roundoff in the differences is about 1e-11, so entries below 1e-6
            # are compared absolutely
            assert_grad_close(pg[coords], num[coords], small=1e-6, abs_tol=1e-9)
            num_x = numeric_grad(lambda z: nn.loss_and_grads(spec, params, z, y, stats, mode)[0], x, coords=x_coords)
            assert_grad_close(xg.ravel()[x_coords], num_x.ravel()[x_coords], small=1e-6, abs_tol=1e-9)


def test_backends_agree(rng):
    from pfeddsh import _backend

    if len(_backend.available()) < 2:
        pytest.skip("only one backend built")
    spec = nn.mlp_spec(5, 4)
    params = nn.init_params(spec, rng)
    x, y = rng.standard_normal((9, 5)), rng.integers(0, 4, 9)
    outs = []
    for b in _backend.available():
        with _backend.using(b):
            outs.append(nn.loss_and_grads(spec, params, x, y))
    assert outs[0][0] == pytest.approx(outs[1][0], rel=1e-12)
    assert np.allclose(outs[0][1], outs[1][1], rtol=1e-10, atol=1e-12)


def test_sgd_plain_step():
    p, v = nn.sgd_step(np.array([1.0]), np.array([2.0]), 0.5, 0.0, np.zeros(1))
    assert p.tolist() == [0.0]


def test_sgd_zero_grad_scales_velocity():
    p, v = nn.sgd_step(np.array([1.0, 2.0]), np.zeros(2), 0.1, 0.9, np.array([1.0, -2.0]))
    assert np.allclose(v, [0.9, -1.8])
    assert np.allclose(p, [1.0 - 0.09, 2.0 + 0.18])


def test_sgd_momentum_two_steps():
    p, v = np.zeros(1), np.zeros(1)
    traj = []
    for _ in range(2):
        p, v = nn.sgd_step(p, np.ones(1), 0.1, 0.9, v)
        traj.append(float(p[0]))
    assert traj == pytest.approx([-0.1, -0.29], abs=1e-12)


def test_sgd_rejects_bad_inputs():
    with pytest.raises(InputError):
        nn.sgd_step(np.zeros(1), np.zeros(1), 0.0, 0.9, np.zeros(1))
    with pytest.raises(ShapeError):
        nn.sgd_step(np.zeros(2), np.zeros(1), 0.1, 0.9, np.zeros(2))


@pytest.mark.parametrize("r,expected", [(0, 0.01), (200, 0.0), (100, 0.005)])
def test_cosine_lr(r, expected):
    assert nn.cosine_lr(r, 200, 0.01) == pytest.approx(expected, abs=1e-15)


def test_shape_and_label_errors(rng):
    spec = nn.mlp_spec(3, 2)
    params = nn.init_params(spec, rng)
    with pytest.raises(ShapeError):
        nn.forward(spec, params[:-1], np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        nn.forward(spec, params, np.zeros((2, 4)))
    with pytest.raises(InputError):
        nn.loss_and_grads(spec, params, np.zeros((2, 3)), [0, 2])
    with pytest.raises(ShapeError):
        nn.NetSpec((nn.Layer("dense", 3, 4),), 3, 2)


def test_init_is_seeded_and_bounded():
    spec = nn.mlp_spec(16, 5)
    a = nn.init_params(spec, np.random.default_rng(3))
    b = nn.init_params(spec, np.random.default_rng(3))
    assert np.array_equal(a, b)
    W, bias = spec.unpack(a)[0]
    assert np.all(np.abs(W) <= math.sqrt(6 / (16 + 32))) and not bias.any()


def test_spec_round_trip():
    spec = nn.mlp_spec(7, 3, hidden=5, depth=3)
    assert nn.NetSpec.from_dict(spec.to_dict()) == spec
