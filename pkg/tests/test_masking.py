import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfeddsh import federation, hypernet, masking, nn
from pfeddsh.errors import ShapeError, StateError

from conftest import small_cfg
from fd import assert_grad_close, numeric_grad


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


@pytest.mark.parametrize("gamma", [0.5, 10.0, 100.0])
def test_zero_logit_is_one_half(gamma):
    m = masking.new_mask(1, 5, gamma)
    assert np.all(masking.materialize(m) == 0.5)


def test_soft_and_hard_values():
    m = masking.MaskState(1, np.array([1.0, -1.0]), 10.0)
    soft = masking.materialize(m, "soft")
    assert soft == pytest.approx([sigmoid(10), 1 - sigmoid(10)], abs=1e-15)
    assert soft == pytest.approx([0.9999546, 0.0000454], abs=1e-7)
    assert masking.materialize(m, "hard").tolist() == [1.0, 0.0]


@settings(max_examples=50, deadline=None)
@given(
    logits=st.lists(st.floats(0.05, 2.0), min_size=1, max_size=20),
    signs=st.lists(st.booleans(), min_size=20, max_size=20),
    gamma=st.floats(10.0, 200.0),
)
def test_soft_hard_tail_bound(logits, signs, gamma):
    s = np.array([v if sg else -v for v, sg in zip(logits, signs)])
    m = masking.MaskState(1, s, gamma)
    gap = np.max(np.abs(masking.materialize(m, "soft") - masking.materialize(m, "hard")))
    # logits are clipped so soft values stay inside (0, 1); allow that float64 floor
    assert gap <= math.exp(-gamma * np.min(np.abs(s))) + 2.5e-16


def test_apply_examples(rng):
    theta = rng.standard_normal(6)
    assert np.array_equal(masking.apply(np.ones(6), theta), theta)
    assert not masking.apply(np.zeros(6), theta).any()
    assert masking.apply(np.array([1.0, 0.0, 1.0]), np.array([2.0, 3.0, 4.0])).tolist() == [2.0, 0.0, 4.0]
    with pytest.raises(ShapeError):
        masking.apply(np.ones(2), theta)


def test_all_zero_mask_gives_uniform_logits(rng):
    spec = nn.mlp_spec(3, 4, 5, 1)
    theta = masking.apply(np.zeros(spec.n_params), rng.standard_normal(spec.n_params))
    logits, _ = nn.forward(spec, theta, rng.standard_normal((3, 3)), None, "eval")
    assert np.allclose(logits, logits[:, :1])


def _instance(rng, lam=1e-2):
    spec = nn.mlp_spec(3, 2, 4, 1)
    h = hypernet.init_hypernet(spec, 3, 4, rng, head_scale=0.5)
    e = rng.standard_normal(3)
    m = masking.new_mask(1, spec.n_params, 3.0)
    m.logits[:] = rng.normal(0, 0.5, spec.n_params)
    x, y = rng.standard_normal((6, 3)), rng.integers(0, 2, 6)
    return spec, h, e, m, x, y


def test_zero_theta_without_penalty_gives_zero_grad(rng):
    spec, h, e, m, x, y = _instance(rng)
    h.phi[:] = 0.0
    grad, _, _ = masking.mask_grads(spec, h, e, m, x, y, 0.0)
    assert not grad.any()


def test_penalty_only_gradient(rng):
    spec, h, e, m, x, y = _instance(rng)
    h.phi[:] = 0.0
    lam = 0.3
    grad, _, l1 = masking.mask_grads(spec, h, e, m, x, y, lam)
    soft = 1.0 / (1.0 + np.exp(-m.gamma * m.logits))
    assert np.allclose(grad, lam * m.gamma * soft * (1 - soft), rtol=1e-12, atol=0)
    assert np.all(grad > 0)
    assert l1 == pytest.approx(lam * soft.sum(), abs=1e-9)


def test_mask_gradient_finite_differences(backend):
    rng = np.random.default_rng(3)
    for lam in (0.0, 1e-3, 0.1):
        spec, h, e, m, x, y = _instance(rng)
        grad, _, _ = masking.mask_grads(spec, h, e, m, x, y, lam)
        theta = hypernet.generate(h, e)

        def objective(s):
            soft = 1.0 / (1.0 + np.exp(-m.gamma * s))
            return nn.loss_and_grads(spec, soft * theta, x, y)[0] + lam * soft.sum()

        assert_grad_close(grad, numeric_grad(objective, m.logits.copy(), h=1e-4))


def test_freeze_contract(rng):
    spec, h, e, m, x, y = _instance(rng)
    f = masking.freeze(m)
    assert masking.freeze(f) is f
    assert np.array_equal(masking.materialize(f, "hard"), masking.materialize(f, "hard"))
    with pytest.raises(StateError):
        masking.mask_grads(spec, h, e, f, x, y, 0.1)
    with pytest.raises(StateError):
        masking.update(f, np.zeros(len(f)), 1.0)
    with pytest.raises(ValueError):
        f.logits[0] = 1.0


def test_serialization_round_trip(rng):
    m = masking.MaskState(3, rng.standard_normal(37), 12.5)
    f = masking.freeze(m)
    back = masking.from_bytes(masking.to_bytes(f))
    assert back.frozen and back.batch == 3 and back.gamma == 12.5
    assert masking.to_bytes(back) == masking.to_bytes(f)


def test_reuse_biased_init():
    prev = masking.freeze(masking.MaskState(1, np.array([1.0, -1.0, 1.0]), 10.0))
    m = masking.reuse_biased_mask(2, [prev], 3, fresh_logit=0.1)
    assert m.logits.tolist() == [1.0, 0.1, 1.0]


def _frozen(bits, batch):
    return masking.freeze(masking.MaskState(batch, np.where(np.array(bits) > 0, 1.0, -1.0), 10.0))


def test_capacity_single_batch():
    rep = masking.capacity_report([_frozen([1, 0, 1, 1], 1)])
    assert rep.batches[0].reused == 0 and rep.batches[0].reuse_fraction == 0


def test_capacity_two_batches():
    rep = masking.capacity_report([_frozen([1, 1, 0, 0], 1), _frozen([1, 0, 1, 0], 2)])
    b2 = rep.batches[1]
    assert (b2.active, b2.reused, b2.reuse_fraction) == (2, 1, 0.5)
    assert rep.total_consumed == [2, 3]


def test_capacity_requires_frozen():
    with pytest.raises(StateError):
        masking.capacity_report([masking.new_mask(1, 4)])


def test_frozen_mask_bytes_stable_across_later_training():
    cfg = small_cfg(**{"replay.enabled": False, "schedule.rounds": [4, 100]})
    state = federation.init_state(cfg)
    federation.onboard_batch(state, 1)
    for r in range(4):
        federation.run_round(state, 1, r)
    federation.close_batch(state, 1)
    before = masking.to_bytes(state.masks[1])
    federation.onboard_batch(state, 2)
    for r in range(100):
        federation.run_round(state, 2, r)
    assert masking.to_bytes(state.masks[1]) == before


def test_update_moves_logits(rng):
    m = masking.new_mask(1, 4)
    masking.update(m, np.array([1.0, -1.0, 0.0, 2.0]), 0.5)
    assert m.logits.tolist() == [-0.5, 0.5, 0.0, -1.0]
