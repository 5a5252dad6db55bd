import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfeddsh import masking, nn, replay
from pfeddsh.errors import InputError, StateError

from fd import numeric_grad

ONLY_BN = replay.ReplayHyperparams(beta_tv=0.0, beta_l2=0.0, beta_feature=0.0, ce_weight=0.0)


def bn_net(d):
    spec = nn.NetSpec((nn.Layer("batchnorm", d, d),), d, d)
    return spec, np.concatenate([np.ones(d), np.zeros(d)])


def stats_of(mean, var, count=10):
    return nn.BnStatSet((nn.BnStat(np.asarray(mean, float), np.asarray(var, float), count),))


def test_capture_single_client_unchanged(rng):
    s = stats_of(rng.standard_normal(3), rng.uniform(0.5, 2, 3))
    out = replay.capture_bn_stats([s])
    assert np.array_equal(out.layers[0].mean, s.layers[0].mean)
    assert np.array_equal(out.layers[0].var, s.layers[0].var)


def test_capture_law_of_total_variance():
    out = replay.capture_bn_stats([stats_of([0.0], [1.0]), stats_of([2.0], [1.0])])
    assert out.layers[0].mean.tolist() == [1.0]
    assert out.layers[0].var.tolist() == [2.0]
    assert out.layers[0].count == 20


def test_capture_identical_clients(rng):
    s = stats_of(rng.standard_normal(4), rng.uniform(0.5, 2, 4))
    out = replay.capture_bn_stats([s, s, s])
    assert np.allclose(out.layers[0].mean, s.layers[0].mean) and np.allclose(out.layers[0].var, s.layers[0].var)


def test_capture_needs_clients():
    with pytest.raises(InputError):
        replay.capture_bn_stats([])


@pytest.mark.parametrize("k", range(3))
def test_moment_matching_on_degenerate_net(backend, k):
    rng = np.random.default_rng(100 + k)
    spec, params = bn_net(4)
    mu, var = rng.uniform(-1, 1, 4), rng.uniform(0.3, 2.0, 4)
    x = replay.synthesize(spec, params, stats_of(mu, var), np.zeros(32, int), ONLY_BN, seed=k)
    assert np.max(np.abs(x.mean(axis=0) - mu)) < 1e-3
    assert np.max(np.abs(x.var(axis=0) - var)) < 1e-2


def test_ridge_limit_drives_inputs_to_zero():
    spec, params = bn_net(4)
    hp = replay.ReplayHyperparams(beta_tv=0.0, beta_l2=1e6, beta_feature=0.0, ce_weight=0.0)
    # the moment term still exists; with beta_l2 = 1e6 it is negligible
    x = replay.synthesize(spec, params, stats_of(np.zeros(4), np.ones(4)), np.zeros(16, int), hp, seed=0)
    assert np.max(np.abs(x)) < 1e-2


def test_tv_penalty_examples():
    assert replay.tv_penalty(np.full(7, 3.2)) == 0.0
    x = np.array([0.0, 1.0, 0.0, 1.0, 0.0])
    assert replay.tv_penalty(x) == 4.0
    assert replay.tv_penalty(np.stack([x, np.zeros(5)])) == 2.0


def test_objective_gradient_matches_finite_differences(backend):
    rng = np.random.default_rng(5)
    spec = nn.mlp_spec(4, 3, hidden=5, depth=2)
    params = nn.init_params(spec, rng)
    target = nn.population_stats(spec, params, rng.standard_normal((30, 4)))
    hp = replay.ReplayHyperparams(beta_tv=0.1, beta_l2=0.05, beta_feature=0.3)
    x = rng.standard_normal((6, 4))
    labels = rng.integers(0, 3, 6)
    _, g = replay.inversion_objective(spec, params, target, x, labels, hp)
    num = numeric_grad(lambda z: replay.inversion_objective(spec, params, target, z, labels, hp)[0].total, x)
    assert np.max(np.abs(g - num)) <= 1e-4 * max(np.max(np.abs(num)), 1e-8)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_synthesis_never_increases_objective(seed):
    rng = np.random.default_rng(seed)
    spec = nn.mlp_spec(4, 3, hidden=6)
    params = nn.init_params(spec, rng)
    target = nn.population_stats(spec, params, rng.standard_normal((30, 4)))
    hp = replay.ReplayHyperparams(iterations=30)
    _, info = replay.synthesize(spec, params, target, rng.integers(0, 3, 8), hp, seed, return_info=True)
    assert info["final"].total <= info["initial"].total
    assert info["final"].bn <= info["initial"].bn or info["final"].total < info["initial"].total


def _pool_setup(rng, classes=3):
    spec = nn.mlp_spec(4, classes, hidden=6)
    params = nn.init_params(spec, rng)
    target = nn.population_stats(spec, params, rng.standard_normal((30, 4)))
    return spec, params, target


def test_pool_counts_and_determinism(rng):
    spec, params, target = _pool_setup(rng)
    hp = replay.ReplayHyperparams(iterations=5, images_per_class=5)
    a = replay.build_pool(spec, params, target, hp, seed=3, source_batch=2)
    b = replay.build_pool(spec, params, target, hp, seed=3, source_batch=2)
    assert len(a) == 15
    assert dict(zip(*np.unique(a.y, return_counts=True))) == {0: 5, 1: 5, 2: 5}
    assert np.array_equal(a.x, b.x)
    assert a.provenance["missing_classes"] == []


def test_pool_restricted_classes(rng):
    spec, params, target = _pool_setup(rng)
    hp = replay.ReplayHyperparams(iterations=5, images_per_class=2)
    pool = replay.build_pool(spec, params, target, hp, 0, 2, classes=[0, 2])
    assert sorted(set(pool.y.tolist())) == [0, 2]
    assert pool.provenance["missing_classes"] == [1]


def test_pool_guards(rng):
    spec, params, target = _pool_setup(rng)
    hp = replay.ReplayHyperparams(iterations=5, images_per_class=1)
    with pytest.raises(StateError):
        replay.build_pool(spec, params, target, hp, 0, 1)
    with pytest.raises(StateError):
        replay.build_pool(spec, params, None, hp, 0, 2)


def test_restrict_follows_label_mix():
    pool = replay.SyntheticPool(2, np.zeros((30, 2)), np.repeat([0, 1, 2], 10))
    sub = pool.restrict([8, 2, 0])
    counts = np.bincount(sub.y, minlength=3)
    assert counts.tolist() == [10, 2, 0]


def test_pool_save_load(tmp_path, rng):
    pool = replay.SyntheticPool(2, rng.standard_normal((4, 3)), np.array([0, 1, 0, 1]), {"seed": 1})
    pool.save(tmp_path)
    back = replay.SyntheticPool.load(tmp_path, 2)
    assert np.array_equal(back.x, pool.x) and back.y.tolist() == pool.y.tolist() and back.provenance == {"seed": 1}


def _finetune_setup(rng):
    spec = nn.mlp_spec(4, 3, hidden=6)
    theta = nn.init_params(spec, rng)
    stats = nn.population_stats(spec, theta, rng.standard_normal((30, 4)))
    pool = replay.SyntheticPool(2, rng.standard_normal((24, 4)), rng.integers(0, 3, 24))
    logits = rng.standard_normal(spec.n_params)
    return spec, theta, stats, pool, masking.freeze(masking.MaskState(1, logits, 10.0))


def test_finetune_noops(rng):
    spec, theta, stats, pool, mask = _finetune_setup(rng)
    zero = masking.freeze(masking.MaskState(1, -np.ones(spec.n_params), 10.0))
    assert np.array_equal(replay.finetune_prior(spec, theta, zero, pool, 3, 0.1, stats), theta)
    assert np.array_equal(replay.finetune_prior(spec, theta, mask, pool, 0, 0.1, stats), theta)


def test_finetune_requires_frozen_mask(rng):
    spec, theta, stats, pool, mask = _finetune_setup(rng)
    with pytest.raises(StateError):
        replay.finetune_prior(spec, theta, masking.new_mask(1, spec.n_params), pool, 1, 0.1, stats)


def test_finetune_descends_and_respects_mask(backend):
    rng = np.random.default_rng(9)
    spec, theta, stats, pool, mask = _finetune_setup(rng)
    after = replay.finetune_prior(spec, theta, mask, pool, 5, 0.01, stats)
    assert replay.pool_loss(spec, after, mask, pool, stats) <= replay.pool_loss(spec, theta, mask, pool, stats)
    off = masking.materialize(mask, "hard") == 0
    assert np.array_equal(after[off], theta[off])
    assert np.any(after[~off] != theta[~off])


def test_hyperparam_validation():
    with pytest.raises(InputError):
        replay.ReplayHyperparams(iterations=0)
    with pytest.raises(InputError):
        replay.ReplayHyperparams(beta_tv=-1.0)
    assert replay.ReplayHyperparams().images_per_class == 20
