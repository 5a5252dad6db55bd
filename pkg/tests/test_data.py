import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfeddsh import data
from pfeddsh.errors import InputError, ShapeError


def test_blob_counts_and_determinism():
    a = data.gen_blobs(5, 16, 200, 1.0, 3)
    b = data.gen_blobs(5, 16, 200, 1.0, 3)
    assert a.inputs.shape == (1000, 16)
    assert np.bincount(a.labels).tolist() == [200] * 5
    assert np.array_equal(a.inputs, b.inputs)
    assert not np.array_equal(a.inputs, data.gen_blobs(5, 16, 200, 1.0, 4).inputs)


def test_tight_blobs_are_linearly_separable():
    ds = data.gen_blobs(5, 8, 50, 1e-6, 0)
    means = np.stack([ds.inputs[ds.labels == c].mean(axis=0) for c in range(5)])
    # nearest-mean is a linear rule, so zero errors means linear separability
    pred = np.argmin(((ds.inputs[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(pred, ds.labels)


def test_blob_validation():
    with pytest.raises(InputError):
        data.gen_blobs(1, 4, 10, 1.0, 0)


def test_single_client_gets_everything():
    labels = np.repeat(np.arange(3), 10)
    plan = data.dirichlet_partition(labels, 1, 0.5, 0)
    assert plan.client_indices[0].tolist() == list(range(30))


def _tv_from_uniform(hist):
    p = hist / hist.sum(axis=1, keepdims=True)
    return 0.5 * np.abs(p - 1.0 / hist.shape[1]).sum(axis=1)


def test_large_alpha_is_near_uniform():
    # 1000 samples per class: with fewer, multinomial noise alone exceeds 0.1
    labels = np.repeat(np.arange(10), 1000)
    for seed in range(10):
        plan = data.dirichlet_partition(labels, 10, 1e6, seed)
        assert _tv_from_uniform(data.label_histograms(labels, plan, 10)).max() <= 0.1


def test_small_alpha_is_skewed():
    labels = np.repeat(np.arange(10), 200)
    shares = []
    for seed in range(10):
        h = data.label_histograms(labels, data.dirichlet_partition(labels, 10, 0.1, seed), 10)
        shares.append((h.max(axis=1) / h.sum(axis=1)).mean())
    assert min(shares) >= 0.5


def _chi2_spread(labels, plan, k):
    h = data.label_histograms(labels, plan, k)
    glob = np.bincount(labels, minlength=k) / len(labels)
    p = h / h.sum(axis=1, keepdims=True)
    return float(np.mean(((p - glob) ** 2 / glob).sum(axis=1)))


def test_heterogeneity_ordering():
    labels = np.repeat(np.arange(5), 200)
    for seed in range(10):
        low = _chi2_spread(labels, data.dirichlet_partition(labels, 10, 0.1, seed), 5)
        high = _chi2_spread(labels, data.dirichlet_partition(labels, 10, 100.0, seed), 5)
        assert low > high


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    n_clients=st.integers(1, 20),
    alpha=st.sampled_from([0.01, 0.1, 1.0, 100.0]),
    test_fraction=st.sampled_from([0.1, 0.2, 0.5]),
)
def test_exact_cover_and_split(seed, n_clients, alpha, test_fraction):
    labels = np.random.default_rng(seed).integers(0, 4, 120)
    plan = data.dirichlet_partition(labels, n_clients, alpha, seed, test_fraction)
    allidx = np.concatenate(plan.client_indices)
    assert np.array_equal(np.sort(allidx), np.arange(120))
    for ix, tr, te in zip(plan.client_indices, plan.train, plan.test):
        assert len(ix) >= 2 and len(tr) >= 1 and len(te) >= 1
        assert not set(tr.tolist()) & set(te.tolist())
        assert sorted(tr.tolist() + te.tolist()) == ix.tolist()
        assert abs(len(te) - test_fraction * len(ix)) <= 1


def test_partition_errors():
    with pytest.raises(InputError):
        data.dirichlet_partition(np.zeros(5, int), 3, 1.0, 0)
    with pytest.raises(InputError):
        data.dirichlet_partition(np.zeros(50, int), 3, 0.0, 0)


def test_schedule_shapes():
    two = data.schedule_batches(100, [80, 20], 0)
    assert sorted(two) == list(range(100))
    assert np.bincount(list(two.values())).tolist() == [0, 80, 20]
    five = data.schedule_batches(100, [80, 5, 5, 5, 5], 0)
    assert np.bincount(list(five.values())).tolist() == [0, 80, 5, 5, 5, 5]
    assert set(data.schedule_batches(7, [7], 1).values()) == {1}
    assert data.schedule_batches(100, [80, 20], 0) == two
    with pytest.raises(InputError):
        data.schedule_batches(10, [8, 1], 0)


def test_binary_round_trip(tmp_path):
    ds = data.gen_blobs(3, 4, 5, 1.0, 0)
    path = tmp_path / "blobs.bin"
    data.save_binary(ds, path)
    back = data.load_binary(path)
    assert back.n_classes == 3 and np.array_equal(back.labels, ds.labels)
    assert np.allclose(back.inputs, ds.inputs, atol=1e-6)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(ShapeError):
        data.load_binary(path)
