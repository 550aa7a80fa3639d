import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dltlab import data, nn
from dltlab.data import Provenance
from dltlab.errors import ContractError, StateError


@pytest.fixture(scope="module")
def blobs():
    return data.generate_blobs(100, 4, 8, 4.0, 1.0, seed=11)


def _fit_linear(ds, epochs=30, seed=0):
    model = nn.MlpModel.init([ds.dim, ds.n_classes], seed=seed)
    state = nn.SgdState.for_model(model, 0.05, 0.9, 0.0)
    y = ds.observed_onehot
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(ds))
        for start in range(0, len(ds), 32):
            idx = order[start:start + 32]
            nn.sgd_step(model, state, nn.backward(model, ds.features[idx], y[idx]))
    return model


def test_blobs_are_reproducible():
    a = data.generate_blobs(50, 3, 5, 2.0, 1.0, seed=3)
    b = data.generate_blobs(50, 3, 5, 2.0, 1.0, seed=3)
    assert a.equals(b)
    assert not a.equals(data.generate_blobs(50, 3, 5, 2.0, 1.0, seed=4))


def test_blobs_are_balanced(blobs):
    assert len(blobs) == 400
    assert np.bincount(blobs.observed).tolist() == [100] * 4
    assert np.array_equal(blobs.observed, blobs.true)
    assert np.all(blobs.provenance == Provenance.CLEAN)


def test_blobs_need_two_classes():
    with pytest.raises(ContractError):
        data.generate_blobs(10, 1, 3, 1.0, 1.0, seed=0)


def test_separated_blobs_are_linearly_separable(blobs):
    model = _fit_linear(blobs)
    assert np.mean(nn.predict(model, blobs.features) == blobs.true) >= 0.99


def test_shared_centers_independent_samples():
    centers = data.make_blob_centers(3, 4, 2.0, seed=5)
    a = data.generate_blobs(20, 3, 4, 2.0, 1.0, seed=5, centers=centers)
    b = data.generate_blobs(20, 3, 4, 2.0, 1.0, seed=5, centers=centers, sample_seed=99)
    assert not np.array_equal(a.features, b.features)
    for c in range(3):
        assert np.linalg.norm(a.features[a.true == c].mean(0) - b.features[b.true == c].mean(0)) < 1.5


def test_symmetric_zero_rate_is_identity(blobs):
    assert data.inject_symmetric_noise(blobs, 0.0, seed=1).equals(blobs)


@pytest.mark.parametrize("w", [0.2, 0.5])
def test_symmetric_flip_fraction(w):
    ds = data.generate_blobs(1000, 10, 2, 1.0, 1.0, seed=0)
    noisy = data.inject_symmetric_noise(ds, w, seed=7)
    p = w * 9 / 10
    sigma = math.sqrt(p * (1 - p) / len(ds))
    assert abs(noisy.noise_fraction - p) <= 3 * sigma
    assert np.array_equal(noisy.true, ds.true)
    assert np.array_equal(noisy.features, ds.features)


def test_asymmetric_zero_rate_is_identity(blobs):
    assert data.inject_asymmetric_noise(blobs, 0.0, data.cyclic_class_map(4), seed=1).equals(blobs)


def test_asymmetric_flips_follow_map():
    ds = data.generate_blobs(1000, 4, 2, 1.0, 1.0, seed=0)
    cmap = data.cyclic_class_map(4)
    noisy = data.inject_asymmetric_noise(ds, 0.4, cmap, seed=2)
    sigma = math.sqrt(0.4 * 0.6 / len(ds))
    assert abs(noisy.noise_fraction - 0.4) <= 3 * sigma
    flipped = noisy.is_noisy
    assert all(noisy.observed[i] == cmap[noisy.true[i]] for i in np.flatnonzero(flipped))
    assert np.all(noisy.provenance[flipped] == Provenance.NOISY)


def test_asymmetric_partial_map_leaves_other_classes():
    ds = data.generate_blobs(100, 4, 2, 1.0, 1.0, seed=0)
    noisy = data.inject_asymmetric_noise(ds, 0.5, {2: 3}, seed=0)
    assert set(noisy.true[noisy.is_noisy].tolist()) == {2}


def test_asymmetric_rejects_self_map(blobs):
    with pytest.raises(ContractError):
        data.inject_asymmetric_noise(blobs, 0.2, {0: 0, 1: 2}, seed=0)


@given(st.floats(0, 0.95), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_provenance_consistent_after_noise(w, seed):
    ds = data.generate_blobs(30, 5, 2, 1.0, 1.0, seed=1)
    for noisy in (data.inject_symmetric_noise(ds, w, seed),
                  data.inject_asymmetric_noise(ds, w, data.cyclic_class_map(5), seed)):
        assert np.array_equal(noisy.provenance == Provenance.NOISY, noisy.observed != noisy.true)
        assert np.array_equal(noisy.true, ds.true)


def test_noise_injection_is_seeded(blobs):
    a = data.inject_symmetric_noise(blobs, 0.4, seed=9)
    b = data.inject_symmetric_noise(blobs, 0.4, seed=9)
    assert a.equals(b)


def test_augment_zero_strength():
    x = np.array([1.0, -2.0, 3.0])
    views = data.augment(x, 3, 0.0, seed=1)
    assert views.shape == (3, 3)
    assert np.all(views == x)


def test_augment_count_and_determinism():
    x = np.arange(4.0)
    assert data.augment(x, 2, 0.5, seed=3).shape[0] == 2
    assert np.array_equal(data.augment(x, 2, 0.5, seed=3), data.augment(x, 2, 0.5, seed=3))


def test_augment_mean_is_unbiased():
    x = np.array([0.5, -1.0, 2.0])
    strength = 0.3
    views = data.augment(x, 10_000, strength, seed=4)
    assert np.all(np.abs(views.mean(0) - x) <= 3 * strength / math.sqrt(10_000))


def test_erasure_counts():
    x = np.arange(1.0, 11.0)
    assert np.count_nonzero(data.make_hard_erasure(x, 1e-6, seed=0) == 0) == 1
    assert np.count_nonzero(data.make_hard_erasure(x, 0.5, seed=0) == 0) == 5
    assert np.count_nonzero(data.make_hard_erasure(x, 0.3, seed=0) == 0) == 3


@given(st.floats(0.01, 0.99), st.integers(0, 1000))
def test_erasure_keeps_other_coordinates(frac, seed):
    x = np.arange(1.0, 13.0)
    out = data.make_hard_erasure(x, frac, seed)
    kept = out != 0
    assert np.array_equal(out[kept], x[kept])
    assert np.count_nonzero(~kept) == math.ceil(round(frac * 12, 9))


def test_erasure_fraction_bounds():
    with pytest.raises(ContractError):
        data.make_hard_erasure(np.ones(4), 1.0, seed=0)


def test_fgsm_zero_epsilon_and_bound():
    model = nn.MlpModel.init([5, 8, 3], seed=0)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=5), nn.one_hot(1, 3)
    assert np.array_equal(data.make_hard_fgsm(model, x, y, 0.0), x)
    eps = 0.1
    adv = data.make_hard_fgsm(model, x, y, eps)
    grad = nn.input_gradient(model, x, y)
    delta = np.abs(adv - x)
    assert np.all(delta <= eps + 1e-15)
    np.testing.assert_allclose(delta[grad != 0], eps, rtol=1e-12)


def test_fgsm_increases_loss_on_trained_model(blobs):
    ds = data.generate_blobs(125, 4, 8, 1.0, 1.0, seed=2)
    model = _fit_linear(ds, epochs=20)
    y = ds.true_onehot[:500]
    x = ds.features[:500]
    before = nn.soft_cross_entropy(nn.forward(model, x), y)
    after = nn.soft_cross_entropy(nn.forward(model, data.make_hard_fgsm(model, x, y, 0.01)), y)
    assert np.mean(after >= before) >= 0.95


def test_add_hard_samples_erasure():
    ds = data.inject_symmetric_noise(data.generate_blobs(100, 4, 8, 2.0, 1.0, seed=0), 0.3, seed=0)
    out = data.add_hard_samples(ds, "erasure", subset_fraction=0.1, ratio=1.0, seed=0, erase_fraction=0.25)
    hard = out.group_mask("hard")
    assert hard.sum() == 40
    assert np.array_equal(out.observed[hard], out.true[hard])
    assert np.all(out.provenance[hard] == Provenance.HARD_ERASURE)
    assert np.all(np.count_nonzero(out.features[hard] == 0, axis=1) >= 2)
    assert out.subset(np.arange(len(ds))).equals(ds)


def test_add_hard_samples_ratio_zero(blobs):
    assert data.add_hard_samples(blobs, "erasure", ratio=0.0).equals(blobs)


def test_add_hard_samples_fgsm_needs_model(blobs):
    with pytest.raises(StateError):
        data.add_hard_samples(blobs, "fgsm")
    model = nn.MlpModel.init([8, 4], seed=0)
    out = data.add_hard_samples(blobs, "fgsm", attack_model=model, epsilon=0.2)
    assert np.all(out.provenance[len(blobs):] == Provenance.HARD_ADVERSARIAL)


@pytest.mark.parametrize("suffix", [".csv", ".npz"])
def test_dataset_round_trip(tmp_path, suffix):
    ds = data.inject_symmetric_noise(data.generate_blobs(20, 3, 4, 1.0, 1.0, seed=0), 0.5, seed=0)
    ds = data.add_hard_samples(ds, "erasure", ratio=1.0, seed=1)
    path = tmp_path / f"ds{suffix}"
    data.save_dataset(ds, path)
    assert data.load_dataset(path).equals(ds)


def test_csv_layout(tmp_path):
    ds = data.generate_blobs(2, 2, 2, 1.0, 1.0, seed=0)
    data.save_csv(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[1] == "f0,f1,observed_label,true_label,provenance"
    assert lines[2].endswith(",clean")
    assert len(lines) == 2 + len(ds)
