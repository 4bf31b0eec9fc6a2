from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.data import (
    DataError,
    Diverged,
    EmptyClass,
    InvalidAlpha,
    LabeledDataset,
    ShapeMismatch,
    blob_centers,
    dirichlet_partition,
    evaluate,
    iid_partition,
    label_heterogeneity,
    linear_trainer,
    make_blobs,
    make_regression,
    mlp_trainer,
    per_class_counts,
)

BALANCED = np.arange(1800) % 3


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.floats(0.05, 100), st.integers(0, 2**32 - 1))
def test_partition_is_a_partition(n_clients, alpha, seed):
    spec = dirichlet_partition(BALANCED, n_clients, alpha, seed)
    everything = np.concatenate(spec.assignments)
    assert sorted(everything.tolist()) == list(range(1800))
    assert all(len(a) >= 1 for a in spec.assignments)
    again = dirichlet_partition(BALANCED, n_clients, alpha, seed)
    assert all(np.array_equal(x, y) for x, y in zip(spec.assignments, again.assignments))


def test_single_client_gets_everything():
    for alpha in (0.01, 1.0, 1e6):
        spec = dirichlet_partition(BALANCED, 1, alpha, 3)
        assert spec.assignments[0].tolist() == list(range(1800))


def test_large_alpha_is_near_uniform():
    spec = dirichlet_partition(BALANCED, 3, 1000.0, 42)
    counts = per_class_counts(BALANCED, spec)
    assert counts == [[188, 203, 202], [208, 198, 190], [204, 199, 208]]
    shares = np.asarray(counts) / 600
    assert shares.min() >= 0.28 and shares.max() <= 0.39


def test_tiny_alpha_repairs_empty_clients():
    labels = np.arange(30) % 3
    spec = dirichlet_partition(labels, 10, 0.01, 0)
    assert min(spec.sizes()) >= 1
    assert sum(spec.sizes()) == 30


def test_heterogeneity_extremes():
    assert label_heterogeneity(BALANCED, iid_partition(1800, 1, 0)) == 0.0
    # each client holds exactly one class: TV distance to the global mix is 2/3
    by_class = dirichlet_partition(BALANCED, 3, 1.0, 0).__class__(
        [np.flatnonzero(BALANCED == k) for k in range(3)], 1.0, 0, 3
    )
    assert label_heterogeneity(BALANCED, by_class) == pytest.approx(2 / 3)


@pytest.mark.parametrize(
    "labels, n_clients, alpha, error",
    [
        (BALANCED, 3, 0.0, InvalidAlpha),
        (BALANCED, 3, -1.0, InvalidAlpha),
        (BALANCED, 3, float("nan"), InvalidAlpha),
        (np.array([0, 2, 0, 2]), 2, 1.0, EmptyClass),
        (np.array([0, 1]), 3, 1.0, DataError),
        (BALANCED, 0, 1.0, DataError),
    ],
)
def test_partition_errors(labels, n_clients, alpha, error):
    with pytest.raises(error):
        dirichlet_partition(labels, n_clients, alpha, 0)


def test_generators_are_seeded():
    a, wa = make_regression(50, 3, 0.1, 5)
    b, wb = make_regression(50, 3, 0.1, 5)
    assert np.array_equal(a.features, b.features) and np.array_equal(wa, wb)
    assert np.array_equal(make_blobs(90, 2, 3, 1.0, 5).features, make_blobs(90, 2, 3, 1.0, 5).features)
    assert np.bincount(make_blobs(90, 2, 3, 1.0, 5).labels).tolist() == [30, 30, 30]


def test_noiseless_regression_is_identifiable():
    ds, w_true = make_regression(200, 5, 0.0, 1)
    x = np.c_[ds.features, np.ones(ds.n)]
    sol = np.linalg.lstsq(x, ds.labels, rcond=None)[0]
    assert np.abs(sol[:5] - w_true).max() <= 1e-8 and abs(sol[5]) <= 1e-8
    assert evaluate({"w": w_true, "b": np.zeros(())}, ds)["mse"] <= 1e-25


def test_trained_regression_reaches_noise_floor():
    ds, _ = make_regression(2000, 5, 0.1, 3)
    train, test = ds.split(0.5, 4)
    trainer = linear_trainer(train, lr=0.1, epochs=500)
    params, n, _ = trainer.train(trainer.initial_params())
    x = np.c_[train.features, np.ones(train.n)]
    ols = np.linalg.lstsq(x, train.labels, rcond=None)[0]
    assert np.abs(params["w"] - ols[:5]).max() <= 1e-10
    mse = evaluate(params, test)["mse"]
    assert n == 1000
    assert 0.01 <= mse <= 1.2 * 0.01  # measured 1.0064 * sigma^2


def test_separable_blobs_nearest_centroid():
    ds = make_blobs(600, 3, 4, 1e-6, 9)
    centers = blob_centers(4, 3, 9)
    nearest = np.argmin(((ds.features[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(nearest, ds.labels)


def test_trained_classifier_against_bayes_rate():
    big = make_blobs(100_000, 2, 4, 1.0, 11)
    centers = blob_centers(4, 2, 11)
    bayes = np.mean(np.argmin(((big.features[:, None] - centers[None]) ** 2).sum(-1), axis=1) == big.labels)
    assert bayes == pytest.approx(0.97533, abs=1e-9)
    train, test = make_blobs(4000, 2, 4, 1.0, 11).split(0.5, 5)
    trainer = linear_trainer(train, lr=0.5, epochs=300)
    acc = evaluate(trainer.train(trainer.initial_params())[0], test)["accuracy"]
    se = np.sqrt(bayes * (1 - bayes) / test.n)
    assert bayes - 0.01 - 4 * se <= acc <= bayes + 4 * se  # measured 0.9725


def test_one_gradient_step_by_hand():
    ds = LabeledDataset(np.array([[1.0]]), np.array([2.0]))
    trainer = linear_trainer(ds, lr=0.1, epochs=1)
    params, _, metrics = trainer.train({"w": np.zeros(1), "b": np.zeros(())})
    # loss (w*x + b - y)^2 has gradient 2 (yhat - y) x, so w = 0 - 0.1 * 2 * (0 - 2) * 1
    assert params["w"].tolist() == [pytest.approx(0.4, abs=1e-15)]
    assert float(params["b"]) == pytest.approx(0.4, abs=1e-15)
    assert metrics["loss"] == 4.0


def test_zero_epochs_is_identity():
    ds = make_blobs(90, 2, 3, 1.0, 0)
    for trainer in (linear_trainer(ds, 0.1, 0), mlp_trainer(ds, [4], 0.1, 0)):
        start = trainer.initial_params()
        out, _, metrics = trainer.train(start)
        assert all(np.array_equal(out[k], start[k]) for k in start) and metrics == {}


def test_trainer_keeps_dtypes():
    ds = make_blobs(90, 2, 3, 1.0, 0)
    trainer = linear_trainer(ds, 0.1, 2)
    start = {k: v.astype(np.float32) for k, v in trainer.initial_params().items()}
    out, _, _ = trainer.train(start)
    assert all(v.dtype == np.float32 for v in out.values())


def test_divergence_is_reported():
    ds, _ = make_regression(50, 2, 0.1, 0)
    with pytest.raises(Diverged):
        linear_trainer(ds, lr=1e6, epochs=50).train({"w": np.zeros(2), "b": np.zeros(())})


def test_minibatch_is_seeded_per_round():
    ds = make_blobs(90, 2, 3, 1.0, 0)
    t = linear_trainer(ds, 0.1, 1, batch=16, seed=3)
    a = t.train(t.initial_params(), round=1)[0]
    b = t.train(t.initial_params(), round=1)[0]
    c = t.train(t.initial_params(), round=2)[0]
    assert np.array_equal(a["W"], b["W"]) and not np.array_equal(a["W"], c["W"])


def test_evaluate_reference_predictors():
    ds = make_blobs(3000, 2, 3, 0.5, 2)
    centers = blob_centers(3, 2, 2)
    perfect = {"W": 200.0 * centers.T, "b": -100.0 * (centers**2).sum(axis=1)}
    assert evaluate(perfect, ds)["accuracy"] == 1.0
    constant = {"W": np.zeros((2, 3)), "b": np.array([1.0, 0.0, 0.0])}
    acc = evaluate(constant, ds)["accuracy"]
    assert abs(acc - 1 / 3) <= 3 * np.sqrt((1 / 3) * (2 / 3) / ds.n)


def test_evaluate_layout_mismatch():
    ds, _ = make_regression(20, 2, 0.1, 0)
    with pytest.raises(ShapeMismatch):
        evaluate({"W": np.zeros((2, 3)), "b": np.zeros(3)}, ds)
    with pytest.raises(ShapeMismatch):
        evaluate({"nonsense": np.zeros(2)}, ds)
