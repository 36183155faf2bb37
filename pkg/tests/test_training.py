from __future__ import annotations

import numpy as np
import pytest

from unlearn_verify.diffcore import (
    Dataset,
    Model,
    ModelSpec,
    TrainConfig,
    make_blobs,
    make_rings,
    train,
)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(step_size=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(seed=-1)
    with pytest.raises(ValueError):
        TrainConfig(tol=-1e-3)


def test_empty_dataset_rejected():
    empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), 2)
    with pytest.raises(ValueError):
        train(empty, ModelSpec("logistic", (), 1e-3), TrainConfig())


def test_single_class_predicts_that_class_everywhere():
    feats = np.random.default_rng(0).uniform(0, 1, (30, 3))
    ds = Dataset(feats, np.full(30, 2, dtype=np.int64), 4)
    spec = ModelSpec("logistic", (), 1e-3)
    params = train(ds, spec, TrainConfig())
    model = Model(spec, 3, 4)
    probes = np.random.default_rng(1).uniform(0, 1, (50, 3))
    labels, _ = model.predict_batch(params, probes)
    assert np.all(labels == 2)


def test_separable_blobs_reach_full_training_accuracy():
    # two Gaussian blobs with centers ~0.5 apart and sigma 0.05: margin >> 2 sigma
    rng = np.random.default_rng(7)
    n_half = 40
    f0 = np.clip(0.25 + rng.normal(0, 0.05, (n_half, 2)), 0, 1)
    f1 = np.clip(0.75 + rng.normal(0, 0.05, (n_half, 2)), 0, 1)
    ds = Dataset(np.vstack([f0, f1]), np.repeat([0, 1], n_half), 2)
    spec = ModelSpec("logistic", (), 1e-3)
    params = train(ds, spec, TrainConfig())
    model = Model(spec, 2, 2)
    labels, _ = model.predict_batch(params, ds.features)
    assert (labels == ds.labels).mean() == 1.0


def test_training_determinism_is_bit_exact():
    ds = make_blobs(80, 4, 3, seed=3)
    for spec, cfg in [
        (ModelSpec("logistic", (), 1e-3), TrainConfig(seed=5)),
        (ModelSpec("mlp", (6,), 1e-3), TrainConfig(epochs=40, step_size=0.3, seed=5)),
    ]:
        a = train(ds, spec, cfg)
        b = train(ds, spec, cfg)
        assert np.array_equal(a, b)


def test_convex_training_meets_gradient_tolerance():
    ds = make_blobs(120, 6, 3, seed=4)
    spec = ModelSpec("logistic", (), 1e-3)
    for tol in (1e-6, 1e-8):
        cfg = TrainConfig(epochs=100, seed=0, tol=tol)
        params = train(ds, spec, cfg)
        model = Model(spec, 6, 3)
        assert np.linalg.norm(model.risk_grad(params, ds)) <= tol


def test_risk_at_optimum_below_perturbed_risk(trained_logistic, blob_dataset):
    model, params = trained_logistic
    base = model.empirical_risk(params, blob_dataset)
    rng = np.random.default_rng(12)
    for _ in range(10):
        noise = rng.normal(0, 1, params.shape)
        noise *= 0.1 / np.linalg.norm(noise)
        assert model.empirical_risk(params + noise, blob_dataset) >= base


def test_mlp_solves_rings():
    rings = make_rings(240, seed=2)
    spec = ModelSpec("mlp", (16,), 1e-4)
    cfg = TrainConfig(epochs=600, step_size=0.5, batch_size=32, seed=5)
    params = train(rings, spec, cfg)
    model = Model(spec, 2, 2)
    labels, _ = model.predict_batch(params, rings.features)
    assert (labels == rings.labels).mean() >= 0.97
