from __future__ import annotations

import numpy as np
import pytest
from scipy.stats import spearmanr

from unlearn_verify.diffcore import Dataset, Model, ModelSpec, TrainConfig, make_blobs, train
from unlearn_verify.influence import (
    InfluenceConfig,
    InfluenceReport,
    NegativeCurvatureError,
    influence_on_loss,
    inverse_hvp,
    leave_out_oracle,
    rank_training_samples,
    read_reports_jsonl,
    write_reports_jsonl,
)


def test_config_validation():
    with pytest.raises(ValueError):
        InfluenceConfig(damping=-0.1)
    with pytest.raises(ValueError):
        InfluenceConfig(cg_tol=0.0)
    with pytest.raises(ValueError):
        InfluenceConfig(cg_max_iter=0)
    assert InfluenceConfig.for_spec(ModelSpec("logistic", (), 1e-2)).damping == 0.0
    assert InfluenceConfig.for_spec(ModelSpec("mlp", (4,), 1e-2)).damping == 0.01


def test_inverse_hvp_zero_rhs():
    spec = ModelSpec("logistic", (), 1e-2)
    model = Model(spec, 3, 2)
    ds = make_blobs(20, 3, 2, seed=0)
    out = inverse_hvp(np.zeros(model.n_params), model, ds, np.zeros(model.n_params))
    assert np.allclose(out, 0.0)


def test_inverse_hvp_pure_l2_case():
    # no data curvature: H = l2 * I, so the solve returns v / l2
    lam = 0.25
    spec = ModelSpec("logistic", (), lam)
    model = Model(spec, 3, 2)
    empty = Dataset(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), 2)
    v = np.arange(1.0, model.n_params + 1)
    out = inverse_hvp(np.zeros(model.n_params), model, empty, v)
    assert np.allclose(out, v / lam, atol=1e-9)


def test_inverse_hvp_residual_contract(trained_logistic, blob_dataset):
    model, params = trained_logistic
    rng = np.random.default_rng(1)
    cfg = InfluenceConfig(cg_tol=1e-10)
    for _ in range(5):
        v = rng.normal(0, 1, model.n_params)
        r = inverse_hvp(params, model, blob_dataset, v, cfg)
        resid = model.hvp(params, blob_dataset, r) - v
        assert np.linalg.norm(resid) <= cfg.cg_tol * np.linalg.norm(v) * 1.01


def test_negative_curvature_detected():
    # an indefinite risk Hessian: zero-l2 model at parameters where the
    # data term is singular along bias-shift directions is fine, so build
    # indefiniteness explicitly through damping < negative eigenvalue: use
    # an MLP at a saddle-ish random point with a negative-curvature direction.
    rng = np.random.default_rng(3)
    spec = ModelSpec("mlp", (4,), 0.0)
    model = Model(spec, 3, 2)
    ds = make_blobs(15, 3, 2, spread=0.3, seed=3)
    found = False
    for _ in range(20):
        params = rng.normal(0, 1.5, model.n_params)
        try:
            inverse_hvp(params, model, ds, rng.normal(0, 1, model.n_params), InfluenceConfig(cg_tol=1e-12, cg_max_iter=model.n_params * 4))
        except NegativeCurvatureError:
            found = True
            break
        except RuntimeError:
            continue
    assert found, "expected at least one indefinite point among random MLPs"


def test_influence_empty_removed_is_zero(trained_logistic, blob_dataset, blob_pool):
    model, params = trained_logistic
    x, y = blob_pool.features[0], int(blob_pool.labels[0])
    assert influence_on_loss(params, model, blob_dataset, [], x, y) == 0.0


def test_influence_additive_over_disjoint_subsets(trained_logistic, blob_dataset, blob_pool):
    model, params = trained_logistic
    x, y = blob_pool.features[1], int(blob_pool.labels[1])
    cfg = InfluenceConfig()
    a = influence_on_loss(params, model, blob_dataset, [0, 3, 7], x, y, cfg)
    b = influence_on_loss(params, model, blob_dataset, [12, 30], x, y, cfg)
    ab = influence_on_loss(params, model, blob_dataset, [0, 3, 7, 12, 30], x, y, cfg)
    assert abs(ab - (a + b)) <= 1e-10


def test_single_removal_estimates_match_retraining_oracle(
    trained_logistic, blob_dataset, blob_pool, logistic_spec, train_cfg
):
    model, params = trained_logistic
    n = len(blob_dataset)
    retrained = [train(blob_dataset.without([i]), logistic_spec, train_cfg) for i in range(n)]

    rhos, agrees = [], []
    for t in range(3):
        x, y = blob_pool.features[t], int(blob_pool.labels[t])
        order, scores = rank_training_samples(params, model, blob_dataset, x, y, InfluenceConfig())
        est = np.empty(n)
        est[order] = scores
        before = model.per_example_loss(params, x, y)
        exact = np.array(
            [model.per_example_loss(retrained[i], x, y) - before for i in range(n)]
        )
        rhos.append(spearmanr(est, exact).statistic)
        agrees.append(np.mean(np.sign(est) == np.sign(exact)))
    assert min(rhos) >= 0.9
    assert min(agrees) >= 0.9


def test_rank_output_is_permutation(trained_logistic, blob_dataset, blob_pool):
    model, params = trained_logistic
    order, scores = rank_training_samples(
        params, model, blob_dataset, blob_pool.features[2], int(blob_pool.labels[2])
    )
    assert sorted(order.tolist()) == list(range(len(blob_dataset)))
    assert np.all(np.diff(scores) >= 0)


def test_harmful_head_reduces_loss_random_removal_does_not(
    trained_logistic, blob_dataset, blob_pool, logistic_spec, train_cfg
):
    model, params = trained_logistic
    labels, _ = model.predict_batch(params, blob_pool.features)
    mis = np.where(labels != blob_pool.labels)[0]
    assert len(mis) > 0
    x, y = blob_pool.features[mis[0]], int(blob_pool.labels[mis[0]])
    order, _ = rank_training_samples(params, model, blob_dataset, x, y, InfluenceConfig())
    harm = leave_out_oracle(blob_dataset, logistic_spec, train_cfg, [int(order[0])], x, y)
    assert harm < 0

    before = model.per_example_loss(params, x, y)
    rng = np.random.default_rng(17)
    rand_changes = [
        abs(leave_out_oracle(blob_dataset, logistic_spec, train_cfg, [int(rng.integers(len(blob_dataset)))], x, y))
        for _ in range(8)
    ]
    assert np.mean(rand_changes) / before < 0.05


def test_harmful_helpful_geometry_for_misclassified_point():
    # Planted construction: a handful of class-0-labeled samples sit at the
    # class-1 center. A class-0 test point that also resembles class 1 is
    # misclassified as 1. Under the retraining-faithful orientation those
    # planted lookalikes are its strongest HELPERS (they are the only
    # evidence for its true label in that region), while the top harmful
    # samples carry the predicted label.
    rng = np.random.default_rng(5)
    d = 6
    n_half, k = 60, 6
    c0, c1 = np.full(d, 0.30), np.full(d, 0.70)
    f0 = np.clip(c0 + rng.normal(0, 0.08, (n_half, d)), 0, 1)
    f1 = np.clip(c1 + rng.normal(0, 0.08, (n_half, d)), 0, 1)
    planted = np.clip(c1 + rng.normal(0, 0.05, (k, d)), 0, 1)
    ds = Dataset(
        np.vstack([f0, f1, planted]),
        np.array([0] * n_half + [1] * n_half + [0] * k),
        2,
    )
    planted_idx = set(range(2 * n_half, 2 * n_half + k))

    spec = ModelSpec("logistic", (), 1e-2)
    cfg = TrainConfig(seed=0)
    model = Model(spec, d, 2)
    params = train(ds, spec, cfg)

    x_t = np.clip(c1 + rng.normal(0, 0.05, d), 0, 1)
    y_t = 0
    pred, _ = model.predict(params, x_t)
    assert pred == 1  # misclassified toward the lookalike class

    order, _ = rank_training_samples(params, model, ds, x_t, y_t, InfluenceConfig())
    top_harmful = order[:5]
    top_helpful = order[-k:]

    # harmful head carries the predicted label; removal genuinely reduces loss
    assert np.all(ds.labels[top_harmful] == pred)
    assert leave_out_oracle(ds, spec, cfg, [int(order[0])], x_t, y_t) < 0

    # the true-label lookalikes planted near the predicted-class mean
    # dominate the helpful tail, and removing the strongest raises the loss
    assert len(planted_idx & set(int(i) for i in top_helpful)) >= k - 2
    assert leave_out_oracle(ds, spec, cfg, [int(order[-1])], x_t, y_t) > 0

    # helpful lookalikes lie nearer the predicted class's mean than their own
    mean_pred = ds.features[ds.labels == 1].mean(axis=0)
    mean_true = ds.features[: n_half].mean(axis=0)
    for i in planted_idx & set(int(i) for i in top_helpful):
        assert np.linalg.norm(ds.features[i] - mean_pred) < np.linalg.norm(
            ds.features[i] - mean_true
        )


def test_leave_out_oracle_empty_set_is_exactly_zero(blob_dataset, logistic_spec, train_cfg):
    x = blob_dataset.features[0]
    y = int(blob_dataset.labels[0])
    assert leave_out_oracle(blob_dataset, logistic_spec, train_cfg, [], x, y) == 0.0


def test_removing_duplicate_of_test_point_increases_its_loss():
    base = make_blobs(30, 4, 2, spread=0.3, seed=21)
    test_x, test_y = base.features[0], int(base.labels[0])
    # dataset containing an exact duplicate of the test point
    feats = np.vstack([base.features, test_x])
    labels = np.append(base.labels, test_y)
    ds = Dataset(feats, labels, 2)
    spec = ModelSpec("logistic", (), 1e-3)
    cfg = TrainConfig(seed=0)
    # the duplicate and the original both anchor the test point; removing
    # the appended copy must strictly raise its loss
    change = leave_out_oracle(ds, spec, cfg, [len(ds) - 1], test_x, test_y)
    assert change > 0


def test_leave_out_oracle_rejects_full_removal(blob_dataset, logistic_spec, train_cfg):
    with pytest.raises(ValueError):
        leave_out_oracle(
            blob_dataset,
            logistic_spec,
            train_cfg,
            list(range(len(blob_dataset))),
            blob_dataset.features[0],
            0,
        )


def test_nonconvex_mlp_path_still_runs_and_reports():
    # rank agreement may degrade off the convex regime; the contract is that
    # the damped estimate and the oracle both run and produce finite numbers.
    # influence analysis presumes a near-minimizer, so train long enough for
    # SGD to settle; far from a minimum the damped Hessian is indefinite and
    # inverse_hvp correctly refuses.
    ds = make_blobs(40, 3, 2, spread=0.3, seed=31)
    spec = ModelSpec("mlp", (5,), 1e-3)
    cfg = TrainConfig(epochs=300, step_size=0.3, seed=2)
    model = Model(spec, 3, 2)
    params = train(ds, spec, cfg)
    icfg = InfluenceConfig.for_spec(spec)
    assert icfg.damping > 0
    x, y = ds.features[0], int(ds.labels[0])
    est = influence_on_loss(params, model, ds, [1, 2], x, y, icfg)
    exact = leave_out_oracle(ds, spec, cfg, [1, 2], x, y)
    assert np.isfinite(est) and np.isfinite(exact)
    report = InfluenceReport(
        indices=(1, 2), estimate=est, exact=exact, test_id="train-0", seed=2,
        extras={"convex": False, "abs_gap": abs(est - exact)},
    )
    assert report.extras["convex"] is False


def test_report_jsonl_roundtrip(tmp_path):
    reports = [
        InfluenceReport((1, 2), -0.5, -0.48, "pool-3", 7),
        InfluenceReport((4,), 0.25, None, "pool-4", 8, extras={"note": "estimate only"}),
    ]
    path = tmp_path / "reports.jsonl"
    write_reports_jsonl(path, reports)
    back = read_reports_jsonl(path)
    assert back == reports
