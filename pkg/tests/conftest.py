from __future__ import annotations

import numpy as np
import pytest

from unlearn_verify.diffcore import Dataset, Model, ModelSpec, TrainConfig, make_blobs


def central_diff_grad(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def relative_error(approx, exact):
    exact = np.asarray(exact)
    denom = max(float(np.linalg.norm(exact)), 1e-300)
    return float(np.linalg.norm(np.asarray(approx) - exact)) / denom


def explicit_risk_hessian_fd(model: Model, params, dataset, h=1e-5):
    """Risk Hessian column by column via central differences of the analytic gradient."""
    n = model.n_params
    H = np.zeros((n, n))
    for i in range(n):
        tp, tm = params.copy(), params.copy()
        tp[i] += h
        tm[i] -= h
        H[:, i] = (model.risk_grad(tp, dataset) - model.risk_grad(tm, dataset)) / (2.0 * h)
    return 0.5 * (H + H.T)


def explicit_logistic_hessian(model: Model, params, dataset):
    """Closed-form risk Hessian of the softmax-linear model (test oracle)."""
    X, y = dataset.features, dataset.labels
    n, d = X.shape
    C = model.n_classes
    _, P = model.predict_batch(params, X)
    H = np.zeros((model.n_params, model.n_params))
    for m in range(n):
        p = P[m]
        S = np.diag(p) - np.outer(p, p)
        xa = np.append(X[m], 1.0)
        block = np.kron(S, np.outer(xa, xa))
        perm = np.empty(C * (d + 1), dtype=np.int64)
        for a in range(C):
            for j in range(d + 1):
                perm[a * (d + 1) + j] = a * d + j if j < d else C * d + a
        full = np.zeros_like(block)
        full[np.ix_(perm, perm)] = block
        H += full
    H /= n
    H[np.diag_indices_from(H)] += model.spec.l2
    return H


@pytest.fixture(scope="session")
def blob_dataset():
    return make_blobs(150, 5, 3, spread=0.25, seed=11)


@pytest.fixture(scope="session")
def blob_pool():
    return make_blobs(60, 5, 3, spread=0.25, seed=1011)


@pytest.fixture(scope="session")
def logistic_spec():
    return ModelSpec("logistic", (), 1e-2)


@pytest.fixture(scope="session")
def train_cfg():
    return TrainConfig(epochs=100, seed=0, tol=1e-8)


@pytest.fixture(scope="session")
def trained_logistic(blob_dataset, logistic_spec, train_cfg):
    from unlearn_verify.diffcore import train

    model = Model(logistic_spec, blob_dataset.d, blob_dataset.n_classes)
    params = train(blob_dataset, logistic_spec, train_cfg)
    return model, params
