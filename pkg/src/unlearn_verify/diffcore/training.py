"""Deterministic training: damped Newton for the convex case, seeded mini-batch
gradient descent for MLPs.

The determinism contract is strict: identical (dataset, spec, config) must
reproduce bit-identical parameters. Logistic models start from zeros and take
full-batch Newton steps with backtracking, so the seed only matters for MLPs,
where it fixes both the initialization and the shuffling order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .models import Model, ModelSpec


class TrainingDivergedError(RuntimeError):
    """Non-finite loss encountered while training; carries the epoch index."""

    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


class ConvergenceError(RuntimeError):
    """Convex training ran out of iterations above the gradient-norm tolerance."""

    def __init__(self, grad_norm: float, tol: float, epochs: int):
        super().__init__(
            f"risk gradient norm {grad_norm:.3e} above tolerance {tol:.3e} after {epochs} iterations"
        )
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    step_size: float = 0.5
    batch_size: int = 64
    seed: int = 0
    tol: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if self.tol < 0:
            raise ValueError("convergence tolerance must be non-negative")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "step_size": self.step_size,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "tol": self.tol,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        return cls(**payload)


def train(dataset: Dataset, spec: ModelSpec, cfg: TrainConfig) -> np.ndarray:
    """Fit a model to the dataset; returns the flat parameter vector.

    For logistic specs the result satisfies ||risk gradient|| <= cfg.tol
    (damped Newton; raises ConvergenceError if the iteration cap is hit
    first). MLPs run cfg.epochs passes of seeded mini-batch descent.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = Model(spec, dataset.d, dataset.n_classes)
    if spec.kind == "logistic":
        return _train_newton(model, dataset, cfg)
    return _train_sgd(model, dataset, cfg)


def _logistic_risk_hessian(model: Model, params: np.ndarray, dataset: Dataset) -> np.ndarray:
    """Explicit risk Hessian for the softmax-linear model (small, so cheap).

    Per example the Hessian is kron(diag(p) - p p^T, xx^T) in augmented
    coordinates; assembled here directly in the flat layout (W rows, then b).
    """
    X, y = dataset.features, dataset.labels
    n, d = X.shape
    C = model.n_classes
    _, P = model.predict_batch(params, X)
    Xa = np.column_stack([X, np.ones(n)])
    # S[m] = diag(p_m) - p_m p_m^T
    S = -np.einsum("ma,mb->mab", P, P)
    S[:, np.arange(C), np.arange(C)] += P
    H_aug = np.einsum("mab,mj,mk->ajbk", S, Xa, Xa) / n
    H_aug = H_aug.reshape(C * (d + 1), C * (d + 1))
    # Map augmented index (class a, col j) -> flat layout (W.ravel() then b).
    perm = np.empty(C * (d + 1), dtype=np.int64)
    for a in range(C):
        for j in range(d + 1):
            perm[a * (d + 1) + j] = a * d + j if j < d else C * d + a
    H = np.zeros_like(H_aug)
    H[np.ix_(perm, perm)] = H_aug
    H[np.diag_indices_from(H)] += model.spec.l2
    return H


def _train_newton(model: Model, dataset: Dataset, cfg: TrainConfig) -> np.ndarray:
    params = model.init_params(cfg.seed)
    risk = model.empirical_risk(params, dataset)
    for it in range(cfg.epochs):
        if not np.isfinite(risk):
            raise TrainingDivergedError(it)
        grad = model.risk_grad(params, dataset)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= cfg.tol:
            return params
        H = _logistic_risk_hessian(model, params, dataset)
        # Tiny jitter keeps the solve well-posed when l2 == 0 on separable data.
        H[np.diag_indices_from(H)] += 1e-12
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        descent = float(grad @ step)
        alpha = 1.0
        improved = False
        while alpha > 1e-12:
            candidate = params - alpha * step
            new_risk = model.empirical_risk(candidate, dataset)
            # Strict decrease required: at the float plateau the Armijo bound
            # degenerates to equality and would accept a no-op step.
            if np.isfinite(new_risk) and new_risk < risk and new_risk <= risk - 1e-4 * alpha * descent:
                improved = True
                break
            alpha *= 0.5
        if not improved:
            # Risk is flat to float precision; the full Newton step still
            # contracts the gradient quadratically near the optimum.
            candidate = params - step
            cand_grad = model.risk_grad(candidate, dataset)
            if np.isfinite(model.empirical_risk(candidate, dataset)) and float(
                np.linalg.norm(cand_grad)
            ) < grad_norm:
                params = candidate
                risk = model.empirical_risk(params, dataset)
                continue
            break
        params = candidate
        risk = new_risk
    grad_norm = float(np.linalg.norm(model.risk_grad(params, dataset)))
    if grad_norm <= cfg.tol:
        return params
    raise ConvergenceError(grad_norm, cfg.tol, cfg.epochs)


def _train_sgd(model: Model, dataset: Dataset, cfg: TrainConfig) -> np.ndarray:
    params = model.init_params(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(dataset)
    X, y = dataset.features, dataset.labels
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grad = model.sum_grads(params, X[batch], y[batch]) / batch.size
            params = params - cfg.step_size * (grad + model.spec.l2 * params)
        if not np.isfinite(model.empirical_risk(params, dataset)):
            raise TrainingDivergedError(epoch)
    return params
