"""Softmax classifiers with analytic first- and second-order derivative oracles.

Two architectures share one code path: multinomial logistic regression
(no hidden layers) and tanh MLPs. Parameters live in a single flat float64
vector; `Model` owns the layout that maps slices of that vector onto
per-layer weight matrices and bias vectors.

Derivative oracles:
  * per-example loss gradients w.r.t. parameters and w.r.t. the input,
  * risk Hessian-vector products via a forward-over-reverse tangent pass
    (no Hessian is ever materialized),
  * the mixed second derivative d/dx <grad_params(x), u> needed to descend
    a gradient-matching objective through the input.

The per-example loss is cross-entropy of the softmax output, computed in
max-shifted log-sum-exp form with the true-class probability clamped below
at 1e-12 before the log. The l2 term belongs to the empirical risk, not to
the per-example loss, so per-example gradients exclude it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset

PROB_FLOOR = 1e-12
MAX_LOSS = -float(np.log(PROB_FLOOR))

_KINDS = ("logistic", "mlp")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and regularization choice.

    kind "logistic" is multinomial logistic regression; with l2 > 0 its
    empirical risk is strongly convex. kind "mlp" adds tanh hidden layers
    of the given sizes.
    """

    kind: str = "logistic"
    hidden: tuple[int, ...] = ()
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}, expected one of {_KINDS}")
        hidden = tuple(int(h) for h in self.hidden)
        if self.kind == "logistic" and hidden:
            raise ValueError("logistic models take no hidden sizes")
        if self.kind == "mlp" and not hidden:
            raise ValueError("mlp models need at least one hidden size")
        if any(h < 1 for h in hidden):
            raise ValueError("hidden sizes must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")
        object.__setattr__(self, "hidden", hidden)
        object.__setattr__(self, "l2", float(self.l2))

    @property
    def strongly_convex(self) -> bool:
        return self.kind == "logistic" and self.l2 > 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hidden": list(self.hidden), "l2": self.l2}

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelSpec":
        return cls(
            kind=payload.get("kind", "logistic"),
            hidden=tuple(payload.get("hidden", ())),
            l2=float(payload.get("l2", 0.0)),
        )


class Model:
    """A ModelSpec bound to input dimension d and class count C.

    Holds the flat-parameter layout and implements every derivative oracle.
    Instances are stateless apart from that layout; parameters are passed
    into every call.
    """

    def __init__(self, spec: ModelSpec, d: int, n_classes: int):
        if d < 1 or n_classes < 1:
            raise ValueError("d and n_classes must be positive")
        self.spec = spec
        self.d = int(d)
        self.n_classes = int(n_classes)
        self.dims = [self.d, *spec.hidden, self.n_classes]
        self.n_layers = len(self.dims) - 1
        self._w_slices: list[slice] = []
        self._b_slices: list[slice] = []
        offset = 0
        for k in range(1, len(self.dims)):
            rows, cols = self.dims[k], self.dims[k - 1]
            self._w_slices.append(slice(offset, offset + rows * cols))
            offset += rows * cols
            self._b_slices.append(slice(offset, offset + rows))
            offset += rows
        self.n_params = offset

    # -- parameter layout ------------------------------------------------

    def init_params(self, seed: int = 0) -> np.ndarray:
        """Deterministic initial parameters: zeros for logistic, Glorot uniform for MLP."""
        params = np.zeros(self.n_params)
        if self.spec.kind == "mlp":
            rng = np.random.default_rng(seed)
            for k in range(self.n_layers):
                rows, cols = self.dims[k + 1], self.dims[k]
                limit = np.sqrt(6.0 / (rows + cols))
                params[self._w_slices[k]] = rng.uniform(-limit, limit, rows * cols)
        return params

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views of the flat vector as per-layer (W, b) tensors."""
        self._check_params(params)
        out = []
        for k in range(self.n_layers):
            rows, cols = self.dims[k + 1], self.dims[k]
            out.append((params[self._w_slices[k]].reshape(rows, cols), params[self._b_slices[k]]))
        return out

    def _check_params(self, params: np.ndarray) -> None:
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d,):
            raise ValueError(f"expected input of length {self.d}, got shape {x.shape}")
        return x

    # -- forward ----------------------------------------------------------

    def _forward(self, params: np.ndarray, X: np.ndarray):
        """Returns (hs, P): layer inputs h^0..h^{L-1} and softmax probabilities."""
        layers = self.unpack(params)
        hs = [X]
        h = X
        for k, (W, b) in enumerate(layers):
            a = h @ W.T + b
            if k < self.n_layers - 1:
                h = np.tanh(a)
                hs.append(h)
            else:
                z = a
        z = z - z.max(axis=1, keepdims=True)
        expz = np.exp(z)
        P = expz / expz.sum(axis=1, keepdims=True)
        return hs, P

    def predict_batch(self, params: np.ndarray, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise ValueError(f"expected inputs of length {self.d}, got {X.shape[1]}")
        _, P = self._forward(params, X)
        return P.argmax(axis=1), P

    def predict(self, params: np.ndarray, x: np.ndarray):
        """(label, probability vector); argmax ties break to the lowest class index."""
        x = self._check_input(x)
        labels, P = self.predict_batch(params, x[None, :])
        return int(labels[0]), P[0]

    # -- losses -----------------------------------------------------------

    def losses(self, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-example cross-entropy, clamped at -log(1e-12). Excludes the l2 term."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        layers = self.unpack(params)
        h = X
        for k, (W, b) in enumerate(layers):
            a = h @ W.T + b
            h = np.tanh(a) if k < self.n_layers - 1 else a
        z = h - h.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        log_p_true = z[np.arange(len(y)), y] - log_norm
        return np.minimum(-log_p_true, MAX_LOSS)

    def per_example_loss(self, params: np.ndarray, x: np.ndarray, y: int) -> float:
        x = self._check_input(x)
        return float(self.losses(params, x[None, :], np.array([y]))[0])

    def empirical_risk(self, params: np.ndarray, dataset: Dataset) -> float:
        """Mean per-example loss plus (l2/2)·||params||^2."""
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        mean_loss = float(self.losses(params, dataset.features, dataset.labels).mean())
        return mean_loss + 0.5 * self.spec.l2 * float(params @ params)

    # -- first-order gradients ---------------------------------------------

    def _backward_sum(self, params, hs, dZ, need_input_grad=False):
        """Gradient of sum_i <dZ_i, z_i>-style objectives, summed over the batch."""
        layers = self.unpack(params)
        grad = np.zeros(self.n_params)
        delta = dZ
        for k in range(self.n_layers - 1, -1, -1):
            W, _ = layers[k]
            grad[self._w_slices[k]] = (delta.T @ hs[k]).ravel()
            grad[self._b_slices[k]] = delta.sum(axis=0)
            if k > 0 or need_input_grad:
                back = delta @ W
                if k > 0:
                    delta = back * (1.0 - hs[k] ** 2)
        if need_input_grad:
            return grad, back
        return grad

    def _ce_dz(self, P: np.ndarray, y: np.ndarray) -> np.ndarray:
        dZ = P.copy()
        dZ[np.arange(len(y)), y] -= 1.0
        return dZ

    def sum_grads(self, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Sum over the batch of per-example loss gradients (no l2 term)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        hs, P = self._forward(params, X)
        return self._backward_sum(params, hs, self._ce_dz(P, y))

    def grad_params(self, params: np.ndarray, x: np.ndarray, y: int) -> np.ndarray:
        """Gradient of the per-example loss w.r.t. the flat parameter vector."""
        x = self._check_input(x)
        return self.sum_grads(params, x[None, :], np.array([y]))

    def risk_grad(self, params: np.ndarray, dataset: Dataset) -> np.ndarray:
        """Full-batch gradient of the empirical risk (mean loss + l2 term)."""
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        g = self.sum_grads(params, dataset.features, dataset.labels) / len(dataset)
        return g + self.spec.l2 * params

    def grad_input(self, params: np.ndarray, x: np.ndarray, y: int) -> np.ndarray:
        """Gradient of the per-example loss w.r.t. the feature vector."""
        x = self._check_input(x)
        hs, P = self._forward(params, x[None, :])
        dZ = self._ce_dz(P, np.array([y]))
        _, dX = self._backward_sum(params, hs, dZ, need_input_grad=True)
        return dX[0]

    def per_example_grads(self, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """(m, n_params) matrix of individual loss gradients (no l2 term)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.int64))
        layers = self.unpack(params)
        hs, P = self._forward(params, X)
        out = np.zeros((X.shape[0], self.n_params))
        delta = self._ce_dz(P, y)
        for k in range(self.n_layers - 1, -1, -1):
            W, _ = layers[k]
            rows, cols = self.dims[k + 1], self.dims[k]
            out[:, self._w_slices[k]] = np.einsum("mi,mj->mij", delta, hs[k]).reshape(-1, rows * cols)
            out[:, self._b_slices[k]] = delta
            if k > 0:
                delta = (delta @ W) * (1.0 - hs[k] ** 2)
        return out

    # -- second-order oracles ----------------------------------------------

    def _tangent_pass(self, params: np.ndarray, X: np.ndarray, y: np.ndarray, direction: np.ndarray):
        """Forward-over-reverse pass: directional derivative (along `direction`
        in parameter space) of the per-example parameter gradients, summed over
        the batch, and of the per-example input gradients, per row.

        Returns (param_tangent_sum, input_tangent_rows).
        """
        self._check_params(direction)
        layers = self.unpack(params)
        dirs = self.unpack(direction)

        hs = [X]
        r_hs = [np.zeros_like(X)]
        h, rh = X, np.zeros_like(X)
        for k in range(self.n_layers):
            W, b = layers[k]
            V, c = dirs[k]
            a = h @ W.T + b
            ra = rh @ W.T + h @ V.T + c
            if k < self.n_layers - 1:
                h = np.tanh(a)
                rh = (1.0 - h**2) * ra
                hs.append(h)
                r_hs.append(rh)
            else:
                z, rz = a, ra

        z = z - z.max(axis=1, keepdims=True)
        expz = np.exp(z)
        P = expz / expz.sum(axis=1, keepdims=True)

        delta = self._ce_dz(P, y)
        pr = P * rz
        r_delta = pr - P * pr.sum(axis=1, keepdims=True)

        out = np.zeros(self.n_params)
        for k in range(self.n_layers - 1, -1, -1):
            W, _ = layers[k]
            V, _ = dirs[k]
            out[self._w_slices[k]] = (r_delta.T @ hs[k] + delta.T @ r_hs[k]).ravel()
            out[self._b_slices[k]] = r_delta.sum(axis=0)
            if k > 0:
                s = 1.0 - hs[k] ** 2
                t = delta @ W
                r_t = r_delta @ W + delta @ V
                r_s = -2.0 * hs[k] * r_hs[k]
                r_delta = r_t * s + t * r_s
                delta = t * s
        input_tangent = r_delta @ layers[0][0] + delta @ dirs[0][0]
        return out, input_tangent

    def hvp(self, params: np.ndarray, dataset: Dataset, v: np.ndarray) -> np.ndarray:
        """Risk-Hessian-vector product H·v with H = (1/n)·sum(per-example Hessians) + l2·I.

        Computed by a tangent pass; the Hessian is never materialized. An
        empty dataset contributes zero curvature, leaving the l2 term only.
        """
        self._check_params(np.asarray(v))
        v = np.asarray(v, dtype=np.float64)
        if len(dataset) == 0:
            return self.spec.l2 * v
        tangent, _ = self._tangent_pass(params, dataset.features, dataset.labels, v)
        return tangent / len(dataset) + self.spec.l2 * v

    def grad_input_of_param_grad_dot(
        self, params: np.ndarray, x: np.ndarray, y: int, u: np.ndarray
    ) -> np.ndarray:
        """Gradient w.r.t. features of the scalar <grad_params(x, y), u>.

        Uses symmetry of second derivatives: this equals the directional
        derivative, along u in parameter space, of the input gradient.
        """
        x = self._check_input(x)
        u = np.asarray(u, dtype=np.float64)
        _, input_tangent = self._tangent_pass(params, x[None, :], np.array([y]), u)
        return input_tangent[0]


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, params: np.ndarray, spec: ModelSpec, d: int, n_classes: int, seed: int) -> None:
    """JSON header line + raw little-endian float64 parameter array."""
    header = {
        "spec": spec.to_dict(),
        "d": int(d),
        "n_classes": int(n_classes),
        "seed": int(seed),
        "n_params": int(params.shape[0]),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(params, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, spec, d, n_classes, seed)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    params = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    if params.shape[0] != header["n_params"]:
        raise ValueError(
            f"checkpoint holds {params.shape[0]} parameters, header says {header['n_params']}"
        )
    spec = ModelSpec.from_dict(header["spec"])
    return params, spec, int(header["d"]), int(header["n_classes"]), int(header["seed"])
