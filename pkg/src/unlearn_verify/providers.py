"""Simulated MLaaS model providers.

A provider owns a training dataset and a model, answers prediction requests,
and responds to unlearning requests according to its behavior kind:

  * honest_retrain: drop the requested rows and retrain from scratch with
    the original seed.
  * noop: acknowledge and change nothing.
  * mia_bypass: keep the data; fine-tune so the outputs of the requested
    samples align with same-label held-out outputs (defeats output-based
    membership checks without unlearning anything).
  * backdoor_bypass: keep the data; fine-tune the requested samples toward
    their original true labels mixed with retained data (defeats
    trigger-pattern checks without unlearning anything).

Every served request is appended to an ordered log; requests are serialized
through a lock, so one provider behaves as a single-threaded actor. The
request/response message schema is plain JSON-compatible dicts so a socket
transport could be added without changing semantics.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .diffcore import Dataset, Model, ModelSpec, TrainConfig, train


class ProviderKind(str, Enum):
    HONEST_RETRAIN = "honest_retrain"
    NOOP = "noop"
    MIA_BYPASS = "mia_bypass"
    BACKDOOR_BYPASS = "backdoor_bypass"


@dataclass(frozen=True)
class BypassConfig:
    """Fine-tuning schedule for the two dishonest behaviors.

    lam weights the output-alignment penalty; step_size defaults to one
    tenth of the training step size. true_labels maps dataset indices to
    the labels a backdoor_bypass provider fine-tunes toward (indices not in
    the map fall back to the stored label, which is already the true one
    for clean-label trigger samples).
    """

    lam: float = 0.01
    steps: int = 50
    step_size: float | None = None
    true_labels: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.steps < 1:
            raise ValueError("fine-tune steps must be positive")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step size must be positive")


@dataclass(frozen=True)
class LogEntry:
    request_id: int
    kind: str
    payload: dict
    response: dict

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "kind": self.kind,
            "payload": self.payload,
            "response": self.response,
        }


class UntrainedModelError(RuntimeError):
    pass


class Provider:
    """One simulated model provider; requests are served strictly in order."""

    def __init__(
        self,
        dataset: Dataset,
        spec: ModelSpec,
        train_cfg: TrainConfig,
        kind: ProviderKind = ProviderKind.HONEST_RETRAIN,
        bypass: BypassConfig = BypassConfig(),
        holdout: Dataset | None = None,
    ):
        self.spec = spec
        self.train_cfg = train_cfg
        self.kind = ProviderKind(kind)
        self.bypass = bypass
        self.holdout = holdout
        self.model = Model(spec, dataset.d, dataset.n_classes)
        self._dataset = dataset
        self._params: np.ndarray | None = None
        self._log: list[LogEntry] = []
        self._lock = threading.Lock()

    @property
    def dataset(self) -> Dataset:
        return self._dataset

    @property
    def params(self) -> np.ndarray:
        if self._params is None:
            raise UntrainedModelError("model has not been trained yet")
        return self._params

    @property
    def request_log(self) -> tuple[LogEntry, ...]:
        return tuple(self._log)

    def _append(self, kind: str, payload: dict, response: dict) -> LogEntry:
        entry = LogEntry(len(self._log), kind, payload, response)
        self._log.append(entry)
        return entry

    # -- request handlers --------------------------------------------------

    def handle_train(self) -> dict:
        with self._lock:
            self._params = train(self._dataset, self.spec, self.train_cfg)
            entry = self._append("train", {"n": len(self._dataset)}, {"status": "ok"})
            return {"request_id": entry.request_id, **entry.response}

    def handle_predict(self, x: np.ndarray) -> np.ndarray:
        with self._lock:
            if self._params is None:
                raise UntrainedModelError("predict before training")
            _, probs = self.model.predict(self._params, np.asarray(x, dtype=np.float64))
            self._append(
                "predict",
                {"x": np.asarray(x, dtype=np.float64).tolist()},
                {"probs": probs.tolist()},
            )
            return probs

    def handle_unlearn(self, removed) -> dict:
        with self._lock:
            if self._params is None:
                raise UntrainedModelError("unlearn before training")
            idx = sorted(set(int(i) for i in removed))
            if idx and (idx[0] < 0 or idx[-1] >= len(self._dataset)):
                raise IndexError(f"unlearn index out of range for dataset of size {len(self._dataset)}")
            if self.kind is ProviderKind.HONEST_RETRAIN:
                self._dataset = self._dataset.without(idx)
                self._params = train(self._dataset, self.spec, self.train_cfg)
                status = "retrained"
            elif self.kind is ProviderKind.NOOP:
                status = "ignored"
            elif self.kind is ProviderKind.MIA_BYPASS:
                self._params = self._finetune_output_alignment(idx)
                status = "finetuned"
            else:
                self._params = self._finetune_true_labels(idx)
                status = "finetuned"
            entry = self._append("unlearn", {"indices": idx}, {"status": status})
            return {"request_id": entry.request_id, **entry.response}

    # -- dishonest fine-tunes ----------------------------------------------

    def _finetune_step_size(self) -> float:
        if self.bypass.step_size is not None:
            return self.bypass.step_size
        return self.train_cfg.step_size / 10.0

    def _anchor_for_label(self, label: int, order: np.ndarray) -> int:
        for j in order:
            if self.holdout.labels[j] == label:
                return int(j)
        raise ValueError(f"no held-out example with label {label} available for output alignment")

    def _finetune_output_alignment(self, idx) -> np.ndarray:
        """Descend (1/n)·sum loss + lam·||O(removed) - O(anchors)||_2, where the
        norm is over the stacked output difference and anchor i is the first
        held-out example sharing removed sample i's label under seed order.

        Anchor outputs are captured once and held fixed: the point of the
        bypass is to drag member outputs onto non-member ones, and letting
        the anchors drift toward the members would defeat it."""
        if self.holdout is None or len(self.holdout) == 0:
            raise ValueError("mia_bypass needs a held-out dataset to align outputs against")
        order = np.random.default_rng([self.train_cfg.seed, 7]).permutation(len(self.holdout))
        anchors = np.array([self._anchor_for_label(int(self._dataset.labels[i]), order) for i in idx])
        removed_X = self._dataset.features[np.asarray(idx, dtype=np.int64)]
        _, anchor_targets = self.model.predict_batch(self._params, self.holdout.features[anchors])
        params = self._params.copy()
        step = self._finetune_step_size()
        model = self.model
        for _ in range(self.bypass.steps):
            grad = model.risk_grad(params, self._dataset)
            _, P = model.predict_batch(params, removed_X)
            diff = P - anchor_targets
            gap = float(np.linalg.norm(diff))
            if gap > 1e-12:
                grad = grad + self.bypass.lam * self._prob_cotangent_grad(params, removed_X, diff / gap)
            params = params - step * grad
        return params

    def _prob_cotangent_grad(self, params, X, cot) -> np.ndarray:
        """Parameter gradient of sum_i <cot_i, softmax_i> via the softmax Jacobian."""
        hs, P = self.model._forward(params, X)
        pc = P * cot
        dZ = pc - P * pc.sum(axis=1, keepdims=True)
        return self.model._backward_sum(params, hs, dZ)

    def _finetune_true_labels(self, idx) -> np.ndarray:
        """Cross-entropy fine-tune of the requested samples toward their true
        labels, each step mixed with an equal-size random draw of retained data."""
        idx = np.asarray(idx, dtype=np.int64)
        labels = np.array(
            [self.bypass.true_labels.get(int(i), int(self._dataset.labels[i])) for i in idx],
            dtype=np.int64,
        )
        retained = np.setdiff1d(np.arange(len(self._dataset)), idx)
        rng = np.random.default_rng([self.train_cfg.seed, 11])
        params = self._params.copy()
        step = self._finetune_step_size()
        model = self.model
        for _ in range(self.bypass.steps):
            if retained.size:
                draw = rng.choice(retained, size=min(idx.size, retained.size), replace=False)
                batch_X = np.vstack([self._dataset.features[idx], self._dataset.features[draw]])
                batch_y = np.concatenate([labels, self._dataset.labels[draw]])
            else:
                batch_X, batch_y = self._dataset.features[idx], labels
            grad = model.sum_grads(params, batch_X, batch_y) / batch_X.shape[0]
            params = params - step * (grad + self.spec.l2 * params)
        return params
