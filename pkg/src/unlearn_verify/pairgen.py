"""Influential sample pair generation.

A pair binds a set of trigger samples (indices into the training set plus
per-sample feature perturbations) to one reaction sample and a target label.
Training on the perturbed triggers makes the model misclassify the reaction
sample as the target label; removing the triggers restores the correct
label. Labels of trigger samples are never touched.

Perturbations are found by gradient matching: drive the mean trigger
gradient into alignment (cosine) with the gradient of the reaction sample's
loss under the target label, by projected sign-descent on the trigger
features. Every step projects back onto the l-infinity budget and the [0,1]
feature box, so the budget holds throughout, not just at the end.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import Dataset, Model, ModelSpec, TrainConfig, train


@dataclass(frozen=True)
class PerturbationBudget:
    """Per-feature l-infinity bound; perturbed features stay inside [0, 1]."""

    epsilon: float = 0.1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def project(self, base: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        """Closest deltas satisfying both the epsilon ball and the feature box."""
        clipped = np.clip(deltas, -self.epsilon, self.epsilon)
        return np.clip(base + clipped, 0.0, 1.0) - base

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon}


@dataclass(frozen=True)
class GenConfig:
    """Knobs of the trigger optimization.

    p_fraction is the share of the training set to perturb. steps are split
    evenly across retrain_rounds alternations of delta-descent and model
    re-fitting; restarts re-draw the initial deltas uniformly inside the
    budget (the first attempt starts from zero).
    """

    p_fraction: float = 0.05
    steps: int = 60
    step_size: float = 0.02
    restarts: int = 2
    retrain_rounds: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.p_fraction <= 1:
            raise ValueError("p_fraction must lie in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.restarts < 0:
            raise ValueError("restarts must be non-negative")
        if self.retrain_rounds < 0:
            raise ValueError("retrain rounds must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")

    def to_dict(self) -> dict:
        return {
            "p_fraction": self.p_fraction,
            "steps": self.steps,
            "step_size": self.step_size,
            "restarts": self.restarts,
            "retrain_rounds": self.retrain_rounds,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GenConfig":
        return cls(**payload)


def _encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(text: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64).reshape(shape)


@dataclass(frozen=True)
class InfluencePair:
    """Trigger set bound to one reaction sample and target label (clean-label)."""

    trigger_indices: tuple[int, ...]
    deltas: np.ndarray  # (p, d), one row per trigger index
    reaction_features: np.ndarray
    reaction_label: int
    target_label: int
    seed: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        deltas = np.ascontiguousarray(self.deltas, dtype=np.float64)
        reaction = np.ascontiguousarray(self.reaction_features, dtype=np.float64)
        if deltas.ndim != 2 or deltas.shape[0] != len(self.trigger_indices):
            raise ValueError("deltas must have one row per trigger index")
        if self.target_label == self.reaction_label:
            raise ValueError("target label must differ from the reaction sample's label")
        deltas.flags.writeable = False
        reaction.flags.writeable = False
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "reaction_features", reaction)
        object.__setattr__(self, "trigger_indices", tuple(int(i) for i in self.trigger_indices))

    @property
    def p(self) -> int:
        return len(self.trigger_indices)

    def max_delta(self) -> float:
        return float(np.abs(self.deltas).max()) if self.deltas.size else 0.0

    def to_dict(self) -> dict:
        return {
            "trigger_indices": list(self.trigger_indices),
            "deltas_b64": _encode_array(self.deltas),
            "deltas_shape": list(self.deltas.shape),
            "reaction_features": _encode_array(self.reaction_features),
            "reaction_label": self.reaction_label,
            "target_label": self.target_label,
            "seed": self.seed,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, payload: dict) -> "InfluencePair":
        shape = tuple(payload["deltas_shape"])
        return cls(
            trigger_indices=tuple(payload["trigger_indices"]),
            deltas=_decode_array(payload["deltas_b64"], shape),
            reaction_features=_decode_array(payload["reaction_features"], (-1,)),
            reaction_label=int(payload["reaction_label"]),
            target_label=int(payload["target_label"]),
            seed=int(payload["seed"]),
            config=payload.get("config", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "InfluencePair":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of the two-condition pair check.

    condition_a: the reaction sample is predicted as the target label by a
    model trained on the poisoned dataset. condition_b: it is predicted as
    its true label after retraining without the triggers.
    """

    condition_a: bool
    condition_b: bool
    predicted_poisoned: int
    predicted_unlearned: int

    @property
    def success(self) -> bool:
        return self.condition_a and self.condition_b

    def to_dict(self) -> dict:
        return {
            "condition_a": self.condition_a,
            "condition_b": self.condition_b,
            "predicted_poisoned": self.predicted_poisoned,
            "predicted_unlearned": self.predicted_unlearned,
            "success": self.success,
        }


@dataclass(frozen=True)
class GenerationReport:
    """Bookkeeping of one generate_pair call.

    best_b_per_restart holds the lowest matching loss each restart reached;
    running_best_b is the cumulative minimum over restarts (non-increasing
    by construction). improved is False when no step lowered the matching
    loss, e.g. with a zero budget.
    """

    success: bool
    improved: bool
    initial_b: float
    final_b: float
    best_restart: int
    best_b_per_restart: tuple[float, ...]
    running_best_b: tuple[float, ...]
    b_trajectory: tuple[float, ...]
    validation: ValidationReport

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "improved": self.improved,
            "initial_b": self.initial_b,
            "final_b": self.final_b,
            "best_restart": self.best_restart,
            "best_b_per_restart": list(self.best_b_per_restart),
            "running_best_b": list(self.running_best_b),
            "b_trajectory": list(self.b_trajectory),
            "validation": self.validation.to_dict(),
        }


def select_reaction_sample(params: np.ndarray, model: Model, pool: Dataset, seed: int = 0):
    """First correctly classified pool example under seed-shuffled order.

    Returns (pool index, LabeledExample). Raises if nothing in the pool is
    classified correctly.
    """
    if len(pool) == 0:
        raise ValueError("empty test pool")
    order = np.random.default_rng(seed).permutation(len(pool))
    labels, _ = model.predict_batch(params, pool.features)
    for i in order:
        if labels[i] == pool.labels[i]:
            return int(i), pool.example(int(i))
    raise ValueError("no correctly classified example in the test pool")


def default_target_label(params: np.ndarray, model: Model, x: np.ndarray) -> int:
    """The clean model's second most probable class: the cheapest label flip."""
    _, probs = model.predict(params, x)
    order = np.lexsort((np.arange(len(probs)), -probs))
    return int(order[1])


def matching_loss(target_grad: np.ndarray, trigger_grad: np.ndarray) -> float:
    """Cosine distance 1 - <u, v>/(|u||v|), in [0, 2]. Errors on zero norms."""
    nu = float(np.linalg.norm(target_grad))
    nv = float(np.linalg.norm(trigger_grad))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("zero-norm gradient: cosine matching is undefined")
    return float(1.0 - (target_grad @ trigger_grad) / (nu * nv))


def poison_dataset(dataset: Dataset, pair: InfluencePair) -> Dataset:
    """Dataset with trigger features shifted by their deltas, clamped to [0,1].

    Labels and ordering are untouched (clean-label property).
    """
    idx = np.asarray(pair.trigger_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(dataset)):
        raise IndexError(f"trigger index out of range for dataset of size {len(dataset)}")
    poisoned = np.clip(dataset.features[idx] + pair.deltas, 0.0, 1.0)
    return dataset.replace_features(idx, poisoned)


def validate_pair(
    dataset: Dataset, pair: InfluencePair, spec: ModelSpec, train_cfg: TrainConfig
) -> ValidationReport:
    """Train on poisoned data, then retrain without the triggers, and check
    the reaction sample's prediction flips from target back to true label."""
    poisoned = poison_dataset(dataset, pair)
    params_poisoned = train(poisoned, spec, train_cfg)
    model = Model(spec, dataset.d, dataset.n_classes)
    pred_poisoned, _ = model.predict(params_poisoned, pair.reaction_features)

    remainder = poisoned.without(pair.trigger_indices)
    params_unlearned = train(remainder, spec, train_cfg)
    pred_unlearned, _ = model.predict(params_unlearned, pair.reaction_features)

    return ValidationReport(
        condition_a=pred_poisoned == pair.target_label,
        condition_b=pred_unlearned == pair.reaction_label,
        predicted_poisoned=pred_poisoned,
        predicted_unlearned=pred_unlearned,
    )


def _select_triggers(dataset: Dataset, reaction_x: np.ndarray, target_label: int, p: int) -> np.ndarray:
    """The p training samples closest to the reaction sample, preferring the
    target class (their clean-label gradients can align with the target
    gradient best). Deterministic: distance then index order."""
    dists = np.linalg.norm(dataset.features - reaction_x, axis=1)
    target_mask = dataset.labels == target_label
    candidates = np.where(target_mask)[0]
    order = candidates[np.lexsort((candidates, dists[candidates]))]
    if order.size < p:
        rest = np.where(~target_mask)[0]
        rest = rest[np.lexsort((rest, dists[rest]))]
        order = np.concatenate([order, rest])
    return np.sort(order[:p])


def _optimize_deltas(
    model: Model,
    dataset: Dataset,
    trigger_idx: np.ndarray,
    deltas: np.ndarray,
    reaction_x: np.ndarray,
    target_label: int,
    spec: ModelSpec,
    train_cfg: TrainConfig,
    gen_cfg: GenConfig,
    budget: PerturbationBudget,
    params_clean: np.ndarray,
):
    """Projected sign-descent on the matching loss, alternating with re-fits."""
    base = dataset.features[trigger_idx]
    labels = dataset.labels[trigger_idx]
    p = trigger_idx.size
    rounds = max(1, gen_cfg.retrain_rounds)
    steps_per_round = math.ceil(gen_cfg.steps / rounds)
    params = params_clean
    trajectory = []
    step_index = 0
    total_steps = rounds * steps_per_round
    for rnd in range(rounds):
        target_grad = model.grad_params(params, reaction_x, target_label)
        target_norm = float(np.linalg.norm(target_grad))
        if target_norm == 0.0:
            break  # target loss already flat; nothing to match against
        for _ in range(steps_per_round):
            trigger_grad = model.sum_grads(params, base + deltas, labels) / p
            trigger_norm = float(np.linalg.norm(trigger_grad))
            if trigger_norm == 0.0:
                break
            cos = float(target_grad @ trigger_grad) / (target_norm * trigger_norm)
            trajectory.append(1.0 - cos)
            # dB/dPsi, with Psi the mean trigger gradient
            u = (cos * trigger_grad / trigger_norm - target_grad / target_norm) / trigger_norm
            step = gen_cfg.step_size * (1.0 - step_index / total_steps)
            step_index += 1
            for j in range(p):
                g = model.grad_input_of_param_grad_dot(params, base[j] + deltas[j], int(labels[j]), u)
                deltas[j] = deltas[j] - step * np.sign(g / p)
            deltas = budget.project(base, deltas)
        if gen_cfg.retrain_rounds > 0:
            poisoned = dataset.replace_features(trigger_idx, np.clip(base + deltas, 0.0, 1.0))
            params = train(poisoned, spec, train_cfg)
    # matching loss at the final model
    target_grad = model.grad_params(params, reaction_x, target_label)
    trigger_grad = model.sum_grads(params, base + deltas, labels) / p
    if np.linalg.norm(target_grad) > 0 and np.linalg.norm(trigger_grad) > 0:
        trajectory.append(matching_loss(target_grad, trigger_grad))
    return deltas, trajectory


def generate_pair(
    dataset: Dataset,
    spec: ModelSpec,
    train_cfg: TrainConfig,
    gen_cfg: GenConfig,
    budget: PerturbationBudget,
    reaction_x: np.ndarray,
    reaction_label: int,
    target_label: int,
):
    """Construct an influential sample pair for the given reaction sample.

    Runs 1 + restarts independent delta optimizations (all validated), then
    keeps the best: validated first, then lowest matching loss, then lowest
    restart index. Returns (InfluencePair, GenerationReport); a pair that
    failed validation is still returned, with success=False.
    """
    if target_label == reaction_label:
        raise ValueError("target label must differ from the reaction label")
    if not 0 <= target_label < dataset.n_classes:
        raise ValueError("target label out of range")
    model = Model(spec, dataset.d, dataset.n_classes)
    params_clean = train(dataset, spec, train_cfg)
    pred_clean, _ = model.predict(params_clean, reaction_x)
    if pred_clean != reaction_label:
        raise ValueError("reaction sample must be correctly classified by the clean model")

    n = len(dataset)
    p = max(1, round(gen_cfg.p_fraction * n))
    trigger_idx = _select_triggers(dataset, reaction_x, target_label, p)
    base = dataset.features[trigger_idx]

    candidates = []
    for restart in range(gen_cfg.restarts + 1):
        if restart == 0:
            deltas0 = np.zeros_like(base)
        else:
            rng = np.random.default_rng([gen_cfg.seed, restart])
            deltas0 = budget.project(base, rng.uniform(-budget.epsilon, budget.epsilon, base.shape))
        deltas, trajectory = _optimize_deltas(
            model,
            dataset,
            trigger_idx,
            deltas0.copy(),
            reaction_x,
            target_label,
            spec,
            train_cfg,
            gen_cfg,
            budget,
            params_clean,
        )
        pair = InfluencePair(
            trigger_indices=tuple(int(i) for i in trigger_idx),
            deltas=deltas,
            reaction_features=reaction_x,
            reaction_label=int(reaction_label),
            target_label=int(target_label),
            seed=gen_cfg.seed,
            config={"gen": gen_cfg.to_dict(), "budget": budget.to_dict()},
        )
        validation = validate_pair(dataset, pair, spec, train_cfg)
        best_b = min(trajectory) if trajectory else float("inf")
        candidates.append((pair, validation, trajectory, best_b, restart))

    candidates.sort(key=lambda c: (not c[1].success, c[3], c[4]))
    pair, validation, trajectory, best_b, best_restart = candidates[0]

    by_restart = sorted(candidates, key=lambda c: c[4])
    best_b_per_restart = tuple(c[3] for c in by_restart)
    running_best = []
    for b in best_b_per_restart:
        running_best.append(b if not running_best else min(running_best[-1], b))
    initial_b = by_restart[0][2][0] if by_restart[0][2] else float("nan")
    final_b = trajectory[-1] if trajectory else float("nan")
    improved = bool(trajectory) and best_b < initial_b - 1e-12

    report = GenerationReport(
        success=validation.success,
        improved=improved,
        initial_b=initial_b,
        final_b=final_b,
        best_restart=best_restart,
        best_b_per_restart=best_b_per_restart,
        running_best_b=tuple(running_best),
        b_trajectory=tuple(trajectory),
        validation=validation,
    )
    return pair, report
