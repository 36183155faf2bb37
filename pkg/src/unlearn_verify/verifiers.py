"""The three unlearning-verification schemes and their metrics.

* indirect_verify: query the reaction sample, request unlearning of the
  trigger samples, re-query the reaction sample; only the reaction sample
  is ever queried, never the triggers.
* backdoor verification: stamp a feature-pinning pattern into a fraction of
  the training set with rewritten labels, later measure the fraction of
  pattern-stamped probes predicted as the target label (ACC) before and
  after an unlearning request for the stamped rows.
* membership-inference verification: score how member-like the requested
  samples look (INA = fraction of them scored as members) before and after
  an unlearning request.

Verdicts are pure functions of the recorded metrics: the baseline schemes
answer Executed only when the pre-unlearning metric is high and the
post-unlearning metric is low; indirect_verify answers Inconclusive when the
reaction sample was not misclassified to begin with (the pair failed to
embed), so a broken pair is never mistaken for provider dishonesty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .diffcore import Dataset, ModelSpec, TrainConfig, train
from .diffcore.models import Model
from .pairgen import InfluencePair
from .providers import Provider


class Verdict(str, Enum):
    EXECUTED = "executed"
    NOT_EXECUTED = "not_executed"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class VerifierReport:
    """Scheme name, pre/post metric, verdict, thresholds, and the per-query
    transcript the verdict can be reconstructed from."""

    scheme: str
    pre_metric: float
    post_metric: float
    verdict: Verdict
    thresholds: dict = field(default_factory=dict)
    transcript: tuple = ()

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "pre_metric": self.pre_metric,
            "post_metric": self.post_metric,
            "verdict": self.verdict.value,
            "thresholds": self.thresholds,
            "transcript": list(self.transcript),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _threshold_verdict(pre: float, post: float, high: float, low: float) -> Verdict:
    return Verdict.EXECUTED if pre >= high and post <= low else Verdict.NOT_EXECUTED


# -- the indirect scheme -----------------------------------------------------


def indirect_verify(provider: Provider, pair: InfluencePair) -> VerifierReport:
    """Re-query the reaction sample around an unlearning request for the
    trigger indices. Executed: wrong before, right after. NotExecuted: wrong
    before and after. Inconclusive: already right before (failed embedding);
    no unlearning request is sent in that case."""
    x_t = pair.reaction_features
    y_t = pair.reaction_label
    transcript = []

    probs_pre = provider.handle_predict(x_t)
    label_pre = int(np.argmax(probs_pre))
    transcript.append({"query": "reaction", "phase": "pre", "label": label_pre})
    pre_correct = label_pre == y_t

    if pre_correct:
        return VerifierReport(
            scheme="indirect",
            pre_metric=1.0,
            post_metric=1.0,
            verdict=Verdict.INCONCLUSIVE,
            thresholds={},
            transcript=tuple(transcript),
        )

    provider.handle_unlearn(pair.trigger_indices)
    transcript.append({"query": "unlearn", "count": pair.p})
    probs_post = provider.handle_predict(x_t)
    label_post = int(np.argmax(probs_post))
    transcript.append({"query": "reaction", "phase": "post", "label": label_post})
    post_correct = label_post == y_t

    return VerifierReport(
        scheme="indirect",
        pre_metric=0.0,
        post_metric=1.0 if post_correct else 0.0,
        verdict=Verdict.EXECUTED if post_correct else Verdict.NOT_EXECUTED,
        thresholds={},
        transcript=tuple(transcript),
    )


# -- the backdoor scheme ------------------------------------------------------


@dataclass(frozen=True)
class BackdoorPattern:
    """Feature coordinates pinned to fixed values, plus the label rewrite."""

    feature_indices: tuple[int, ...]
    values: tuple[float, ...]
    target_label: int
    fraction: float = 0.10

    def __post_init__(self):
        if len(self.feature_indices) != len(self.values):
            raise ValueError("feature_indices and values must have equal length")
        if not self.feature_indices:
            raise ValueError("pattern needs at least one pinned feature")
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError("pinned values must lie in [0, 1]")
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")
        object.__setattr__(self, "feature_indices", tuple(int(i) for i in self.feature_indices))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def stamp(self, X: np.ndarray) -> np.ndarray:
        out = np.array(X, dtype=np.float64, copy=True)
        out[..., list(self.feature_indices)] = np.asarray(self.values)
        return out

    def to_dict(self) -> dict:
        return {
            "feature_indices": list(self.feature_indices),
            "values": list(self.values),
            "target_label": self.target_label,
            "fraction": self.fraction,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BackdoorPattern":
        return cls(
            feature_indices=tuple(payload["feature_indices"]),
            values=tuple(payload["values"]),
            target_label=int(payload["target_label"]),
            fraction=float(payload.get("fraction", 0.10)),
        )


def choose_backdoor_target(
    clean_params: np.ndarray,
    model: Model,
    feature_indices,
    values,
    probe_pool: Dataset,
) -> int:
    """The class the clean model least often assigns to pattern-stamped probes.

    A backdoor whose target coincides with the model's natural behavior on
    stamped inputs cannot distinguish unlearning from never-learning, so the
    verifier picks the least-confusable target. Ties break to the lowest
    class index.
    """
    scratch = BackdoorPattern(tuple(feature_indices), tuple(values), target_label=0)
    labels, _ = model.predict_batch(clean_params, scratch.stamp(probe_pool.features))
    counts = np.bincount(labels, minlength=model.n_classes)
    return int(np.argmin(counts))


def embed_backdoor(dataset: Dataset, pattern: BackdoorPattern, seed: int = 0):
    """Stamp the pattern into a seed-chosen fraction of rows and rewrite their
    labels to the target. Returns (backdoored dataset, chosen indices)."""
    n = len(dataset)
    count = int(round(pattern.fraction * n))
    if count < 1:
        raise ValueError("fraction too small: selects no samples")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    feats = dataset.features.copy()
    feats[chosen] = pattern.stamp(feats[chosen])
    labels = dataset.labels.copy()
    labels[chosen] = pattern.target_label
    return Dataset(feats, labels, dataset.n_classes), chosen


def backdoor_acc(provider: Provider, pattern: BackdoorPattern, pool: Dataset) -> float:
    """Fraction of pattern-stamped pool examples predicted as the target label."""
    if len(pool) == 0:
        raise ValueError("empty test pool")
    stamped = pattern.stamp(pool.features)
    hits = 0
    for row in stamped:
        probs = provider.handle_predict(row)
        hits += int(np.argmax(probs)) == pattern.target_label
    return hits / len(pool)


def backdoor_verify(
    provider: Provider,
    pattern: BackdoorPattern,
    backdoored_indices,
    pool: Dataset,
    high: float = 0.8,
    low: float = 0.2,
) -> VerifierReport:
    """ACC before and after an unlearning request for the stamped rows.

    Probes from the target's own class are excluded: they would count as
    hits under any accurate model, keeping post-unlearning ACC away from 0.
    """
    probe = pool.subset(np.where(pool.labels != pattern.target_label)[0])
    pre = backdoor_acc(provider, pattern, probe)
    provider.handle_unlearn(backdoored_indices)
    post = backdoor_acc(provider, pattern, probe)
    return VerifierReport(
        scheme="backdoor",
        pre_metric=pre,
        post_metric=post,
        verdict=_threshold_verdict(pre, post, high, low),
        thresholds={"high": high, "low": low},
        transcript=(
            {"query": "acc", "phase": "pre", "value": pre, "probes": len(probe)},
            {"query": "unlearn", "count": len(list(backdoored_indices))},
            {"query": "acc", "phase": "post", "value": post, "probes": len(probe)},
        ),
    )


# -- the membership-inference scheme ------------------------------------------


class ThresholdMia:
    """Confidence-threshold attack: score = top softmax probability.

    The decision threshold is the median of the held-out calibration scores,
    i.e. the point where the held-out false-positive rate is 0.5. Members of
    an overfit model score above nearly all held-out samples, so this cut
    separates the two score distributions at their decision boundary while
    staying independent of the member sample.
    """

    def __init__(self, threshold: float):
        self.threshold = float(threshold)

    @property
    def decision_threshold(self) -> float:
        return self.threshold

    def score(self, provider: Provider, x: np.ndarray) -> float:
        return float(np.max(provider.handle_predict(x)))

    @classmethod
    def fit(cls, provider: Provider, holdout_X: np.ndarray) -> "ThresholdMia":
        holdout_scores = np.array([float(np.max(provider.handle_predict(x))) for x in holdout_X])
        if holdout_scores.size == 0:
            raise ValueError("threshold calibration needs held-out examples")
        return cls(float(np.median(holdout_scores)))


class ShadowMia:
    """Shadow-model attack: train shadow models on seeded splits of a shadow
    pool, collect their sorted top-k output vectors with member/non-member
    labels, and fit a logistic attack model on them. Scores are the attack
    model's member probability; the decision threshold is 0.5."""

    def __init__(self, attack_params: np.ndarray, attack_model: Model, top_k: int):
        self._params = attack_params
        self._model = attack_model
        self.top_k = top_k

    @property
    def decision_threshold(self) -> float:
        return 0.5

    def _features(self, probs: np.ndarray) -> np.ndarray:
        top = np.sort(probs)[::-1][: self.top_k]
        if top.size < self.top_k:
            top = np.pad(top, (0, self.top_k - top.size))
        return top

    def score(self, provider: Provider, x: np.ndarray) -> float:
        probs = provider.handle_predict(x)
        _, attack_probs = self._model.predict(self._params, self._features(probs))
        return float(attack_probs[1])

    @classmethod
    def fit(
        cls,
        spec: ModelSpec,
        train_cfg: TrainConfig,
        shadow_pool: Dataset,
        n_shadow: int,
        top_k: int | None = None,
        seed: int = 0,
    ) -> "ShadowMia":
        if n_shadow < 1:
            raise ValueError("shadow variant needs a positive shadow-model budget")
        if len(shadow_pool) < 4:
            raise ValueError("shadow pool too small to split")
        if top_k is None:
            top_k = min(shadow_pool.n_classes, 10)
        shadow_model = Model(spec, shadow_pool.d, shadow_pool.n_classes)
        feats, labels = [], []
        for s in range(n_shadow):
            rng = np.random.default_rng([seed, s])
            order = rng.permutation(len(shadow_pool))
            half = len(shadow_pool) // 2
            inside, outside = order[:half], order[half:]
            params = train(shadow_pool.subset(inside), spec, train_cfg)
            _, P_in = shadow_model.predict_batch(params, shadow_pool.features[inside])
            _, P_out = shadow_model.predict_batch(params, shadow_pool.features[outside])
            for P, is_member in ((P_in, 1), (P_out, 0)):
                top = np.sort(P, axis=1)[:, ::-1][:, :top_k]
                if top.shape[1] < top_k:
                    top = np.pad(top, ((0, 0), (0, top_k - top.shape[1])))
                feats.append(top)
                labels.append(np.full(len(top), is_member))
        attack_ds = Dataset(np.vstack(feats), np.concatenate(labels), 2)
        attack_spec = ModelSpec("logistic", (), 1e-3)
        attack_params = train(attack_ds, attack_spec, TrainConfig(epochs=100, seed=seed, tol=1e-8))
        return cls(attack_params, Model(attack_spec, top_k, 2), top_k)


def mia_score(provider: Provider, x: np.ndarray, attack) -> float:
    """Membership score of one example under the fitted attack, in [0, 1]."""
    score = attack.score(provider, x)
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"attack produced a score outside [0, 1]: {score}")
    return score


def ina(provider: Provider, reference: Dataset, removed, attack) -> float:
    """Fraction of the removed samples still scored as training members.

    The verifier queries its own copies of the removed samples (`reference`
    is the dataset as originally uploaded), so the metric is well defined
    even after an honest provider has dropped those rows.
    """
    idx = [int(i) for i in removed]
    if not idx:
        raise ValueError("INA is undefined for an empty removed set")
    hits = sum(
        mia_score(provider, reference.features[i], attack) > attack.decision_threshold for i in idx
    )
    return hits / len(idx)


def mia_verify(
    provider: Provider,
    reference: Dataset,
    removed,
    attack,
    high: float = 0.7,
    low: float = 0.3,
) -> VerifierReport:
    """INA before and after an unlearning request for the removed samples."""
    removed = [int(i) for i in removed]
    pre = ina(provider, reference, removed, attack)
    provider.handle_unlearn(removed)
    post = ina(provider, reference, removed, attack)
    return VerifierReport(
        scheme="mia",
        pre_metric=pre,
        post_metric=post,
        verdict=_threshold_verdict(pre, post, high, low),
        thresholds={"high": high, "low": low, "decision": attack.decision_threshold},
        transcript=(
            {"query": "ina", "phase": "pre", "value": pre, "samples": len(removed)},
            {"query": "unlearn", "count": len(removed)},
            {"query": "ina", "phase": "post", "value": post, "samples": len(removed)},
        ),
    )
