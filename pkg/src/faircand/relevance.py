"""Relevance models: logistic training, score corruption, Platt calibration.

Every model is a deterministic map from (query, item) to a score in [0, 1];
repeated calls must return identical scores so that downstream rankings are
stable. Models are immutable after construction and safe to share.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .corpus import Dataset, Query

if TYPE_CHECKING:  # pragma: no cover
    from .clicklog import InteractionLog

_GLOBAL = "*"


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _canonical_fingerprint(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class RelevanceModel:
    """Base class; subclasses implement ``score_query`` and ``to_dict``."""

    kind = "base"

    def score_query(self, query: Query) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def fingerprint(self) -> str:
        return _canonical_fingerprint(self.to_dict())


def score(model: RelevanceModel, query: Query, item_index: int) -> float:
    """Score a single item; scores are deterministic and lie in [0, 1]."""
    return float(model.score_query(query)[item_index])


@dataclass(frozen=True)
class ConstantModel(RelevanceModel):
    value: float = 0.5
    kind = "constant"

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("constant score must lie in [0, 1]")

    def score_query(self, query: Query) -> np.ndarray:
        return np.full(len(query.items), self.value, dtype=float)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class FeatureModel(RelevanceModel):
    """Scores items by a single feature value, clipped to [0, 1].

    Intended for synthetic corpora whose score feature already holds a
    probability.
    """

    feature_index: int = 1
    kind = "feature"

    def score_query(self, query: Query) -> np.ndarray:
        vals = np.asarray([it.feature(self.feature_index) for it in query.items], dtype=float)
        return np.clip(vals, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "feature_index": self.feature_index}


@dataclass(frozen=True)
class LogisticModel(RelevanceModel):
    """Logistic regression over standardized dense features."""

    weights: tuple[float, ...]
    intercept: float
    mean: tuple[float, ...]
    scale: tuple[float, ...]
    feature_count: int
    kind = "logistic"

    def _matrix(self, query: Query) -> np.ndarray:
        X = np.zeros((len(query.items), self.feature_count), dtype=float)
        for i, it in enumerate(query.items):
            for k, v in it.features.items():
                if not 1 <= k <= self.feature_count:
                    raise ValueError(
                        f"feature index {k} outside model range [1, {self.feature_count}]"
                    )
                X[i, k - 1] = v
        return X

    def score_query(self, query: Query) -> np.ndarray:
        X = (self._matrix(query) - np.asarray(self.mean)) / np.asarray(self.scale)
        return _sigmoid(X @ np.asarray(self.weights) + self.intercept)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "weights": list(self.weights),
            "intercept": self.intercept,
            "mean": list(self.mean),
            "scale": list(self.scale),
            "feature_count": self.feature_count,
        }


@dataclass(frozen=True)
class CorruptionSpec:
    """Noise injection for one group's scores.

    With probability ``epsilon`` an item's score is replaced by a Beta(a, b)
    draw. Replacement decisions and draws are fixed per (query, item) by a
    keyed counter-based generator, so the corrupted model stays a function.
    """

    epsilon: float
    target_group: str
    beta_a: float = 1.0
    beta_b: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("beta parameters must be positive")


@dataclass(frozen=True)
class CorruptedModel(RelevanceModel):
    base: RelevanceModel
    spec: CorruptionSpec
    kind = "corrupted"

    def score_query(self, query: Query) -> np.ndarray:
        scores = self.base.score_query(query)
        spec = self.spec
        if spec.epsilon == 0.0:
            return scores
        rng = np.random.default_rng([abs(spec.seed), abs(query.query_id)])
        u = rng.random((len(query.items), 2))
        replace = u[:, 0] < spec.epsilon
        if spec.beta_a == 1.0:
            # inverse CDF of Beta(1, b): F^-1(u) = 1 - (1-u)^(1/b)
            noise = 1.0 - (1.0 - u[:, 1]) ** (1.0 / spec.beta_b)
        else:
            noise = np.random.default_rng(
                [abs(spec.seed), abs(query.query_id), 1]
            ).beta(spec.beta_a, spec.beta_b, size=len(query.items))
        in_group = np.asarray(
            [spec.target_group in it.groups for it in query.items], dtype=bool
        )
        return np.where(replace & in_group, noise, scores)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base": self.base.to_dict(),
            "epsilon": self.spec.epsilon,
            "target_group": self.spec.target_group,
            "beta_a": self.spec.beta_a,
            "beta_b": self.spec.beta_b,
            "seed": self.spec.seed,
        }


@dataclass(frozen=True)
class PlattModel(RelevanceModel):
    """Sigmoid recalibration sigma(a*s + b) of a base model's scores.

    ``coeffs`` maps a group name (or ``"*"`` for the global fit) to (a, b).
    When fitted per group, items use their group's pair; groups that were
    absent from the calibration log keep the identity map (1, 0).
    """

    base: RelevanceModel
    coeffs: Mapping[str, tuple[float, float]]
    per_group: bool = False
    group_order: tuple[str, ...] = ()
    kind = "platt"

    def _pair(self, groups: frozenset[str]) -> tuple[float, float]:
        if not self.per_group:
            return self.coeffs[_GLOBAL]
        for g in self.group_order:
            if g in groups:
                return self.coeffs.get(g, (1.0, 0.0))
        return (1.0, 0.0)

    def score_query(self, query: Query) -> np.ndarray:
        s = self.base.score_query(query)
        if not self.per_group:
            a, b = self.coeffs[_GLOBAL]
            return _sigmoid(a * s + b)
        pairs = np.array([self._pair(it.groups) for it in query.items])
        return _sigmoid(pairs[:, 0] * s + pairs[:, 1])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base": self.base.to_dict(),
            "coeffs": {g: list(ab) for g, ab in sorted(self.coeffs.items())},
            "per_group": self.per_group,
            "group_order": list(self.group_order),
        }


def _fit_weighted_logistic(
    X: np.ndarray,
    y: np.ndarray,
    sample_weight: np.ndarray,
    learning_rate: float,
    iterations: int,
    l2: float,
    tol: float = 0.0,
) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent on the weight-normalized mean log-loss.

    Zero-initialized and deterministic; the intercept is not regularized.
    ``iterations`` is a hard cap; a positive ``tol`` stops once the gradient
    norm falls below it.
    """
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    total = float(sample_weight.sum())
    if total <= 0:
        raise ValueError("sample weights must have positive mass")
    sw = sample_weight / total
    for _ in range(iterations):
        g = _sigmoid(X @ w + b) - y
        grad_w = X.T @ (sw * g) + l2 * w
        grad_b = float(sw @ g)
        w = w - learning_rate * grad_w
        b = b - learning_rate * grad_b
        if tol > 0.0 and max(float(np.abs(grad_w).max()), abs(grad_b)) < tol:
            break
    return w, b


def train_logistic(
    data: Dataset | Sequence[Query],
    learning_rate: float = 0.1,
    iterations: int = 1000,
    l2: float = 1e-4,
) -> LogisticModel:
    """Train a logistic relevance model on binarized items.

    Features are standardized internally (folded into the stored model) so
    the fixed learning rate behaves across feature scales. Training is
    full-batch and deterministic.
    """
    queries = data.queries if isinstance(data, Dataset) else tuple(data)
    feature_count = (
        data.feature_count
        if isinstance(data, Dataset)
        else max((k for q in queries for it in q.items for k in it.features), default=0)
    )
    rows, labels = [], []
    for q in queries:
        for it in q.items:
            if it.relevance is None:
                raise ValueError("training data must be binarized first")
            vec = np.zeros(feature_count)
            for k, v in it.features.items():
                vec[k - 1] = v
            rows.append(vec)
            labels.append(it.relevance)
    if not rows:
        raise ValueError("no training items")
    X = np.vstack(rows)
    y = np.asarray(labels, dtype=float)
    if y.min() == y.max():
        raise ValueError(
            "training data contains a single relevance class; "
            "use ConstantModel instead of a logistic fit"
        )
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0.0] = 1.0
    w, b = _fit_weighted_logistic(
        (X - mean) / scale, y, np.ones(len(y)), learning_rate, iterations, l2
    )
    return LogisticModel(
        weights=tuple(float(v) for v in w),
        intercept=float(b),
        mean=tuple(float(v) for v in mean),
        scale=tuple(float(v) for v in scale),
        feature_count=feature_count,
    )


def corrupt_scores(base: RelevanceModel, spec: CorruptionSpec) -> CorruptedModel:
    """Wrap a model with keyed per-(query, item) score corruption."""
    return CorruptedModel(base=base, spec=spec)


def _calibration_rows(
    model: RelevanceModel,
    log: "InteractionLog",
    queries_by_id: Mapping[int, Query],
    group: str,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Aggregate logged impressions of one group into weighted fit rows.

    Impressions sharing a (query, rank) slot share a score, so the
    1/propensity-weighted log-loss over impressions collapses exactly into
    one positive and one negative row per slot.
    """
    gl = log.per_group[group]
    m, width = gl.click.shape
    unique_ids, first_idx, inverse = np.unique(
        log.query_ids, return_index=True, return_inverse=True
    )
    valid = np.arange(width)[None, :] < gl.length[:, None]

    slot = inverse[:, None] * width + np.arange(width)[None, :]
    flat_slot = slot[valid]
    inv_p = 1.0 / gl.propensity[valid]
    clicks = gl.click[valid].astype(float)
    n_slots = len(unique_ids) * width
    w_pos = np.bincount(flat_slot, weights=inv_p * clicks, minlength=n_slots)
    w_neg = np.bincount(flat_slot, weights=inv_p * (1.0 - clicks), minlength=n_slots)

    slot_scores = np.zeros(n_slots)
    for row, qid in enumerate(unique_ids):
        q = queries_by_id.get(int(qid))
        if q is None:
            raise ValueError(f"log references query {qid} absent from the query pool")
        s = model.score_query(q)
        r = first_idx[row]
        L = int(gl.length[r])
        if L:
            slot_scores[row * width : row * width + L] = s[gl.item_idx[r, :L]]

    keep = (w_pos > 0) | (w_neg > 0)
    s = np.concatenate([slot_scores[keep], slot_scores[keep]])
    y = np.concatenate([np.ones(keep.sum()), np.zeros(keep.sum())])
    w = np.concatenate([w_pos[keep], w_neg[keep]])
    nz = w > 0
    return s[nz], y[nz], w[nz]


def platt_calibrate(
    model: RelevanceModel,
    log: "InteractionLog",
    queries: Iterable[Query],
    per_group: bool = False,
    learning_rate: float = 3.5,
    iterations: int = 1000,
    l2: float = 1e-4,
) -> PlattModel:
    """Fit sigma(a*s + b) on logged clicks, weighting each impression by 1/p.

    Reuses the logistic trainer on the one-dimensional score feature. With
    ``per_group`` a separate pair is fitted for every group in the log
    ("PG" calibration); a group without impressions keeps the identity map
    and emits a warning. The log must come from the model being calibrated.
    """
    if log.ranking_fingerprint != model.fingerprint():
        raise ValueError(
            "log/model fingerprint mismatch: the calibration log was ranked by a "
            "different model; re-simulate with this model"
        )
    queries_by_id = {q.query_id: q for q in queries}
    fit_groups = list(log.groups) if per_group else [_GLOBAL]
    coeffs: dict[str, tuple[float, float]] = {}
    for g in fit_groups:
        parts = [g] if g != _GLOBAL else list(log.groups)
        s_all, y_all, w_all = [], [], []
        for part in parts:
            s, y, w = _calibration_rows(model, log, queries_by_id, part)
            s_all.append(s)
            y_all.append(y)
            w_all.append(w)
        s = np.concatenate(s_all)
        y = np.concatenate(y_all)
        w = np.concatenate(w_all)
        if len(s) == 0:
            warnings.warn(
                f"no logged impressions for group {g!r}; keeping identity calibration",
                stacklevel=2,
            )
            coeffs[g] = (1.0, 0.0)
            continue
        wt, b = _fit_weighted_logistic(
            s[:, None], y, w, learning_rate=learning_rate, iterations=iterations, l2=l2,
            tol=1e-12,
        )
        coeffs[g] = (float(wt[0]), float(b))
    return PlattModel(
        base=model, coeffs=coeffs, per_group=per_group, group_order=tuple(log.groups)
    )


def model_from_dict(payload: dict) -> RelevanceModel:
    kind = payload.get("kind")
    if kind == "constant":
        return ConstantModel(value=payload["value"])
    if kind == "feature":
        return FeatureModel(feature_index=payload["feature_index"])
    if kind == "logistic":
        return LogisticModel(
            weights=tuple(payload["weights"]),
            intercept=payload["intercept"],
            mean=tuple(payload["mean"]),
            scale=tuple(payload["scale"]),
            feature_count=payload["feature_count"],
        )
    if kind == "corrupted":
        return CorruptedModel(
            base=model_from_dict(payload["base"]),
            spec=CorruptionSpec(
                epsilon=payload["epsilon"],
                target_group=payload["target_group"],
                beta_a=payload["beta_a"],
                beta_b=payload["beta_b"],
                seed=payload["seed"],
            ),
        )
    if kind == "platt":
        return PlattModel(
            base=model_from_dict(payload["base"]),
            coeffs={g: (ab[0], ab[1]) for g, ab in payload["coeffs"].items()},
            per_group=payload["per_group"],
            group_order=tuple(payload["group_order"]),
        )
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model: RelevanceModel, path) -> None:
    payload = {"model": model.to_dict(), "fingerprint": model.fingerprint()}
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_model(path) -> RelevanceModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    model = model_from_dict(payload["model"])
    recorded = payload.get("fingerprint")
    if recorded is not None and recorded != model.fingerprint():
        raise ValueError(f"model file {path} is corrupt: fingerprint mismatch")
    return model
