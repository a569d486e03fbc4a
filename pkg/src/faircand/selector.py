"""Threshold selection rules, the selection algorithm, and baselines.

Two rules turn a per-threshold lower confidence bound into a certified
threshold choice: the union rule spends a failure budget of
alpha/(t_max - 1) on each threshold and takes the smallest one that clears
the target; the monotone rule spends alpha per threshold but insists every
larger threshold clears the target too. Both fall back to t_max when no
threshold qualifies, where the budget-free guarantee comes from the
decision maker's t_max assumption.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .clicklog import InteractionLog, OracleTable, rank_group
from .corpus import Query
from .estimator import BoundTable, _cumulative_z, build_bound_table
from .io import atomic_write_text
from .relevance import RelevanceModel

UNION = "union"
MONOTONE = "monotone"
RULES = (UNION, MONOTONE)


class BoundTableAccess(Protocol):
    """Anything exposing per-(group, threshold, alpha) confidence bounds."""

    def lower(self, group: str, t: int, alpha: float) -> float: ...

    def upper(self, group: str, t: int, alpha: float) -> float: ...


@dataclass(frozen=True)
class SelectionConfig:
    """Targets, threshold caps, and rule parameters for one selection run."""

    targets: dict[str, float]
    t_max: dict[str, int]
    alpha: float
    rule: str = MONOTONE
    lam: float = 100.0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        for g, target in self.targets.items():
            if target <= 0:
                raise ValueError(f"target for group {g!r} must be positive")
        for g, t in self.t_max.items():
            if t < 2:
                raise ValueError(
                    f"t_max for group {g!r} must be >= 2 (the per-threshold budget "
                    "alpha/(t_max - 1) is undefined at t_max = 1)"
                )


def equal_opportunity_targets(
    average_relevant: Mapping[str, float], total: float
) -> dict[str, float]:
    """Split a total target across groups proportionally to their AR_g.

    The resulting targets satisfy U*_g / AR_g = const and sum to ``total``.
    """
    if total <= 0:
        raise ValueError("total target must be positive")
    for g, ar in average_relevant.items():
        if ar <= 0:
            raise ValueError(f"group {g!r} has nonpositive average relevant count")
    denom = sum(average_relevant.values())
    return {g: total * ar / denom for g, ar in average_relevant.items()}


def select_union(table: BoundTableAccess, group: str, config: SelectionConfig) -> int:
    """Smallest threshold whose lower bound at budget alpha/(t_max - 1)
    clears the target; t_max when none does."""
    t_cap = config.t_max[group]
    budget = config.alpha / (t_cap - 1)
    target = config.targets[group]
    for t in range(1, t_cap):
        if table.lower(group, t, budget) >= target:
            return t
    return t_cap


def select_monotone(table: BoundTableAccess, group: str, config: SelectionConfig) -> int:
    """Smallest threshold from which every larger threshold's lower bound at
    budget alpha clears the target; t_max when none does.

    Implemented as a backward scan: the qualifying set is a suffix of
    [1, t_max - 1], so the scan stops at the first failure.
    """
    t_cap = config.t_max[group]
    target = config.targets[group]
    t_hat = t_cap
    for t in range(t_cap - 1, 0, -1):
        if table.lower(group, t, config.alpha) < target:
            break
        t_hat = t
    return t_hat


_RULE_FN = {UNION: select_union, MONOTONE: select_monotone}


@dataclass(frozen=True)
class OracleThreshold:
    """Optimal threshold for a known expected-relevance curve.

    When even t_max misses the target the guarantee is vacuous; the result
    flags the violation and falls back to t_max.
    """

    t: int
    assumption_violated: bool = False


def oracle_threshold(table: OracleTable, group: str, target: float, t_max: int) -> OracleThreshold:
    u = table.u[group]
    if t_max > len(u) - 1:
        raise ValueError(f"t_max={t_max} beyond the oracle table for group {group!r}")
    if u[t_max] < target:
        return OracleThreshold(t=t_max, assumption_violated=True)
    for t in range(1, t_max + 1):
        if u[t] >= target:
            return OracleThreshold(t=t)
    raise AssertionError("unreachable: u[t_max] >= target")  # pragma: no cover


@dataclass(frozen=True)
class GapComponents:
    """Near-optimality certificate pieces for a selected threshold.

    The gap is upper(t_hat) at the union budget minus lower(t_hat - 1) at the
    rule's own budget; t_hat = t_max has no certificate and yields NaN.
    """

    gap: float
    upper: float
    lower_prev: float
    upper_alpha: float
    lower_alpha: float


def gap_bounds(
    table: BoundTableAccess, rule: str, group: str, t_hat: int, config: SelectionConfig
) -> GapComponents:
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}")
    if t_hat < 1:
        raise ValueError("t_hat must be >= 1")
    t_cap = config.t_max[group]
    union_budget = config.alpha / (t_cap - 1)
    lower_budget = union_budget if rule == UNION else config.alpha
    if t_hat >= t_cap:
        return GapComponents(
            gap=math.nan, upper=math.nan,
            lower_prev=table.lower(group, t_hat - 1, lower_budget),
            upper_alpha=union_budget, lower_alpha=lower_budget,
        )
    ub = table.upper(group, t_hat, union_budget)
    lb = table.lower(group, t_hat - 1, lower_budget)
    return GapComponents(
        gap=ub - lb, upper=ub, lower_prev=lb,
        upper_alpha=union_budget, lower_alpha=lower_budget,
    )


@dataclass(frozen=True)
class FixedThresholdPolicy:
    """Select the top t_g items of each group as ranked by the bound model."""

    thresholds: dict[str, int]
    t_max: dict[str, int]
    model_fingerprint: str
    rule: str | None = None
    alpha: float | None = None
    lam: float | None = None
    targets: dict[str, float] | None = None
    gaps: dict[str, GapComponents] | None = None

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.thresholds)


@dataclass(frozen=True)
class PerQueryPolicy:
    """Per-query rule: select ranked items until their scores sum to the
    target, capped at t_max (the Individual baselines)."""

    targets: dict[str, float]
    t_max: dict[str, int]
    model_fingerprint: str

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.targets)


CandidatePolicy = FixedThresholdPolicy | PerQueryPolicy


def select_thresholds(table: BoundTableAccess, config: SelectionConfig) -> dict[str, int]:
    fn = _RULE_FN[config.rule]
    return {g: fn(table, g, config) for g in config.targets}


def algorithm1(
    log: InteractionLog, model: RelevanceModel, config: SelectionConfig
) -> FixedThresholdPolicy:
    """Select a certified fixed-threshold policy from logged feedback.

    Computes the bound table once, applies the configured rule per group at
    its failure budget, and attaches the per-group near-optimality gaps.
    """
    if log.ranking_fingerprint != model.fingerprint():
        raise ValueError(
            "log/model fingerprint mismatch: this log was ranked by a different "
            "model; estimates would use the wrong propensities. Re-simulate the "
            "log with the model under evaluation."
        )
    for g, t_cap in config.t_max.items():
        if t_cap > log.t_max[g]:
            raise ValueError(
                f"config t_max={t_cap} for group {g!r} exceeds the log's t_max={log.t_max[g]}"
            )
    table = build_bound_table(log, config.lam, groups=tuple(config.targets))
    thresholds = select_thresholds(table, config)
    gaps = {
        g: gap_bounds(table, config.rule, g, t_hat, config)
        for g, t_hat in thresholds.items()
    }
    return FixedThresholdPolicy(
        thresholds=thresholds,
        t_max=dict(config.t_max),
        model_fingerprint=model.fingerprint(),
        rule=config.rule,
        alpha=config.alpha,
        lam=config.lam,
        targets=dict(config.targets),
        gaps=gaps,
    )


def apply_policy(policy: CandidatePolicy, query: Query, model: RelevanceModel) -> np.ndarray:
    """Selection vector over the query's items (1 = selected).

    An item belonging to several groups is selected once if any group's rule
    picks it.
    """
    if policy.model_fingerprint != model.fingerprint():
        raise ValueError("policy/model fingerprint mismatch")
    selected = np.zeros(len(query.items), dtype=np.int8)
    if isinstance(policy, FixedThresholdPolicy):
        for g, t in policy.thresholds.items():
            ranked = rank_group(model, query, g, policy.t_max[g])
            selected[ranked[:t]] = 1
        return selected
    scores = model.score_query(query)
    for g, target in policy.targets.items():
        ranked = rank_group(model, query, g, policy.t_max[g])
        if len(ranked) == 0:
            continue
        k = _prefix_count(scores[ranked], target, policy.t_max[g])
        selected[ranked[: min(k, len(ranked))]] = 1
    return selected


def _prefix_count(scores: np.ndarray, target: float, t_max: int) -> int:
    """Minimal k with the top-k scores summing to >= target; t_max if unreachable."""
    csum = np.cumsum(scores[:t_max])
    hits = np.nonzero(csum >= target)[0]
    return int(hits[0]) + 1 if len(hits) else t_max


def baseline_individual(
    query: Query, model: RelevanceModel, group: str, target: float, t_max: int
) -> int:
    """Per-query count: ranked items are taken until predicted scores sum to
    the target, capped at t_max."""
    ranked = rank_group(model, query, group, t_max)
    if len(ranked) == 0:
        return t_max
    return _prefix_count(model.score_query(query)[ranked], target, t_max)


def baseline_marginal(
    queries: Sequence[Query], model: RelevanceModel, group: str, target: float, t_max: int
) -> int:
    """Smallest threshold whose average top-t score mass reaches the target.

    ``queries`` may repeat (e.g. one entry per logged request); duplicates
    are weighted by multiplicity. Falls back to t_max when no threshold
    qualifies. Calibrated variants pass a Platt-wrapped model.
    """
    if len(queries) == 0:
        raise ValueError("marginal baseline needs at least one query")
    prefix: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for q in queries:
        counts[q.query_id] = counts.get(q.query_id, 0) + 1
        if q.query_id in prefix:
            continue
        ranked = rank_group(model, q, group, t_max)
        csum = np.cumsum(model.score_query(q)[ranked]) if len(ranked) else np.zeros(0)
        padded = np.zeros(t_max)
        if len(csum):
            padded[: len(csum)] = csum
            padded[len(csum):] = csum[-1]
        prefix[q.query_id] = padded
    total = sum(counts.values())
    avg = sum(prefix[qid] * c for qid, c in counts.items()) / total
    hits = np.nonzero(avg[: t_max - 1] >= target)[0]
    return int(hits[0]) + 1 if len(hits) else t_max


def baseline_ipw(log: InteractionLog, group: str, target: float, t_max: int) -> int:
    """Smallest threshold whose unclipped IPW estimate reaches the target."""
    if t_max > log.t_max[group]:
        raise ValueError(f"t_max={t_max} exceeds the log's t_max for group {group!r}")
    z = _cumulative_z(log, group, np.inf)
    means = z[:, : t_max - 1].mean(axis=0)
    hits = np.nonzero(means >= target)[0]
    return int(hits[0]) + 1 if len(hits) else t_max


def _policy_payload(policy: CandidatePolicy) -> dict:
    if isinstance(policy, FixedThresholdPolicy):
        return {
            "variant": "fixed-threshold",
            "thresholds": policy.thresholds,
            "t_max": policy.t_max,
            "model_fingerprint": policy.model_fingerprint,
            "rule": policy.rule,
            "alpha": policy.alpha,
            "lambda": policy.lam,
            "targets": policy.targets,
            "gaps": {
                g: {
                    "gap": gc.gap,
                    "upper": gc.upper,
                    "lower_prev": gc.lower_prev,
                    "upper_alpha": gc.upper_alpha,
                    "lower_alpha": gc.lower_alpha,
                }
                for g, gc in (policy.gaps or {}).items()
            },
        }
    return {
        "variant": "per-query-individual",
        "targets": policy.targets,
        "t_max": policy.t_max,
        "model_fingerprint": policy.model_fingerprint,
    }


def save_policy(policy: CandidatePolicy, path, config: Mapping | None = None) -> None:
    payload = _policy_payload(policy)
    if config is not None:
        payload["config"] = dict(config)
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_policy(path) -> CandidatePolicy:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload["variant"] == "fixed-threshold":
        gaps = {
            g: GapComponents(
                gap=gc["gap"], upper=gc["upper"], lower_prev=gc["lower_prev"],
                upper_alpha=gc["upper_alpha"], lower_alpha=gc["lower_alpha"],
            )
            for g, gc in payload.get("gaps", {}).items()
        } or None
        return FixedThresholdPolicy(
            thresholds={g: int(t) for g, t in payload["thresholds"].items()},
            t_max={g: int(t) for g, t in payload["t_max"].items()},
            model_fingerprint=payload["model_fingerprint"],
            rule=payload.get("rule"),
            alpha=payload.get("alpha"),
            lam=payload.get("lambda"),
            targets=payload.get("targets"),
            gaps=gaps,
        )
    if payload["variant"] == "per-query-individual":
        return PerQueryPolicy(
            targets=payload["targets"],
            t_max={g: int(t) for g, t in payload["t_max"].items()},
            model_fingerprint=payload["model_fingerprint"],
        )
    raise ValueError(f"unknown policy variant {payload.get('variant')!r}")
