"""Per-group ranking, position-based click simulation, and oracles.

The simulator serves m recommendation requests: each samples a query
uniformly with replacement, ranks every group's items under the model,
and draws one observation per position with propensity 1/rank. A click is
observation times relevance, so clicks never land on irrelevant items.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Query
from .io import atomic_write_text
from .relevance import RelevanceModel

_LOG_FIELDS = ("request_id", "query_id", "group", "rank", "item_id", "propensity", "click")


def rank_group(model: RelevanceModel, query: Query, group: str, t_max: int) -> np.ndarray:
    """Indices of the group's items, best score first, truncated to ``t_max``.

    Ties break toward the lower item index so rankings are deterministic.
    An empty group yields an empty array.
    """
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    members = query.group_positions(group)
    if len(members) == 0:
        return members
    scores = model.score_query(query)[members]
    order = np.argsort(-scores, kind="stable")
    return members[order][:t_max]


@dataclass(frozen=True)
class RankedSlate:
    """Per-group rankings of one query under a fixed model."""

    query_id: int
    per_group: dict[str, np.ndarray]


def rank_query(
    model: RelevanceModel, query: Query, groups: Sequence[str], t_max: Mapping[str, int]
) -> RankedSlate:
    return RankedSlate(
        query_id=query.query_id,
        per_group={g: rank_group(model, query, g, t_max[g]) for g in groups},
    )


@dataclass(frozen=True)
class GroupArrays:
    """Ranked per-query arrays for one group, padded to a common width.

    Padding uses item -1, propensity +inf, relevance/score 0 so that padded
    positions contribute nothing to clipped-weight or bias sums.
    """

    items: np.ndarray       # (n_queries, width) int32
    relevance: np.ndarray   # (n_queries, width) int8
    propensity: np.ndarray  # (n_queries, width) float64
    scores: np.ndarray      # (n_queries, width) float64
    lengths: np.ndarray     # (n_queries,) int64


def build_group_arrays(
    model: RelevanceModel,
    queries: Sequence[Query],
    groups: Sequence[str],
    t_max: Mapping[str, int],
) -> dict[str, GroupArrays]:
    """Rank every query once per group and stack the slates into matrices.

    Each query is scored exactly once; the per-group rankings reuse the
    cached scores with the same descending-score, ascending-index order as
    :func:`rank_group`.
    """
    out: dict[str, GroupArrays] = {}
    n = len(queries)
    score_cache = [model.score_query(q) for q in queries]
    rel_cache = [q.relevance_vector() for q in queries]
    member_cache = {g: [q.group_positions(g) for q in queries] for g in groups}
    for g in groups:
        ranked = []
        for members, scores_q in zip(member_cache[g], score_cache):
            if len(members) == 0:
                ranked.append(members)
                continue
            order = np.argsort(-scores_q[members], kind="stable")
            ranked.append(members[order][: t_max[g]])
        lengths = np.asarray([len(r) for r in ranked], dtype=np.int64)
        width = max(1, int(lengths.max())) if n else 1
        items = np.full((n, width), -1, dtype=np.int32)
        rel = np.zeros((n, width), dtype=np.int8)
        prop = np.full((n, width), np.inf, dtype=float)
        scores = np.zeros((n, width), dtype=float)
        for i, r in enumerate(ranked):
            L = len(r)
            if L == 0:
                continue
            items[i, :L] = r
            rel[i, :L] = rel_cache[i][r]
            prop[i, :L] = 1.0 / np.arange(1, L + 1)
            scores[i, :L] = score_cache[i][r]
        out[g] = GroupArrays(items=items, relevance=rel, propensity=prop, scores=scores, lengths=lengths)
    return out


@dataclass(frozen=True)
class GroupLog:
    """One group's logged slates, one row per request (padded like GroupArrays)."""

    item_idx: np.ndarray    # (m, width) int32, -1 padding
    propensity: np.ndarray  # (m, width) float64, +inf padding
    click: np.ndarray       # (m, width) int8, 0 padding
    length: np.ndarray      # (m,) int64


@dataclass(frozen=True)
class LogRecord:
    """One request's logged positions: (items, propensities, clicks) per group."""

    query_id: int
    slots: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]
    t_max: dict[str, int]


@dataclass(frozen=True)
class InteractionLog:
    """Batch of logged user feedback with known propensities.

    ``ranking_fingerprint`` identifies the model whose rankings produced the
    slates; estimation refuses logs whose fingerprint does not match the
    model under evaluation, since propensities are only logged along that
    model's rankings.
    """

    query_ids: np.ndarray
    groups: tuple[str, ...]
    per_group: dict[str, GroupLog]
    t_max: dict[str, int]
    ranking_fingerprint: str
    seed: int | None = None
    query_index: np.ndarray | None = None

    def __post_init__(self):
        if self.m <= 1:
            raise ValueError("an interaction log needs m > 1 requests")
        for g in self.groups:
            gl = self.per_group[g]
            mask = np.arange(gl.propensity.shape[1])[None, :] < gl.length[:, None]
            p = gl.propensity[mask]
            if p.size and (p.min() <= 0.0 or p.max() > 1.0):
                raise ValueError(f"group {g!r}: propensities must lie in (0, 1]")
            c = gl.click[mask]
            if c.size and not np.isin(c, (0, 1)).all():
                raise ValueError(f"group {g!r}: clicks must be 0/1")

    @property
    def m(self) -> int:
        return len(self.query_ids)

    def record(self, i: int) -> LogRecord:
        slots = {}
        for g in self.groups:
            gl = self.per_group[g]
            L = int(gl.length[i])
            slots[g] = (gl.item_idx[i, :L], gl.propensity[i, :L], gl.click[i, :L])
        return LogRecord(query_id=int(self.query_ids[i]), slots=slots, t_max=dict(self.t_max))


def _normalize_t_max(t_max, groups: Sequence[str]) -> dict[str, int]:
    if isinstance(t_max, Mapping):
        out = {g: int(t_max[g]) for g in groups}
    else:
        out = {g: int(t_max) for g in groups}
    for g, t in out.items():
        if t < 1:
            raise ValueError(f"t_max for group {g!r} must be >= 1")
    return out


def simulate_log(
    queries: Sequence[Query],
    model: RelevanceModel,
    t_max,
    m: int,
    seed: int,
    groups: Sequence[str] | None = None,
) -> InteractionLog:
    """Simulate m logged requests under the position-based click model.

    Propensity at rank k is 1/k, so every logged position satisfies the
    positivity assumption by construction (p >= 1/t_max). Observations are
    Bernoulli(1/rank); a click is recorded only when the observed item is
    relevant. Counter-based randomness keyed on the seed gives byte-identical
    logs for identical seeds; row i of every draw belongs to request i.
    """
    if m <= 1:
        raise ValueError("m must be > 1")
    if len(queries) == 0:
        raise ValueError("cannot simulate from an empty query pool")
    if groups is None:
        groups = sorted({g for q in queries for it in q.items for g in it.groups})
    groups = tuple(groups)
    t_max = _normalize_t_max(t_max, groups)

    arrays = build_group_arrays(model, queries, groups, t_max)
    rng = np.random.Generator(np.random.Philox(key=abs(seed)))
    qidx = rng.integers(0, len(queries), size=m)
    query_ids = np.asarray([q.query_id for q in queries], dtype=np.int64)[qidx]

    per_group: dict[str, GroupLog] = {}
    for g in groups:
        ga = arrays[g]
        width = ga.items.shape[1]
        prop = ga.propensity[qidx]
        rel = ga.relevance[qidx]
        observed = rng.random((m, width)) < prop
        clicks = (observed & (rel > 0)).astype(np.int8)
        per_group[g] = GroupLog(
            item_idx=ga.items[qidx],
            propensity=prop,
            click=clicks,
            length=ga.lengths[qidx],
        )
    return InteractionLog(
        query_ids=query_ids,
        groups=groups,
        per_group=per_group,
        t_max=t_max,
        ranking_fingerprint=model.fingerprint(),
        seed=seed,
        query_index=qidx,
    )


def true_expected_relevant(
    queries: Sequence[Query], model: RelevanceModel, group: str, t: int
) -> float:
    """Average count of relevant items among the model's top t of the group."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0 or len(queries) == 0:
        return 0.0
    total = 0
    for q in queries:
        ranked = rank_group(model, q, group, t)
        if len(ranked):
            total += int(q.relevance_vector()[ranked].sum())
    return total / len(queries)


@dataclass(frozen=True)
class OracleTable:
    """Expected number of relevant items per (group, threshold).

    ``u[g][t]`` covers t = 0..t_max_g with u[g][0] = 0; the curve is
    non-decreasing and never exceeds t.
    """

    u: dict[str, np.ndarray]

    def __post_init__(self):
        for g, vals in self.u.items():
            vals = np.asarray(vals, dtype=float)
            if vals[0] != 0.0:
                raise ValueError(f"group {g!r}: table must start at 0")
            if np.any(np.diff(vals) < -1e-9):
                raise ValueError(f"group {g!r}: table must be non-decreasing")
            if np.any(vals > np.arange(len(vals)) + 1e-9):
                raise ValueError(f"group {g!r}: U(t) cannot exceed t")

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.u)

    def t_max(self, group: str) -> int:
        return len(self.u[group]) - 1

    def value(self, group: str, t: int) -> float:
        return float(self.u[group][t])


def build_oracle_table(
    queries: Sequence[Query],
    model: RelevanceModel,
    groups: Sequence[str],
    t_max,
) -> OracleTable:
    """Empirical oracle from full-information data (e.g. the test split)."""
    groups = tuple(groups)
    t_max = _normalize_t_max(t_max, groups)
    arrays = build_group_arrays(model, queries, groups, t_max)
    table: dict[str, np.ndarray] = {}
    for g in groups:
        ga = arrays[g]
        cum = np.cumsum(ga.relevance.astype(float), axis=1)
        width = cum.shape[1]
        if width < t_max[g]:
            cum = np.pad(cum, ((0, 0), (0, t_max[g] - width)), mode="edge")
        means = cum[:, : t_max[g]].mean(axis=0) if len(queries) else np.zeros(t_max[g])
        table[g] = np.concatenate([[0.0], means])
    return OracleTable(u=table)


def save_log_csv(log: InteractionLog, path, config: Mapping | None = None) -> None:
    """Persist a log as line-delimited records plus a JSON sidecar.

    Propensities are printed at full round-trip precision. The sidecar
    ``<path>.meta.json`` carries the ranking fingerprint, per-group t_max,
    seed, and any resolved config so the artifact can be validated later.
    """
    path = Path(path)
    lines = [",".join(_LOG_FIELDS)]
    for i in range(log.m):
        qid = int(log.query_ids[i])
        for g in log.groups:
            gl = log.per_group[g]
            for j in range(int(gl.length[i])):
                lines.append(
                    f"{i},{qid},{g},{j + 1},{int(gl.item_idx[i, j])},"
                    f"{repr(float(gl.propensity[i, j]))},{int(gl.click[i, j])}"
                )
    atomic_write_text(path, "\n".join(lines) + "\n")
    meta = {
        "m": log.m,
        "groups": list(log.groups),
        "t_max": dict(log.t_max),
        "ranking_fingerprint": log.ranking_fingerprint,
        "seed": log.seed,
    }
    if config is not None:
        meta["config"] = dict(config)
    atomic_write_text(path.with_suffix(path.suffix + ".meta.json"),
                      json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_log_csv(path) -> InteractionLog:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    m = int(meta["m"])
    groups = tuple(meta["groups"])
    t_max = {g: int(v) for g, v in meta["t_max"].items()}

    rows_by_group: dict[str, list[tuple[int, int, int, float, int]]] = {g: [] for g in groups}
    query_ids = np.zeros(m, dtype=np.int64)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != ",".join(_LOG_FIELDS):
            raise ValueError(f"unexpected log header in {path}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            req, qid, g, rank, item, prop, click = line.split(",")
            i = int(req)
            query_ids[i] = int(qid)
            rows_by_group[g].append((i, int(rank), int(item), float(prop), int(click)))

    per_group: dict[str, GroupLog] = {}
    for g in groups:
        rows = rows_by_group[g]
        width = max((r[1] for r in rows), default=1)
        items = np.full((m, width), -1, dtype=np.int32)
        prop = np.full((m, width), np.inf, dtype=float)
        click = np.zeros((m, width), dtype=np.int8)
        length = np.zeros(m, dtype=np.int64)
        for i, rank, item, p, c in rows:
            items[i, rank - 1] = item
            prop[i, rank - 1] = p
            click[i, rank - 1] = c
            length[i] = max(length[i], rank)
        per_group[g] = GroupLog(item_idx=items, propensity=prop, click=click, length=length)
    return InteractionLog(
        query_ids=query_ids,
        groups=groups,
        per_group=per_group,
        t_max=t_max,
        ranking_fingerprint=meta["ranking_fingerprint"],
        seed=meta.get("seed"),
    )
