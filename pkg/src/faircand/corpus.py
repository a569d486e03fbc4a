"""Learning-to-rank corpus handling.

Parses LETOR/SVMlight text, binarizes graded labels, assigns group labels
from a feature rule, splits data by query, and generates synthetic datasets
whose per-group expected-relevance curves are known in closed form.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

DISADVANTAGED = "disadv"
ADVANTAGED = "adv"

#: Raw labels considered relevant after binarization.
RELEVANT_LABELS = frozenset({2, 3, 4})
_VALID_LABELS = frozenset(range(5))


class ParseError(ValueError):
    """Malformed LETOR input; carries the 1-based offending line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True)
class Item:
    """One candidate item within a query.

    Features are sparse: absent indices mean value 0.0, which is the
    convention the zero-vs-positive group rule relies on.
    """

    features: dict[int, float]
    raw_label: int
    relevance: int | None = None
    groups: frozenset[str] = frozenset()

    def feature(self, index: int) -> float:
        return self.features.get(index, 0.0)


@dataclass(frozen=True)
class Query:
    """A query with its candidate items; item ids are positions in ``items``."""

    query_id: int
    items: tuple[Item, ...]

    def relevance_vector(self) -> np.ndarray:
        rel = [it.relevance for it in self.items]
        if any(r is None for r in rel):
            raise ValueError(f"query {self.query_id} has unbinarized relevance labels")
        return np.asarray(rel, dtype=np.int8)

    def group_positions(self, group: str) -> np.ndarray:
        return np.asarray(
            [j for j, it in enumerate(self.items) if group in it.groups], dtype=np.int64
        )


@dataclass(frozen=True)
class Dataset:
    queries: tuple[Query, ...]
    groups: tuple[str, ...] = ()
    feature_count: int = 0

    @property
    def n_queries(self) -> int:
        return len(self.queries)

    def total_items(self) -> int:
        return sum(len(q.items) for q in self.queries)

    def validate(self) -> None:
        ids = [q.query_id for q in self.queries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate query ids")
        for q in self.queries:
            for it in q.items:
                for k in it.features:
                    if not 1 <= k <= self.feature_count:
                        raise ValueError(
                            f"query {q.query_id}: feature index {k} outside "
                            f"[1, {self.feature_count}]"
                        )


def parse_letor(source: str | IO[str] | Iterable[str], feature_count: int | None = None) -> Dataset:
    """Parse LETOR/SVMlight text into a :class:`Dataset`.

    Each nonempty line reads ``<label> qid:<qid> <fid>:<val> ... [# comment]``.
    Queries keep first-appearance order; items keep input order within their
    query. Raw labels are stored as-is; call :func:`binarize` afterwards.
    """
    if isinstance(source, str):
        lines: Iterable[str] = source.splitlines()
    else:
        lines = source

    by_qid: dict[int, list[Item]] = {}
    max_feature = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 2:
            raise ParseError(lineno, "expected '<label> qid:<qid> ...'")
        try:
            label = int(tokens[0])
        except ValueError:
            raise ParseError(lineno, f"bad label {tokens[0]!r}") from None
        if label < 0:
            raise ParseError(lineno, f"negative label {label}")
        if not tokens[1].startswith("qid:"):
            raise ParseError(lineno, f"expected qid token, got {tokens[1]!r}")
        try:
            qid = int(tokens[1][4:])
        except ValueError:
            raise ParseError(lineno, f"bad query id {tokens[1]!r}") from None
        features: dict[int, float] = {}
        for tok in tokens[2:]:
            fid_s, sep, val_s = tok.partition(":")
            if not sep:
                raise ParseError(lineno, f"bad feature token {tok!r}")
            try:
                fid = int(fid_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(lineno, f"bad feature token {tok!r}") from None
            if fid < 1:
                raise ParseError(lineno, f"feature index {fid} must be >= 1")
            if fid in features:
                raise ParseError(lineno, f"duplicate feature index {fid}")
            features[fid] = val
            max_feature = max(max_feature, fid)
        by_qid.setdefault(qid, []).append(Item(features=features, raw_label=label))

    count = feature_count if feature_count is not None else max_feature
    ds = Dataset(
        queries=tuple(Query(qid, tuple(items)) for qid, items in by_qid.items()),
        feature_count=count,
    )
    ds.validate()
    return ds


def serialize_letor(dataset: Dataset) -> str:
    """Render a dataset back to LETOR text; inverse of :func:`parse_letor`."""
    out: list[str] = []
    for q in dataset.queries:
        for it in q.items:
            feats = " ".join(f"{k}:{repr(it.features[k])}" for k in sorted(it.features))
            line = f"{it.raw_label} qid:{q.query_id}"
            if feats:
                line += " " + feats
            out.append(line)
    return "\n".join(out) + ("\n" if out else "")


def binarize_relevance(raw_label: int) -> int:
    """Map a graded label in {0..4} to binary relevance (2, 3, 4 -> 1)."""
    if raw_label not in _VALID_LABELS:
        raise ValueError(f"raw label {raw_label} outside {{0..4}}")
    return 1 if raw_label in RELEVANT_LABELS else 0


def binarize(dataset: Dataset) -> Dataset:
    queries = tuple(
        Query(
            q.query_id,
            tuple(
                dataclasses.replace(it, relevance=binarize_relevance(it.raw_label))
                for it in q.items
            ),
        )
        for q in dataset.queries
    )
    return dataclasses.replace(dataset, queries=queries)


def assign_groups(
    dataset: Dataset,
    feature_index: int,
    zero_group: str = DISADVANTAGED,
    positive_group: str = ADVANTAGED,
) -> Dataset:
    """Label every item by the zero-vs-positive rule on one feature.

    Items whose feature value is exactly 0 (including absent, by the sparse
    convention) go to ``zero_group``; all others to ``positive_group``. The
    two groups are disjoint and exhaustive.
    """
    if feature_index < 1 or feature_index > dataset.feature_count:
        raise ValueError(f"feature index {feature_index} not in dataset")
    zero = frozenset({zero_group})
    positive = frozenset({positive_group})
    queries = tuple(
        Query(
            q.query_id,
            tuple(
                dataclasses.replace(
                    it, groups=zero if it.feature(feature_index) == 0.0 else positive
                )
                for it in q.items
            ),
        )
        for q in dataset.queries
    )
    return dataclasses.replace(
        dataset, queries=queries, groups=tuple(sorted((zero_group, positive_group)))
    )


@dataclass(frozen=True)
class SplitSpec:
    """Query-level split fractions (train, sim, test) plus the shuffle seed."""

    fractions: tuple[float, float, float] = (0.01, 0.69, 0.30)
    seed: int = 0

    def __post_init__(self):
        if any(f < 0 for f in self.fractions):
            raise ValueError("split fractions must be nonnegative")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {sum(self.fractions)}, expected 1")


def _partition_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    # floor allocation, then hand out the remainder by largest fractional part
    raw = [f * n for f in fractions]
    sizes = [math.floor(r) for r in raw]
    remainder = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: raw[i] - sizes[i], reverse=True)
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint query-level split into (train, sim, test).

    Splitting is by query, never by item: relevance labels are dependent
    within a query. Deterministic for a fixed seed.
    """
    if dataset.n_queries == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(dataset.n_queries)
    sizes = _partition_sizes(dataset.n_queries, spec.fractions)
    parts: list[Dataset] = []
    start = 0
    for size in sizes:
        idx = np.sort(order[start : start + size])
        parts.append(
            dataclasses.replace(dataset, queries=tuple(dataset.queries[i] for i in idx))
        )
        start += size
    return parts[0], parts[1], parts[2]


def average_relevant(dataset: Dataset, group: str) -> float:
    """Mean number of relevant items per query carrying the group label."""
    if dataset.n_queries == 0:
        raise ValueError("empty dataset")
    if group not in dataset.groups:
        raise ValueError(f"unknown group {group!r}; declared groups: {dataset.groups}")
    total = 0
    for q in dataset.queries:
        for it in q.items:
            if group in it.groups and it.relevance is None:
                raise ValueError("dataset is not binarized")
            if group in it.groups and it.relevance == 1:
                total += 1
    return total / dataset.n_queries


@dataclass(frozen=True)
class SyntheticSpec:
    """Synthetic corpus with per-slot Bernoulli relevance.

    Every query has, for each group, one item per probability slot; item
    relevance is an independent Bernoulli draw of its slot probability. A
    model that scores items by their slot probability therefore ranks every
    query identically, and the expected number of relevant items among its
    top t is exactly the sum of the t largest slot probabilities.

    Feature 1 holds the slot probability, feature 2 the group ordinal, so
    generated datasets round-trip through the LETOR format.
    """

    probabilities: dict[str, tuple[float, ...]]
    n_queries: int = 2000
    score_feature: int = 1
    group_feature: int = 2

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if not self.probabilities:
            raise ValueError("at least one group required")
        for g, probs in self.probabilities.items():
            if len(probs) == 0:
                raise ValueError(f"group {g!r} has no items")
            if any(not 0.0 <= p <= 1.0 for p in probs):
                raise ValueError(f"group {g!r} probabilities outside [0, 1]")

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.probabilities)

    def exact_expected_relevant(self) -> dict[str, np.ndarray]:
        """Closed-form U_g(t) for t = 0..n_g under probability-ordered ranking."""
        table: dict[str, np.ndarray] = {}
        for g, probs in self.probabilities.items():
            ordered = np.sort(np.asarray(probs, dtype=float))[::-1]
            table[g] = np.concatenate([[0.0], np.cumsum(ordered)])
        return table

    def average_relevant(self) -> dict[str, float]:
        return {g: float(np.sum(p)) for g, p in self.probabilities.items()}


def synth_generate(spec: SyntheticSpec, seed: int) -> tuple[Dataset, dict[str, np.ndarray]]:
    """Generate a synthetic dataset plus its exact expected-relevance table.

    Relevance draws use one keyed stream per query so queries are independent
    and reproducible. Raw labels are written as 2/0 so binarization maps them
    back to the drawn relevance.
    """
    queries = []
    group_list = spec.groups
    for qid in range(spec.n_queries):
        rng = np.random.default_rng([abs(seed), qid])
        items: list[Item] = []
        for ordinal, g in enumerate(group_list):
            probs = np.asarray(spec.probabilities[g], dtype=float)
            rel = (rng.random(len(probs)) < probs).astype(np.int8)
            for p, r in zip(probs, rel):
                items.append(
                    Item(
                        features={
                            spec.score_feature: float(p),
                            spec.group_feature: float(ordinal),
                        },
                        raw_label=2 if r else 0,
                        relevance=int(r),
                        groups=frozenset({g}),
                    )
                )
        queries.append(Query(qid, tuple(items)))
    dataset = Dataset(
        queries=tuple(queries),
        groups=group_list,
        feature_count=max(spec.score_feature, spec.group_feature),
    )
    return dataset, spec.exact_expected_relevant()
