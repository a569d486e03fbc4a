import dataclasses

import numpy as np
import pytest

from faircand import corpus
from faircand.corpus import (
    Dataset,
    Item,
    ParseError,
    Query,
    SplitSpec,
    SyntheticSpec,
    assign_groups,
    average_relevant,
    binarize,
    binarize_relevance,
    parse_letor,
    serialize_letor,
    split,
    synth_generate,
)


class TestParse:
    def test_single_line(self):
        ds = parse_letor("2 qid:10 1:0.5 3:1.25")
        assert ds.n_queries == 1
        q = ds.queries[0]
        assert q.query_id == 10
        assert len(q.items) == 1
        assert q.items[0].raw_label == 2
        assert q.items[0].features == {1: 0.5, 3: 1.25}

    def test_empty_input(self):
        ds = parse_letor("")
        assert ds.n_queries == 0

    def test_grouping_by_qid(self):
        text = "\n".join(
            [
                "1 qid:7 1:0.1",
                "0 qid:7 1:0.2",
                "2 qid:8 1:0.3",
                "3 qid:7 1:0.4",
                "0 qid:8 1:0.5",
            ]
        )
        ds = parse_letor(text)
        assert ds.n_queries == 2
        sizes = {q.query_id: len(q.items) for q in ds.queries}
        assert sizes == {7: 3, 8: 2}
        # first-appearance order is preserved
        assert [q.query_id for q in ds.queries] == [7, 8]

    def test_comments_and_blank_lines(self):
        ds = parse_letor("1 qid:1 1:0.5 # docid=foo\n\n   \n0 qid:1 2:1.0\n")
        assert len(ds.queries[0].items) == 2

    def test_malformed_line_reports_line_number(self):
        with pytest.raises(ParseError, match="line 2"):
            parse_letor("1 qid:1 1:0.5\nnot a line")

    def test_duplicate_feature_rejected(self):
        with pytest.raises(ParseError, match="duplicate feature index 1"):
            parse_letor("1 qid:1 1:0.5 1:0.7")

    def test_bad_label(self):
        with pytest.raises(ParseError, match="label"):
            parse_letor("x qid:1 1:0.5")
        with pytest.raises(ParseError, match="negative"):
            parse_letor("-1 qid:1 1:0.5")

    def test_missing_qid(self):
        with pytest.raises(ParseError, match="qid"):
            parse_letor("1 quid:1 1:0.5")

    def test_roundtrip_idempotent(self, toy_text):
        ds1 = parse_letor(toy_text)
        text2 = serialize_letor(ds1)
        ds2 = parse_letor(text2)
        assert ds1 == ds2
        assert serialize_letor(ds2) == text2

    def test_roundtrip_random(self):
        rng = np.random.default_rng(0)
        queries = []
        for qid in range(20):
            items = []
            for _ in range(int(rng.integers(1, 6))):
                feats = {
                    int(k): float(rng.normal())
                    for k in rng.choice(np.arange(1, 9), size=rng.integers(1, 4), replace=False)
                }
                items.append(Item(features=feats, raw_label=int(rng.integers(0, 5))))
            queries.append(Query(qid, tuple(items)))
        ds = Dataset(queries=tuple(queries), feature_count=8)
        assert parse_letor(serialize_letor(ds), feature_count=8) == ds


class TestBinarize:
    @pytest.mark.parametrize("raw,expected", [(2, 1), (0, 0), (4, 1), (1, 0), (3, 1)])
    def test_mapping(self, raw, expected):
        assert binarize_relevance(raw) == expected

    @pytest.mark.parametrize("raw", [5, -1, 17])
    def test_out_of_domain(self, raw):
        with pytest.raises(ValueError):
            binarize_relevance(raw)

    def test_dataset_binarize(self):
        ds = binarize(parse_letor("2 qid:1 1:0.5\n1 qid:1 1:0.2"))
        assert [it.relevance for it in ds.queries[0].items] == [1, 0]
        # raw labels survive for serialization
        assert [it.raw_label for it in ds.queries[0].items] == [2, 1]


class TestGroups:
    def test_zero_vs_positive(self):
        ds = binarize(parse_letor("1 qid:1 1:0.0 2:3.0\n1 qid:1 1:17.0\n2 qid:1 2:9.9"))
        ds = assign_groups(ds, feature_index=1)
        groups = [next(iter(it.groups)) for it in ds.queries[0].items]
        # absent feature counts as zero under the sparse convention
        assert groups == ["disadv", "adv", "disadv"]

    def test_all_zero_degenerate(self):
        ds = binarize(parse_letor("1 qid:1 1:0.0\n0 qid:1 1:0.0"))
        ds = assign_groups(ds, feature_index=1)
        assert all("disadv" in it.groups for q in ds.queries for it in q.items)

    def test_disjoint_exhaustive(self, toy_dataset):
        for q in toy_dataset.queries:
            for it in q.items:
                assert len(it.groups) == 1
                assert next(iter(it.groups)) in toy_dataset.groups

    def test_missing_feature_index(self, toy_dataset):
        with pytest.raises(ValueError):
            assign_groups(toy_dataset, feature_index=99)


class TestSplit:
    @staticmethod
    def _flat_dataset(n):
        queries = tuple(
            Query(qid, (Item(features={1: 0.5}, raw_label=0, relevance=0),))
            for qid in range(n)
        )
        return Dataset(queries=queries, feature_count=1)

    def test_reference_sizes(self):
        ds = self._flat_dataset(30_000)
        train, sim, test = split(ds, SplitSpec((0.01, 0.69, 0.30), seed=1))
        assert (train.n_queries, sim.n_queries, test.n_queries) == (300, 20_700, 9_000)

    def test_deterministic(self):
        ds = self._flat_dataset(500)
        spec = SplitSpec((0.2, 0.5, 0.3), seed=42)
        a = split(ds, spec)
        b = split(ds, spec)
        for pa, pb in zip(a, b):
            assert [q.query_id for q in pa.queries] == [q.query_id for q in pb.queries]

    def test_partition(self):
        ds = self._flat_dataset(101)
        parts = split(ds, SplitSpec((0.33, 0.33, 0.34), seed=3))
        ids = [frozenset(q.query_id for q in p.queries) for p in parts]
        assert ids[0] | ids[1] | ids[2] == set(range(101))
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])

    def test_all_in_train(self):
        ds = self._flat_dataset(10)
        train, sim, test = split(ds, SplitSpec((1.0, 0.0, 0.0), seed=0))
        assert train.n_queries == 10 and sim.n_queries == 0 and test.n_queries == 0

    def test_invalid_fractions(self):
        with pytest.raises(ValueError):
            SplitSpec((0.5, 0.5, 0.5))
        with pytest.raises(ValueError):
            SplitSpec((-0.1, 0.6, 0.5))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            split(Dataset(queries=(), feature_count=1), SplitSpec())


class TestAverageRelevant:
    def test_brute_force_recount(self, toy_dataset):
        for g in toy_dataset.groups:
            brute = sum(
                1
                for q in toy_dataset.queries
                for it in q.items
                if g in it.groups and it.relevance == 1
            ) / toy_dataset.n_queries
            assert average_relevant(toy_dataset, g) == pytest.approx(brute)

    def test_zero_relevant(self):
        ds = binarize(parse_letor("0 qid:1 1:1.0\n0 qid:2 1:2.0"))
        ds = assign_groups(ds, feature_index=1)
        assert average_relevant(ds, "adv") == 0.0

    def test_unknown_group(self, toy_dataset):
        with pytest.raises(ValueError, match="unknown group"):
            average_relevant(toy_dataset, "nope")


class TestSynthetic:
    def test_exact_table_example(self):
        spec = SyntheticSpec(probabilities={"only": (0.9, 0.5, 0.1)}, n_queries=5)
        _ds, table = synth_generate(spec, seed=0)
        assert table["only"] == pytest.approx([0.0, 0.9, 1.4, 1.5])

    def test_all_zero_probabilities(self):
        spec = SyntheticSpec(probabilities={"g": (0.0, 0.0)}, n_queries=3)
        ds, table = synth_generate(spec, seed=0)
        assert table["g"] == pytest.approx([0.0, 0.0, 0.0])
        assert all(it.relevance == 0 for q in ds.queries for it in q.items)

    def test_all_one_probabilities(self):
        spec = SyntheticSpec(probabilities={"g": (1.0, 1.0, 1.0)}, n_queries=3)
        ds, table = synth_generate(spec, seed=0)
        assert table["g"] == pytest.approx([0.0, 1.0, 2.0, 3.0])
        assert all(it.relevance == 1 for q in ds.queries for it in q.items)

    def test_deterministic_and_binarization_consistent(self):
        spec = SyntheticSpec(probabilities={"a": (0.7, 0.3), "b": (0.5,)}, n_queries=50)
        ds1, _ = synth_generate(spec, seed=9)
        ds2, _ = synth_generate(spec, seed=9)
        assert ds1 == ds2
        rebuilt = binarize(parse_letor(serialize_letor(ds1)))
        for q1, q2 in zip(ds1.queries, rebuilt.queries):
            assert [it.relevance for it in q1.items] == [it.relevance for it in q2.items]

    def test_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(probabilities={"g": (1.5,)}, n_queries=1)
        with pytest.raises(ValueError):
            SyntheticSpec(probabilities={}, n_queries=1)

    def test_relevance_rate_tracks_probability(self):
        spec = SyntheticSpec(probabilities={"g": (0.8, 0.2)}, n_queries=4000)
        ds, _ = synth_generate(spec, seed=2)
        first = np.mean([q.items[0].relevance for q in ds.queries])
        second = np.mean([q.items[1].relevance for q in ds.queries])
        assert first == pytest.approx(0.8, abs=0.03)
        assert second == pytest.approx(0.2, abs=0.03)
