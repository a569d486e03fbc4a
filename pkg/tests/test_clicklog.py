import numpy as np
import pytest

from faircand.corpus import Item, Query, SyntheticSpec, synth_generate
from faircand.relevance import ConstantModel, FeatureModel
from faircand.clicklog import (
    InteractionLog,
    OracleTable,
    build_group_arrays,
    build_oracle_table,
    load_log_csv,
    rank_group,
    rank_query,
    save_log_csv,
    simulate_log,
    true_expected_relevant,
)

from conftest import make_log


def _scored_query(scores, group="g", relevances=None, qid=0):
    rel = relevances or [0] * len(scores)
    items = tuple(
        Item(features={1: float(s)}, raw_label=2 * r, relevance=r, groups=frozenset({group}))
        for s, r in zip(scores, rel)
    )
    return Query(qid, items)


class TestRankGroup:
    def test_sorts_descending(self):
        q = _scored_query([0.9, 0.5, 0.7])
        ranked = rank_group(FeatureModel(1), q, "g", t_max=2)
        assert ranked.tolist() == [0, 2]

    def test_tie_breaks_by_index(self):
        q = _scored_query([0.5, 0.5])
        assert rank_group(FeatureModel(1), q, "g", t_max=5).tolist() == [0, 1]

    def test_t_max_larger_than_group(self):
        q = _scored_query([0.1, 0.2, 0.3])
        assert rank_group(FeatureModel(1), q, "g", t_max=10).tolist() == [2, 1, 0]

    def test_empty_group(self):
        q = _scored_query([0.1])
        assert len(rank_group(FeatureModel(1), q, "other", t_max=3)) == 0

    def test_permutation_prefix_property(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n = int(rng.integers(1, 12))
            q = _scored_query(rng.random(n).tolist())
            t = int(rng.integers(1, 15))
            ranked = rank_group(FeatureModel(1), q, "g", t)
            assert len(ranked) == min(t, n)
            assert len(set(ranked.tolist())) == len(ranked)

    def test_rank_query_covers_groups(self):
        q = Query(0, (
            Item(features={1: 0.4}, raw_label=0, relevance=0, groups=frozenset({"a"})),
            Item(features={1: 0.8}, raw_label=2, relevance=1, groups=frozenset({"b"})),
        ))
        slate = rank_query(FeatureModel(1), q, ("a", "b"), {"a": 2, "b": 2})
        assert slate.per_group["a"].tolist() == [0]
        assert slate.per_group["b"].tolist() == [1]


@pytest.fixture(scope="module")
def sim_world():
    spec = SyntheticSpec(
        probabilities={"adv": (0.9, 0.7, 0.5, 0.3), "disadv": (0.8, 0.4, 0.2)},
        n_queries=60,
    )
    ds, _ = synth_generate(spec, seed=0)
    return ds, FeatureModel(1)


class TestSimulateLog:
    def test_propensity_is_inverse_rank(self, sim_world):
        ds, model = sim_world
        log = simulate_log(ds.queries, model, t_max=4, m=10, seed=1)
        gl = log.per_group["adv"]
        for i in range(log.m):
            L = int(gl.length[i])
            assert gl.propensity[i, :L] == pytest.approx(1.0 / np.arange(1, L + 1))
        assert gl.propensity[0, 2] == pytest.approx(1.0 / 3.0)

    def test_rank_one_click_equals_relevance(self, sim_world):
        ds, model = sim_world
        log = simulate_log(ds.queries, model, t_max=4, m=400, seed=2)
        by_id = {q.query_id: q for q in ds.queries}
        ga = log.per_group["adv"]
        for i in range(log.m):
            q = by_id[int(log.query_ids[i])]
            top = rank_group(model, q, "adv", 4)[0]
            # propensity 1 at rank 1: observation is certain
            assert ga.click[i, 0] == q.relevance_vector()[top]

    def test_click_implies_relevance(self, sim_world):
        ds, model = sim_world
        log = simulate_log(ds.queries, model, t_max=4, m=300, seed=3)
        by_id = {q.query_id: q for q in ds.queries}
        for g in log.groups:
            gl = log.per_group[g]
            for i in range(log.m):
                q = by_id[int(log.query_ids[i])]
                rel = q.relevance_vector()
                L = int(gl.length[i])
                clicked = gl.item_idx[i, :L][gl.click[i, :L] == 1]
                assert np.all(rel[clicked] == 1)

    def test_deterministic_given_seed(self, sim_world):
        ds, model = sim_world
        a = simulate_log(ds.queries, model, t_max=3, m=50, seed=9)
        b = simulate_log(ds.queries, model, t_max=3, m=50, seed=9)
        assert np.array_equal(a.query_ids, b.query_ids)
        for g in a.groups:
            assert np.array_equal(a.per_group[g].click, b.per_group[g].click)
            assert np.array_equal(a.per_group[g].propensity, b.per_group[g].propensity)
        c = simulate_log(ds.queries, model, t_max=3, m=50, seed=10)
        assert not np.array_equal(a.per_group["adv"].click, c.per_group["adv"].click)

    def test_click_rate_matches_position_model(self, sim_world):
        # at rank k the click rate converges to (relevance rate at rank k)/k
        ds, model = sim_world
        m = 20_000
        log = simulate_log(ds.queries, model, t_max=4, m=m, seed=4)
        by_id = {q.query_id: q for q in ds.queries}
        ga = log.per_group["adv"]
        rel_at_rank = np.zeros(2)
        for i in range(m):
            q = by_id[int(log.query_ids[i])]
            ranked = rank_group(model, q, "adv", 4)
            rel = q.relevance_vector()[ranked[:2]]
            rel_at_rank += rel
        for k in (1, 2):
            expected = rel_at_rank[k - 1] / m / k
            observed = ga.click[:, k - 1].mean()
            se = np.sqrt(expected * (1 - expected) / m)
            assert abs(observed - expected) < 4 * se + 1e-12

    def test_preconditions(self, sim_world):
        ds, model = sim_world
        with pytest.raises(ValueError, match="m must be"):
            simulate_log(ds.queries, model, t_max=3, m=1, seed=0)
        with pytest.raises(ValueError, match="empty"):
            simulate_log([], model, t_max=3, m=10, seed=0)

    def test_validation_rejects_bad_propensity(self):
        with pytest.raises(ValueError, match="propensities"):
            make_log([{"g": [(0.0, 0)]}, {"g": [(1.0, 1)]}])

    def test_m_must_exceed_one(self):
        with pytest.raises(ValueError, match="m > 1"):
            make_log([{"g": [(1.0, 0)]}])


class TestOracles:
    def test_hand_count(self):
        q1 = _scored_query([0.9, 0.8], relevances=[1, 0], qid=1)
        q2 = _scored_query([0.9, 0.8], relevances=[1, 1], qid=2)
        assert true_expected_relevant([q1, q2], FeatureModel(1), "g", 2) == pytest.approx(1.5)

    def test_t_zero(self):
        q = _scored_query([0.5], relevances=[1])
        assert true_expected_relevant([q], FeatureModel(1), "g", 0) == 0.0

    def test_all_relevant_full_depth(self):
        qs = [_scored_query([0.3, 0.2, 0.1], relevances=[1, 1, 1], qid=i) for i in range(3)]
        assert true_expected_relevant(qs, FeatureModel(1), "g", 3) == pytest.approx(3.0)

    def test_table_matches_pointwise_oracle(self, sim_world):
        ds, model = sim_world
        table = build_oracle_table(ds.queries, model, ds.groups, t_max=4)
        for g in ds.groups:
            for t in range(table.t_max(g) + 1):
                assert table.value(g, t) == pytest.approx(
                    true_expected_relevant(ds.queries, model, g, t)
                )

    def test_table_monotone_and_bounded(self, sim_world):
        ds, model = sim_world
        table = build_oracle_table(ds.queries, model, ds.groups, t_max=4)
        for g in ds.groups:
            u = table.u[g]
            assert u[0] == 0.0
            assert np.all(np.diff(u) >= -1e-12)
            assert np.all(u <= np.arange(len(u)) + 1e-12)

    def test_table_validation(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            OracleTable(u={"g": np.array([0.0, 1.0, 0.5])})
        with pytest.raises(ValueError, match="start at 0"):
            OracleTable(u={"g": np.array([0.5, 1.0])})
        with pytest.raises(ValueError, match="exceed"):
            OracleTable(u={"g": np.array([0.0, 1.5])})


class TestLogPersistence:
    def test_roundtrip(self, sim_world, tmp_path):
        ds, model = sim_world
        log = simulate_log(ds.queries, model, t_max=4, m=30, seed=5)
        path = tmp_path / "log.csv"
        save_log_csv(log, path, config={"m": 30})
        loaded = load_log_csv(path)
        assert loaded.ranking_fingerprint == log.ranking_fingerprint
        assert loaded.t_max == log.t_max
        assert np.array_equal(loaded.query_ids, log.query_ids)
        for g in log.groups:
            a, b = log.per_group[g], loaded.per_group[g]
            assert np.array_equal(a.length, b.length)
            assert np.array_equal(a.click, b.click)
            assert np.array_equal(a.item_idx, b.item_idx)
            mask = np.arange(a.propensity.shape[1])[None, :] < a.length[:, None]
            assert np.array_equal(a.propensity[mask], b.propensity[mask])

    def test_header_and_precision(self, sim_world, tmp_path):
        ds, model = sim_world
        log = simulate_log(ds.queries, model, t_max=3, m=5, seed=6)
        path = tmp_path / "log.csv"
        save_log_csv(log, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "request_id,query_id,group,rank,item_id,propensity,click"
        # 1/3 must round-trip exactly through the printed representation
        third = [ln for ln in lines if ",3," in ln]
        assert any(float(ln.split(",")[5]) == 1.0 / 3.0 for ln in third)
