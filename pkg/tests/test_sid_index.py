import numpy as np
import pytest

from conftest import clustered_corpus
from sidkit.data import Corpus, EmbeddingRecord
from sidkit.errors import DataError
from sidkit.sid_index import (
    RetrievalPlan,
    allocate_budget,
    assign_dedup_tokens,
    breadth_mode,
    build_index,
    depth_mode,
    extended_uniqueness,
    load_index,
    resolve,
    save_index,
    uniqueness,
    utilization_metrics,
)
from sidkit.tokenizer import SemanticId


def _corpus_for(items):
    records = {}
    for item_id, relevance, freshness in items:
        records[item_id] = EmbeddingRecord(
            item_id, {"x": np.zeros(2)}, relevance=relevance, freshness=freshness
        )
    return Corpus(records)


def _pairs(mapping):
    return [(item_id, SemanticId(codes)) for item_id, codes in mapping]


def test_build_index_posting_sizes():
    pairs = _pairs([("a", (0, 0)), ("b", (0, 0)), ("c", (1, 0)), ("d", (1, 2))])
    corpus = _corpus_for([(i, 0.0, 0) for i in "abcd"])
    index = build_index(pairs, corpus, shape=(4, 4))
    sizes = sorted(len(p) for p in index.postings.values())
    assert sizes == [1, 1, 2]
    assert index.total_items == 4


def test_build_index_empty():
    index = build_index([], Corpus({}), shape=(4, 4))
    assert index.total_items == 0
    assert index.postings == {}


def test_build_index_duplicate_item_rejected():
    pairs = _pairs([("a", (0,)), ("a", (1,))])
    corpus = _corpus_for([("a", 0.0, 0)])
    with pytest.raises(DataError, match="duplicate"):
        build_index(pairs, corpus, shape=(4,))


def test_build_index_conservation_random():
    rng = np.random.default_rng(0)
    n = 10_000
    pairs = [
        (f"i{j:05d}", SemanticId(tuple(rng.integers(0, 8, size=3).tolist())))
        for j in range(n)
    ]
    corpus = _corpus_for([(f"i{j:05d}", 0.0, 0) for j in range(n)])
    index = build_index(pairs, corpus, shape=(8, 8, 8))
    assert sum(len(p) for p in index.postings.values()) == n


def test_dedup_tokens_sorted_by_item_id():
    pairs = _pairs([("7", (0,)), ("2", (0,)), ("9", (0,))])
    corpus = _corpus_for([(i, 0.0, 0) for i in "729"])
    index = build_index(pairs, corpus, shape=(2,))
    extended = assign_dedup_tokens(index)
    assert extended["2"].dedup == 0
    assert extended["7"].dedup == 1
    assert extended["9"].dedup == 2


def test_dedup_single_item_gets_zero():
    pairs = _pairs([("only", (1, 1))])
    corpus = _corpus_for([("only", 0.0, 0)])
    index = build_index(pairs, corpus, shape=(2, 2))
    assert assign_dedup_tokens(index)["only"].dedup == 0


def test_extended_uniqueness_is_exactly_one():
    rng = np.random.default_rng(3)
    n = 500
    pairs = [
        (f"i{j:04d}", SemanticId(tuple(rng.integers(0, 3, size=2).tolist())))
        for j in range(n)
    ]
    corpus = _corpus_for([(f"i{j:04d}", 0.0, 0) for j in range(n)])
    index = build_index(pairs, corpus, shape=(3, 3))
    assert extended_uniqueness(index) == 1.0


def test_uniqueness_values():
    pairs = _pairs([("a", (0,)), ("b", (1,)), ("c", (2,)), ("d", (2,))])
    corpus = _corpus_for([(i, 0.0, 0) for i in "abcd"])
    index = build_index(pairs, corpus, shape=(3,))
    assert uniqueness(index) == 0.75
    all_distinct = build_index(pairs[:3], corpus, shape=(3,))
    assert uniqueness(all_distinct) == 1.0


def test_uniqueness_empty_errors():
    index = build_index([], Corpus({}), shape=(2,))
    with pytest.raises(DataError, match="undefined"):
        uniqueness(index)


def test_uniqueness_one_iff_singleton_postings():
    pairs = _pairs([("a", (0,)), ("b", (1,))])
    corpus = _corpus_for([(i, 0.0, 0) for i in "ab"])
    index = build_index(pairs, corpus, shape=(2,))
    assert uniqueness(index) == 1.0
    assert all(len(p) == 1 for p in index.postings.values())


def test_utilization_degenerate_and_uniform():
    n, k = 64, 8
    degenerate = [(f"i{j}", SemanticId((0,))) for j in range(n)]
    m = utilization_metrics(degenerate, shape=(k,))
    assert m.used_fraction[0] == 1 / k
    assert m.perplexity[0] == pytest.approx(1.0)

    uniform = [(f"i{j}", SemanticId((j % k,))) for j in range(n)]
    m = utilization_metrics(uniform, shape=(k,))
    assert m.used_fraction[0] == 1.0
    assert m.perplexity[0] == pytest.approx(k)


def test_utilization_collapsed_lower_perplexity():
    rng = np.random.default_rng(5)
    healthy = [
        (f"h{j}", SemanticId((int(rng.integers(0, 8)),))) for j in range(400)
    ]
    collapsed = [
        (f"c{j}", SemanticId((int(rng.integers(0, 2)),))) for j in range(400)
    ]
    m_h = utilization_metrics(healthy, shape=(8,))
    m_c = utilization_metrics(collapsed, shape=(8,))
    assert m_c.perplexity[0] < m_h.perplexity[0]


def test_resolve_relevance_guided_order():
    pairs = _pairs([("lo", (0,)), ("hi", (0,))])
    corpus = _corpus_for([("lo", 0.1, 5), ("hi", 0.9, 5)])
    index = build_index(pairs, corpus, shape=(1,))
    got = resolve(index, SemanticId((0,)), count=5, strategy="relevance_guided")
    assert got.found
    assert got.item_ids == ["hi", "lo"]


def test_resolve_freshness_tiebreak():
    pairs = _pairs([("a", (0,)), ("b", (0,)), ("c", (0,))])
    corpus = _corpus_for([("a", 0.9, 100), ("b", 0.9, 200), ("c", 0.1, 300)])
    index = build_index(pairs, corpus, shape=(1,))
    got = resolve(index, SemanticId((0,)), count=3, strategy="relevance_guided")
    assert got.item_ids == ["b", "a", "c"]


def test_resolve_random_deterministic_under_seed():
    pairs = _pairs([(f"i{j}", (0,)) for j in range(10)])
    corpus = _corpus_for([(f"i{j}", 0.0, 0) for j in range(10)])
    index = build_index(pairs, corpus, shape=(1,))
    a = resolve(index, SemanticId((0,)), count=4, strategy="random", seed=9)
    b = resolve(index, SemanticId((0,)), count=4, strategy="random", seed=9)
    assert a.item_ids == b.item_ids
    assert len(set(a.item_ids)) == 4


def test_resolve_unknown_sid_flagged_not_raised():
    pairs = _pairs([("a", (0,))])
    corpus = _corpus_for([("a", 0.0, 0)])
    index = build_index(pairs, corpus, shape=(2,))
    got = resolve(index, SemanticId((1,)), count=3)
    assert got.item_ids == [] and not got.found


def test_resolve_is_prefix_of_full_order():
    rng = np.random.default_rng(8)
    ids = [f"i{j}" for j in range(20)]
    pairs = _pairs([(i, (0,)) for i in ids])
    corpus = _corpus_for(
        [(i, float(rng.uniform()), int(rng.integers(0, 100))) for i in ids]
    )
    index = build_index(pairs, corpus, shape=(1,))
    full = resolve(index, SemanticId((0,)), count=20).item_ids
    for count in (1, 5, 13):
        assert resolve(index, SemanticId((0,)), count=count).item_ids == full[:count]


def test_allocate_budget_depth_and_breadth():
    sids = [SemanticId((i,)) for i in range(200)]
    plan_d = allocate_budget(sids, budget=1000, mode=depth_mode(10, 100))
    assert len(plan_d.entries) == 10
    assert all(q == 100 for _, q in plan_d.entries)
    assert plan_d.planned_total == 1000

    plan_b = allocate_budget(sids, budget=1000, mode=breadth_mode(100, 10))
    assert len(plan_b.entries) == 100
    assert all(q == 10 for _, q in plan_b.entries)
    assert plan_b.planned_total == 1000


def test_allocate_budget_truncates_with_flag():
    sids = [SemanticId((i,)) for i in range(3)]
    plan = allocate_budget(sids, budget=1000, mode=depth_mode(10, 100))
    assert len(plan.entries) == 3
    assert plan.truncated


def test_allocate_budget_respects_budget_and_dedupes():
    sids = [SemanticId((0,)), SemanticId((0,)), SemanticId((1,))]
    plan = allocate_budget(sids, budget=30, mode=depth_mode(2, 15))
    assert [s.codes for s, _ in plan.entries] == [(0,), (1,)]
    assert plan.planned_total <= 30
    with pytest.raises(DataError, match="budget"):
        allocate_budget(sids, budget=10, mode=depth_mode(2, 15))


def test_index_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    ids = [f"i{j:04d}" for j in range(50)]
    pairs = [
        (i, SemanticId(tuple(rng.integers(0, 4, size=3).tolist()))) for i in ids
    ]
    corpus = _corpus_for(
        [(i, round(float(rng.uniform()), 6), int(rng.integers(0, 10**9))) for i in ids]
    )
    index = build_index(pairs, corpus, shape=(4, 4, 4))
    path = tmp_path / "index.tsv"
    save_index(index, path)
    back = load_index(path, shape=(4, 4, 4))
    assert back.total_items == index.total_items
    assert set(back.postings) == set(index.postings)
    for sid in index.postings:
        assert [i.item_id for i in back.postings[sid].items] == [
            i.item_id for i in index.postings[sid].items
        ]
    # Dedup column round-trips the canonical assignment.
    save_index(back, tmp_path / "again.tsv")
    assert (tmp_path / "again.tsv").read_bytes() == path.read_bytes()


def test_uniqueness_non_increasing_under_colliding_growth():
    pairs = _pairs([("a", (0,)), ("b", (1,)), ("c", (2,))])
    corpus = _corpus_for([(i, 0.0, 0) for i in "abcde"])
    small = build_index(pairs, corpus, shape=(3,))
    grown = build_index(
        pairs + _pairs([("d", (0,)), ("e", (1,))]), corpus, shape=(3,)
    )
    assert uniqueness(grown) <= uniqueness(small)


def test_uniqueness_invariant_under_relabeling():
    rng = np.random.default_rng(6)
    codes = [tuple(rng.integers(0, 3, size=2).tolist()) for _ in range(40)]
    ids_a = [f"x{j:03d}" for j in range(40)]
    ids_b = [f"zz{j:03d}" for j in range(40)]
    index_a = build_index(
        _pairs(list(zip(ids_a, codes))), _corpus_for([(i, 0.0, 0) for i in ids_a]), (3, 3)
    )
    index_b = build_index(
        _pairs(list(zip(ids_b, codes))), _corpus_for([(i, 0.0, 0) for i in ids_b]), (3, 3)
    )
    assert uniqueness(index_a) == uniqueness(index_b)
