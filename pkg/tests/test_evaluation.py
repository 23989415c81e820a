import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hive_retrieval import evaluation
from hive_retrieval.errors import ConfigError
from hive_retrieval.evaluation import (
    ConfigRow,
    EvalResult,
    aggregate,
    compare_runs,
    evaluate_rankings,
    ndcg_at_k,
    recall_at_k,
)
from hive_retrieval.ingestion import QrelsTable


def test_ndcg_examples():
    assert ndcg_at_k(["d1", "d2"], {"d1": 1}, 10) == 1.0
    assert ndcg_at_k(["d2", "d1"], {"d1": 1}, 10) == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert ndcg_at_k(["d2", "d3"], {"d1": 1}, 10) == 0.0
    assert ndcg_at_k([], {"d1": 1}, 10) == 0.0
    assert ndcg_at_k(["d1"], {"d1": 0}, 10) is None
    assert ndcg_at_k([("d1", 999), ("d2", 998)], {"d2": 1}, 10) == pytest.approx(1 / math.log2(3))


def test_gain_switch():
    grades = {"a": 2, "b": 1}
    exp = ndcg_at_k(["b", "a"], grades, 2)
    lin = ndcg_at_k(["b", "a"], grades, 2, gain="linear")
    assert exp == pytest.approx((1 + 3 / math.log2(3)) / (3 + 1 / math.log2(3)))
    assert lin == pytest.approx((1 + 2 / math.log2(3)) / (2 + 1 / math.log2(3)))
    with pytest.raises(ConfigError):
        ndcg_at_k(["a"], grades, 2, gain="cubic")


def test_duplicates_count_once():
    assert ndcg_at_k(["d1", "d1", "d2"], {"d2": 1}, 2) == pytest.approx(1 / math.log2(3))


def test_recall_examples():
    grades = {"a": 1, "b": 1}
    assert recall_at_k(["a", "b"], grades, 10) == 1.0
    assert recall_at_k(["a", "x"], grades, 10) == 0.5
    assert recall_at_k(["a", "b"], grades, 0) == 0.0
    assert ndcg_at_k(["a", "b"], grades, 0) == 0.0


ranking_st = st.permutations([f"d{i}" for i in range(12)])
grades_st = st.dictionaries(st.sampled_from([f"d{i}" for i in range(12)]), st.integers(0, 2))


@given(ranking_st, grades_st, st.integers(1, 10), st.randoms())
def test_permuting_below_k_is_invisible(ranking, grades, k, rnd):
    tail = list(ranking[k:])
    rnd.shuffle(tail)
    assert ndcg_at_k(list(ranking[:k]) + tail, grades, k) == ndcg_at_k(ranking, grades, k)


@given(ranking_st, grades_st, st.integers(1, 10), st.integers(0, 10))
def test_swapping_relevant_upward_never_hurts(ranking, grades, k, i):
    ranking = list(ranking)
    before = ndcg_at_k(ranking, grades, k)
    if before is None:
        return
    j = i + 1
    if grades.get(ranking[j], 0) > grades.get(ranking[i], 0):
        ranking[i], ranking[j] = ranking[j], ranking[i]
        assert ndcg_at_k(ranking, grades, k) >= before - 1e-12
    assert 0.0 <= before <= 1.0 + 1e-12


def _r(qid, domain, nd):
    return EvalResult(qid, domain, nd, nd, 10)


def test_aggregate_examples():
    _, overall = aggregate([_r("a", "x", 0.2), _r("b", "y", 0.4)])
    assert overall.mean_ndcg == pytest.approx(0.3)
    domains, overall = aggregate([_r("a", "A", 0.5), _r("b", "A", 0.5), _r("c", "A", 0.5), _r("d", "B", 0.1)])
    assert overall.mean_ndcg == pytest.approx(0.4) and overall.query_count == 4
    assert [(d.domain, d.query_count) for d in domains] == [("A", 3), ("B", 1)]
    assert aggregate([]) == ([], None)
    with pytest.raises(ConfigError):
        aggregate([_r("a", "x", 1.0), EvalResult("b", "x", 1.0, 1.0, 5)])


@given(st.lists(st.tuples(st.sampled_from("ABC"), st.floats(0, 1)), min_size=1, max_size=30))
def test_aggregate_is_plain_mean(rows):
    results = [_r(f"q{i}", d, v) for i, (d, v) in enumerate(rows)]
    domains, overall = aggregate(results)
    assert overall.mean_ndcg == pytest.approx(sum(v for _, v in rows) / len(rows), abs=1e-12)
    weighted = sum(d.mean_ndcg * d.query_count for d in domains) / sum(d.query_count for d in domains)
    assert overall.mean_ndcg == pytest.approx(weighted, abs=1e-12)


def test_non_evaluable_queries_are_skipped(caplog):
    qrels = QrelsTable({("q1", "d1"): 1, ("q2", "d1"): 0})
    results, skipped = evaluate_rankings([("q1", "A", ["d1"]), ("q2", "A", ["d1"]), ("q3", "A", [])], qrels)
    assert [r.query_id for r in results] == ["q1"]
    assert skipped == ["q2", "q3"]
    assert "excluded" in caplog.text


def test_compare_runs():
    a = [_r("q1", "A", 0.5), _r("q2", "B", 0.3)]
    same = compare_runs(a, a)
    assert [r.delta for r in same] == [0.0, 0.0, 0.0]
    assert same[-1].domain == "ALL"
    better = compare_runs(a, [_r("q1", "A", 0.7), _r("q2", "B", 0.3)])
    assert better[0].delta == pytest.approx(0.2) and better[-1].delta == pytest.approx(0.1)
    with pytest.raises(ConfigError, match="q2, q3"):
        compare_runs(a, [_r("q1", "A", 0.5), _r("q3", "B", 0.3)])


def test_report_formatting():
    assert evaluation.points(0.4166) == "41.7"
    assert evaluation.signed_points(0.085) == "+8.5"
    assert evaluation.signed_points(-0.0001) == "+0.0"
    assert evaluation.points(0.417) == "41.7" and evaluation.signed_points(0.417 - 0.332) == "+8.5"
    domains, overall = aggregate([_r("a", "A", 0.25), _r("b", "B", 0.5)])
    md = evaluation.per_domain_markdown(domains, overall, 10, "Run")
    assert "| A | 1 | 25.0 | 25.0 |" in md and "**37.5**" in md
    csv = evaluation.per_domain_csv(domains, overall, 5)
    assert csv.splitlines()[0] == "domain,queries,ndcg@5,recall@5"
    assert csv.splitlines()[-1].startswith("ALL,2,0.375")
    rows = [ConfigRow("Base", "base", 5, 50, 2, 0.1, 0.2), ConfigRow("Full", "full", 5, 50, 2, 0.4, 0.5)]
    table = evaluation.config_table_markdown(rows, 10, 0.1, bold="full")
    assert "| Full | **40.0** | 50.0 | +30.0 |" in table
    assert evaluation.per_query_csv([]).startswith("query_id,domain")
