"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the "acceptance criteria" section of the pytest
terminal summary. Oracles here are written independently of the package
code they check.
"""

import math
import random
import string
import time
from dataclasses import replace

import numpy as np
import pytest

from hive_retrieval import synthbench
from hive_retrieval.evaluation import ndcg_at_k
from hive_retrieval.experiments import ablate, dataset_from_benchmark, engine_for, evaluate_batch, sweep, \
    write_eval, write_run
from hive_retrieval.ingestion import DocumentRecord, EmbeddingStore
from hive_retrieval.llm import CachedProvider, MockOracleProvider, ResponseCache
from hive_retrieval.pipeline import ABLATIONS, PipelineConfig, run_batch, union_dedup
from hive_retrieval.prompts import parse_ranked_list
from hive_retrieval.vector_index import build_index, top_k

E2E_SPEC = synthbench.SynthSpec(seed=7, n_docs=5000, n_queries=200, gap_strength=1.0)


@pytest.fixture(scope="module")
def e2e():
    started = time.perf_counter()
    bench = synthbench.generate(E2E_SPEC)
    dataset = dataset_from_benchmark(bench)
    engine = engine_for(dataset, MockOracleProvider(dataset.oracle_state), PipelineConfig())
    rows, batches = ablate(engine, dataset.queries, dataset.qrels, ("base", "s23", "full"))
    elapsed = time.perf_counter() - started
    ndcg = {name: row.ndcg for name, row in zip(("base", "s23", "full"), rows)}
    return dataset, engine, batches, ndcg, elapsed


# --- 1. nDCG against a naive implementation ----------------------------------

def naive_ndcg(ranking, grades, k):
    positives = [g for g in grades.values() if g > 0]
    if not positives:
        return None
    seen, dcg, i = set(), 0.0, 0
    for doc in ranking:
        if doc in seen:
            continue
        seen.add(doc)
        i += 1
        if i > k:
            break
        dcg += (2 ** grades.get(doc, 0) - 1) / math.log(i + 1, 2)
    ideal = sorted(positives, reverse=True)
    idcg = sum((2 ** g - 1) / math.log(i + 2, 2) for i, g in enumerate(ideal[:k]))
    return dcg / idcg


def test_ndcg_matches_naive_oracle(acceptance):
    rng = random.Random(101)
    started = time.perf_counter()
    worst, mismatched_none = 0.0, 0
    for _ in range(1000):
        n = rng.randint(1, 20)
        ids = [f"d{j}" for j in range(n)]
        grades = {d: rng.randint(0, 2) for d in rng.sample(ids, rng.randint(0, n))}
        ranking = rng.sample(ids, rng.randint(0, n))
        k = rng.randint(1, 10)
        got, want = ndcg_at_k(ranking, grades, k), naive_ndcg(ranking, grades, k)
        if (got is None) != (want is None):
            mismatched_none += 1
        elif got is not None:
            worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - started
    ok = worst <= 1e-9 and mismatched_none == 0 and elapsed < 5
    acceptance("nDCG oracle equivalence", ok,
               f"1000 instances, max |diff| {worst:.2e}, {elapsed:.2f}s (limit 5s)")
    assert ok


# --- 2. exact top-k against a pure-Python brute force ------------------------

def brute_force_top_k(ids, vectors, query, k):
    qn = math.sqrt(math.fsum(x * x for x in query))
    scored = []
    for doc_id, vec in zip(ids, vectors):
        dot = math.fsum(a * b for a, b in zip(vec, query))
        scored.append((-(dot / (math.sqrt(math.fsum(x * x for x in vec)) * qn)), doc_id))
    scored.sort()
    return [(doc_id, -neg) for neg, doc_id in scored[:k]]


def _random_id(rng):
    return "".join(rng.choices(string.ascii_lowercase + string.digits, k=rng.randint(1, 6)))


def test_top_k_matches_brute_force(acceptance):
    rng = random.Random(202)
    np_rng = np.random.default_rng(202)
    started = time.perf_counter()
    failures = ties_seen = 0
    for trial in range(500):
        n, dim = rng.randint(1, 1000), rng.randint(1, 64)
        ids = list(dict.fromkeys(_random_id(rng) for _ in range(n)))
        n = len(ids)
        if trial % 2 == 0:
            # Small integer vectors with repeated rows give many exact ties.
            matrix = np_rng.integers(-2, 3, size=(n, min(dim, 4))).astype(float)
            matrix[np.all(matrix == 0, axis=1), 0] = 1.0
            query = np_rng.integers(-2, 3, size=matrix.shape[1]).astype(float)
            query[0] = query[0] or 1.0
        else:
            matrix = np_rng.standard_normal((n, dim))
            query = np_rng.standard_normal(dim)
        k = rng.randint(1, 50)
        index = build_index([DocumentRecord(d, "") for d in ids], EmbeddingStore(tuple(ids), matrix))
        got = [(h.doc_id, h.score) for h in top_k(index, query, k)]
        want = brute_force_top_k(ids, matrix.tolist(), query.tolist(), k)
        same = [g[0] for g in got] == [w[0] for w in want] and all(
            abs(g[1] - w[1]) <= 1e-9 for g, w in zip(got, want))
        failures += not same
        ties_seen += len({w[1] for w in want}) < len(want)
    elapsed = time.perf_counter() - started
    ok = failures == 0 and elapsed < 30
    acceptance("exact retrieval oracle equivalence", ok,
               f"500 corpora, {failures} mismatches, {ties_seen} with tied scores, {elapsed:.1f}s (limit 30s)")
    assert ok


# --- 3. scoring properties over a full run -----------------------------------

def test_scoring_properties(e2e, acceptance):
    _, engine, batches, _, _ = e2e
    cfg = engine.config
    traces = batches["full"].traces
    bad = []
    for t in traces:
        verified = t.verified_ids or []
        scores = dict(t.final)
        residual = [d for d in t.pool.union_ids if d not in set(verified)]
        checks = (
            all(scores[d] == cfg.s_max - i for i, d in enumerate(verified, start=1)),
            all(scores[d] == cfg.s_base - j for j, d in enumerate(residual, start=1)),
            not verified or not residual or min(scores[d] for d in verified) > max(scores[d] for d in residual),
            len(t.pool.union_ids) <= cfg.k1 + cfg.k2,
            len(t.final) == len(t.pool.union_ids),
        )
        if not all(checks):
            bad.append(t.query_id)
    ok = len(traces) >= 200 and not bad
    acceptance("scoring properties", ok, f"{len(traces)} queries checked, {len(bad)} violations")
    assert ok, bad[:5]


# --- 4. union fuzz -----------------------------------------------------------

def test_union_fuzz(acceptance):
    rng = random.Random(404)
    alphabet = [f"d{i}" for i in range(60)]
    started = time.perf_counter()
    bad = 0
    for _ in range(10_000):
        d1 = rng.sample(alphabet, rng.randint(0, 10))
        d2 = rng.sample(alphabet, rng.randint(0, 50))
        got = union_dedup(d1, d2)
        want = list(d1) + [d for d in d2 if d not in d1]
        bad += got != want or len(got) != len(set(got))
    elapsed = time.perf_counter() - started
    ok = bad == 0 and elapsed < 5
    acceptance("union/dedup fuzz", ok, f"10000 pairs, {bad} violations, {elapsed:.2f}s (limit 5s)")
    assert ok


# --- 5. end-to-end ordering --------------------------------------------------

def test_end_to_end_ordering(e2e, acceptance):
    *_, ndcg, elapsed = e2e
    base, s23, full = ndcg["base"], ndcg["s23"], ndcg["full"]
    ok = full >= s23 >= base and full - base >= 0.15 and full >= 0.90 and elapsed < 120
    acceptance("end-to-end ordering", ok,
               f"nDCG@10 base {base:.4f}, s23 {s23:.4f}, full {full:.4f}, "
               f"gain {full - base:+.4f}, {elapsed:.1f}s (limit 120s)")
    assert ok


# --- 6. sweep sanity ---------------------------------------------------------

def test_lightest_sweep_beats_base(e2e, acceptance):
    dataset, engine, _, ndcg, _ = e2e
    rows, _ = sweep(engine, dataset.queries, dataset.qrels, (3,), (30,), include_base=False)
    light = rows[0].ndcg
    ok = light >= ndcg["base"] + 0.10
    acceptance("sweep sanity", ok, f"k1=3, k2=30 nDCG@10 {light:.4f} vs base {ndcg['base']:.4f}")
    assert ok


# --- 7. determinism ----------------------------------------------------------

def test_determinism(e2e, tmp_path, acceptance):
    dataset, _, _, _, _ = e2e
    outputs = {}
    for name, jobs in (("a", 1), ("b", 1), ("c", 4)):
        engine = engine_for(dataset, MockOracleProvider(dataset.oracle_state), PipelineConfig())
        batch = run_batch(engine, dataset.queries, jobs=jobs)
        out = tmp_path / name
        write_run(out, batch)
        write_eval(out, *evaluate_batch(batch, dataset.qrels), k=10)
        outputs[name] = {
            "files": {p.name: p.read_bytes() for p in out.iterdir() if p.name != "timings.json"},
            "rankings": [(t.query_id, t.final) for t in batch.traces],
        }
    files_same = outputs["a"]["files"] == outputs["b"]["files"]
    jobs_same = outputs["a"]["rankings"] == outputs["c"]["rankings"]
    ok = files_same and jobs_same and len(outputs["a"]["files"]) == 6
    acceptance("determinism", ok,
               f"{len(outputs['a']['files'])} artifacts byte-identical: {files_same}; "
               f"jobs 1 vs 4 rankings identical: {jobs_same}")
    assert ok


# --- 8. cache contract -------------------------------------------------------

class CountingProvider:
    def __init__(self, inner):
        self.inner = inner
        self.provider_id = inner.provider_id
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        return self.inner.complete(request)


def test_cache_contract(small_dataset, tmp_path, acceptance):
    counter = CountingProvider(MockOracleProvider(small_dataset.oracle_state))
    engine = engine_for(small_dataset, CachedProvider(counter, ResponseCache(tmp_path)), PipelineConfig())
    first = run_batch(engine, small_dataset.queries)
    first_calls = counter.calls
    second = run_batch(engine, small_dataset.queries)
    second_calls = counter.calls - first_calls
    same = [t.final for t in first.traces] == [t.final for t in second.traces]
    ok = first_calls > 0 and second_calls == 0 and same
    acceptance("cache contract", ok, f"first pass {first_calls} calls, second pass {second_calls} calls")
    assert ok


# --- 9. parser fuzz ----------------------------------------------------------

_FRAGMENTS = ['[', ']', '"', ',', '"d1"', '"d2"', '"zz"', ' ', '\n', '{', '}', ':', 'null', '\\', '["d3",',
              '"d1"]', '[]', '1', '```json', '```', 'ranking', 'é', '\x00']


def test_parser_fuzz(acceptance):
    rng = random.Random(909)
    valid = [f"d{i}" for i in range(6)]
    crashes = invalid = parsed = 0
    for i in range(10_000):
        if i % 2:
            text = "".join(rng.choice(_FRAGMENTS) for _ in range(rng.randint(0, 30)))
        else:
            text = "".join(chr(rng.randint(0, 0x2FF)) for _ in range(rng.randint(0, 80)))
        k_f = rng.randint(0, 6)
        try:
            out = parse_ranked_list(text, valid, k_f)
        except Exception:
            crashes += 1
            continue
        if out is None:
            continue
        parsed += 1
        if not (isinstance(out, list) and len(out) <= k_f and len(set(out)) == len(out)
                and set(out) <= set(valid)):
            invalid += 1
    ok = crashes == 0 and invalid == 0
    acceptance("parser robustness", ok,
               f"10000 strings, {crashes} aborts, {invalid} invalid outputs, {parsed} parsed lists")
    assert ok


# --- 10. performance envelope ------------------------------------------------

def test_performance_envelope(acceptance):
    spec = synthbench.SynthSpec(seed=10, n_docs=10_000, n_queries=100, dim=256)
    dataset = dataset_from_benchmark(synthbench.generate(spec))
    started = time.perf_counter()
    engine = engine_for(dataset, MockOracleProvider(dataset.oracle_state),
                        replace(PipelineConfig(), stages=ABLATIONS["full"]), llm_inflight=1)
    batch = run_batch(engine, dataset.queries, jobs=1)
    elapsed = time.perf_counter() - started
    ok = len(batch.traces) == 100 and not batch.failures and elapsed < 60
    acceptance("performance envelope", ok,
               f"100 queries x 10000 docs x dim 256, single-threaded, {elapsed:.1f}s (limit 60s)")
    assert ok
