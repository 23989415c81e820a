"""nDCG@k / recall@k, query-weighted aggregation and run comparison."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from hive_retrieval.errors import ConfigError
from hive_retrieval.ingestion import QrelsTable

log = logging.getLogger(__name__)

OVERALL = "ALL"
GAINS = ("exponential", "linear")


def _gain(grade: int, kind: str) -> float:
    if kind == "exponential":
        return float(2 ** grade - 1)
    if kind == "linear":
        return float(grade)
    raise ConfigError(f"unknown gain {kind!r}; expected one of {GAINS}")


def _top_ids(ranking: Sequence, k: int) -> list[str]:
    """Doc ids of the first k entries; accepts ids or (id, score) pairs, skips repeats."""
    out: list[str] = []
    seen: set[str] = set()
    for entry in ranking:
        doc_id = entry if isinstance(entry, str) else entry[0]
        if doc_id in seen:
            continue
        seen.add(doc_id)
        out.append(doc_id)
        if len(out) == k:
            break
    return out


def ndcg_at_k(ranking: Sequence, grades: Mapping[str, int], k: int, gain: str = "exponential") -> float | None:
    """nDCG@k of an already-ordered ranking.

    Returns ``None`` when the query has no positive judgment, since it
    cannot be scored.
    """
    ideal = sorted((g for g in grades.values() if g > 0), reverse=True)
    if not ideal:
        return None
    if k <= 0:
        return 0.0
    dcg = math.fsum(
        _gain(grades.get(doc_id, 0), gain) / math.log2(i + 1)
        for i, doc_id in enumerate(_top_ids(ranking, k), start=1)
    )
    idcg = math.fsum(_gain(g, gain) / math.log2(i + 1) for i, g in enumerate(ideal[:k], start=1))
    return dcg / idcg


def recall_at_k(ranking: Sequence, grades: Mapping[str, int], k: int) -> float | None:
    relevant = {d for d, g in grades.items() if g > 0}
    if not relevant:
        return None
    if k <= 0:
        return 0.0
    return len(relevant.intersection(_top_ids(ranking, k))) / len(relevant)


@dataclass(frozen=True)
class EvalResult:
    query_id: str
    domain: str
    ndcg_at_k: float
    recall_at_k: float
    k: int


@dataclass(frozen=True)
class DomainAggregate:
    domain: str
    query_count: int
    mean_ndcg: float
    mean_recall: float


def evaluate_rankings(
    rankings: Iterable[tuple[str, str, Sequence]],
    qrels: QrelsTable,
    k: int = 10,
    gain: str = "exponential",
) -> tuple[list[EvalResult], list[str]]:
    """Score ``(query_id, domain, ranking)`` triples.

    Returns the per-query results and the ids of queries skipped because
    they have no positive judgment.
    """
    results: list[EvalResult] = []
    skipped: list[str] = []
    for qid, domain, ranking in rankings:
        grades = qrels.grades(qid)
        nd = ndcg_at_k(ranking, grades, k, gain)
        if nd is None:
            skipped.append(qid)
            continue
        results.append(EvalResult(qid, domain, nd, recall_at_k(ranking, grades, k), k))
    if skipped:
        log.warning("%d queries without positive judgments were excluded", len(skipped))
    return results, skipped


def evaluate_traces(traces, qrels: QrelsTable, k: int = 10, gain: str = "exponential"):
    return evaluate_rankings(((t.query_id, t.domain, t.final) for t in traces), qrels, k, gain)


def aggregate(results: Sequence[EvalResult]) -> tuple[list[DomainAggregate], DomainAggregate | None]:
    """Per-domain means plus the overall mean over all queries.

    The overall value weights each domain by its query count, which is the
    same thing as the plain per-query mean.
    """
    if not results:
        return [], None
    ks = {r.k for r in results}
    if len(ks) != 1:
        raise ConfigError(f"cannot aggregate results computed at different k: {sorted(ks)}")
    by_domain: dict[str, list[EvalResult]] = {}
    for r in results:
        by_domain.setdefault(r.domain, []).append(r)

    def agg(name: str, rs: Sequence[EvalResult]) -> DomainAggregate:
        return DomainAggregate(
            name,
            len(rs),
            math.fsum(r.ndcg_at_k for r in rs) / len(rs),
            math.fsum(r.recall_at_k for r in rs) / len(rs),
        )

    return [agg(d, by_domain[d]) for d in sorted(by_domain)], agg(OVERALL, results)


@dataclass(frozen=True)
class DeltaRow:
    domain: str
    query_count: int
    ndcg_a: float
    ndcg_b: float

    @property
    def delta(self) -> float:
        """Positive when run B scores higher than run A."""
        return self.ndcg_b - self.ndcg_a


def compare_runs(results_a: Sequence[EvalResult], results_b: Sequence[EvalResult]) -> list[DeltaRow]:
    ids_a = {r.query_id for r in results_a}
    ids_b = {r.query_id for r in results_b}
    if ids_a != ids_b:
        diff = sorted(ids_a ^ ids_b)
        shown = ", ".join(diff[:20]) + (" ..." if len(diff) > 20 else "")
        raise ConfigError(f"runs cover different query sets; symmetric difference ({len(diff)}): {shown}")
    doms_a, all_a = aggregate(results_a)
    doms_b, all_b = aggregate(results_b)
    if all_a is None:
        return []
    b_by_domain = {d.domain: d for d in doms_b}
    rows = [DeltaRow(d.domain, d.query_count, d.mean_ndcg, b_by_domain[d.domain].mean_ndcg) for d in doms_a]
    rows.append(DeltaRow(OVERALL, all_a.query_count, all_a.mean_ndcg, all_b.mean_ndcg))
    return rows


def points(x: float) -> str:
    """Format a [0, 1] metric as percentage points with one decimal."""
    return f"{100 * x:.1f}"


def signed_points(x: float) -> str:
    s = f"{100 * x:+.1f}"
    return "+0.0" if s == "-0.0" else s


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _markdown(rows: Sequence[Sequence[str]], header: Sequence[str]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def per_query_csv(results: Sequence[EvalResult]) -> str:
    k = results[0].k if results else 0
    return _csv(
        [(r.query_id, r.domain, repr(r.ndcg_at_k), repr(r.recall_at_k)) for r in results],
        ["query_id", "domain", f"ndcg@{k}", f"recall@{k}"],
    )


def per_domain_csv(domains: Sequence[DomainAggregate], overall: DomainAggregate | None, k: int) -> str:
    rows = [(d.domain, d.query_count, repr(d.mean_ndcg), repr(d.mean_recall)) for d in domains]
    if overall is not None:
        rows.append((overall.domain, overall.query_count, repr(overall.mean_ndcg), repr(overall.mean_recall)))
    return _csv(rows, ["domain", "queries", f"ndcg@{k}", f"recall@{k}"])


def per_domain_markdown(domains: Sequence[DomainAggregate], overall: DomainAggregate | None, k: int,
                        title: str = "") -> str:
    rows = [[d.domain, str(d.query_count), points(d.mean_ndcg), points(d.mean_recall)] for d in domains]
    if overall is not None:
        rows.append(["**Average**", str(overall.query_count),
                     f"**{points(overall.mean_ndcg)}**", points(overall.mean_recall)])
    head = f"## {title}\n\n" if title else ""
    note = "\nAverage is the query-weighted mean; values are x100 and rounded after aggregation.\n"
    return head + _markdown(rows, ["Domain", "Queries", f"nDCG@{k}", f"Recall@{k}"]) + note


def delta_csv(rows: Sequence[DeltaRow], k: int) -> str:
    return _csv(
        [(r.domain, r.query_count, repr(r.ndcg_a), repr(r.ndcg_b), repr(r.delta)) for r in rows],
        ["domain", "queries", f"ndcg@{k}_a", f"ndcg@{k}_b", "delta"],
    )


def delta_markdown(rows: Sequence[DeltaRow], k: int, label_a: str = "A", label_b: str = "B") -> str:
    body = [[r.domain, str(r.query_count), points(r.ndcg_a), points(r.ndcg_b), signed_points(r.delta)]
            for r in rows]
    return (
        _markdown(body, ["Domain", "Queries", f"{label_a} nDCG@{k}", f"{label_b} nDCG@{k}", "Delta"])
        + f"\nDelta = {label_b} - {label_a} in absolute nDCG@{k} points.\n"
    )


@dataclass(frozen=True)
class ConfigRow:
    """One line of an ablation or sweep table."""

    label: str
    config_name: str
    k1: int
    k2: int
    query_count: int
    ndcg: float
    recall: float


def config_table_csv(rows: Sequence[ConfigRow], k: int, base_ndcg: float | None = None) -> str:
    return _csv(
        [(r.label, r.config_name, r.k1, r.k2, r.query_count, repr(r.ndcg), repr(r.recall),
          "" if base_ndcg is None else repr(r.ndcg - base_ndcg)) for r in rows],
        ["label", "config", "k1", "k2", "queries", f"ndcg@{k}", f"recall@{k}", "delta_vs_base"],
    )


def config_table_markdown(rows: Sequence[ConfigRow], k: int, base_ndcg: float | None = None,
                          bold: str | None = None) -> str:
    body = []
    for r in rows:
        score = points(r.ndcg)
        if r.config_name == bold or r.label == bold:
            score = f"**{score}**"
        delta = "" if base_ndcg is None else signed_points(r.ndcg - base_ndcg)
        body.append([r.label, score, points(r.recall), delta])
    return _markdown(body, ["Configuration", f"nDCG@{k}", f"Recall@{k}", "vs. base"])
