"""Command-line entry point: ``hive {index,run,eval,ablate,sweep,synth}``.

Settings come from an optional ``--config`` file (TOML or JSON); any flag
given on the command line wins over the file. Errors exit with the code of
their family: 2 config, 3 ingestion, 4 provider, 5 internal invariant.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from hive_retrieval import __version__, config, evaluation, experiments, plotting, synthbench
from hive_retrieval.errors import ConfigError, HiveError, IngestionError
from hive_retrieval.ingestion import load_qrels, validate
from hive_retrieval.pipeline import ALL_STAGES, loads_traces, run_batch
from hive_retrieval.vector_index import build_index

log = logging.getLogger("hive")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def _unit_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _add_data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--config", help="run config file (TOML or JSON); flags override it")
    g.add_argument("--benchmark", help="benchmark directory, its benchmark.json, or a synthetic spec file")
    g.add_argument("--corpus")
    g.add_argument("--queries")
    g.add_argument("--qrels")
    g.add_argument("--doc-embeddings")
    g.add_argument("--query-embeddings")
    g.add_argument("--oracle-state")
    g.add_argument("--text-only", action="store_true", default=None,
                   help="allow queries without an image caption")


def _add_run_args(p: argparse.ArgumentParser, stages: bool = True) -> None:
    _add_data_args(p)
    g = p.add_argument_group("provider")
    g.add_argument("--provider", choices=("mock", "openai"))
    g.add_argument("--model")
    g.add_argument("--base-url")
    g.add_argument("--api-key-env", help="environment variable holding the API key")
    g.add_argument("--timeout", type=float)
    g.add_argument("--max-retries", type=int)
    g.add_argument("--noise", type=_unit_float, help="mock oracle: adjacent-swap probability")
    g.add_argument("--cache-dir", help="response cache directory")
    g = p.add_argument_group("pipeline")
    g.add_argument("--k1", type=_positive_int)
    g.add_argument("--k2", type=_positive_int)
    g.add_argument("--kf", type=_positive_int, dest="k_f")
    if stages:
        g.add_argument("--stages", help="ablation name (base, s2_only, s4_only, s23, full) or stage list")
    g.add_argument("--temperature", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--no-caption-in-secondary", dest="caption_in_secondary", action="store_false", default=None,
                   help="embed the compensatory query without the image caption")
    g = p.add_argument_group("execution")
    g.add_argument("--jobs", type=_positive_int, help="queries processed in parallel")
    g.add_argument("--llm-inflight", type=_positive_int, help="max concurrent LLM requests")
    g.add_argument("--output", dest="output_dir", help="parent directory for timestamped run directories")
    g.add_argument("--out", help="exact output directory (overrides --output)")
    g.add_argument("--index", help="index snapshot written by `hive index` (default: build in memory)")
    g.add_argument("--k", type=_positive_int, dest="eval_k", help="cutoff for reported metrics")
    g.add_argument("--gain", choices=evaluation.GAINS)
    g.add_argument("--hypothesis-template")
    g.add_argument("--verify-template")


def resolve_config(args: argparse.Namespace) -> config.RunConfig:
    cfg = config.load(args.config) if getattr(args, "config", None) else config.RunConfig()
    a = vars(args)
    cfg = config.override(cfg, "data", **{k: a.get(k) for k in (
        "benchmark", "corpus", "queries", "qrels", "doc_embeddings", "query_embeddings",
        "oracle_state", "text_only")})
    cfg = config.override(cfg, "provider", kind=a.get("provider"), **{k: a.get(k) for k in (
        "model", "base_url", "api_key_env", "timeout", "max_retries", "noise", "cache_dir")})
    cfg = config.override(cfg, "pipeline", **{k: a.get(k) for k in (
        "k1", "k2", "k_f", "stages", "temperature", "seed", "caption_in_secondary")},
        **({"model": a["model"]} if a.get("model") else {}))
    cfg = config.override(cfg, "run", **{k: a.get(k) for k in (
        "jobs", "llm_inflight", "output_dir", "eval_k", "gain", "hypothesis_template", "verify_template")})
    return cfg


def _out_dir(args, cfg: config.RunConfig, tag: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    stamp = time.strftime("%Y%m%dT%H%M%S")
    return Path(cfg.run.output_dir) / f"{stamp}-{tag}-{cfg.pipeline.digest()}"


def _engine(args, cfg: config.RunConfig, dataset: experiments.Dataset):
    index = experiments.load_index_snapshot(args.index) if getattr(args, "index", None) else None
    return experiments.build_engine(cfg, dataset, index)


def _print_rows(rows, k: int) -> None:
    for r in rows:
        print(f"{r.label:<60} nDCG@{k} {evaluation.points(r.ndcg):>5}  recall@{k} {evaluation.points(r.recall):>5}")


def cmd_index(args) -> int:
    cfg = resolve_config(args)
    dataset = experiments.load_dataset(cfg, check_captions=False)
    report = validate(dataset.docs, dataset.qrels, dataset.queries, dataset.doc_store, cfg.data.text_only)
    if not report.ok:
        for v in report.violations:
            print(f"violation: {v}", file=sys.stderr)
        raise IngestionError(f"{len(report.violations)} validation violation(s); no index written")
    index = build_index(dataset.docs, dataset.doc_store)
    out = Path(args.out) if args.out else Path(cfg.run.output_dir) / "index"
    digest = experiments.write_index_snapshot(index, out, experiments.data_digests(dataset))
    print(f"indexed {len(index)} docs, dim {index.dim}")
    print(f"snapshot {out / experiments.INDEX_VECTORS} sha256 {digest}")
    return 0


def _freeze_config(out: Path, cfg: config.RunConfig) -> None:
    (out / "config.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    dataset = experiments.load_dataset(cfg)
    engine = _engine(args, cfg, dataset)
    batch = run_batch(engine, dataset.queries, cfg.pipeline, cfg.run.jobs)
    batch.manifest["data"] = experiments.data_digests(dataset)
    out = _out_dir(args, cfg, cfg.pipeline.name.replace(":", "_"))
    experiments.write_run(out, batch, cfg.to_dict())
    print(f"{batch.manifest['completed']}/{len(dataset.queries)} queries, "
          f"{batch.manifest['llm_fallbacks']} LLM fallbacks, {len(batch.failures)} failures")
    if dataset.qrels is not None:
        results, domains, overall = experiments.evaluate_batch(batch, dataset.qrels, cfg.run.eval_k, cfg.run.gain)
        experiments.write_eval(out, results, domains, overall, cfg.run.eval_k, f"Run {cfg.pipeline.name}")
        if overall is not None:
            print(f"nDCG@{cfg.run.eval_k} {evaluation.points(overall.mean_ndcg)} over {overall.query_count} queries")
    print(f"wrote {out}")
    return 0 if not batch.failures else 1


def _eval_inputs(run_dir: Path, qrels_path: str | None):
    traces_path = run_dir / "traces.jsonl" if run_dir.is_dir() else run_dir
    try:
        traces = loads_traces(traces_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read traces {traces_path}: {exc}") from None
    if qrels_path:
        return traces, load_qrels(qrels_path)
    frozen = traces_path.parent / "config.json"
    if not frozen.exists():
        raise ConfigError(f"no --qrels given and {frozen} does not exist")
    cfg = config.from_mapping(json.loads(frozen.read_text(encoding="utf-8")))
    dataset = experiments.load_dataset(cfg, check_captions=False)
    if dataset.qrels is None:
        raise ConfigError(f"the run recorded in {frozen} has no qrels; pass --qrels")
    return traces, dataset.qrels


def cmd_eval(args) -> int:
    run_a = Path(args.run)
    traces_a, qrels = _eval_inputs(run_a, args.qrels)
    results_a, _ = evaluation.evaluate_traces(traces_a, qrels, args.k, args.gain)
    out = Path(args.out) if args.out else (run_a if run_a.is_dir() else run_a.parent)
    if args.compare:
        traces_b, _ = _eval_inputs(Path(args.compare), args.qrels)
        results_b, _ = evaluation.evaluate_traces(traces_b, qrels, args.k, args.gain)
        rows = evaluation.compare_runs(results_a, results_b)
        out.mkdir(parents=True, exist_ok=True)
        (out / "delta.csv").write_text(evaluation.delta_csv(rows, args.k), encoding="utf-8")
        md = evaluation.delta_markdown(rows, args.k, args.label_a, args.label_b)
        (out / "delta.md").write_text(md, encoding="utf-8")
        plotting.delta_bars(rows, args.k, out / "delta.png", f"{args.label_b} vs. {args.label_a}")
        print(md, end="")
        return 0
    domains, overall = evaluation.aggregate(results_a)
    experiments.write_eval(out, results_a, domains, overall, args.k)
    print(evaluation.per_domain_markdown(domains, overall, args.k), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    names = [c.strip() for c in args.configs.split(",") if c.strip()]
    dataset = experiments.load_dataset(cfg)
    if dataset.qrels is None:
        raise ConfigError("ablation needs qrels")
    # Only build an LLM provider when some requested configuration calls one.
    stages = ALL_STAGES if any(n != "base" for n in names) else frozenset()
    engine = _engine(args, replace(cfg, pipeline=replace(cfg.pipeline, stages=stages)), dataset)
    rows, batches = experiments.ablate(engine, dataset.queries, dataset.qrels, names,
                                       cfg.run.jobs, cfg.run.eval_k, cfg.run.gain)
    out = _out_dir(args, cfg, "ablate")
    for name, batch in batches.items():
        batch.manifest["data"] = experiments.data_digests(dataset)
        experiments.write_run(out / name, batch)
    _freeze_config(out, cfg)
    experiments.write_ablation(out, rows, cfg.run.eval_k)
    _print_rows(rows, cfg.run.eval_k)
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    cfg = replace(cfg, pipeline=replace(cfg.pipeline, stages=ALL_STAGES))
    dataset = experiments.load_dataset(cfg)
    if dataset.qrels is None:
        raise ConfigError("a sweep needs qrels")
    engine = _engine(args, cfg, dataset)
    rows, base_row = experiments.sweep(engine, dataset.queries, dataset.qrels, args.k1_values, args.k2_values,
                                       cfg.run.jobs, cfg.run.eval_k, cfg.run.gain, not args.no_base)
    out = _out_dir(args, cfg, "sweep")
    _freeze_config(out, cfg)
    experiments.write_sweep(out, rows, base_row, cfg.run.eval_k)
    _print_rows(([base_row] if base_row else []) + rows, cfg.run.eval_k)
    print(f"wrote {out}")
    return 0


def cmd_synth(args) -> int:
    spec = config.load_synth_spec(args.spec) if args.spec else synthbench.SynthSpec()
    flags = {
        "seed": args.seed, "n_docs": args.docs, "n_queries": args.queries, "dim": args.dim,
        "vocab_size": args.vocab, "gap_strength": args.gap_strength,
        "distractors_per_query": args.distractors,
        "domains": tuple(d.strip() for d in args.domains.split(",") if d.strip()) if args.domains else None,
    }
    spec = replace(spec, **{k: v for k, v in flags.items() if v is not None})
    bench = synthbench.generate(spec)
    manifest = synthbench.write_benchmark(bench, args.out)
    print(json.dumps({"summary": synthbench.describe(bench), "digests": manifest["digests"]},
                     indent=1, sort_keys=True))
    print(f"wrote {Path(args.out) / synthbench.MANIFEST}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hive", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="validate inputs and write an index snapshot")
    _add_data_args(p)
    p.add_argument("--out", help="snapshot directory (default: <output_dir>/index)")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("run", help="run the pipeline over all queries")
    _add_run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a run directory, or compare two")
    p.add_argument("run", help="run directory or traces.jsonl")
    p.add_argument("--qrels", help="qrels TSV (default: from the run's frozen config)")
    p.add_argument("--compare", metavar="RUN_B", help="second run; report B - A per domain")
    p.add_argument("--label-a", default="A")
    p.add_argument("--label-b", default="B")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--gain", choices=evaluation.GAINS, default="exponential")
    p.add_argument("--out", help="report directory (default: the run directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component ablation table")
    _add_run_args(p, stages=False)
    p.add_argument("--configs", default=",".join(experiments.ABLATION_ORDER),
                   help="comma-separated subset of base,s2_only,s4_only,s23,full")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="full pipeline over a (k1, k2) grid")
    _add_run_args(p, stages=False)
    p.add_argument("--k1-values", type=_int_list, default=list(experiments.DEFAULT_SWEEP_K1))
    p.add_argument("--k2-values", type=_int_list, default=list(experiments.DEFAULT_SWEEP_K2))
    p.add_argument("--no-base", action="store_true", help="skip the base-retriever reference row")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--spec", help="SynthSpec file (TOML or JSON); flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--docs", type=_positive_int)
    p.add_argument("--queries", type=_positive_int)
    p.add_argument("--dim", type=_positive_int)
    p.add_argument("--vocab", type=_positive_int)
    p.add_argument("--gap-strength", type=_unit_float)
    p.add_argument("--distractors", type=int)
    p.add_argument("--domains", help="comma-separated domain labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except HiveError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
