"""Command-line entry point.

Exit codes: 0 success, 1 stage failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import kg as kgmod
from .assess import assess_graph, loss_histogram
from .config import ConfigError, PipelineConfig, load_config
from .corpus import Chunk, chunk_documents, ingest, IngestError
from .metrics import DEFAULT_BOUNDS, MetricBounds, score_dataset
from .pipeline import load_external_scores, make_clients, run_pipeline
from .qagen import generate, read_dataset, write_dataset
from .traverse import Subgraph, plan_subgraphs

logger = logging.getLogger("kgsynth")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    changes = {}
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "cache_dir", None):
        changes["cache_dir"] = args.cache_dir
    return replace(cfg, **changes) if changes else cfg


def _read_jsonl(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def _write_jsonl(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")


def cmd_ingest(args) -> int:
    cfg = _config(args)
    paths = args.input or list(cfg.input.paths)
    fmt = args.input_format or cfg.input.format
    tokens = args.chunk_tokens or cfg.input.chunk_tokens
    overlap = cfg.input.chunk_overlap if args.chunk_overlap is None else args.chunk_overlap
    chunks = chunk_documents(ingest(paths, fmt), tokens, overlap)
    _write_jsonl([c.to_dict() for c in chunks], args.out)
    print(f"{len(chunks)} chunks -> {args.out}")
    return EXIT_OK


def cmd_kg_build(args) -> int:
    cfg = _config(args)
    from .pipeline import _stage_extract
    chunks = [Chunk.from_dict(d) for d in _read_jsonl(args.chunks)]
    synth, _, _ = make_clients(cfg)
    graph_dict, info = _stage_extract(cfg, chunks, synth)
    kgmod.save(kgmod.from_dict(graph_dict), args.out)
    print(json.dumps(info))
    return EXIT_OK


def cmd_kg_stats(args) -> int:
    print(json.dumps(kgmod.load(args.graph).stats(), indent=2))
    return EXIT_OK


def cmd_kg_export(args) -> int:
    text = json.dumps(kgmod.to_dict(kgmod.load(args.graph)), ensure_ascii=False, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_assess_run(args) -> int:
    cfg = _config(args)
    graph = kgmod.load(args.graph)
    synth, trainee, _ = make_clients(cfg)
    a = cfg.assessment
    n = args.n or a.n
    eps = args.epsilon or a.epsilon
    st = assess_graph(graph, synth, trainee, n, eps, a.yes_tokens, a.no_tokens,
                      workers=cfg.trainee.concurrency, template_dir=cfg.template_dir, rescore=args.rescore)
    kgmod.save(graph, args.out or args.graph)
    print(f"scored {st.scored} relations, skipped {st.skipped}")
    return EXIT_OK


def cmd_assess_hist(args) -> int:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lower", "bin_upper", "count"])
    for lo, hi, c in loss_histogram(kgmod.load(args.graph), args.bins):
        w.writerow([f"{lo:.6f}", f"{hi:.6f}", c])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_traverse_plan(args) -> int:
    cfg = _config(args)
    subgraphs = plan_subgraphs(kgmod.load(args.graph), cfg.traversal)
    _write_jsonl([s.to_dict() for s in subgraphs], args.out)
    print(f"{len(subgraphs)} subgraphs -> {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _config(args)
    graph = kgmod.load(args.graph)
    subgraphs = [Subgraph.from_dict(d) for d in _read_jsonl(args.subgraphs)]
    synth, _, _ = make_clients(cfg)
    form = args.form or cfg.traversal.qa_form
    records, st = generate(graph, subgraphs, form, synth, cfg.extraction.language,
                           cfg.synthesizer.concurrency, cfg.template_dir)
    if not records:
        print("no records generated", file=sys.stderr)
        return EXIT_STAGE
    write_dataset(records, args.out, args.format or cfg.output.format)
    print(f"{st.emitted} records, {st.skipped} skipped -> {args.out}")
    return EXIT_OK


def _load_bounds(path: Optional[str]):
    bounds = dict(DEFAULT_BOUNDS)
    if path:
        for name, val in json.loads(Path(path).read_text(encoding="utf-8")).items():
            if name not in bounds:
                raise ConfigError([f"bounds: unknown metric {name!r}"])
            lo, hi = (val["x_min"], val["x_max"]) if isinstance(val, dict) else val
            bounds[name] = MetricBounds(float(lo), float(hi))
    return bounds


REPORT_COLUMNS = [("Method", "method"), ("#Samples", "samples"), ("Avg #Tokens", "avg_tokens"),
                  ("MTLD", "mtld"), ("Nat", "nat"), ("Coh", "coh"), ("Und", "und"),
                  ("Ind", "ind"), ("Deb", "deb"), ("Avg Score", "s_avg")]


def format_report(row: dict) -> str:
    def cell(v):
        if v is None:
            return "-"
        return f"{v:.1f}" if isinstance(v, float) else str(v)

    cells = [cell(row.get(k)) for _, k in REPORT_COLUMNS]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([[h for h, _ in REPORT_COLUMNS], cells])
    widths = [max(len(h), len(c)) for (h, _), c in zip(REPORT_COLUMNS, cells)]
    head = "  ".join(h.rjust(w) for (h, _), w in zip(REPORT_COLUMNS, widths))
    body = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return buf.getvalue() + "\n" + head + "\n" + body + "\n"


def cmd_score(args) -> int:
    answers = [a for _, a in read_dataset(args.dataset)]
    external = load_external_scores(args.external_scores) if args.external_scores else []
    row = score_dataset(answers, external, _load_bounds(args.bounds))
    row["method"] = args.name
    sys.stdout.write(format_report(row))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    report = run_pipeline(cfg, on_stage=lambda name, status: print(f"[{status:>8}] {name}"))
    for name, st in report.stages.items():
        if st.error:
            print(f"{name}: {st.error}", file=sys.stderr)
    print(json.dumps({"counts": report.counts, "skips": report.skips, "llm_calls": report.llm_calls,
                      "output": report.output_path}, indent=2))
    return report.exit_code


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline YAML config")
    common.add_argument("--mode", choices=["live", "record", "replay"])
    common.add_argument("--cache-dir")

    p = argparse.ArgumentParser(prog="kgsynth", description="Knowledge-graph guided QA data synthesis")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="read and chunk documents")
    s.add_argument("--input", nargs="+")
    s.add_argument("--input-format", choices=["plain_text", "jsonl_content_field"])
    s.add_argument("--chunk-tokens", type=int)
    s.add_argument("--chunk-overlap", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    kgp = sub.add_parser("kg", help="knowledge graph commands").add_subparsers(dest="kg_command", required=True)
    s = kgp.add_parser("build", parents=[common])
    s.add_argument("--chunks", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_kg_build)
    s = kgp.add_parser("stats")
    s.add_argument("--graph", required=True)
    s.set_defaults(func=cmd_kg_stats)
    s = kgp.add_parser("export")
    s.add_argument("--graph", required=True)
    s.add_argument("--format", choices=["json"], default="json")
    s.add_argument("--out")
    s.set_defaults(func=cmd_kg_export)

    ap = sub.add_parser("assess", help="comprehension assessment").add_subparsers(dest="assess_command", required=True)
    s = ap.add_parser("run", parents=[common])
    s.add_argument("--graph", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--epsilon", type=float)
    s.add_argument("--rescore", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_assess_run)
    s = ap.add_parser("hist")
    s.add_argument("--graph", required=True)
    s.add_argument("--bins", type=int, default=20)
    s.set_defaults(func=cmd_assess_hist)

    tp = sub.add_parser("traverse", help="subgraph planning").add_subparsers(dest="traverse_command", required=True)
    s = tp.add_parser("plan", parents=[common])
    s.add_argument("--graph", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_traverse_plan)

    s = sub.add_parser("generate", parents=[common], help="generate QA pairs from planned subgraphs")
    s.add_argument("--graph", required=True)
    s.add_argument("--subgraphs", required=True)
    s.add_argument("--form", choices=["atomic", "aggregated", "multi_hop"])
    s.add_argument("--format", choices=["alpaca", "sharegpt"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("score", help="intrinsic quality report")
    s.add_argument("--dataset", required=True)
    s.add_argument("--external-scores")
    s.add_argument("--bounds")
    s.add_argument("--name", default="dataset")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("run", parents=[common], help="run the full pipeline")
    s.set_defaults(func=cmd_run)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, kgmod.GraphLoadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
