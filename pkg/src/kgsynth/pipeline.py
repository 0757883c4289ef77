"""End-to-end orchestration with per-stage caching.

Stage outputs are stored under ``cache_dir/stages`` as JSON envelopes keyed
by a hash of the stage's own config section and its upstream artifact. A
rerun with the same inputs loads each envelope instead of recomputing; a
corrupt or mismatched envelope is discarded and the stage re-executed.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from filelock import FileLock, Timeout

from . import kg as kgmod
from .assess import assess_graph
from .config import PipelineConfig, stable_hash
from .corpus import Chunk, chunk_documents, ingest
from .llm import (JUDGE_PARAMS, Backend, Cassette, CassetteMiss, HTTPBackend, LLMClient, LLMError, ModelEndpoint,
                  RecordingBackend, ReplayBackend)
from .metrics import score_dataset
from .qagen import QARecord, generate, write_dataset
from .traverse import Subgraph, plan_subgraphs

logger = logging.getLogger(__name__)

STAGES = ("ingest", "extract", "assess", "traverse", "generate", "score")
CASSETTE_NAME = "cassette.jsonl"


class StageFailure(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class StageReport:
    status: str = "pending"
    seconds: float = 0.0
    key: str = ""
    error: Optional[str] = None


@dataclass
class RunReport:
    config_hash: str
    stages: Dict[str, StageReport] = field(default_factory=lambda: {s: StageReport() for s in STAGES})
    counts: Dict[str, int] = field(default_factory=dict)
    skips: Dict[str, int] = field(default_factory=dict)
    llm_calls: int = 0
    output_path: Optional[str] = None
    scores: Dict[str, object] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return any(s.status == "failed" for s in self.stages.values())

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["failed"] = self.failed
        return d


class StageCache:
    def __init__(self, root: Path):
        self.root = root / "stages"
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, stage: str) -> Path:
        return self.root / f"{stage}.json"

    def load(self, stage: str, key: str):
        p = self.path(stage)
        if not p.exists():
            return None
        try:
            env = json.loads(p.read_text(encoding="utf-8"))
            if env["key"] != key:
                return None
            if stable_hash(env["data"]) != env["checksum"]:
                raise ValueError("checksum mismatch")
            return env["data"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            logger.warning("cache for stage %s is unreadable (%s); re-running", stage, exc)
            return None

    def store(self, stage: str, key: str, data) -> str:
        checksum = stable_hash(data)
        env = {"stage": stage, "key": key, "checksum": checksum, "data": data}
        tmp = self.path(stage).with_suffix(".tmp")
        tmp.write_text(json.dumps(env, ensure_ascii=False, sort_keys=True), encoding="utf-8")
        tmp.replace(self.path(stage))
        return checksum


def make_clients(cfg: PipelineConfig, inner: Optional[Backend] = None) -> Tuple[LLMClient, LLMClient, Optional[Cassette]]:
    """Build synthesizer and trainee clients for the configured mode.

    ``inner`` replaces the HTTP transport (used for scripted backends).
    """
    cache = Path(cfg.cache_dir)
    cassette_path = cache / CASSETTE_NAME
    cassette = None
    if cfg.mode == "replay":
        if not cassette_path.exists():
            raise FileNotFoundError(f"replay mode needs a cassette at {cassette_path}")
        cassette = Cassette(cassette_path)
        backend: Backend = ReplayBackend(cassette)
    else:
        transport = inner if inner is not None else HTTPBackend(timeout=cfg.synthesizer.timeout)
        if cfg.mode == "record":
            cassette = Cassette(cassette_path)
            backend = RecordingBackend(transport, cassette)
        else:
            backend = transport
    s, t = cfg.synthesizer, cfg.trainee
    synth = LLMClient(ModelEndpoint(s.base_url, s.model, s.api_key_env, "synthesizer"), backend,
                      s.concurrency, s.retry_policy(), params=s.generation_params())
    trainee = LLMClient(ModelEndpoint(t.base_url, t.model, t.api_key_env, "trainee"), backend,
                        t.concurrency, t.retry_policy(), params=JUDGE_PARAMS)
    return synth, trainee, cassette


def _file_digest(paths) -> List[Tuple[str, str]]:
    out = []
    for p in paths:
        try:
            out.append((str(p), stable_hash(Path(p).read_text(encoding="utf-8"))))
        except OSError:
            out.append((str(p), "missing"))
    return out


def _stage_extract(cfg, chunks: List[Chunk], synth: LLMClient) -> Tuple[dict, dict]:
    ex = cfg.extraction
    failures = 0
    parse_failures = 0

    def work(chunk):
        st = kgmod.ExtractionStats()
        try:
            return kgmod.extract_from_chunk(chunk, synth, ex.entity_types, ex.language, st, cfg.template_dir), st
        except CassetteMiss:
            raise
        except (kgmod.ExtractionError, LLMError) as exc:
            logger.warning("extraction failed for %s: %s", chunk.chunk_id, exc)
            return None, st

    with ThreadPoolExecutor(max_workers=cfg.synthesizer.concurrency) as pool:
        results = list(pool.map(work, chunks))
    graph = kgmod.KnowledgeGraph()
    for res, st in results:
        parse_failures += st.parse_failures
        if res is None:
            failures += 1
            continue
        for e in res[0]:
            graph.add_entity(e)
        for r in res[1]:
            graph.add_relation(r)

    def summarize(item):
        return kgmod.summarize_descriptions(item, synth, ex.summary_threshold, ex.language, cfg.template_dir)

    with ThreadPoolExecutor(max_workers=cfg.synthesizer.concurrency) as pool:
        ents = list(pool.map(summarize, [graph.entities[n] for n in sorted(graph.entities)]))
        rels = list(pool.map(summarize, [graph.relations[k] for k in sorted(graph.relations)]))
    graph.entities = {e.name: e for e in ents}
    graph.relations = {r.key: r for r in rels}
    graph.check_integrity()
    info = {"chunk_failures": failures, "parse_failures": parse_failures,
            "type_conflicts": graph.type_conflicts}
    return kgmod.to_dict(graph), info


def run_pipeline(cfg: PipelineConfig, backend: Optional[Backend] = None,
                 on_stage: Optional[Callable[[str, str], None]] = None) -> RunReport:
    """Run every stage in order, reusing cached stage outputs where valid."""
    cache_root = Path(cfg.cache_dir)
    cache_root.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(cache_root / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise RuntimeError(f"cache directory {cache_root} is in use by another run") from exc
    try:
        return _run_locked(cfg, backend, on_stage)
    finally:
        lock.release()


def _run_locked(cfg: PipelineConfig, backend, on_stage) -> RunReport:
    cache = StageCache(Path(cfg.cache_dir))
    report = RunReport(cfg.config_hash())
    clients: List[Optional[Tuple[LLMClient, LLMClient, Optional[Cassette]]]] = [None]

    def llm():
        if clients[0] is None:
            clients[0] = make_clients(cfg, backend)
        return clients[0]

    upstream = stable_hash(_file_digest(cfg.input.paths))
    sections = {
        "ingest": asdict(cfg.input),
        "extract": [asdict(cfg.extraction), cfg.synthesizer.model, asdict(cfg.synthesizer.generation_params()),
                    cfg.template_dir],
        "assess": [asdict(cfg.assessment), cfg.synthesizer.model, cfg.trainee.model, cfg.template_dir],
        "traverse": asdict(cfg.traversal),
        "generate": [cfg.traversal.qa_form, cfg.extraction.language, cfg.synthesizer.model,
                     asdict(cfg.synthesizer.generation_params()), cfg.template_dir],
        "score": [cfg.output.format, cfg.output.external_scores and _file_digest([cfg.output.external_scores])],
    }

    def stage(name: str, compute: Callable[[], dict]) -> dict:
        nonlocal upstream
        key = stable_hash([name, sections[name], upstream])
        rep = report.stages[name]
        rep.key = key
        t0 = time.perf_counter()
        data = cache.load(name, key)
        if data is not None:
            rep.status = "cached"
        else:
            try:
                data = compute()
            except Exception as exc:
                rep.status = "failed"
                rep.error = f"{type(exc).__name__}: {exc}"
                rep.seconds = time.perf_counter() - t0
                raise StageFailure(name, exc) from exc
            cache.store(name, key, data)
            rep.status = "executed"
        rep.seconds = time.perf_counter() - t0
        upstream = stable_hash([key, data])
        if on_stage:
            on_stage(name, rep.status)
        return data

    try:
        chunk_data = stage("ingest", lambda: {"chunks": [c.to_dict() for c in chunk_documents(
            ingest(cfg.input.paths, cfg.input.format), cfg.input.chunk_tokens, cfg.input.chunk_overlap)]})
        chunks = [Chunk.from_dict(c) for c in chunk_data["chunks"]]
        report.counts["chunks"] = len(chunks)

        def do_extract():
            graph_dict, info = _stage_extract(cfg, chunks, llm()[0])
            return {"graph": graph_dict, "info": info}

        ex = stage("extract", do_extract)
        graph = kgmod.from_dict(ex["graph"])
        report.counts["entities"] = len(graph.entities)
        report.counts["relations"] = len(graph.relations)
        report.skips["extraction_chunks"] = ex["info"]["chunk_failures"]

        def do_assess():
            g = kgmod.from_dict(ex["graph"])
            synth, trainee, _ = llm()
            a = cfg.assessment
            st = assess_graph(g, synth, trainee, a.n, a.epsilon, a.yes_tokens, a.no_tokens,
                              workers=cfg.trainee.concurrency, template_dir=cfg.template_dir)
            return {"graph": kgmod.to_dict(g), "skipped": st.skipped}

        sc = stage("assess", do_assess)
        graph = kgmod.from_dict(sc["graph"])
        report.counts["scored_relations"] = sum(r.loss is not None for r in graph.relations.values())
        report.skips["assessment"] = sc["skipped"]

        def do_traverse():
            g = graph
            if cfg.traversal.edge_sampling != "random":
                # unscored relations cannot be ordered by loss
                g = kgmod.KnowledgeGraph(dict(graph.entities),
                                         {k: r for k, r in graph.relations.items() if r.loss is not None})
            return {"subgraphs": [s.to_dict() for s in plan_subgraphs(g, cfg.traversal)]}

        tr = stage("traverse", do_traverse)
        subgraphs = [Subgraph.from_dict(s) for s in tr["subgraphs"]]
        report.counts["subgraphs"] = len(subgraphs)

        def do_generate():
            recs, st = generate(graph, subgraphs, cfg.traversal.qa_form, llm()[0], cfg.extraction.language,
                                cfg.synthesizer.concurrency, cfg.template_dir)
            return {"records": [r.to_dict() for r in recs], "consumed": st.consumed, "skips": dict(st.skips)}

        gen = stage("generate", do_generate)
        records = [QARecord.from_dict(r) for r in gen["records"]]
        report.counts["qa_records"] = len(records)
        report.counts["subgraphs_consumed"] = gen["consumed"]
        report.skips["generation"] = sum(gen["skips"].values())
        report.skips.update({f"generation_{k}": v for k, v in sorted(gen["skips"].items())})

        def do_score():
            external = []
            if cfg.output.external_scores:
                external = load_external_scores(cfg.output.external_scores)
            return score_dataset([r.answer for r in records], external)

        report.scores = stage("score", do_score)
        if records:
            report.output_path = str(write_dataset(records, cfg.output.path, cfg.output.format))
    except StageFailure as exc:
        logger.error("%s", exc)
    finally:
        if clients[0] is not None:
            synth, trainee, cassette = clients[0]
            report.llm_calls = synth.stats.calls + trainee.stats.calls
            if cassette is not None and cfg.mode == "record":
                cassette.compact()
    write_report(report, Path(cfg.cache_dir) / "report.json")
    return report


def load_external_scores(path: str | Path) -> List[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON") from exc
    return rows


def write_report(report: RunReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
