"""Turn planned subgraphs into atomic, aggregated and multi-hop QA pairs."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

from .kg import KnowledgeGraph, RelKey
from .llm import CassetteMiss, LLMClient, LLMError
from .templates import TemplateError, load_template
from .traverse import Subgraph

logger = logging.getLogger(__name__)

DATASET_FORMATS = ("alpaca", "sharegpt")

_QA_LINES = re.compile(r"^\s*question\s*[:：]\s*(?P<q>.*?)\s*^\s*answer\s*[:：]\s*(?P<a>.*?)\s*\Z",
                       re.IGNORECASE | re.MULTILINE | re.DOTALL)
_QA_INLINE = re.compile(r"question\s*[:：]\s*(?P<q>.*?)\s+answer\s*[:：]\s*(?P<a>.*?)\s*\Z",
                        re.IGNORECASE | re.DOTALL)

REPROMPT = "Your reply did not follow the format. Reply again using exactly:\nQuestion: <question>\nAnswer: <answer>"


class GenerationError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class QARecord:
    question: str
    answer: str
    form: str
    seed: Optional[RelKey]
    edges: Tuple[RelKey, ...]
    nodes: Tuple[str, ...] = ()
    max_loss: Optional[float] = None
    mean_loss: Optional[float] = None

    @property
    def sort_key(self):
        return (self.form, self.seed if self.seed is not None else ("", self.nodes[0] if self.nodes else ""))

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "answer": self.answer,
            "form": self.form,
            "subgraph_ref": {"seed": list(self.seed) if self.seed else None,
                             "edges": [list(e) for e in self.edges],
                             "nodes": list(self.nodes)},
            "max_loss": self.max_loss,
            "mean_loss": self.mean_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QARecord":
        ref = d["subgraph_ref"]
        return cls(d["question"], d["answer"], d["form"],
                   tuple(ref["seed"]) if ref.get("seed") else None,
                   tuple(tuple(e) for e in ref["edges"]), tuple(ref.get("nodes", [])),
                   d.get("max_loss"), d.get("mean_loss"))


def parse_qa(text: str) -> Optional[Tuple[str, str]]:
    text = text.strip()
    m = _QA_LINES.search(text) or _QA_INLINE.search(text)
    if not m:
        return None
    q, a = m.group("q").strip(), m.group("a").strip()
    return (q, a) if q and a else None


def loss_stats(graph: KnowledgeGraph, edges: Sequence[RelKey]) -> Tuple[Optional[float], Optional[float]]:
    losses = [graph.relations[e].loss for e in edges if graph.relations[e].loss is not None]
    if not losses:
        return None, None
    return max(losses), sum(losses) / len(losses)


def render_entities(graph: KnowledgeGraph, nodes: Iterable[str]) -> str:
    lines = []
    for i, n in enumerate(sorted(nodes), 1):
        ent = graph.entities[n]
        desc = " ".join(ent.descriptions) or "(no description)"
        lines.append(f"{i}. {n} [{ent.entity_type}]: {desc}")
    return "\n".join(lines) if lines else "(none)"


def render_relations(graph: KnowledgeGraph, edges: Iterable[RelKey]) -> str:
    lines = []
    for i, (a, b) in enumerate(edges, 1):
        lines.append(f"{i}. {a} -- {b}: {' '.join(graph.relations[(a, b)].descriptions)}")
    return "\n".join(lines) if lines else "(none)"


def _chat_qa(client: LLMClient, prompt: str, stage: str) -> Tuple[str, str]:
    messages = [("user", prompt)]
    try:
        reply = client.complete(messages).text
        parsed = parse_qa(reply)
        if parsed is None:
            reply2 = client.complete(messages + [("assistant", reply), ("user", REPROMPT)]).text
            parsed = parse_qa(reply2)
    except CassetteMiss:
        raise
    except LLMError as exc:
        raise GenerationError(stage, str(exc)) from exc
    if parsed is None:
        raise GenerationError(stage, "response has no Question:/Answer: pair")
    return parsed


def _record(graph, sg: Subgraph, form: str, q: str, a: str) -> QARecord:
    mx, mean = loss_stats(graph, sg.edges)
    return QARecord(q, a, form, sg.seed, tuple(sg.edges), tuple(sg.nodes), mx, mean)


def gen_atomic(graph: KnowledgeGraph, sg: Subgraph, client: LLMClient, language: str = "English",
               template_dir=None) -> QARecord:
    if len(sg.edges) > 1:
        raise ValueError(f"atomic QA needs at most one edge, subgraph has {len(sg.edges)}")
    prompt = load_template("atomic_qa", template_dir).render(
        entities=render_entities(graph, sg.nodes), relations=render_relations(graph, sg.edges), language=language)
    q, a = _chat_qa(client, prompt, "qa")
    return _record(graph, sg, "atomic", q, a)


def gen_aggregated(graph: KnowledgeGraph, sg: Subgraph, client: LLMClient, language: str = "English",
                   template_dir=None) -> QARecord:
    """Rephrase the whole subgraph into one passage, then ask for the question it answers."""
    if len(sg.edges) < 1:
        raise ValueError("aggregated QA needs at least one edge")
    prompt = load_template("aggregated_answer", template_dir).render(
        entities=render_entities(graph, sg.nodes), relations=render_relations(graph, sg.edges), language=language)
    try:
        answer = client.complete([("user", prompt)]).text.strip()
    except CassetteMiss:
        raise
    except LLMError as exc:
        raise GenerationError("answer", str(exc)) from exc
    if not answer:
        raise GenerationError("answer", "empty rephrased answer")
    qprompt = load_template("aggregated_question", template_dir).render(answer=answer, language=language)
    try:
        question = client.complete([("user", qprompt)]).text.strip()
    except CassetteMiss:
        raise
    except LLMError as exc:
        raise GenerationError("question", str(exc)) from exc
    question = re.sub(r"^\s*question\s*[:：]\s*", "", question, flags=re.IGNORECASE)
    if not question:
        raise GenerationError("question", "empty question")
    return _record(graph, sg, "aggregated", question, answer)


def gen_multihop(graph: KnowledgeGraph, sg: Subgraph, client: LLMClient, language: str = "English",
                 template_dir=None) -> QARecord:
    if len(sg.edges) < 2:
        raise ValueError(f"multi-hop QA needs at least two edges, subgraph has {len(sg.edges)}")
    ordered = [e for e, _ in sorted(sg.depth_of, key=lambda x: x[1])] or list(sg.edges)
    prompt = load_template("multi_hop_qa", template_dir).render(
        entities=render_entities(graph, sg.nodes), relations=render_relations(graph, ordered), language=language)
    q, a = _chat_qa(client, prompt, "qa")
    return _record(graph, sg, "multi_hop", q, a)


GENERATORS = {"atomic": gen_atomic, "aggregated": gen_aggregated, "multi_hop": gen_multihop}


@dataclass
class GenerationStats:
    consumed: int = 0
    emitted: int = 0
    skips: Counter = field(default_factory=Counter)

    @property
    def skipped(self) -> int:
        return sum(self.skips.values())


def generate(graph: KnowledgeGraph, subgraphs: Sequence[Subgraph], form: str, client: LLMClient,
             language: str = "English", workers: int = 8, template_dir=None) -> Tuple[List[QARecord], GenerationStats]:
    """Generate one record per subgraph; failures are counted by stage instead of raised."""
    if form not in GENERATORS:
        raise ValueError(f"unknown QA form {form!r}")
    gen = GENERATORS[form]

    def work(sg):
        try:
            return gen(graph, sg, client, language, template_dir), None
        except ValueError as exc:
            logger.info("subgraph %s skipped: %s", sg.sort_key, exc)
            return None, "precondition"
        except (GenerationError, TemplateError) as exc:
            logger.warning("generation failed for %s: %s", sg.sort_key, exc)
            return None, getattr(exc, "stage", "template")

    stats = GenerationStats()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, subgraphs))
    records = []
    for rec, stage in results:
        stats.consumed += 1
        if rec is None:
            stats.skips[stage] += 1
        else:
            records.append(rec)
            stats.emitted += 1
    return sorted(records, key=lambda r: r.sort_key), stats


def dataset_line(rec: QARecord, fmt: str) -> dict:
    if fmt == "alpaca":
        return {"instruction": rec.question, "input": "", "output": rec.answer}
    if fmt == "sharegpt":
        return {"conversations": [{"from": "human", "value": rec.question},
                                  {"from": "gpt", "value": rec.answer}]}
    raise ValueError(f"unknown dataset format {fmt!r}")


def write_dataset(records: Sequence[QARecord], path: str | Path, fmt: str = "alpaca") -> Path:
    if not records:
        raise ValueError("no records to write")
    if fmt not in DATASET_FORMATS:
        raise ValueError(f"unknown dataset format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(dataset_line(r, fmt), ensure_ascii=False) for r in sorted(records, key=lambda r: r.sort_key)]
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(line + "\n" for line in lines))
    return path


def read_dataset(path: str | Path) -> List[Tuple[str, str]]:
    """Recover (question, answer) pairs from an alpaca or sharegpt JSONL file."""
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "conversations" in obj:
            turns = obj["conversations"]
            q = next(t["value"] for t in turns if t["from"] == "human")
            a = next(t["value"] for t in turns if t["from"] == "gpt")
        else:
            q, a = obj["instruction"], obj["output"]
        pairs.append((q, a))
    return pairs
