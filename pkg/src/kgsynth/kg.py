"""Knowledge graph construction: extraction parsing, merging, summarization and persistence."""
from __future__ import annotations

import copy
import json
import logging
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .corpus import Chunk
from .llm import CassetteMiss, LLMClient, LLMError
from .templates import load_template

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
UNKNOWN_TYPE = "UNKNOWN"
COMPLETION_MARKER = "<|COMPLETE|>"
DEFAULT_ENTITY_TYPES = ("date", "location", "event", "person", "organization", "concept", "object")
DEFAULT_SUMMARY_THRESHOLD = 4

RelKey = Tuple[str, str]

_RECORD = re.compile(r'^\(\s*"?(entity|relationship)"?\s*\|(.*)\)\s*$', re.IGNORECASE | re.DOTALL)


class ExtractionError(Exception):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class GraphLoadError(Exception):
    pass


def canonical_name(name: str) -> str:
    """Case-folded, whitespace-collapsed entity key."""
    return " ".join(unicodedata.normalize("NFKC", name).casefold().split())


def rel_key(a: str, b: str) -> RelKey:
    return (a, b) if a <= b else (b, a)


def _dedup_extend(target: List[str], extra: Iterable[str]) -> None:
    for d in extra:
        if d not in target:
            target.append(d)


@dataclass
class Entity:
    name: str
    entity_type: str
    descriptions: List[str] = field(default_factory=list)
    source_chunks: set = field(default_factory=set)
    merged_descriptions: List[str] = field(default_factory=list)


@dataclass
class Relation:
    src: str
    tgt: str
    descriptions: List[str] = field(default_factory=list)
    source_chunks: set = field(default_factory=set)
    loss: Optional[float] = None
    merged_descriptions: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.src > self.tgt:
            self.src, self.tgt = self.tgt, self.src

    @property
    def key(self) -> RelKey:
        return (self.src, self.tgt)


@dataclass
class KnowledgeGraph:
    entities: Dict[str, Entity] = field(default_factory=dict)
    relations: Dict[RelKey, Relation] = field(default_factory=dict)
    type_conflicts: int = field(default=0, compare=False)

    def add_entity(self, ent: Entity) -> None:
        cur = self.entities.get(ent.name)
        if cur is None:
            self.entities[ent.name] = copy.deepcopy(ent)
            return
        if cur.entity_type != ent.entity_type:
            # placeholders take the first concrete type seen
            if cur.entity_type == UNKNOWN_TYPE:
                cur.entity_type = ent.entity_type
            elif ent.entity_type != UNKNOWN_TYPE:
                self.type_conflicts += 1
        _dedup_extend(cur.descriptions, ent.descriptions)
        _dedup_extend(cur.merged_descriptions, ent.merged_descriptions)
        cur.source_chunks |= ent.source_chunks

    def add_relation(self, rel: Relation) -> None:
        for endpoint in rel.key:
            if endpoint not in self.entities:
                self.entities[endpoint] = Entity(endpoint, UNKNOWN_TYPE, [], set())
        cur = self.relations.get(rel.key)
        if cur is None:
            self.relations[rel.key] = copy.deepcopy(rel)
            return
        _dedup_extend(cur.descriptions, rel.descriptions)
        _dedup_extend(cur.merged_descriptions, rel.merged_descriptions)
        cur.source_chunks |= rel.source_chunks
        if cur.loss is None:
            cur.loss = rel.loss

    def neighbors_edges(self, node: str) -> List[RelKey]:
        return sorted(k for k in self.relations if node in k)

    def adjacency(self) -> Dict[str, List[RelKey]]:
        adj: Dict[str, List[RelKey]] = {n: [] for n in self.entities}
        for k in sorted(self.relations):
            adj[k[0]].append(k)
            adj[k[1]].append(k)
        return adj

    def isolated_nodes(self) -> List[str]:
        touched = {n for k in self.relations for n in k}
        return sorted(n for n in self.entities if n not in touched)

    def check_integrity(self) -> None:
        for (a, b), rel in self.relations.items():
            if a == b:
                raise GraphLoadError(f"relation ({a!r}, {b!r}) is a self-loop")
            for n in (a, b):
                if n not in self.entities:
                    raise GraphLoadError(f"relation ({a!r}, {b!r}) endpoint {n!r} is not an entity")

    def stats(self) -> dict:
        degree = Counter()
        for a, b in self.relations:
            degree[a] += 1
            degree[b] += 1
        hist = Counter(degree.get(n, 0) for n in self.entities)
        return {
            "entities": len(self.entities),
            "relations": len(self.relations),
            "scored_relations": sum(r.loss is not None for r in self.relations.values()),
            "degree_histogram": {str(d): hist[d] for d in sorted(hist)},
            "type_conflicts": self.type_conflicts,
        }


def merge(graph: KnowledgeGraph, new_entities: Iterable[Entity] = (),
          new_relations: Iterable[Relation] = ()) -> KnowledgeGraph:
    """Return a new graph with the given items unified into ``graph``."""
    out = copy.deepcopy(graph)
    for e in new_entities:
        out.add_entity(e)
    for r in new_relations:
        out.add_relation(r)
    return out


# -- extraction ---------------------------------------------------------------

@dataclass
class ParseOutcome:
    entities: List[Entity]
    relations: List[Relation]
    records: int = 0
    failed: int = 0
    completed: bool = False


def _clean(field_text: str) -> str:
    return field_text.strip().strip('"').strip("'").strip()


def _resolve_type(raw: str, entity_types: Sequence[str]) -> str:
    folded = raw.strip().strip('"').casefold()
    for t in entity_types:
        if t.casefold() == folded:
            return t
    return UNKNOWN_TYPE


def parse_extraction(text: str, chunk_id: str, entity_types: Sequence[str]) -> ParseOutcome:
    """Parse delimited entity/relationship records from a synthesizer response.

    Never raises: malformed lines are counted in ``failed``.
    """
    out = ParseOutcome([], [])
    ents: Dict[str, Entity] = {}
    rels: Dict[RelKey, Relation] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if COMPLETION_MARKER in line:
            out.completed = True
            line = line.replace(COMPLETION_MARKER, "").strip()
            if not line:
                continue
        m = _RECORD.match(line)
        if not m:
            if line.startswith("("):
                out.failed += 1
            continue
        kind = m.group(1).lower()
        parts = m.group(2).split("|", 2)
        if len(parts) != 3:
            out.failed += 1
            continue
        a, b, desc = (_clean(p) for p in parts)
        if kind == "entity":
            name = canonical_name(a)
            if not name or not desc:
                out.failed += 1
                continue
            ent = Entity(name, _resolve_type(b, entity_types), [desc], {chunk_id})
            if name in ents:
                _dedup_extend(ents[name].descriptions, ent.descriptions)
            else:
                ents[name] = ent
        else:
            src, tgt = canonical_name(a), canonical_name(b)
            if not src or not tgt or src == tgt or not desc:
                out.failed += 1
                continue
            rel = Relation(src, tgt, [desc], {chunk_id})
            if rel.key in rels:
                _dedup_extend(rels[rel.key].descriptions, rel.descriptions)
            else:
                rels[rel.key] = rel
        out.records += 1
    for rel in rels.values():
        for n in rel.key:
            if n not in ents:
                ents[n] = Entity(n, UNKNOWN_TYPE, [], {chunk_id})
    out.entities = list(ents.values())
    out.relations = list(rels.values())
    return out


@dataclass
class ExtractionStats:
    chunks: int = 0
    records: int = 0
    parse_failures: int = 0
    reprompts: int = 0


def extract_from_chunk(chunk: Chunk, client: LLMClient, entity_types: Sequence[str] = DEFAULT_ENTITY_TYPES,
                       language: str = "English", stats: Optional[ExtractionStats] = None,
                       template_dir=None) -> Tuple[List[Entity], List[Relation]]:
    if not chunk.text.strip():
        raise ValueError(f"chunk {chunk.chunk_id} is empty")
    stats = stats if stats is not None else ExtractionStats()
    prompt = load_template("kg_extraction", template_dir).render(
        entity_types=", ".join(entity_types), input_text=chunk.text, language=language)
    messages = [("user", prompt)]
    raw = client.complete(messages).text
    stats.chunks += 1
    if not raw.strip():
        stats.parse_failures += 1
        return [], []
    outcome = parse_extraction(raw, chunk.chunk_id, entity_types)
    if outcome.records == 0 and not outcome.completed:
        stats.reprompts += 1
        retry = messages + [("assistant", raw), ("user", "The output above did not follow the required record format. "
                                                  "Output the records again, one per line, then <|COMPLETE|>.")]
        raw = client.complete(retry).text
        outcome = parse_extraction(raw, chunk.chunk_id, entity_types)
        if outcome.records == 0 and not outcome.completed:
            stats.parse_failures += 1
            raise ExtractionError(f"unparseable extraction response for chunk {chunk.chunk_id}", raw)
    stats.records += outcome.records
    stats.parse_failures += outcome.failed
    return outcome.entities, outcome.relations


def summarize_descriptions(item, client: LLMClient, threshold: int = DEFAULT_SUMMARY_THRESHOLD,
                           language: str = "English", template_dir=None):
    """Collapse an entity's or relation's descriptions into one synthesized summary.

    Items below ``threshold`` descriptions, or whose summary call fails,
    come back unchanged.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if len(item.descriptions) < threshold:
        return item
    if isinstance(item, Relation):
        kind, name = "relationship", f"{item.src} -- {item.tgt}"
    else:
        kind, name = "entity", item.name
    prompt = load_template("kg_summarization", template_dir).render(
        item_kind=kind, item_name=name, language=language,
        descriptions="\n".join(f"- {d}" for d in item.descriptions))
    try:
        summary = client.complete([("user", prompt)]).text.strip()
    except CassetteMiss:
        raise
    except LLMError as exc:
        logger.warning("summarization failed for %s %r: %s", kind, name, exc)
        return item
    if not summary:
        logger.warning("empty summary for %s %r; keeping descriptions", kind, name)
        return item
    return replace(item, descriptions=[summary],
                   merged_descriptions=list(item.merged_descriptions) + list(item.descriptions),
                   source_chunks=set(item.source_chunks))


# -- persistence --------------------------------------------------------------

def to_dict(graph: KnowledgeGraph) -> dict:
    return {
        "version": FORMAT_VERSION,
        "entities": [
            {"name": e.name, "entity_type": e.entity_type, "descriptions": list(e.descriptions),
             "source_chunks": sorted(e.source_chunks), "merged_descriptions": list(e.merged_descriptions)}
            for e in (graph.entities[n] for n in sorted(graph.entities))
        ],
        "relations": [
            {"src": r.src, "tgt": r.tgt, "descriptions": list(r.descriptions),
             "source_chunks": sorted(r.source_chunks), "loss": r.loss,
             "merged_descriptions": list(r.merged_descriptions)}
            for r in (graph.relations[k] for k in sorted(graph.relations))
        ],
    }


def _str_list(obj: dict, key: str, where: str) -> List[str]:
    val = obj.get(key, [])
    if not isinstance(val, list) or not all(isinstance(x, str) for x in val):
        raise GraphLoadError(f"{where}.{key}: expected a list of strings")
    return list(val)


def from_dict(data) -> KnowledgeGraph:
    if not isinstance(data, dict):
        raise GraphLoadError("top level: expected an object")
    if data.get("version") != FORMAT_VERSION:
        raise GraphLoadError(f"version: expected {FORMAT_VERSION}, found {data.get('version')!r}")
    for key in ("entities", "relations"):
        if not isinstance(data.get(key), list):
            raise GraphLoadError(f"{key}: expected a list")
    g = KnowledgeGraph()
    for i, e in enumerate(data["entities"]):
        where = f"entities[{i}]"
        if not isinstance(e, dict):
            raise GraphLoadError(f"{where}: expected an object")
        name, etype = e.get("name"), e.get("entity_type")
        if not isinstance(name, str) or not name:
            raise GraphLoadError(f"{where}.name: expected a non-empty string")
        if not isinstance(etype, str) or not etype:
            raise GraphLoadError(f"{where}.entity_type: expected a non-empty string")
        if name in g.entities:
            raise GraphLoadError(f"{where}.name: duplicate entity {name!r}")
        g.entities[name] = Entity(name, etype, _str_list(e, "descriptions", where),
                                  set(_str_list(e, "source_chunks", where)),
                                  _str_list(e, "merged_descriptions", where))
    for i, r in enumerate(data["relations"]):
        where = f"relations[{i}]"
        if not isinstance(r, dict):
            raise GraphLoadError(f"{where}: expected an object")
        src, tgt = r.get("src"), r.get("tgt")
        for fname, val in (("src", src), ("tgt", tgt)):
            if not isinstance(val, str) or not val:
                raise GraphLoadError(f"{where}.{fname}: expected a non-empty string")
            if val not in g.entities:
                raise GraphLoadError(f"{where}.{fname}: dangling endpoint {val!r}")
        if src == tgt:
            raise GraphLoadError(f"{where}: self-loop on {src!r}")
        loss = r.get("loss")
        if loss is not None and (isinstance(loss, bool) or not isinstance(loss, (int, float)) or loss < 0):
            raise GraphLoadError(f"{where}.loss: expected a nonnegative number or null")
        rel = Relation(src, tgt, _str_list(r, "descriptions", where), set(_str_list(r, "source_chunks", where)),
                       None if loss is None else float(loss), _str_list(r, "merged_descriptions", where))
        if rel.key in g.relations:
            raise GraphLoadError(f"{where}: duplicate relation {rel.key}")
        g.relations[rel.key] = rel
    return g


def save(graph: KnowledgeGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(graph), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def load(path: str | Path) -> KnowledgeGraph:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphLoadError(f"{path}: not valid JSON ({exc.msg})") from exc
    return from_dict(data)
