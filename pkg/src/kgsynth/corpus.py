"""Document ingestion and token-bounded chunking."""
from __future__ import annotations

import hashlib
import json
import logging
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Sequence, Tuple

logger = logging.getLogger(__name__)

INPUT_FORMATS = ("plain_text", "jsonl_content_field")
DEFAULT_MAX_CHUNK_TOKENS = 1024
DEFAULT_OVERLAP_TOKENS = 0

SENTENCE_END = frozenset(".!?。！？…")


class IngestError(Exception):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    source_path: str


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    token_count: int
    index_in_doc: int

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "text": self.text,
            "token_count": self.token_count,
            "index_in_doc": self.index_in_doc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Chunk":
        return cls(d["chunk_id"], d["doc_id"], d["text"], int(d["token_count"]), int(d["index_in_doc"]))


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def token_spans(text: str) -> List[Tuple[int, int]]:
    """Return (start, end) offsets of every token in ``text``.

    A token is either a single punctuation codepoint or a maximal run of
    characters that are neither whitespace nor punctuation.
    """
    spans = []
    start = None
    for i, ch in enumerate(text):
        if ch.isspace():
            if start is not None:
                spans.append((start, i))
                start = None
        elif _is_punct(ch):
            if start is not None:
                spans.append((start, i))
                start = None
            spans.append((i, i + 1))
        elif start is None:
            start = i
    if start is not None:
        spans.append((start, len(text)))
    return spans


def count_tokens(text: str) -> int:
    """Default token counter: whitespace-separated words, one token per punctuation mark."""
    return len(token_spans(text))


TokenCounter = Callable[[str], int]


def _doc_id(path: str, index: int) -> str:
    digest = hashlib.sha256(f"{path}#{index}".encode("utf-8")).hexdigest()
    return f"doc-{digest[:16]}"


def ingest(paths: Iterable[str | Path], format: str = "plain_text") -> List[Document]:
    if format not in INPUT_FORMATS:
        raise ValueError(f"unknown input format {format!r}; expected one of {INPUT_FORMATS}")
    docs: List[Document] = []
    for p in paths:
        path = Path(p)
        try:
            raw = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise IngestError(f"cannot read {path}: {exc}") from exc
        if format == "plain_text":
            if not raw.strip():
                raise IngestError(f"{path}: document is empty")
            docs.append(Document(_doc_id(path.as_posix(), 0), raw, str(path)))
            continue
        for lineno, line in enumerate(raw.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or not isinstance(rec.get("content"), str):
                raise IngestError(f"{path}:{lineno}: record has no string 'content' field")
            if not rec["content"].strip():
                raise IngestError(f"{path}:{lineno}: 'content' is empty")
            docs.append(Document(_doc_id(path.as_posix(), lineno), rec["content"], str(path)))
    seen = set()
    for d in docs:
        if d.doc_id in seen:
            raise IngestError(f"duplicate document id {d.doc_id} ({d.source_path})")
        seen.add(d.doc_id)
    return docs


def _choose_cut(text: str, spans: Sequence[Tuple[int, int]], start: int, limit: int, min_len: int) -> int:
    """Pick the exclusive end token index for a chunk beginning at ``start``.

    Preference order: latest sentence end, latest whitespace gap, hard cut.
    The chunk must hold more than ``min_len`` tokens so overlapping windows
    still make progress.
    """
    lo = start + min_len + 1
    for j in range(limit, lo - 1, -1):
        s, e = spans[j - 1]
        if e - s == 1 and text[s] in SENTENCE_END:
            return j
    for j in range(limit, lo - 1, -1):
        if spans[j - 1][1] < spans[j][0]:
            return j
    return limit


def chunk_document(
    doc: Document,
    max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
    overlap_tokens: int = DEFAULT_OVERLAP_TOKENS,
) -> List[Chunk]:
    """Greedily pack ``doc`` into chunks of at most ``max_chunk_tokens`` tokens.

    Chunk texts carry their trailing whitespace, so with zero overlap the
    chunk texts concatenate back to the document exactly. Consecutive chunks
    share ``overlap_tokens`` tokens.
    """
    if max_chunk_tokens <= 0:
        raise ValueError("max_chunk_tokens must be positive")
    if not 0 <= overlap_tokens < max_chunk_tokens:
        raise ValueError("overlap_tokens must satisfy 0 <= overlap < max_chunk_tokens")
    text = doc.text
    spans = token_spans(text)
    n = len(spans)
    if n == 0:
        return []

    def offset(tok: int) -> int:
        return spans[tok][0] if tok < n else len(text)

    chunks = []
    start = 0
    while True:
        if n - start <= max_chunk_tokens:
            end = n
        else:
            end = _choose_cut(text, spans, start, start + max_chunk_tokens, overlap_tokens)
        lo = 0 if start == 0 else spans[start][0]
        piece = text[lo:offset(end)]
        idx = len(chunks)
        chunks.append(Chunk(f"{doc.doc_id}:{idx}", doc.doc_id, piece, end - start, idx))
        if end == n:
            return chunks
        start = end - overlap_tokens


def chunk_documents(docs: Iterable[Document], max_chunk_tokens: int = DEFAULT_MAX_CHUNK_TOKENS,
                    overlap_tokens: int = DEFAULT_OVERLAP_TOKENS) -> List[Chunk]:
    out: List[Chunk] = []
    for d in docs:
        out.extend(chunk_document(d, max_chunk_tokens, overlap_tokens))
    return out


def reconstruct(chunks: Sequence[Chunk], overlap_tokens: int) -> str:
    """Reassemble one document's text from its chunks, dropping overlap regions."""
    parts = []
    for i, c in enumerate(sorted(chunks, key=lambda c: c.index_in_doc)):
        if i == 0 or overlap_tokens == 0:
            parts.append(c.text)
            continue
        spans = token_spans(c.text)
        parts.append(c.text[spans[overlap_tokens][0]:] if overlap_tokens < len(spans) else "")
    return "".join(parts)
