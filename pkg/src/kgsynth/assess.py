"""Comprehension probing of the trainee model and loss-based data selection.

Each relation description is paraphrased ``n`` times and each paraphrase is
negated. The trainee judges every statement with a one-token yes/no answer;
the probability it assigns to the correct answer feeds a confidence (mean
probability) and a comprehension loss (mean negative log probability).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

from .kg import KnowledgeGraph, Relation, RelKey
from .llm import JUDGE_PARAMS, CassetteMiss, LLMClient, LLMError
from .templates import load_template

logger = logging.getLogger(__name__)

DEFAULT_N = 2
DEFAULT_EPSILON = 1e-6
POSITIVE, NEGATIVE = "positive", "negative"


class ProbeError(Exception):
    pass


@dataclass(frozen=True)
class Statement:
    text: str
    polarity: str
    parent_relation: RelKey
    index: int


@dataclass(frozen=True)
class ProbeResult:
    statement: Statement
    p_yes: float
    p_no: float

    @property
    def p_correct(self) -> float:
        return self.p_yes if self.statement.polarity == POSITIVE else self.p_no


@dataclass(frozen=True)
class ComprehensionScore:
    relation: RelKey
    confidence: float
    loss: float
    n: int


def _statement_source(relation: Relation) -> str:
    return " ".join(d.strip() for d in relation.descriptions if d.strip())


def rephrase_statements(relation: Relation, n: int, client: LLMClient, template_dir=None) -> List[Statement]:
    """Produce ``n`` paraphrases of the relation and the negation of each.

    Variant ``j`` is requested with sampling seed ``j`` so repeated calls
    are distinct requests; a duplicate text is regenerated once with a
    fresh seed and then accepted.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    source = _statement_source(relation)
    if not source:
        raise ValueError(f"relation {relation.key} has no description")
    literal = load_template("rephrase_literal", template_dir)
    opposite = load_template("rephrase_opposite", template_dir)

    def ask(template, statement: str, seen: set, j: int) -> str:
        prompt = template.render(statement=statement)
        text = client.complete([("user", prompt)], client.params.with_(temperature=1.0, seed=j)).text.strip()
        if not text or text in seen:
            text2 = client.complete([("user", prompt)], client.params.with_(temperature=1.0, seed=j + 1000 * n)).text.strip()
            if text2 and text2 not in seen:
                text = text2
            elif text:
                logger.warning("duplicate statement accepted for %s: %r", relation.key, text)
        if not text:
            raise LLMError(f"empty rephrasing for relation {relation.key}")
        seen.add(text)
        return text

    pos_seen: set = set()
    neg_seen: set = set()
    out: List[Statement] = []
    for j in range(1, n + 1):
        pos = ask(literal, source, pos_seen, j)
        out.append(Statement(pos, POSITIVE, relation.key, j))
    for j in range(1, n + 1):
        neg = ask(opposite, out[j - 1].text, neg_seen, j)
        out.append(Statement(neg, NEGATIVE, relation.key, j))
    return out


def match_probability(top_logprobs: Sequence[Tuple[str, float]], words: Iterable[str], epsilon: float) -> float:
    wanted = {w.casefold() for w in words}
    for token, lp in top_logprobs:
        if token.strip().casefold() in wanted:
            return max(math.exp(lp), epsilon)
    return epsilon


def probe_statement(stmt: Statement, client: LLMClient, epsilon: float = DEFAULT_EPSILON,
                    yes_tokens: Iterable[str] = ("yes",), no_tokens: Iterable[str] = ("no",),
                    template_dir=None) -> ProbeResult:
    prompt = load_template("statement_judgment", template_dir).render(statement=stmt.text)
    result = client.complete([("user", prompt)], JUDGE_PARAMS)
    if not result.first_token_top_logprobs:
        raise ProbeError("trainee response carries no logprobs; endpoint cannot be probed")
    return ProbeResult(stmt,
                       match_probability(result.first_token_top_logprobs, yes_tokens, epsilon),
                       match_probability(result.first_token_top_logprobs, no_tokens, epsilon))


def score_relation(probes: Sequence[ProbeResult], epsilon: float = DEFAULT_EPSILON) -> ComprehensionScore:
    if not probes:
        raise ValueError("no probes to score")
    parents = {p.statement.parent_relation for p in probes}
    if len(parents) != 1:
        raise ValueError(f"probes span several relations: {sorted(parents)}")
    n_pos = sum(p.statement.polarity == POSITIVE for p in probes)
    n_neg = sum(p.statement.polarity == NEGATIVE for p in probes)
    if n_pos != n_neg or n_pos + n_neg != len(probes):
        raise ValueError(f"expected equal positive/negative probes, got {n_pos}/{n_neg} of {len(probes)}")
    probs = [p.p_correct for p in probes]
    two_n = len(probs)
    confidence = sum(probs) / two_n
    loss = -sum(math.log(max(p, epsilon)) for p in probs) / two_n
    return ComprehensionScore(parents.pop(), confidence, max(loss, 0.0), n_pos)


@dataclass
class AssessStats:
    scored: int = 0
    skipped: int = 0
    probes: int = 0
    skipped_relations: List[RelKey] = field(default_factory=list)


def assess_graph(graph: KnowledgeGraph, synthesizer: LLMClient, trainee: LLMClient, n: int = DEFAULT_N,
                 epsilon: float = DEFAULT_EPSILON, yes_tokens=("yes",), no_tokens=("no",),
                 workers: int = 8, template_dir=None, rescore: bool = False) -> AssessStats:
    """Score every relation in place; relations that fail keep ``loss=None``."""
    stats = AssessStats()
    keys = [k for k in sorted(graph.relations) if rescore or graph.relations[k].loss is None]

    def work(key):
        rel = graph.relations[key]
        try:
            stmts = rephrase_statements(rel, n, synthesizer, template_dir)
            probes = [probe_statement(s, trainee, epsilon, yes_tokens, no_tokens, template_dir) for s in stmts]
        except CassetteMiss:
            raise
        except (LLMError, ProbeError, ValueError) as exc:
            logger.warning("assessment skipped for %s: %s", key, exc)
            return key, None
        return key, score_relation(probes, epsilon)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, keys))
    for key, score in results:
        if score is None:
            stats.skipped += 1
            stats.skipped_relations.append(key)
        else:
            graph.relations[key].loss = score.loss
            stats.scored += 1
            stats.probes += 2 * n
    return stats


def loss_histogram(graph: KnowledgeGraph, bins: int = 10,
                   upper: Optional[float] = None) -> List[Tuple[float, float, int]]:
    """Fixed-width histogram of relation losses over ``[0, upper]``.

    ``upper`` defaults to the largest loss. The last bin is closed.
    """
    if bins <= 0:
        raise ValueError("bins must be positive")
    losses = [r.loss for r in graph.relations.values() if r.loss is not None]
    if not losses:
        return []
    top = max(losses) if upper is None else upper
    if top <= 0:
        top = 1.0
    width = top / bins
    counts = [0] * bins
    for x in losses:
        counts[min(max(int(x / width), 0), bins - 1)] += 1
    return [(i * width, top if i == bins - 1 else (i + 1) * width, c) for i, c in enumerate(counts)]


def rank_by_loss(relations: Iterable[Relation]) -> List[Relation]:
    scored = [r for r in relations if r.loss is not None]
    return sorted(scored, key=lambda r: (-r.loss, r.src, r.tgt))


def select_by_loss(graph: KnowledgeGraph, fraction: float, end: str = "top") -> List[Relation]:
    """Take the highest-loss (``top``) or lowest-loss (``bottom``) share of scored relations."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if end not in ("top", "bottom"):
        raise ValueError(f"end must be 'top' or 'bottom', got {end!r}")
    ranked = rank_by_loss(graph.relations.values())
    # tolerance keeps e.g. 0.3 * 70 from flooring to 20
    k = math.floor(fraction * len(ranked) + 1e-9)
    if k == 0:
        return []
    return ranked[:k] if end == "top" else ranked[-k:]
