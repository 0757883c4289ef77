"""K-hop subgraph extraction around seed edges and subgraph planning.

Growth loop: start from a seed edge, keep a candidate set of adjacent
edges, repeatedly take one candidate chosen by the sampling rule, and stop
once the size budget is reached or no candidates remain.
"""
from __future__ import annotations

import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from .corpus import count_tokens
from .kg import KnowledgeGraph, RelKey

QA_FORMS = ("atomic", "aggregated", "multi_hop")
EXPAND_METHODS = ("max_width", "max_tokens")
EDGE_SAMPLING = ("max_loss", "min_loss", "random")
ISOLATED_STRATEGIES = ("add", "ignore")


class TraversalConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TraversalConfig:
    qa_form: str = "atomic"
    expand_method: str = "max_tokens"
    bidirectional: bool = True
    max_extra_edges: int = 5
    max_tokens: int = 256
    max_depth: int = 2
    edge_sampling: str = "max_loss"
    isolated_node_strategy: str = "add"
    random_seed: int = 0
    reuse_edges: bool = False

    def __post_init__(self):
        for name, allowed in (("qa_form", QA_FORMS), ("expand_method", EXPAND_METHODS),
                              ("edge_sampling", EDGE_SAMPLING),
                              ("isolated_node_strategy", ISOLATED_STRATEGIES)):
            if getattr(self, name) not in allowed:
                raise TraversalConfigError(f"{name}={getattr(self, name)!r} not in {allowed}")
        for name in ("max_extra_edges", "max_tokens", "max_depth"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, int) or val <= 0:
                raise TraversalConfigError(f"{name} must be a positive integer, got {val!r}")


@dataclass(frozen=True)
class Subgraph:
    seed: Optional[RelKey]
    edges: Tuple[RelKey, ...]
    nodes: Tuple[str, ...]
    pre_length: int
    depth_of: Tuple[Tuple[RelKey, int], ...] = ()

    @property
    def depths(self) -> Dict[RelKey, int]:
        return dict(self.depth_of)

    @property
    def sort_key(self) -> Tuple[str, ...]:
        return self.seed if self.seed is not None else ("", self.nodes[0])

    def to_dict(self) -> dict:
        return {
            "seed": list(self.seed) if self.seed else None,
            "edges": [list(e) for e in self.edges],
            "nodes": list(self.nodes),
            "pre_length": self.pre_length,
            "depths": [[list(e), d] for e, d in self.depth_of],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Subgraph":
        return cls(
            tuple(d["seed"]) if d.get("seed") else None,
            tuple(tuple(e) for e in d["edges"]),
            tuple(d["nodes"]),
            int(d["pre_length"]),
            tuple((tuple(e), int(k)) for e, k in d.get("depths", [])),
        )


def _desc_tokens(descriptions: Iterable[str], counter: Callable[[str], int]) -> int:
    return sum(counter(d) for d in descriptions)


def pre_length_of(graph: KnowledgeGraph, edges: Iterable[RelKey], nodes: Iterable[str],
                  counter: Callable[[str], int] = count_tokens) -> int:
    """Total token count of all member entity and relation descriptions."""
    total = 0
    for n in set(nodes):
        total += _desc_tokens(graph.entities[n].descriptions, counter)
    for e in set(edges):
        total += _desc_tokens(graph.relations[e].descriptions, counter)
    return total


def _pick(candidates: Set[RelKey], graph: KnowledgeGraph, method: str, rng: random.Random) -> RelKey:
    ordered = sorted(candidates)
    if method == "random":
        return ordered[rng.randrange(len(ordered))]
    if method == "max_loss":
        return min(ordered, key=lambda k: -graph.relations[k].loss)
    return min(ordered, key=lambda k: graph.relations[k].loss)


def _require_loss(graph: KnowledgeGraph, key: RelKey, cfg: TraversalConfig) -> None:
    if cfg.edge_sampling != "random" and graph.relations[key].loss is None:
        raise TraversalConfigError(
            f"edge_sampling={cfg.edge_sampling} needs losses but relation {key} is unscored")


def extract_khop(graph: KnowledgeGraph, seed: RelKey, cfg: TraversalConfig,
                 excluded: Optional[Set[RelKey]] = None, rng: Optional[random.Random] = None,
                 counter: Callable[[str], int] = count_tokens,
                 adjacency: Optional[Dict[str, List[RelKey]]] = None) -> Subgraph:
    """Grow a subgraph from ``seed``.

    Depths: the seed sits at depth 0 and so do its endpoints. An added edge
    sits one deeper than the shallowest of its endpoints already in the
    subgraph; a node's depth is the smallest depth of the member edges
    touching it. Candidates deeper than ``cfg.max_depth`` are never offered.

    With ``bidirectional=False`` only the seed's ``tgt`` endpoint (the
    lexicographically larger name) seeds the candidate set.

    The budget is checked after each insertion, so under ``max_tokens`` the
    last edge may overshoot. A seed that already meets the budget is
    returned alone.
    """
    if seed not in graph.relations:
        raise KeyError(f"seed relation {seed} not in graph")
    excluded = excluded if excluded is not None else set()
    rng = rng if rng is not None else random.Random(cfg.random_seed)
    adj = adjacency if adjacency is not None else graph.adjacency()

    edges: List[RelKey] = [seed]
    edge_depth: Dict[RelKey, int] = {seed: 0}
    node_depth: Dict[str, int] = {seed[0]: 0, seed[1]: 0}
    node_tokens = {n: _desc_tokens(graph.entities[n].descriptions, counter) for n in seed}
    pre_length = sum(node_tokens.values()) + _desc_tokens(graph.relations[seed].descriptions, counter)

    def budget_reached() -> bool:
        if cfg.expand_method == "max_width":
            return len(edges) >= 1 + cfg.max_extra_edges
        return pre_length >= cfg.max_tokens

    def candidate_depth(key: RelKey) -> int:
        return 1 + min(node_depth[n] for n in key if n in node_depth)

    candidates: Set[RelKey] = set()

    def offer_from(node: str) -> None:
        for k in adj.get(node, ()):
            if k in edge_depth or k in excluded or k in candidates:
                continue
            if candidate_depth(k) <= cfg.max_depth:
                _require_loss(graph, k, cfg)
                candidates.add(k)

    if budget_reached():
        return _snapshot(seed, edges, node_depth, pre_length, edge_depth)
    for node in (seed if cfg.bidirectional else (seed[1],)):
        offer_from(node)

    while candidates:
        e = _pick(candidates, graph, cfg.edge_sampling, rng)
        candidates.discard(e)
        d = candidate_depth(e)
        edges.append(e)
        edge_depth[e] = d
        for n in e:
            if n not in node_depth:
                node_depth[n] = d
                pre_length += _desc_tokens(graph.entities[n].descriptions, counter)
            else:
                node_depth[n] = min(node_depth[n], d)
        pre_length += _desc_tokens(graph.relations[e].descriptions, counter)
        if budget_reached():
            break
        for n in e:
            offer_from(n)
    return _snapshot(seed, edges, node_depth, pre_length, edge_depth)


def _snapshot(seed, edges, node_depth, pre_length, edge_depth) -> Subgraph:
    return Subgraph(seed, tuple(edges), tuple(sorted(node_depth)), pre_length,
                    tuple((e, edge_depth[e]) for e in edges))


def seed_order(graph: KnowledgeGraph, cfg: TraversalConfig, rng: random.Random) -> List[RelKey]:
    keys = sorted(graph.relations)
    if cfg.edge_sampling == "random":
        rng.shuffle(keys)
        return keys
    for k in keys:
        _require_loss(graph, k, cfg)
    sign = -1.0 if cfg.edge_sampling == "max_loss" else 1.0
    return sorted(keys, key=lambda k: (sign * graph.relations[k].loss, k))


def plan_subgraphs(graph: KnowledgeGraph, cfg: TraversalConfig,
                   counter: Callable[[str], int] = count_tokens) -> List[Subgraph]:
    """Partition the graph into generation units.

    Seeds are visited in sampling order. Unless ``cfg.reuse_edges`` is set,
    each relation lands in exactly one subgraph. Atomic QA uses one edge per
    subgraph. Isolated entities become node-only subgraphs for atomic QA
    when the isolated-node strategy is ``add``.
    """
    rng = random.Random(cfg.random_seed)
    adj = graph.adjacency()
    visited: Set[RelKey] = set()
    out: List[Subgraph] = []
    for seed in seed_order(graph, cfg, rng):
        if seed in visited and not cfg.reuse_edges:
            continue
        if cfg.qa_form == "atomic":
            sg = Subgraph(seed, (seed,), seed, pre_length_of(graph, [seed], seed, counter), ((seed, 0),))
        else:
            excluded = set() if cfg.reuse_edges else visited
            sg = extract_khop(graph, seed, cfg, excluded, rng, counter, adj)
        visited.update(sg.edges)
        out.append(sg)
    if cfg.isolated_node_strategy == "add" and cfg.qa_form == "atomic":
        for n in graph.isolated_nodes():
            out.append(Subgraph(None, (), (n,), pre_length_of(graph, [], [n], counter)))
    return out
