import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kgsynth.kg import Entity, KnowledgeGraph, Relation  # noqa: E402
from kgsynth.llm import LLMClient, ModelEndpoint  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def make_client(backend, **kw):
    kw.setdefault("sleep", lambda s: None)
    return LLMClient(ModelEndpoint("http://fake", "fake-model"), backend, **kw)


def graph_from_edges(edges, losses=None, desc_words=3):
    """Build a graph whose entity and relation descriptions have known token counts."""
    g = KnowledgeGraph()
    for a, b in edges:
        for n in (a, b):
            if n not in g.entities:
                g.add_entity(Entity(n, "concept", [" ".join(["w"] * desc_words)], {"c0"}))
        g.add_relation(Relation(a, b, [" ".join(["r"] * desc_words)], {"c0"},
                                None if losses is None else losses[(min(a, b), max(a, b))]))
    return g


def random_graph(rng: random.Random, max_nodes=12, max_edges=20, with_losses=True):
    n = rng.randint(2, max_nodes)
    names = [f"n{i:02d}" for i in range(n)]
    possible = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    m = rng.randint(1, min(max_edges, len(possible)))
    chosen = rng.sample(possible, m)
    g = KnowledgeGraph()
    for name in names:
        g.add_entity(Entity(name, "concept", [" ".join(["w"] * rng.randint(0, 6))], {"c"}))
    for a, b in chosen:
        loss = round(rng.uniform(0, 3), 1) if with_losses else None
        g.add_relation(Relation(a, b, [" ".join(["r"] * rng.randint(1, 8))], {"c"}, loss))
    return g


@pytest.fixture
def client_factory():
    return make_client


def e2e_config(tmp, mode="replay", **overrides):
    """Fixture config pointed at a private cache holding the committed cassette."""
    import shutil
    from dataclasses import replace
    from kgsynth.config import load_config

    tmp = Path(tmp)
    cache = tmp / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    if mode == "replay":
        shutil.copy(FIXTURES / "e2e" / "cassette.jsonl", cache / "cassette.jsonl")
    cfg = load_config(FIXTURES / "e2e" / "config.yaml")
    out = replace(cfg.output, path=str(tmp / "out" / "qa.jsonl"))
    return replace(cfg, mode=mode, cache_dir=str(cache), output=out, **overrides)
