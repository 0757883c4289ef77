import json

import pytest
from hypothesis import given, settings, strategies as st

from kgsynth import kg
from kgsynth.corpus import Chunk
from kgsynth.kg import (DEFAULT_ENTITY_TYPES, UNKNOWN_TYPE, Entity, ExtractionError, ExtractionStats, GraphLoadError,
                        KnowledgeGraph, Relation, canonical_name, extract_from_chunk, merge, parse_extraction,
                        summarize_descriptions)
from kgsynth.llm import CompletionResult, RequestError
from conftest import make_client
from fakellm import FakeLLM, ScriptedBackend

TYPES = DEFAULT_ENTITY_TYPES


def chunk(text="Some text about wheat.", cid="c1"):
    return Chunk(cid, "d1", text, 5, 0)


def test_canonical_name():
    assert canonical_name("  Ridgeback\tWHEAT ") == "ridgeback wheat"
    assert canonical_name("Ｆｕｌｌ") == "full"


def test_parse_basic_records():
    text = ('("entity"|Wheat|object|A cereal grain.)\n'
            '("entity"|Aster Valley|location|A valley.)\n'
            '("relationship"|Wheat|Aster Valley|Wheat grows in Aster Valley.)\n'
            '<|COMPLETE|>')
    out = parse_extraction(text, "c1", TYPES)
    assert out.completed and out.records == 3 and out.failed == 0
    assert {e.name for e in out.entities} == {"wheat", "aster valley"}
    (rel,) = out.relations
    assert rel.key == ("aster valley", "wheat")
    assert rel.source_chunks == {"c1"}


def test_parse_relation_creates_placeholder_entities():
    out = parse_extraction('("relationship"|Alpha|Beta|linked)', "c1", TYPES)
    types = {e.name: e.entity_type for e in out.entities}
    assert types == {"alpha": UNKNOWN_TYPE, "beta": UNKNOWN_TYPE}
    assert all(e.descriptions == [] for e in out.entities)


def test_parse_counts_malformed_lines():
    text = '("entity"|only two)\n("relationship"|A|A|self loop)\n("entity"|X|person|ok)\nchatter'
    out = parse_extraction(text, "c1", TYPES)
    assert out.records == 1 and out.failed == 2 and not out.completed


def test_unknown_type_maps_to_placeholder_type():
    out = parse_extraction('("entity"|X|spaceship|a ship)', "c1", TYPES)
    assert out.entities[0].entity_type == UNKNOWN_TYPE


@given(st.text(max_size=300))
@settings(max_examples=200)
def test_parse_never_raises(text):
    out = parse_extraction(text, "c", TYPES)
    names = {e.name for e in out.entities}
    assert all(r.src in names and r.tgt in names for r in out.relations)


def test_extract_empty_response_yields_nothing():
    stats = ExtractionStats()
    ents, rels = extract_from_chunk(chunk(), make_client(ScriptedBackend([""])), stats=stats)
    assert (ents, rels) == ([], [])
    assert stats.parse_failures == 1


def test_extract_reprompts_once_then_fails():
    backend = ScriptedBackend(["no records here", "still nothing"])
    stats = ExtractionStats()
    with pytest.raises(ExtractionError) as info:
        extract_from_chunk(chunk(), make_client(backend), stats=stats)
    assert info.value.raw == "still nothing"
    assert len(backend.requests) == 2 and stats.reprompts == 1


def test_extract_reprompt_recovers():
    backend = ScriptedBackend(["garbage", '("entity"|X|person|someone)\n<|COMPLETE|>'])
    ents, _ = extract_from_chunk(chunk(), make_client(backend))
    assert [e.name for e in ents] == ["x"]


def test_extract_with_fake_llm():
    text = "Imre Vant studied how Oriel Barley responds to poor rainfall."
    ents, rels = extract_from_chunk(chunk(text), make_client(FakeLLM()))
    assert {e.name for e in ents} == {"imre vant", "oriel barley"}
    assert [r.key for r in rels] == [("imre vant", "oriel barley")]


def test_relation_is_undirected():
    g = KnowledgeGraph()
    g.add_relation(Relation("b", "a", ["x"]))
    g.add_relation(Relation("a", "b", ["y"]))
    assert list(g.relations) == [("a", "b")]
    assert g.relations[("a", "b")].descriptions == ["x", "y"]


def test_placeholder_adopts_concrete_type():
    g = KnowledgeGraph()
    g.add_relation(Relation("a", "b", ["x"]))
    g.add_entity(Entity("a", "person", ["someone"]))
    assert g.entities["a"].entity_type == "person"
    g.add_entity(Entity("a", "location", ["elsewhere"]))
    assert g.entities["a"].entity_type == "person"
    assert g.type_conflicts == 1


# type is a function of the name so merges are order independent
NAMES = ["a", "b", "c", "d", "e"]
TYPE_OF = dict(zip(NAMES, ["person", "location", "event", "concept", "object"]))
descs = st.lists(st.sampled_from(["d1", "d2", "d3", "d4"]), max_size=3)
ent_st = st.builds(lambda n, d, c: Entity(n, TYPE_OF[n], d, set(c)), st.sampled_from(NAMES), descs,
                   st.sets(st.sampled_from(["c1", "c2", "c3"]), max_size=2))
rel_st = st.builds(lambda a, b, d: Relation(a, b, d, {"c1"}),
                   st.sampled_from(NAMES), st.sampled_from(NAMES), descs).filter(lambda r: r.src != r.tgt)
batch = st.tuples(st.lists(ent_st, max_size=5), st.lists(rel_st, max_size=5))


def normal_form(g):
    # descriptions compare as sets; insertion order is not part of graph identity
    return (
        {n: (e.entity_type, frozenset(e.descriptions), frozenset(e.source_chunks)) for n, e in g.entities.items()},
        {k: (frozenset(r.descriptions), frozenset(r.source_chunks)) for k, r in g.relations.items()},
    )


def apply(g, b):
    ents, rels = b
    # entities first so placeholders never shadow a concrete type
    return merge(g, ents, rels)


@settings(max_examples=150)
@given(batch, batch, batch)
def test_merge_algebra(x, y, z):
    empty = KnowledgeGraph()
    gx = apply(empty, x)
    assert normal_form(apply(gx, x)) == normal_form(gx)
    assert normal_form(apply(gx, y)) == normal_form(apply(apply(empty, y), x))
    left = apply(apply(gx, y), z)
    right = apply(gx, (y[0] + z[0], y[1] + z[1]))
    assert normal_form(left) == normal_form(right)


def test_merge_does_not_mutate_input():
    g = KnowledgeGraph()
    g.add_entity(Entity("a", "person", ["x"]))
    merge(g, [Entity("a", "person", ["y"])])
    assert g.entities["a"].descriptions == ["x"]


def test_summarize_threshold():
    client = make_client(FakeLLM())
    ent = Entity("wheat", "object", ["a", "b", "c"])
    assert summarize_descriptions(ent, client, threshold=4) is ent
    ent4 = Entity("wheat", "object", ["a", "b", "c", "d"])
    out = summarize_descriptions(ent4, client, threshold=4)
    assert out.descriptions == ["wheat: a b"]
    assert out.merged_descriptions == ["a", "b", "c", "d"]
    assert client.stats.calls == 1


def test_summarize_relation_and_failure_keeps_item():
    rel = Relation("a", "b", ["1", "2", "3", "4"], {"c1"})
    out = summarize_descriptions(rel, make_client(FakeLLM()), threshold=4)
    assert out.key == ("a", "b") and len(out.descriptions) == 1
    failing = make_client(ScriptedBackend([RequestError(400, "bad")]))
    assert summarize_descriptions(rel, failing, threshold=4) is rel


def test_summarize_replay_is_stable():
    ent = Entity("wheat", "object", ["a", "b", "c", "d"])
    first = summarize_descriptions(ent, make_client(FakeLLM()))
    second = summarize_descriptions(ent, make_client(FakeLLM()))
    assert first == second


def sample_graph():
    g = KnowledgeGraph()
    g.add_entity(Entity("wheat", "object", ["grain"], {"c1"}, ["old"]))
    g.add_entity(Entity("valley", "location", ["place"], {"c2"}))
    g.add_relation(Relation("wheat", "valley", ["grows in"], {"c1", "c2"}, 0.25))
    g.add_entity(Entity("lonely", "concept", ["isolated"], {"c3"}))
    return g


def test_save_load_roundtrip(tmp_path):
    g = sample_graph()
    kg.save(g, tmp_path / "g.json")
    back = kg.load(tmp_path / "g.json")
    assert back == g
    kg.save(back, tmp_path / "g2.json")
    assert (tmp_path / "g.json").read_bytes() == (tmp_path / "g2.json").read_bytes()


def test_load_rejects_dangling_endpoint(tmp_path):
    data = kg.to_dict(sample_graph())
    data["relations"][0]["tgt"] = "ghost"
    (tmp_path / "g.json").write_text(json.dumps(data))
    with pytest.raises(GraphLoadError, match=r"relations\[0\]\.tgt"):
        kg.load(tmp_path / "g.json")


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d.update(version=9), "version"),
    (lambda d: d["entities"][0].update(name=""), "entities[0].name"),
    (lambda d: d["relations"][0].update(loss="high"), "relations[0].loss"),
    (lambda d: d["entities"][1].update(descriptions="x"), "entities[1].descriptions"),
])
def test_load_errors_name_field(mutate, field):
    data = kg.to_dict(sample_graph())
    mutate(data)
    with pytest.raises(GraphLoadError, match=field.replace("[", r"\[").replace("]", r"\]")):
        kg.from_dict(data)


def test_stats_and_isolated():
    g = sample_graph()
    s = g.stats()
    assert s["entities"] == 3 and s["relations"] == 1 and s["scored_relations"] == 1
    assert s["degree_histogram"] == {"0": 1, "1": 2}
    assert g.isolated_nodes() == ["lonely"]
    g.check_integrity()
