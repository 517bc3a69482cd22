"""Synthetic-world construction, task-corpus schemas, and dataset files."""

import collections

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptdistill.backbone import BOS_ID, EOS_ID
from promptdistill.errors import ContractError, ParseError
from promptdistill.metrics import parse_structured
from promptdistill.taskforge import (
    NLI_LABELS,
    QA_LETTERS,
    SPLITS,
    TASK_TYPES,
    PIPE_ID,
    WorldSpec,
    encode_record,
    generate_task_corpus,
    generate_world,
    read_dataset,
    write_dataset,
)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldSpec(seed=11))


# -----------------------------------------------------------------------
# World construction
# -----------------------------------------------------------------------


def test_world_deterministic_from_seed():
    a, b = generate_world(WorldSpec(seed=5)), generate_world(WorldSpec(seed=5))
    assert a.tokens == b.tokens
    assert a.rule == b.rule
    assert a.antonym == b.antonym
    assert a.pretrain_stream == b.pretrain_stream
    c = generate_world(WorldSpec(seed=6))
    assert c.pretrain_stream != a.pretrain_stream


def test_source_target_entities_disjoint(world):
    for fam in ("T1", "T2"):
        src, tgt = set(world.source_entities[fam]), set(world.target_entities[fam])
        assert src and tgt
        assert src.isdisjoint(tgt)
        assert len(tgt) >= 4


def test_every_entity_has_one_type(world):
    seen = collections.Counter()
    for fam in ("T1", "T2"):
        for tok in world.families[fam]:
            assert world.type_of[tok] == fam
            seen[tok] += 1
    assert all(c == 1 for c in seen.values())


def test_world_spec_validation():
    with pytest.raises(ContractError, match="at least 4 target-only"):
        WorldSpec(n_target_entities=2)
    with pytest.raises(ContractError, match="even"):
        WorldSpec(n_source_entities=9, n_target_entities=6)
    with pytest.raises(ContractError, match="too small"):
        generate_world(WorldSpec(base_vocab=30))


def test_vocab_is_closed(world):
    assert len(set(world.tokens)) == len(world.tokens) == world.spec.base_vocab
    for line in world.pretrain_stream:
        world.tokenizer.encode(line)  # raises on any out-of-vocabulary token


def test_antonyms_pair_within_family_and_role(world):
    for tok, anti in world.antonym.items():
        assert world.antonym[anti] == tok
        assert world.type_of[tok] == world.type_of[anti]
        src = set(world.source_entities[world.type_of[tok]])
        assert (tok in src) == (anti in src)  # never pairs source with target


@settings(max_examples=20, deadline=None)
@given(
    seed=st.integers(0, 2**16),
    n_src=st.sampled_from([4, 10, 20]),
    n_tgt=st.sampled_from([4, 6]),
)
def test_world_constructs_over_spec_space(seed, n_src, n_tgt):
    spec = WorldSpec(seed=seed, base_vocab=96, n_source_entities=n_src,
                     n_target_entities=n_tgt)
    w = generate_world(spec)
    for fam in ("T1", "T2"):
        assert set(w.source_entities[fam]).isdisjoint(w.target_entities[fam])
    assert len(w.tokens) == 96


# -----------------------------------------------------------------------
# Task corpora
# -----------------------------------------------------------------------


def _corpus(world, task, role="source", n=120, seed=3):
    return generate_task_corpus(world, task, n, role, seed)


def test_corpus_deterministic(world):
    a = _corpus(world, "NER")
    b = _corpus(world, "NER")
    assert a == b
    c = generate_task_corpus(world, "NER", 120, "source", seed=4)
    assert c != a


def test_corpus_split_fractions(world):
    recs = generate_task_corpus(world, "QA", 200, "target", seed=0)
    counts = collections.Counter(r.split for r in recs)
    assert counts["train"] == 140 and counts["validation"] == 30 and counts["test"] == 30


def test_corpus_preconditions(world):
    with pytest.raises(ContractError):
        generate_task_corpus(world, "POS", 100, "source", 0)
    with pytest.raises(ContractError):
        generate_task_corpus(world, "NER", 9, "source", 0)
    with pytest.raises(ContractError):
        generate_task_corpus(world, "NER", 100, "dev", 0)


@pytest.mark.parametrize("task", TASK_TYPES)
@pytest.mark.parametrize("role", ["source", "target"])
def test_role_purity_and_oracle_consistency(world, task, role):
    own = {t for fam in ("T1", "T2") for t in world.entity_pool(role, fam)}
    other_role = "target" if role == "source" else "source"
    foreign = {t for fam in ("T1", "T2") for t in world.entity_pool(other_role, fam)}
    for r in _corpus(world, task, role):
        toks = set(r.input.split()) | set(r.target.split())
        assert toks & world.type_of.keys() <= own
        assert not toks & foreign
        # the latent tables re-derive every target exactly (rule-based ceiling)
        assert world.oracle_target(task, r.input) == r.target
        assert len(r.target.split()) <= 16
        assert r.target  # non-empty by schema


def test_ner_schema(world):
    for r in _corpus(world, "NER"):
        items, malformed = parse_structured(r.target, "NER")
        assert malformed == 0 and 1 <= len(items) <= 3
        # annotations ordered by input position
        order = [seg.split()[0] for seg in r.target.split(";")]
        positions = [r.input.split().index(t) for t in order]
        assert positions == sorted(positions)
        assert 6 <= len(r.input.split()) <= 12


def test_re_schema(world):
    for r in _corpus(world, "RE"):
        toks = r.input.split()
        ents = [t for t in toks if t in world.type_of]
        trigs = [t for t in toks if t in world.triggers]
        assert len(ents) == 2 and len(trigs) == 1
        assert r.target in world.relations


def test_qa_schema(world):
    for r in _corpus(world, "QA"):
        toks = r.input.split()
        assert toks[:2] == ["which", "is"] and toks[2] in ("T1", "T2") and toks[3] == "?"
        assert toks[4] == "<sep>"
        opts = toks[5:]
        assert opts[0::2] == list(QA_LETTERS)
        hits = [l for l, t in zip(opts[0::2], opts[1::2]) if world.type_of[t] == toks[2]]
        assert hits == [r.target]  # exactly one correct option


def test_nli_schema_and_label_balance(world):
    recs = generate_task_corpus(world, "NLI", 3000, "source", seed=9)
    counts = collections.Counter(r.target for r in recs)
    assert set(counts) == set(NLI_LABELS)
    for label in NLI_LABELS:
        assert abs(counts[label] / 3000 - 1 / 3) <= 0.05


def test_sum_schema(world):
    for r in _corpus(world, "SUM"):
        toks = r.input.split()
        expect = [t for t in toks if t in world.type_of]
        assert r.target.split() == expect
        assert 1 <= len(expect) <= 3


def test_encode_record_frame(world):
    rec = _corpus(world, "RE", n=10)[0]
    input_ids, target_ids = encode_record(world.tokenizer, rec)
    assert input_ids[0] == BOS_ID and input_ids[-1] == PIPE_ID
    assert target_ids[-1] == EOS_ID
    text = world.tokenizer.decode(input_ids[1:-1])
    assert text == rec.input


# -----------------------------------------------------------------------
# Pretraining stream content
# -----------------------------------------------------------------------


def test_demonstration_lines_never_use_target_entities(world):
    tgt = {t for fam in ("T1", "T2") for t in world.target_entities[fam]}
    for line in world.pretrain_stream:
        if " | " not in line:
            continue
        left, right = line.split(" | ", 1)
        is_demo = "<sep>" in line or " : " in right or "?" in line
        if is_demo:
            assert not set(line.split()) & tgt, line


def test_stream_contains_facts_over_target_entities(world):
    # latent knowledge (types, relations) must cover target-only entities,
    # otherwise there is nothing for an adapted prompt to surface
    tgt = {t for fam in ("T1", "T2") for t in world.target_entities[fam]}
    typed = [ln for ln in world.pretrain_stream
             if len(ln.split()) == 3 and ln.split()[1] == ":" and ln.split()[0] in tgt]
    assert typed, "no type facts over target entities"


# -----------------------------------------------------------------------
# Dataset files
# -----------------------------------------------------------------------


def test_dataset_round_trip(tmp_path, world):
    recs = _corpus(world, "NLI", n=40)
    p = tmp_path / "d.tsv"
    write_dataset(p, recs)
    assert read_dataset(p) == recs
    first = p.read_bytes()
    write_dataset(p, read_dataset(p))
    assert p.read_bytes() == first


def test_dataset_parse_errors(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("NER\tid\ttrain\tonly four\n", encoding="utf-8")
    with pytest.raises(ParseError, match="bad.tsv:1"):
        read_dataset(p)
    p.write_text("NER\tid\tdev\ta\tb\n", encoding="utf-8")
    with pytest.raises(ParseError, match="unknown split"):
        read_dataset(p)
    p.write_text("POS\tid\ttrain\ta\tb\n", encoding="utf-8")
    with pytest.raises(ParseError, match="unknown task type"):
        read_dataset(p)


def test_dataset_empty_file(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("", encoding="utf-8")
    assert read_dataset(p) == []
