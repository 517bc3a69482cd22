"""Deterministic synthetic five-task benchmark over a tiny closed world.

The world has two latent entity types (T1, T2) realized by disjoint surface
tokens, a relation rule table over (type, type, trigger) triples, and an
antonym pairing used by the NLI labels. Each entity family is split into
SOURCE-visible and TARGET-only tokens: source-role corpora draw entities
only from the source subset, target-role corpora only from the target-only
subset. Both roles share the latent rules, so knowledge learned on source
tasks is exactly what an adapted prompt can reuse on target tasks.

The world also emits a plain token-stream pretraining corpus that exposes
the latent facts (types, relations, antonyms) over the FULL vocabulary,
generic co-occurrence and doubled-sequence lines, and worked task
demonstrations restricted to SOURCE entities. The demonstrations plant
each task's output convention in the frozen backbone as a latent skill;
carrying a skill over to the target-only entities is exactly the
transfer that prompts must provide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BOS_ID, EOS_ID, SPECIAL_TOKENS, Tokenizer
from .errors import ContractError, ParseError

TASK_TYPES = ("NER", "RE", "QA", "NLI", "SUM")
SPLITS = ("train", "validation", "test")
NLI_LABELS = ("entail", "contradict", "neutral")
QA_LETTERS = ("A", "B", "C", "D")
QA_FRAME = ("which", "is", "?")

PIPE_ID = SPECIAL_TOKENS.index("|")


@dataclass
class WorldSpec:
    seed: int = 0
    base_vocab: int = 64
    n_source_entities: int = 10   # per family
    n_target_entities: int = 6    # per family, disjoint from source
    n_triggers: int = 4
    n_relations: int = 4
    # pretraining-stream composition
    type_fact_reps: int = 6
    n_relation_facts: int = 900
    antonym_fact_reps: int = 4
    label_fact_reps: int = 2
    n_cooccur: int = 240
    n_induction: int = 200
    n_task_demos: int = 300  # per task type, source entities only

    def __post_init__(self):
        if self.n_target_entities < 4:
            raise ContractError("each family needs at least 4 target-only entities")
        if min(self.n_source_entities, self.n_triggers, self.n_relations) < 1:
            raise ContractError("entity/trigger/relation counts must be positive")
        if self.n_source_entities % 2 or self.n_target_entities % 2:
            raise ContractError("entity subset sizes must be even (antonyms are pairs)")


@dataclass
class TaskRecord:
    task_type: str
    dataset_id: str
    split: str
    input: str
    target: str


class World:
    """Latent tables plus the derived vocabulary and pretraining stream."""

    def __init__(self, spec: WorldSpec):
        self.spec = spec
        n_ent = spec.n_source_entities + spec.n_target_entities
        self.families = {
            "T1": [f"ea{i}" for i in range(n_ent)],
            "T2": [f"eb{i}" for i in range(n_ent)],
        }
        self.source_entities = {f: toks[: spec.n_source_entities] for f, toks in self.families.items()}
        self.target_entities = {f: toks[spec.n_source_entities:] for f, toks in self.families.items()}
        self.type_of = {tok: f for f, toks in self.families.items() for tok in toks}
        self.triggers = [f"tr{i}" for i in range(spec.n_triggers)]
        self.relations = [f"rel{i}" for i in range(spec.n_relations)]

        family_names = sorted(self.families)
        fixed = (2 * n_ent + spec.n_triggers + spec.n_relations + len(family_names)
                 + len(NLI_LABELS) + len(QA_LETTERS) + len(QA_FRAME))
        if fixed > spec.base_vocab:
            raise ContractError(
                f"base vocabulary {spec.base_vocab} too small for {fixed} structural tokens")
        self.fillers = [f"w{i}" for i in range(spec.base_vocab - fixed)]

        self.tokens = (self.families["T1"] + self.families["T2"] + self.triggers
                       + self.relations + family_names + list(NLI_LABELS)
                       + list(QA_FRAME) + list(QA_LETTERS) + self.fillers)
        self.tokenizer = Tokenizer(self.tokens)

        rng = np.random.default_rng(spec.seed)
        combos = [(t1, t2, tr) for t1 in ("T1", "T2") for t2 in ("T1", "T2") for tr in self.triggers]
        labels = [self.relations[i % len(self.relations)] for i in range(len(combos))]
        rng.shuffle(labels)
        self.rule = dict(zip(combos, labels))

        # Antonyms pair adjacent entities within the same family and role,
        # so a target-role corpus can express contradictions on its own.
        self.antonym: dict[str, str] = {}
        for group in (*self.source_entities.values(), *self.target_entities.values()):
            for a, b in zip(group[0::2], group[1::2]):
                self.antonym[a] = b
                self.antonym[b] = a

        self.pretrain_stream = self._build_stream(rng)

    # -- pretraining stream ---------------------------------------------

    def _build_stream(self, rng: np.random.Generator) -> list[str]:
        sp = self.spec
        all_entities = self.families["T1"] + self.families["T2"]
        lines: list[str] = []
        for e in all_entities:
            lines += [f"{e} : {self.type_of[e]}"] * sp.type_fact_reps
        for _ in range(sp.n_relation_facts):
            e1, e2 = rng.choice(all_entities, size=2)
            tr = self.triggers[rng.integers(len(self.triggers))]
            lines.append(f"{e1} {tr} {e2} | {self.rule[(self.type_of[e1], self.type_of[e2], tr)]}")
        seen = set()
        for a, b in self.antonym.items():
            if (b, a) in seen:
                continue
            seen.add((a, b))
            lines += [f"{a} contradict {b}", f"{b} contradict {a}"] * sp.antonym_fact_reps
        for e in all_entities:
            lines += [f"{e} entail {e}"] * sp.label_fact_reps
        for _ in range(sp.label_fact_reps * len(all_entities)):
            e1, e2 = rng.choice(all_entities, size=2, replace=False)
            if self.antonym.get(e1) != e2 and e1 != e2:
                lines.append(f"{e1} neutral {e2}")
        mixable = all_entities + self.fillers
        for _ in range(sp.n_cooccur):
            n = int(rng.integers(5, 10))
            lines.append(" ".join(rng.choice(mixable, size=n)))
        # Doubled sequences exercise verbatim copying. Half draw from the
        # whole vocabulary, half from entities alone: copying must work for
        # every entity surface form, including ones no demonstration uses.
        for i in range(sp.n_induction):
            pool = self.tokens if i % 2 == 0 else all_entities
            n = int(rng.integers(3, 6))
            pat = list(rng.choice(pool, size=n))
            lines.append(" ".join(pat + pat))
        # Worked task demonstrations over SOURCE entities only. These give
        # the frozen backbone the output conventions as latent skills, the
        # way a pretrained language model already knows common task shapes;
        # target-only entities never appear inside a demonstration, so the
        # skill-to-new-surface-form link must come from the prompt. One
        # demonstration per line: chaining several demos per line was tried
        # and let the model shortcut by copying the in-context pattern
        # instead of forming the skill itself.
        for task_type in TASK_TYPES:
            gen = _GENERATORS[task_type]
            for _ in range(sp.n_task_demos):
                text, target = gen(self, rng, "source")
                lines.append(f"{text} | {target}")
        order = rng.permutation(len(lines))
        return [lines[i] for i in order]

    # -- latent-rule oracle ----------------------------------------------

    def entity_pool(self, role: str, family: str) -> list[str]:
        if role == "source":
            return self.source_entities[family]
        if role == "target":
            return self.target_entities[family]
        raise ContractError(f"unknown corpus role {role!r}")

    def oracle_target(self, task_type: str, input_text: str) -> str:
        """Derive the gold target from the latent tables alone."""
        toks = input_text.split()
        if task_type == "NER":
            return " ; ".join(f"{t} : {self.type_of[t]}" for t in toks if t in self.type_of)
        if task_type == "RE":
            ents = [t for t in toks if t in self.type_of]
            trig = next(t for t in toks if t in self.triggers)
            return self.rule[(self.type_of[ents[0]], self.type_of[ents[1]], trig)]
        if task_type == "QA":
            queried = toks[toks.index("is") + 1]
            opts = toks[toks.index("<sep>") + 1:]
            for letter, tok in zip(opts[0::2], opts[1::2]):
                if self.type_of.get(tok) == queried:
                    return letter
            raise ContractError("QA input has no option of the queried type")
        if task_type == "NLI":
            cut = toks.index("<sep>")
            premise, hyp = toks[:cut], toks[cut + 1:]
            if set(hyp) <= set(premise):
                return "entail"
            if any(self.antonym.get(h) in premise for h in hyp):
                return "contradict"
            return "neutral"
        if task_type == "SUM":
            return " ".join(t for t in toks if t in self.type_of)
        raise ContractError(f"unknown task type {task_type!r}")


def generate_world(spec: WorldSpec) -> World:
    return World(spec)


# -----------------------------------------------------------------------
# Task corpus generation
# -----------------------------------------------------------------------


def _sentence_with_entities(rng, entities, fillers, n_entities, length) -> list[str]:
    """Filler sentence with the given entities at seeded positions."""
    ents = list(rng.choice(entities, size=n_entities, replace=False))
    words = list(rng.choice(fillers, size=length - n_entities))
    toks = ents + words
    order = rng.permutation(len(toks))
    return [toks[i] for i in order]


def _gen_ner(world: World, rng, role: str) -> tuple[str, str]:
    pool = world.entity_pool(role, "T1") + world.entity_pool(role, "T2")
    n_ent = int(rng.integers(1, 4))
    length = int(rng.integers(max(6, n_ent + 2), 13))
    toks = _sentence_with_entities(rng, pool, world.fillers, n_ent, length)
    return " ".join(toks), world.oracle_target("NER", " ".join(toks))


def _gen_re(world: World, rng, role: str) -> tuple[str, str]:
    fam1, fam2 = ("T1", "T2") if rng.integers(2) else ("T2", "T1")
    e1 = str(rng.choice(world.entity_pool(role, fam1)))
    e2 = str(rng.choice(world.entity_pool(role, fam2)))
    trig = world.triggers[int(rng.integers(len(world.triggers)))]
    toks = [e1, trig, e2]
    for _ in range(int(rng.integers(0, 3))):
        pos = int(rng.integers(0, len(toks) + 1))
        toks.insert(pos, str(rng.choice(world.fillers)))
    return " ".join(toks), world.oracle_target("RE", " ".join(toks))


def _gen_qa(world: World, rng, role: str) -> tuple[str, str]:
    queried, other = ("T1", "T2") if rng.integers(2) else ("T2", "T1")
    correct = str(rng.choice(world.entity_pool(role, queried)))
    distract = list(rng.choice(world.entity_pool(role, other), size=3, replace=False))
    slot = int(rng.integers(4))
    options = distract[:slot] + [correct] + distract[slot:]
    opt_text = " ".join(f"{letter} {tok}" for letter, tok in zip(QA_LETTERS, options))
    text = f"which is {queried} ? <sep> {opt_text}"
    return text, world.oracle_target("QA", text)


def _gen_nli(world: World, rng, role: str) -> tuple[str, str]:
    pool = world.entity_pool(role, "T1") + world.entity_pool(role, "T2")
    n_ent = int(rng.integers(1, 3))
    premise: list[str] = []
    for e in rng.permutation(pool):
        if len(premise) == n_ent:
            break
        if world.antonym[e] not in premise:
            premise.append(str(e))
    length = int(rng.integers(4, 9))
    premise += list(rng.choice(world.fillers, size=length - len(premise)))
    order = rng.permutation(len(premise))
    premise = [premise[i] for i in order]

    label = NLI_LABELS[int(rng.integers(3))]
    if label == "entail":
        k = int(rng.integers(1, min(3, len(premise)) + 1))
        idx = sorted(rng.choice(len(premise), size=k, replace=False))
        hyp = [premise[i] for i in idx]
    elif label == "contradict":
        ent = str(rng.choice([t for t in premise if t in world.type_of]))
        hyp = [world.antonym[ent]]
        if rng.integers(2):
            hyp.append(str(rng.choice(premise)))
    else:
        banned = set(premise) | {world.antonym[t] for t in premise if t in world.type_of}
        novel = [t for t in pool + world.fillers if t not in banned]
        hyp = [str(rng.choice(novel))]
        if rng.integers(2):
            hyp.insert(0, str(rng.choice(premise)))
    text = " ".join(premise) + " <sep> " + " ".join(hyp)
    assert world.oracle_target("NLI", text) == label
    return text, label


def _gen_sum(world: World, rng, role: str) -> tuple[str, str]:
    pool = world.entity_pool(role, "T1") + world.entity_pool(role, "T2")
    n_ent = int(rng.integers(1, 4))
    length = int(rng.integers(max(6, n_ent + 3), 13))
    toks = _sentence_with_entities(rng, pool, world.fillers, n_ent, length)
    return " ".join(toks), world.oracle_target("SUM", " ".join(toks))


_GENERATORS = {"NER": _gen_ner, "RE": _gen_re, "QA": _gen_qa, "NLI": _gen_nli, "SUM": _gen_sum}


def generate_task_corpus(world: World, task_type: str, n: int, split_role: str,
                         seed: int) -> list[TaskRecord]:
    """n records with deterministic 70/15/15 train/validation/test splits."""
    if task_type not in TASK_TYPES:
        raise ContractError(f"unknown task type {task_type!r}")
    if n < 10:
        raise ContractError(f"corpus size {n} below minimum 10")
    world.entity_pool(split_role, "T1")
    rng = np.random.default_rng(seed)
    gen = _GENERATORS[task_type]
    dataset_id = f"{task_type.lower()}-{split_role}"
    n_train = round(0.70 * n)
    n_val = round(0.15 * n)
    records = []
    for i in range(n):
        text, target = gen(world, rng, split_role)
        split = "train" if i < n_train else ("validation" if i < n_train + n_val else "test")
        records.append(TaskRecord(task_type, dataset_id, split, text, target))
    return records


def split_records(records: list[TaskRecord]) -> dict[str, list[TaskRecord]]:
    out: dict[str, list[TaskRecord]] = {s: [] for s in SPLITS}
    for r in records:
        out[r.split].append(r)
    return out


def encode_record(tokenizer: Tokenizer, record: TaskRecord) -> tuple[list[int], list[int]]:
    """Token ids for teacher forcing: `<bos> input |` then `target <eos>`."""
    input_ids = [BOS_ID] + tokenizer.encode(record.input) + [PIPE_ID]
    target_ids = tokenizer.encode(record.target) + [EOS_ID]
    return input_ids, target_ids


# -----------------------------------------------------------------------
# Dataset files
# -----------------------------------------------------------------------


def write_dataset(path, records: list[TaskRecord]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.task_type}\t{r.dataset_id}\t{r.split}\t{r.input}\t{r.target}\n")


def read_dataset(path) -> list[TaskRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise ParseError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
            task_type, dataset_id, split, text, target = fields
            if task_type not in TASK_TYPES:
                raise ParseError(f"{path}:{lineno}: unknown task type {task_type!r}")
            if split not in SPLITS:
                raise ParseError(f"{path}:{lineno}: unknown split {split!r}")
            records.append(TaskRecord(task_type, dataset_id, split, text, target))
    return records
