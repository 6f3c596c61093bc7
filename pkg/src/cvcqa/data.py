"""Synthetic multiple-choice QA corpora with a controllable lexical shortcut.

Every passage lists a handful of relational facts about one person
(``PERSON_3 lives_in PLACE_7 .``) plus filler sentences. A question names one
relation through a question cue word; the options are facts from the same
passage, written as ``<relation word> <object entity> <decoration words>``.

Two routes lead to the answer:

* reasoning: map the question cue to its relation and pick the option stating
  that relation's fact from the passage;
* shortcut: on flagged instances the gold option's decoration words are also
  planted in the passage filler, so it has the largest passage/option overlap.

``beta`` sets the flagged fraction in train/dev/test_in. Unflagged instances
carry no planted overlap unless ``unflagged="misleading"``, in which case a
wrong option receives it. ``test_anti`` always plants the overlap on a wrong
option.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NULL = 0
UNK = 1
SCHEMA_VERSION = 1
GENERATOR = "numpy.Philox"

STOP_WORDS = ("the", "a", "an", "is", "of", "to", "and", "in", "on", "at", "with", "what", "which", "does", "did")
PUNCT = (".", ",", "?")
OBJECT_TYPES = ("PLACE", "THING", "ANIMAL", "FOOD", "NUMBER")
PERSON = "PERSON"

SPLITS = ("train", "dev", "test_in", "test_anti")
PROVENANCES = ("original", "adv1", "adv2", "adv3", "adv4")


class CorpusError(ValueError):
    """Invalid corpus configuration or malformed corpus file."""


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Relation:
    index: int
    object_type: str
    fact_words: tuple[int, ...]
    question_words: tuple[int, ...]


@dataclass
class Vocabulary:
    tokens: list[str]
    stop_ids: frozenset[int]
    entity_type: dict[int, str]
    relations: list[Relation]
    content_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise CorpusError("vocabulary tokens must be unique")
        self.relation_of_fact_word = {w: r.index for r in self.relations for w in r.fact_words}
        self.relation_of_question_word = {w: r.index for r in self.relations for w in r.question_words}
        self.entities_by_type: dict[str, tuple[int, ...]] = {}
        for tid, typ in sorted(self.entity_type.items()):
            self.entities_by_type.setdefault(typ, ())
            self.entities_by_type[typ] += (tid,)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.ids.get(token, UNK)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def is_content(self, tid: int) -> bool:
        return tid not in self.stop_ids and tid not in (NULL, UNK)

    def to_json(self) -> dict:
        ranges = {}
        for typ, ids in self.entities_by_type.items():
            ranges[typ] = [min(ids), max(ids) + 1]
        return {
            "tokens": {t: i for i, t in enumerate(self.tokens)},
            "stop_ids": sorted(self.stop_ids),
            "entity_type_ranges": ranges,
            "relations": [
                {"index": r.index, "object_type": r.object_type, "fact_words": list(r.fact_words),
                 "question_words": list(r.question_words)}
                for r in self.relations
            ],
            "content_ids": list(self.content_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        tokens = [None] * len(obj["tokens"])
        for t, i in obj["tokens"].items():
            tokens[i] = t
        entity_type = {}
        for typ, (lo, hi) in obj["entity_type_ranges"].items():
            for i in range(lo, hi):
                entity_type[i] = typ
        relations = [Relation(r["index"], r["object_type"], tuple(r["fact_words"]), tuple(r["question_words"]))
                     for r in obj["relations"]]
        return cls(tokens, frozenset(obj["stop_ids"]), entity_type, relations, tuple(obj["content_ids"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocabulary(cfg: "CorpusConfig") -> Vocabulary:
    """Deterministic vocabulary layout for a config (independent of the seed)."""
    tokens = ["<null>", "<unk>"]
    stop_ids = []
    for w in STOP_WORDS + PUNCT:
        stop_ids.append(len(tokens))
        tokens.append(w)
    entity_type: dict[int, str] = {}
    for typ in (PERSON,) + OBJECT_TYPES:
        for k in range(cfg.entities_per_type):
            entity_type[len(tokens)] = typ
            tokens.append(f"{typ}_{k}")
    relations = []
    for r in range(cfg.n_relations):
        fact_words = []
        for k in range(cfg.fact_synonyms):
            fact_words.append(len(tokens))
            tokens.append(f"rel{r}_{k}")
        q_words = []
        for k in range(cfg.question_synonyms):
            q_words.append(len(tokens))
            tokens.append(f"ask{r}_{k}")
        relations.append(Relation(r, OBJECT_TYPES[r % len(OBJECT_TYPES)], tuple(fact_words), tuple(q_words)))
    n_content = cfg.vocab_size - len(tokens)
    if n_content < cfg.min_content_words():
        raise CorpusError(
            f"vocab_size={cfg.vocab_size} leaves {n_content} filler words; need at least {cfg.min_content_words()}"
        )
    content = []
    for k in range(n_content):
        content.append(len(tokens))
        tokens.append(f"w{k}")
    return Vocabulary(tokens, frozenset(stop_ids), entity_type, relations, tuple(content))


# ---------------------------------------------------------------------------
# instances and views


@dataclass(frozen=True)
class McqaInstance:
    passage_id: int
    passage: tuple[int, ...]
    question: tuple[int, ...]
    options: tuple[tuple[int, ...], ...]
    answer: int
    shortcut_flag: bool = False
    provenance: str = "original"

    def __post_init__(self) -> None:
        if not 0 <= self.answer < len(self.options):
            raise CorpusError(f"answer {self.answer} out of range for {len(self.options)} options")
        if any(len(o) < 1 for o in self.options):
            raise CorpusError("every option needs at least one token")

    @property
    def K(self) -> int:
        return len(self.options)

    def to_json(self) -> dict:
        return {
            "passage_id": self.passage_id,
            "passage": list(self.passage),
            "question": list(self.question),
            "options": [list(o) for o in self.options],
            "answer": self.answer,
            "shortcut_flag": self.shortcut_flag,
            "provenance": self.provenance,
        }


@dataclass(frozen=True)
class VariableView:
    """Which of passage / question / options stay visible."""

    p: bool = True
    q: bool = True
    o: bool = True

    @property
    def name(self) -> str:
        hidden = [n for n, vis in (("P", self.p), ("Q", self.q), ("O", self.o)) if not vis]
        return "full" if not hidden else "no_" + "".join(hidden)

    @classmethod
    def parse(cls, text: str) -> "VariableView":
        text = text.strip()
        if text == "full":
            return cls()
        if not text.startswith("no_"):
            raise ValueError(f"unknown view {text!r}")
        hidden = set(text[3:].upper())
        if not hidden <= {"P", "Q", "O"}:
            raise ValueError(f"unknown view {text!r}")
        return cls(p="P" not in hidden, q="Q" not in hidden, o="O" not in hidden)


FULL = VariableView()
NO_Q = VariableView(q=False)
NO_P = VariableView(p=False)
NO_PQ = VariableView(p=False, q=False)


def _nulls(seq: Sequence[int]) -> tuple[int, ...]:
    return (NULL,) * len(seq)


def mute(instance: McqaInstance, view: VariableView) -> McqaInstance:
    """Replace each hidden segment by NULL tokens of the same length."""
    if not view.o:
        raise ValueError("options are mandatory and cannot be muted")
    return replace(
        instance,
        passage=instance.passage if view.p else _nulls(instance.passage),
        question=instance.question if view.q else _nulls(instance.question),
    )


def null_probe(instance: McqaInstance) -> McqaInstance:
    """All variables muted, options included: the input of the all-null prediction."""
    return replace(
        instance,
        passage=_nulls(instance.passage),
        question=_nulls(instance.question),
        options=tuple(_nulls(o) for o in instance.options),
    )


# ---------------------------------------------------------------------------
# corpus generation


@dataclass
class CorpusConfig:
    vocab_size: int = 600
    K: int = 4
    passage_length: tuple[int, int] = (24, 30)
    questions_per_passage: int = 3
    facts_per_passage: int = 6
    beta: float = 0.9
    entity_density: float = 0.1
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500
    seed: int = 0
    n_relations: int = 10
    entities_per_type: int = 24
    fact_synonyms: int = 1
    question_synonyms: int = 30
    decoration_words: int = 1
    decoration_pool: int = 12
    decoration_repeat: int = 6
    question_noise: int = 8
    filler_sentence_length: tuple[int, int] = (4, 7)
    unflagged: str = "neutral"

    def min_content_words(self) -> int:
        lo, hi = self.passage_length
        return hi + self.K * self.decoration_words * self.questions_per_passage + 20

    def validate(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise CorpusError(f"beta must be in [0, 1], got {self.beta}")
        for name in ("n_train", "n_dev", "n_test", "K", "questions_per_passage", "facts_per_passage",
                     "n_relations", "entities_per_type", "fact_synonyms", "question_synonyms"):
            if getattr(self, name) <= 0:
                raise CorpusError(f"{name} must be positive")
        if self.K < 2:
            raise CorpusError("K must be at least 2")
        if self.K > self.facts_per_passage:
            raise CorpusError(f"K={self.K} exceeds the {self.facts_per_passage} distinct facts per passage")
        if self.questions_per_passage > self.facts_per_passage:
            raise CorpusError("more questions per passage than facts to ask about")
        if self.facts_per_passage > self.n_relations:
            raise CorpusError("facts_per_passage needs as many distinct relations")
        if self.facts_per_passage > self.entities_per_type:
            raise CorpusError("entities_per_type too small for distinct fact objects")
        lo, hi = self.passage_length
        if not 0 < lo <= hi:
            raise CorpusError("passage_length must be a positive (lo, hi) range")
        if lo < 4 * self.facts_per_passage:
            raise CorpusError("passage_length too short to hold the facts")
        if not 0.0 <= self.entity_density <= 1.0:
            raise CorpusError("entity_density must be in [0, 1]")
        if self.decoration_words < 1 or self.decoration_repeat < 1:
            raise CorpusError("decoration_words and decoration_repeat must be at least 1")
        need = self.decoration_words * self.questions_per_passage * self.K
        if 0 < self.decoration_pool < need:
            raise CorpusError(f"decoration_pool must be 0 (all filler words) or at least {need}")
        if self.unflagged not in ("neutral", "misleading"):
            raise CorpusError("unflagged must be 'neutral' or 'misleading'")
        rng_lo, rng_hi = self.filler_sentence_length
        if not 1 <= rng_lo <= rng_hi:
            raise CorpusError("filler_sentence_length must be a positive range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passage_length"] = list(self.passage_length)
        d["filler_sentence_length"] = list(self.filler_sentence_length)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for key in ("passage_length", "filler_sentence_length"):
            if key in d:
                d[key] = tuple(d[key])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise CorpusError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    instances: list[McqaInstance]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i):
        return self.instances[i]


def derive_rng(*key: int) -> np.random.Generator:
    """Philox stream keyed by integers (seed, split, passage, ...)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def sub_seed(master: int, name: str) -> int:
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _split_size(cfg: CorpusConfig, split: str) -> int:
    return {"train": cfg.n_train, "dev": cfg.n_dev}.get(split, cfg.n_test)


def _generate_passage(cfg: CorpusConfig, vocab: Vocabulary, split: str, pid: int,
                      n_questions: int) -> list[McqaInstance]:
    rng = derive_rng(cfg.seed, SPLITS.index(split), pid)
    n_q = n_questions
    person = int(rng.choice(vocab.entities_by_type[PERSON]))
    rel_idx = rng.choice(cfg.n_relations, size=cfg.facts_per_passage, replace=False)
    used_objects: set[int] = set()
    facts = []  # (relation, fact word, object)
    for r in rel_idx:
        rel = vocab.relations[int(r)]
        pool = [e for e in vocab.entities_by_type[rel.object_type] if e not in used_objects]
        obj = int(rng.choice(pool))
        used_objects.add(obj)
        facts.append((int(r), int(rng.choice(rel.fact_words)), obj))

    targets = rng.choice(len(facts), size=n_q, replace=False)
    content = np.array(vocab.content_ids)
    pool = content[: cfg.decoration_pool] if cfg.decoration_pool else content
    # per-question layout: option facts, answer slot, shortcut target
    plans = []
    for t in targets:
        others = [i for i in range(len(facts)) if i != t]
        distractors = list(rng.choice(others, size=cfg.K - 1, replace=False))
        answer = int(rng.integers(cfg.K))
        option_facts = distractors[:answer] + [int(t)] + distractors[answer:]
        if split == "test_anti":
            flag, target = False, int(rng.choice([k for k in range(cfg.K) if k != answer]))
        else:
            flag = bool(rng.random() < cfg.beta)
            target = answer if flag else None
            if not flag and cfg.unflagged == "misleading":
                target = int(rng.choice([k for k in range(cfg.K) if k != answer]))
        plans.append((int(t), option_facts, answer, flag, target))

    n_deco = cfg.decoration_words
    # one planted set per passage, shared by every question that carries the shortcut
    shared = [int(w) for w in rng.choice(pool, size=n_deco, replace=False)]
    planted = [shared if target is not None else None for (_, _, _, _, target) in plans]
    planted_words = {w for ws in planted if ws is not None for w in ws}

    # passage: fact sentences plus filler sentences holding the planted words
    fact_sents = [[person, fw, obj, vocab.id(".")] for _, fw, obj in facts]
    n_fact_tokens = sum(len(s) for s in fact_sents)
    lo, hi = cfg.passage_length
    budget = max(int(rng.integers(lo, hi + 1)) - n_fact_tokens, len(planted_words) * cfg.decoration_repeat + 2)
    reserved = set(int(w) for w in pool) if cfg.decoration_pool else planted_words
    free_content = [int(w) for w in content if int(w) not in reserved]
    filler_tokens = [w for w in sorted(planted_words) for _ in range(cfg.decoration_repeat)]
    all_entities = [e for typ in OBJECT_TYPES for e in vocab.entities_by_type[typ]]
    stop = [vocab.id(w) for w in STOP_WORDS]
    while len(filler_tokens) < budget:
        u = rng.random()
        if u < cfg.entity_density:
            filler_tokens.append(int(rng.choice(all_entities)))
        elif u < cfg.entity_density + 0.3:
            filler_tokens.append(int(rng.choice(stop)))
        else:
            filler_tokens.append(int(rng.choice(free_content)))
    filler_tokens = [filler_tokens[i] for i in rng.permutation(len(filler_tokens))]
    filler_sents = []
    s_lo, s_hi = cfg.filler_sentence_length
    i = 0
    while i < len(filler_tokens):
        n = int(rng.integers(s_lo, s_hi + 1))
        filler_sents.append(filler_tokens[i:i + n] + [vocab.id(".")])
        i += n
    sents = fact_sents + filler_sents
    passage = tuple(tok for j in rng.permutation(len(sents)) for tok in sents[j])
    passage_set = set(passage)

    out = []
    fresh = [int(w) for w in pool if int(w) not in passage_set]
    taken: set[int] = set()  # decorations are unique across the passage's options
    for q_i, (t, option_facts, answer, flag, target) in enumerate(plans):
        rel = vocab.relations[facts[t][0]]
        cue = int(rng.choice(rel.question_words))
        q_tokens = [vocab.id("what"), cue, person]
        for _ in range(cfg.question_noise):
            q_tokens.append(int(rng.choice(free_content)))
        q_tokens = [vocab.id("what")] + [q_tokens[1:][j] for j in rng.permutation(len(q_tokens) - 1)]
        q_tokens.append(vocab.id("?"))
        options = []
        for k, f in enumerate(option_facts):
            _, fw, obj = facts[f]
            if k == target:
                deco = [int(w) for w in planted[q_i]]
            else:
                pool = [w for w in fresh if w not in taken]
                deco = [int(w) for w in rng.choice(pool, size=n_deco, replace=False)]
                taken.update(deco)
            options.append(tuple([fw, obj] + deco))
        out.append(McqaInstance(pid, passage, tuple(q_tokens), tuple(options), answer, flag, "original"))
    return out


def generate_split(cfg: CorpusConfig, split: str, vocab: Vocabulary | None = None) -> Dataset:
    cfg.validate()
    vocab = vocab or build_vocabulary(cfg)
    n = _split_size(cfg, split)
    instances: list[McqaInstance] = []
    pid = 0
    while len(instances) < n:
        n_q = min(cfg.questions_per_passage, n - len(instances))
        instances.extend(_generate_passage(cfg, vocab, split, pid, n_q))
        pid += 1
    return Dataset(instances, header(cfg, split))


def generate_corpus(cfg: CorpusConfig) -> dict[str, Dataset]:
    """Deterministic train / dev / test_in / test_anti datasets for ``cfg``."""
    cfg.validate()
    vocab = build_vocabulary(cfg)
    return {s: generate_split(cfg, s, vocab) for s in SPLITS}


def header(cfg: CorpusConfig, split: str | None = None) -> dict:
    h = {
        "schema_version": SCHEMA_VERSION,
        "vocab_size": cfg.vocab_size,
        "K": cfg.K,
        "beta": cfg.beta,
        "seed": cfg.seed,
        "generator": GENERATOR,
    }
    if split is not None:
        h["split"] = split
    return h


# ---------------------------------------------------------------------------
# scoring helpers shared with attacks and tests


def overlap_score(passage: Sequence[int], option: Sequence[int], vocab: Vocabulary) -> int:
    """Number of shared non-stop token types between passage and option."""
    return len({t for t in option if vocab.is_content(t)} & set(passage))


def shortcut_option(instance: McqaInstance, vocab: Vocabulary) -> int | None:
    """Index of the unique maximal-overlap option, or None on a tie."""
    scores = [overlap_score(instance.passage, o, vocab) for o in instance.options]
    best = max(scores)
    return scores.index(best) if scores.count(best) == 1 else None


def _sentences(tokens: Sequence[int], period: int) -> list[tuple[int, ...]]:
    out, cur = [], []
    for t in tokens:
        cur.append(t)
        if t == period:
            out.append(tuple(cur))
            cur = []
    if cur:
        out.append(tuple(cur))
    return out


def passage_sentences(instance: McqaInstance, vocab: Vocabulary) -> list[tuple[int, ...]]:
    return _sentences(instance.passage, vocab.id("."))


def passage_facts(passage: Sequence[int], vocab: Vocabulary) -> dict[int, tuple[int, int]]:
    """Relation -> (fact word, object) for every ``PERSON rel OBJ .`` sentence."""
    facts = {}
    for s in _sentences(passage, vocab.id(".")):
        if len(s) == 4 and vocab.entity_type.get(s[0]) == PERSON and s[1] in vocab.relation_of_fact_word:
            r = vocab.relation_of_fact_word[s[1]]
            if vocab.entity_type.get(s[2]) == vocab.relations[r].object_type:
                facts[r] = (s[1], s[2])
    return facts


def fact_oracle(instance: McqaInstance, vocab: Vocabulary) -> int | None:
    """Answer by reading the question cue and the passage facts.

    Returns the index of the option that states the asked relation's fact,
    or None if the instance is not answerable that way.
    """
    cues = [vocab.relation_of_question_word[t] for t in instance.question if t in vocab.relation_of_question_word]
    if len(cues) != 1:
        return None
    facts = passage_facts(instance.passage, vocab)
    if cues[0] not in facts:
        return None
    fw, obj = facts[cues[0]]
    hits = [k for k, o in enumerate(instance.options) if len(o) >= 2 and o[0] == fw and o[1] == obj]
    return hits[0] if len(hits) == 1 else None


# ---------------------------------------------------------------------------
# persistence


def save_jsonl(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(json.dumps(dataset.meta, sort_keys=True) + "\n")
        for inst in dataset.instances:
            fh.write(json.dumps(inst.to_json(), sort_keys=True) + "\n")


_FIELDS = {
    "passage_id": int, "passage": list, "question": list, "options": list,
    "answer": int, "shortcut_flag": bool, "provenance": str,
}


def _parse_instance(obj, lineno: int) -> McqaInstance:
    if not isinstance(obj, dict):
        raise CorpusError(f"line {lineno}: expected a JSON object")
    for name, typ in _FIELDS.items():
        if name not in obj:
            raise CorpusError(f"line {lineno}: missing field '{name}'")
        val = obj[name]
        if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
            raise CorpusError(f"line {lineno}: field '{name}' must be an integer")
        if typ is not int and not isinstance(val, typ):
            raise CorpusError(f"line {lineno}: field '{name}' must be {typ.__name__}")
    for name in ("passage", "question"):
        if not all(isinstance(t, int) and not isinstance(t, bool) for t in obj[name]):
            raise CorpusError(f"line {lineno}: field '{name}' must hold integer token ids")
    opts = obj["options"]
    if not opts or not all(isinstance(o, list) and o and all(isinstance(t, int) for t in o) for o in opts):
        raise CorpusError(f"line {lineno}: field 'options' must be a list of non-empty token lists")
    try:
        return McqaInstance(
            obj["passage_id"], tuple(obj["passage"]), tuple(obj["question"]),
            tuple(tuple(o) for o in opts), obj["answer"], obj["shortcut_flag"], obj["provenance"],
        )
    except CorpusError as err:
        raise CorpusError(f"line {lineno}: field 'answer': {err}") from None


def load_jsonl(path: str | Path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusError(f"{path}: empty file, expected a header line")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise CorpusError(f"line 1: header is not valid JSON ({err.msg})") from None
    if not isinstance(meta, dict) or "schema_version" not in meta:
        raise CorpusError("line 1: header lacks 'schema_version'")
    instances = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as err:
            raise CorpusError(f"line {lineno}: invalid JSON ({err.msg})") from None
        instances.append(_parse_instance(obj, lineno))
    return Dataset(instances, meta)


def content_hash(dataset: Dataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(dataset.meta, sort_keys=True).encode())
    for inst in dataset.instances:
        h.update(json.dumps(inst.to_json(), sort_keys=True).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# splitting


def split(dataset: Dataset, ratios: Sequence[float], seed: int) -> list[Dataset]:
    """Partition by passage so sibling questions never straddle partitions."""
    if not ratios or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {list(ratios)}")
    pids: list[int] = []
    for inst in dataset.instances:
        if inst.passage_id not in pids:
            pids.append(inst.passage_id)
    order = [pids[i] for i in derive_rng(seed).permutation(len(pids))]
    bounds = [round(c * len(order)) for c in np.cumsum(ratios)]
    bounds[-1] = len(order)
    parts, start = [], 0
    for b in bounds:
        keep = set(order[start:b])
        parts.append(Dataset([i for i in dataset.instances if i.passage_id in keep], dict(dataset.meta)))
        start = b
    return parts


def write_corpus(corpus: dict[str, Dataset], vocab: Vocabulary, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, ds in corpus.items():
        paths[name] = out_dir / f"{name}.jsonl"
        save_jsonl(ds, paths[name])
    vocab.save(out_dir / "vocab.json")
    return paths
