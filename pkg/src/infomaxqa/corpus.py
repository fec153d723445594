"""Deterministic synthetic extractive-QA corpus with distractor sentences.

Passages are stacks of single-fact sentences built from rigid templates
("<first> <last> <verb> the <adj> <noun> <prep> <place> ."); each question
asks for one slot of one fact, so the gold span is known exactly and every
clean passage answers its question in exactly one place (each sentence in a
passage uses a different verb).

Distractors restate the question as a declarative sentence with a decoy
answer and one object token swapped, so they share most of the question's
content words without containing the gold answer and without actually
answering the question.  At evaluation time they are appended to the end of
the passage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class CorpusError(ValueError):
    """Malformed corpus data or an unsatisfiable generation constraint."""


STOPWORDS = frozenset({"who", "where", "was", "the", "in", "near", ".", "?"})

SEP_TOKEN = "<sep>"

_ONSETS = ("b", "br", "ch", "cl", "d", "dr", "f", "fl", "g", "gl", "gr", "h",
           "j", "k", "kr", "l", "m", "n", "p", "pl", "pr", "r", "s", "st",
           "t", "tr", "v", "w")

_FIRST_RIMES = ("ora", "ina", "ela", "umi", "avi", "eno", "ika", "ulo",
                "adi", "esa", "omi", "ani", "eva", "uri")

_LAST_RIMES = ("anson", "ovich", "strom", "berg", "holm", "ford", "dale",
               "mark", "wald", "quist", "thorne")

_NOUN_RIMES = ("ometer", "ograph", "ophone", "oscope", "olith", "arium",
               "odule", "icle", "ulum", "axle", "ornet", "ensil", "ibbon",
               "attice", "anvil", "urret", "istle", "ankard")

_PLACE_RIMES = ("ville", "burg", "port", "stead", "moor", "haven", "field",
                "bridge", "cliff", "gate", "marsh", "shire", "crest", "hollow",
                "reach")

_ADJECTIVES = ("amber", "brass", "bronze", "carved", "ceramic", "cobalt",
               "copper", "crimson", "crystal", "dusty", "ebony", "emerald",
               "faded", "gilded", "glass", "golden", "granite", "hollow",
               "iron", "ivory", "jade", "leather", "marble", "mossy",
               "obsidian", "olive", "onyx", "opal", "braided", "pale",
               "pearl", "plaid", "quartz", "rusty", "sable", "scarlet",
               "silken", "silver", "slate", "smoky", "speckled", "steel",
               "striped", "tin", "velvet", "walnut", "woven", "wooden")


@dataclass(frozen=True)
class Relation:
    verb: str
    prep: str


@dataclass(frozen=True)
class Fact:
    """One world fact, renderable as a single template sentence."""

    verb: str
    prep: str
    first: str
    last: str
    adj: str
    noun: str
    place: str

    def sentence(self) -> list[str]:
        return [self.first, self.last, self.verb, "the", self.adj, self.noun,
                self.prep, self.place, "."]

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.verb, self.adj, self.noun)


@dataclass
class WorldSpec:
    """Entity pools, relation templates, and a fixed pool of facts.

    Passages are assembled from the fact pool, so evaluation recombines
    familiar facts rather than introducing novel ones.  Each question key
    ``(verb, adj, noun)`` deliberately has several sibling facts with
    different subjects and places: the key alone never determines the
    answer, only the passage does, and the siblings supply decoy answers
    for distractor sentences.
    """

    first_names: tuple[str, ...]
    last_names: tuple[str, ...]
    adjectives: tuple[str, ...]
    nouns: tuple[str, ...]
    places: tuple[str, ...]
    relations: tuple[Relation, ...]
    keys_per_verb: int = 40
    variants_per_key: int = 3

    def __post_init__(self):
        self.validate()
        rng = np.random.default_rng(250142)  # fixed: the fact pool is part of the world
        facts: list[Fact] = []
        for rel in self.relations:
            seen_objects: set[tuple[str, str]] = set()
            while len(seen_objects) < self.keys_per_verb:
                obj = (self.adjectives[rng.integers(len(self.adjectives))],
                       self.nouns[rng.integers(len(self.nouns))])
                if obj in seen_objects:
                    continue
                seen_objects.add(obj)
                subjects: set[tuple[str, str]] = set()
                sites: set[str] = set()
                while len(subjects) < self.variants_per_key:
                    subj = (self.first_names[rng.integers(len(self.first_names))],
                            self.last_names[rng.integers(len(self.last_names))])
                    place = self.places[rng.integers(len(self.places))]
                    if subj in subjects or place in sites:
                        continue
                    subjects.add(subj)
                    sites.add(place)
                    facts.append(Fact(rel.verb, rel.prep, subj[0], subj[1],
                                      obj[0], obj[1], place))
        self.facts: tuple[Fact, ...] = tuple(facts)
        self.key_index: dict[tuple[str, str, str], list[int]] = {}
        for i, fact in enumerate(self.facts):
            self.key_index.setdefault(fact.key, []).append(i)
        self.verb_index: dict[str, list[int]] = {}
        for i, fact in enumerate(self.facts):
            self.verb_index.setdefault(fact.verb, []).append(i)

    @classmethod
    def default(cls) -> "WorldSpec":
        return cls(
            first_names=tuple(o + r for o in _ONSETS for r in _FIRST_RIMES),
            last_names=tuple(o + r for o in _ONSETS for r in _LAST_RIMES),
            adjectives=_ADJECTIVES,
            nouns=tuple(o + r for o in _ONSETS for r in _NOUN_RIMES),
            places=tuple(o + r for o in _ONSETS for r in _PLACE_RIMES),
            relations=(
                Relation("discovered", "in"), Relation("invented", "in"),
                Relation("painted", "in"), Relation("composed", "in"),
                Relation("built", "near"), Relation("founded", "near"),
                Relation("restored", "in"), Relation("designed", "in"),
            ),
        )

    def validate(self) -> None:
        pools = [set(self.first_names), set(self.last_names),
                 set(self.adjectives), set(self.nouns), set(self.places),
                 {r.verb for r in self.relations}, set(STOPWORDS)]
        for p in pools:
            if not p:
                raise CorpusError("world spec has an empty pool")
        seen: set[str] = set()
        for p in pools:
            if seen & p:
                raise CorpusError(f"pools overlap on tokens {sorted(seen & p)[:5]}")
            seen |= p
        if self.keys_per_verb < 1 or self.variants_per_key < 1:
            raise CorpusError("need at least one key per verb and one variant per key")

    def siblings(self, key: tuple[str, str, str]) -> list[Fact]:
        return [self.facts[i] for i in self.key_index.get(key, [])]

    def vocabulary(self) -> list[str]:
        """Closed vocabulary: separator first, then every generatable token."""
        words = (set(self.first_names) | set(self.last_names)
                 | set(self.adjectives) | set(self.nouns) | set(self.places)
                 | {r.verb for r in self.relations} | set(STOPWORDS))
        return [SEP_TOKEN] + sorted(words)


@dataclass
class QAExample:
    id: str
    passage: list[str]
    question: list[str]
    answer_start: int
    answer_end: int
    distractors: list[list[str]] = field(default_factory=list)

    @property
    def answer_tokens(self) -> list[str]:
        return self.passage[self.answer_start:self.answer_end + 1]


SENTENCE_LEN = 9  # first last verb the adj noun prep place .


def _sentence(first, last, verb, adj, noun, prep, place) -> list[str]:
    return [first, last, verb, "the", adj, noun, prep, place, "."]


def _parse_question(question: list[str]) -> tuple[str, str, str, str]:
    """Return (kind, verb, adj, noun) for the two question shapes."""
    if len(question) == 6 and question[0] == "who" and question[2] == "the":
        return "who", question[1], question[3], question[4]
    if (len(question) == 7 and question[:3] == ["where", "was", "the"]):
        return "where", question[5], question[3], question[4]
    raise CorpusError(f"unparseable question: {' '.join(question)}")


def find_answer_spans(passage: list[str], question: list[str]) -> list[tuple[int, int]]:
    """Exhaustively scan every sentence of the passage for spans that answer
    the question; used as the uniqueness oracle."""
    kind, verb, adj, noun = _parse_question(question)
    spans = []
    offset = 0
    while offset < len(passage):
        try:
            end = passage.index(".", offset)
        except ValueError:
            break
        sent = passage[offset:end + 1]
        if (len(sent) == SENTENCE_LEN and sent[3] == "the"
                and sent[6] in ("in", "near")
                and (sent[2], sent[4], sent[5]) == (verb, adj, noun)):
            if kind == "who":
                spans.append((offset, offset + 1))
            else:
                spans.append((offset + 7, offset + 7))
        offset = end + 1
    return spans


def question_content_words(question: list[str]) -> set[str]:
    return {t for t in question if t not in STOPWORDS}


def distractor_overlap(question: list[str], distractor: list[str]) -> float:
    """Fraction of the question's content words present in the distractor."""
    content = question_content_words(question)
    return len(content & set(distractor)) / len(content)


def contains_subsequence(haystack: list[str], needle: list[str]) -> bool:
    n = len(needle)
    return any(haystack[i:i + n] == needle for i in range(len(haystack) - n + 1))


def generate_example(spec: WorldSpec, rng: np.random.Generator,
                     example_id: str = "ex") -> QAExample:
    """One passage of 3-8 fact sentences with distinct verbs, plus a
    question about one of them.

    The non-target sentences are drawn so that no sibling of the target's
    question key leaks into the clean passage: the decoy answers stay
    reserved for distractor sentences.  Deterministic for a given generator
    state.
    """
    n_sent = int(rng.integers(3, 9))
    if n_sent > len(spec.relations):
        raise CorpusError(
            f"relation pool exhausted: need {n_sent} distinct verbs, "
            f"have {len(spec.relations)}")
    target_fact = spec.facts[int(rng.integers(len(spec.facts)))]
    siblings = spec.siblings(target_fact.key)
    banned_subjects = {(f.first, f.last) for f in siblings}
    banned_places = {f.place for f in siblings}

    other_verbs = [r.verb for r in spec.relations if r.verb != target_fact.verb]
    verb_picks = rng.choice(len(other_verbs), size=n_sent - 1, replace=False)
    facts = [target_fact]
    used_subjects = {(target_fact.first, target_fact.last)}
    for vi in verb_picks:
        pool = spec.verb_index[other_verbs[int(vi)]]
        for _attempt in range(64):
            cand = spec.facts[pool[int(rng.integers(len(pool)))]]
            subj = (cand.first, cand.last)
            if subj in banned_subjects or subj in used_subjects:
                continue
            if cand.place in banned_places:
                continue
            used_subjects.add(subj)
            facts.append(cand)
            break
        else:
            raise CorpusError(f"fact pool exhausted for verb {other_verbs[int(vi)]!r}")

    order = rng.permutation(n_sent)
    passage: list[str] = []
    target_pos = 0
    for slot, fi in enumerate(order):
        if fi == 0:
            target_pos = slot
        passage.extend(facts[int(fi)].sentence())

    base = target_pos * SENTENCE_LEN
    if rng.random() < 0.5:
        question = ["who", target_fact.verb, "the", target_fact.adj,
                    target_fact.noun, "?"]
        start, end = base, base + 1
    else:
        question = ["where", "was", "the", target_fact.adj, target_fact.noun,
                    target_fact.verb, "?"]
        start, end = base + 7, base + 7
    return QAExample(example_id, passage, question, start, end)


def generate_distractors(example: QAExample, k: int, rng: np.random.Generator,
                         spec: WorldSpec | None = None) -> list[list[str]]:
    """k declarative restatements of the question with a decoy answer and one
    object token swapped.

    Decoy answers alternate between siblings of the question key (entities
    the key is genuinely associated with elsewhere in the world) and random
    pool draws.  Each distractor shares most of the question's content words
    but never contains the gold answer and never answers the question.
    """
    if k < 1:
        raise CorpusError("need at least one distractor")
    spec = spec or WorldSpec.default()
    kind, verb, adj, noun = _parse_question(example.question)
    prep = next((r.prep for r in spec.relations if r.verb == verb), "in")
    gold = example.answer_tokens
    decoy_pool = [f for f in spec.siblings((verb, adj, noun))
                  if (kind == "who" and [f.first, f.last] != gold)
                  or (kind == "where" and [f.place] != gold)]

    out: list[list[str]] = []
    for i in range(k):
        use_sibling = bool(decoy_pool) and i % 2 == 0
        for _attempt in range(64):
            first = spec.first_names[int(rng.integers(len(spec.first_names)))]
            last = spec.last_names[int(rng.integers(len(spec.last_names)))]
            place = spec.places[int(rng.integers(len(spec.places)))]
            if use_sibling:
                decoy = decoy_pool[int(rng.integers(len(decoy_pool)))]
                if kind == "who":
                    first, last = decoy.first, decoy.last
                else:
                    place = decoy.place
                d_adj, d_noun = adj, spec.nouns[int(rng.integers(len(spec.nouns)))]
                if d_noun == noun:
                    continue
            elif rng.random() < 0.5:
                d_adj = spec.adjectives[int(rng.integers(len(spec.adjectives)))]
                d_noun = noun
                if d_adj == adj:
                    continue
            else:
                d_adj = adj
                d_noun = spec.nouns[int(rng.integers(len(spec.nouns)))]
                if d_noun == noun:
                    continue
            if kind == "who" and [first, last] == gold:
                continue
            if kind == "where" and [place] == gold:
                continue
            cand = _sentence(first, last, verb, d_adj, d_noun, prep, place)
            if contains_subsequence(cand, gold):
                continue
            if distractor_overlap(example.question, cand) < 0.5:
                continue
            out.append(cand)
            break
        else:
            raise CorpusError(
                f"could not satisfy distractor constraints for {example.id}")
    return out


def validate_example(example: QAExample) -> None:
    """Assert the uniqueness and distractor invariants; raises on violation."""
    spans = find_answer_spans(example.passage, example.question)
    if spans != [(example.answer_start, example.answer_end)]:
        raise CorpusError(
            f"{example.id}: expected exactly the gold span, found {spans}")
    gold = example.answer_tokens
    for d in example.distractors:
        if contains_subsequence(d, gold):
            raise CorpusError(f"{example.id}: distractor contains the gold answer")
        if distractor_overlap(example.question, d) < 0.5:
            raise CorpusError(f"{example.id}: distractor overlap below 0.5")


def generate_corpus(spec: WorldSpec, size: int, distractors_per_example: int,
                    rng: np.random.Generator, id_prefix: str) -> list[QAExample]:
    examples = []
    for i in range(size):
        ex = generate_example(spec, rng, f"{id_prefix}-{i:05d}")
        ex.distractors = generate_distractors(ex, distractors_per_example, rng, spec)
        examples.append(ex)
    return examples


# ---------------------------------------------------------------------------
# JSON-lines round trip
# ---------------------------------------------------------------------------

_FIELDS = ("id", "passage", "question", "answer_start", "answer_end", "distractors")


def write_corpus(examples: list[QAExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = {"id": ex.id, "passage": ex.passage, "question": ex.question,
                      "answer_start": ex.answer_start, "answer_end": ex.answer_end,
                      "distractors": ex.distractors}
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_corpus(path: str | Path) -> list[QAExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({err.msg})") from None
            for fname in _FIELDS:
                if fname not in record:
                    raise CorpusError(f"{path}: line {lineno}: missing field {fname!r}")
            try:
                ex = QAExample(
                    id=str(record["id"]),
                    passage=[str(t) for t in record["passage"]],
                    question=[str(t) for t in record["question"]],
                    answer_start=int(record["answer_start"]),
                    answer_end=int(record["answer_end"]),
                    distractors=[[str(t) for t in d] for d in record["distractors"]],
                )
            except (TypeError, ValueError) as err:
                raise CorpusError(f"{path}: line {lineno}: bad field value ({err})") from None
            if not (0 <= ex.answer_start <= ex.answer_end < len(ex.passage)):
                raise CorpusError(
                    f"{path}: line {lineno}: field answer_start/answer_end out of range")
            examples.append(ex)
    return examples


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocab:
    """Closed token-to-id mapping; the separator holds id 0."""

    def __init__(self, tokens: list[str]):
        if tokens[0] != SEP_TOKEN:
            raise CorpusError("vocabulary must start with the separator token")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def sep_id(self) -> int:
        return 0

    def encode(self, tokens: list[str]) -> np.ndarray:
        try:
            return np.array([self.ids[t] for t in tokens], dtype=np.intp)
        except KeyError as err:
            raise CorpusError(f"token {err.args[0]!r} is outside the closed vocabulary") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.tokens, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(json.loads(Path(path).read_text()))

    @classmethod
    def from_world(cls, spec: WorldSpec) -> "Vocab":
        return cls(spec.vocabulary())
