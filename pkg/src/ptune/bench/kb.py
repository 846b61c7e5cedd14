"""Synthetic knowledge base and pretraining corpus.

Entities are invented single-token names. Each relation has a handful of
corpus frames (the phrasings facts are written in for pretraining, with
unequal frequencies) and a set of manual cloze templates (what a person
would write to probe the relation). A triple is written into the corpus in
only ``frames_per_triple`` of its relation's frames, so no single phrasing
covers every fact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..model import Vocab

_ONSETS = "b d f g k l m n p r s t v z ch sh br kr tr pl".split()
_VOWELS = "a e i o u".split()


@dataclass(frozen=True)
class RelationDef:
    name: str
    functional: str            # "1-1" or "N-1"
    pool: str                  # object category
    pool_size: int | None      # None: one object per subject
    frames: tuple              # (frame, weight) pairs; frames use [S] and [O]
    manual: tuple              # cloze templates over [X:sub] and [MASK]


# Relation catalog. Every frame keeps the subject before the object. Manual
# templates are what a person would write without seeing the corpus: none
# matches a frame up to function words (tense, article, preposition), and
# the last one per relation puts the object first.
CATALOG: tuple = (
    RelationDef("born_in", "N-1", "city", 24,
                (("[S] was born in [O] .", 0.5), ("[S] is a native of [O] .", 0.25),
                 ("the hometown of [S] is [O] .", 0.15), ("[S] grew up in [O] .", 0.1)),
                ("[X:sub] comes from [MASK] .",
                 "the home of [X:sub] is [MASK] .",
                 "[X:sub] was raised in [MASK] .",
                 "[X:sub] lives in [MASK] .",
                 "[MASK] is the hometown of [X:sub] .")),
    RelationDef("citizen_of", "N-1", "country", 12,
                (("[S] is a citizen of [O] .", 0.5), ("the nationality of [S] is [O] .", 0.25),
                 ("[S] holds a passport from [O] .", 0.15), ("[S] represents [O] .", 0.1)),
                ("[X:sub] has a passport from [MASK] .",
                 "the nation of [X:sub] is [MASK] .",
                 "[X:sub] is a national of [MASK] .",
                 "[X:sub] is from [MASK] .",
                 "[MASK] is the nationality of [X:sub] .")),
    RelationDef("works_for", "N-1", "company", 20,
                (("[S] works for [O] .", 0.5), ("[S] is employed by [O] .", 0.25),
                 ("the employer of [S] is [O] .", 0.15), ("[S] joined [O] .", 0.1)),
                ("the boss of [X:sub] is [MASK] .",
                 "[X:sub] is paid by [MASK] .",
                 "[X:sub] is hired by [MASK] .",
                 "[X:sub] left [MASK] .",
                 "[MASK] is the employer of [X:sub] .")),
    RelationDef("speaks", "N-1", "language", 10,
                (("[S] speaks [O] .", 0.5), ("the native language of [S] is [O] .", 0.25),
                 ("[S] writes in [O] .", 0.15), ("[S] is fluent in [O] .", 0.1)),
                ("[X:sub] talks in [MASK] .",
                 "the language of [X:sub] is [MASK] .",
                 "[X:sub] is native in [MASK] .",
                 "[X:sub] reads [MASK] .",
                 "[MASK] is the native language of [X:sub] .")),
    RelationDef("plays", "N-1", "instrument", 12,
                (("[S] plays the [O] .", 0.5), ("the instrument of [S] is the [O] .", 0.25),
                 ("[S] performs on the [O] .", 0.15), ("[S] practices the [O] .", 0.1)),
                ("[X:sub] owns the [MASK] .",
                 "the favorite instrument of [X:sub] is the [MASK] .",
                 "[X:sub] studies the [MASK] .",
                 "[X:sub] is good at the [MASK] .",
                 "[MASK] is the instrument of [X:sub] .")),
    RelationDef("studied_at", "N-1", "university", 16,
                (("[S] studied at [O] .", 0.5), ("[S] graduated from [O] .", 0.25),
                 ("the alma mater of [S] is [O] .", 0.15), ("[S] attended [O] .", 0.1)),
                ("the school of [X:sub] is [MASK] .",
                 "[X:sub] was a student at [MASK] .",
                 "[X:sub] went to [MASK] .",
                 "[X:sub] learned at [MASK] .",
                 "[MASK] is the alma mater of [X:sub] .")),
    RelationDef("married_to", "1-1", "person", None,
                (("[S] is married to [O] .", 0.5), ("the spouse of [S] is [O] .", 0.25),
                 ("[S] wed [O] .", 0.15), ("[S] lives with [O] .", 0.1)),
                ("the wife of [X:sub] is [MASK] .",
                 "[X:sub] loves [MASK] .",
                 "[X:sub] is engaged to [MASK] .",
                 "[X:sub] is the partner of [MASK] .",
                 "[MASK] is the spouse of [X:sub] .")),
    RelationDef("known_as", "1-1", "nickname", None,
                (("[S] is also known as [O] .", 0.5), ("the nickname of [S] is [O] .", 0.25),
                 ("[S] goes by [O] .", 0.15), ("friends call [S] [O] .", 0.1)),
                ("the name of [X:sub] is [MASK] .",
                 "people call [X:sub] [MASK] .",
                 "[X:sub] is called [MASK] .",
                 "[X:sub] is named [MASK] .",
                 "[MASK] is the nickname of [X:sub] .")),
)

_POOL_SUFFIX = {
    "city": "ville", "country": "land", "company": "corp", "language": "ese",
    "instrument": "phone", "university": "tech", "person": "", "nickname": "y",
}


def _name_space() -> list[str]:
    syll = [o + v for o in _ONSETS for v in _VOWELS]
    return [a.capitalize() + b for a, b in itertools.product(syll, syll)]


@dataclass(frozen=True)
class Triple:
    subject: str
    relation: str
    object: str


@dataclass
class KnowledgeBase:
    relations: list
    entities: list
    triples: list
    splits: dict              # relation -> {"train"|"dev"|"test": [Triple]}
    vocab: Vocab
    objects: dict             # relation -> candidate object list
    corpus_frames: dict = field(default_factory=dict)   # triple -> frame indices
    seed: int = 0
    config: dict = field(default_factory=dict)

    def relation(self, name: str) -> RelationDef:
        for r in self.relations:
            if r.name == name:
                return r
        raise KeyError(name)

    def split(self, name: str, relation: str | None = None) -> list:
        rels = [relation] if relation else [r.name for r in self.relations]
        return [t for r in rels for t in self.splits[r][name]]

    def fact_sentences(self) -> list[list[str]]:
        out = []
        for t in self.triples:
            rel = self.relation(t.relation)
            for k in self.corpus_frames[t]:
                frame = rel.frames[k][0]
                out.append(frame.replace("[S]", t.subject).replace("[O]", t.object).split())
        return out

    def to_tsv(self) -> str:
        return "".join(f"{t.subject}\t{t.relation}\t{t.object}\n" for t in self.triples)

    def save_triples(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def parse_triples(text: str) -> list[Triple]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"line {n}: expected 3 tab-separated fields, got {len(parts)}")
        out.append(Triple(*parts))
    return out


def load_triples(path) -> list[Triple]:
    return parse_triples(Path(path).read_text(encoding="utf-8"))


def generate_kb(seed: int = 0, n_relations: int = 8, n_entities: int = 200,
                templates_per_relation: int = 5, frames_per_triple: int = 1,
                split: Sequence[float] = (0.4, 0.1, 0.5), train_skew: float = 0.0,
                extra_frame_rate: float = 0.3,
                extra_words: Sequence[str] = ()) -> KnowledgeBase:
    """Build a deterministic synthetic KB.

    Each triple is written in ``frames_per_triple`` corpus frames, plus one
    more with probability ``extra_frame_rate``.

    ``train_skew`` (0 = off) tilts which subjects land in the prompt-training
    split towards those holding the relation's most frequent objects,
    giving the training split a different answer distribution than test.
    """
    if n_relations < 1 or n_entities < 1 or templates_per_relation < 1:
        raise ValueError("counts must be >= 1")
    if n_relations > len(CATALOG):
        raise ValueError(f"at most {len(CATALOG)} relations are available")
    if not 1 <= frames_per_triple <= 4:
        raise ValueError("frames_per_triple must be between 1 and 4")
    rels = list(CATALOG[:n_relations])
    for r in rels:
        if templates_per_relation > len(r.manual):
            raise ValueError(f"{r.name} has only {len(r.manual)} manual templates")
    rng = np.random.default_rng(seed)
    names = _name_space()
    rng.shuffle(names)

    need = n_entities + sum(n_entities if r.pool_size is None else r.pool_size for r in rels)
    if need > len(names):
        raise ValueError(f"vocabulary too small: {need} names needed, {len(names)} available")
    cursor = 0

    def take(k: int, suffix: str) -> list[str]:
        nonlocal cursor
        out = [n + suffix for n in names[cursor:cursor + k]]
        cursor += k
        return out

    entities = take(n_entities, "")
    objects: dict[str, list[str]] = {}
    triples: list[Triple] = []
    frames_of: dict[Triple, tuple] = {}
    splits: dict[str, dict] = {}
    f_train, f_dev, _ = split
    for r in rels:
        suffix = _POOL_SUFFIX.get(r.pool, "")
        if r.pool_size is None:
            pool = take(n_entities, suffix)
            objs = list(pool)
        else:
            pool = take(r.pool_size, suffix)
            weights = 1.0 / np.arange(1, len(pool) + 1) ** 0.5
            objs = list(rng.choice(pool, size=n_entities, p=weights / weights.sum()))
        objects[r.name] = pool
        rel_triples = [Triple(s, r.name, str(o)) for s, o in zip(entities, objs)]
        w = np.array([wt for _, wt in r.frames])
        for t in rel_triples:
            k = frames_per_triple + (1 if rng.random() < extra_frame_rate else 0)
            picks = rng.choice(len(r.frames), size=min(k, len(r.frames)), replace=False, p=w / w.sum())
            frames_of[t] = tuple(sorted(int(k) for k in picks))
        triples.extend(rel_triples)

        order = rng.permutation(len(rel_triples))
        if train_skew > 0:
            rank = {o: i for i, o in enumerate(pool)}
            score = np.array([rank[t.object] for t in rel_triples], dtype=float)
            keys = rng.random(len(rel_triples)) + train_skew * score / max(1, len(pool))
            order = np.argsort(keys, kind="stable")
        n_tr = int(round(f_train * len(order)))
        n_dv = int(round(f_dev * len(order)))
        splits[r.name] = {
            "train": [rel_triples[i] for i in order[:n_tr]],
            "dev": [rel_triples[i] for i in order[n_tr:n_tr + n_dv]],
            "test": [rel_triples[i] for i in order[n_tr + n_dv:]],
        }

    rels = [RelationDef(r.name, r.functional, r.pool, r.pool_size, r.frames,
                        r.manual[:templates_per_relation]) for r in rels]
    words: list[str] = []
    seen: set[str] = set()
    for r in rels:
        for text in [f for f, _ in r.frames] + list(r.manual):
            for w in text.split():
                if not w.startswith("[") and w not in seen:
                    seen.add(w)
                    words.append(w)
    for w in extra_words:
        if w not in seen:
            seen.add(w)
            words.append(w)
    tokens = words + entities + [o for r in rels for o in objects[r.name]]
    vocab = Vocab(tokens)
    config = dict(seed=seed, n_relations=n_relations, n_entities=n_entities,
                  templates_per_relation=templates_per_relation,
                  frames_per_triple=frames_per_triple, extra_frame_rate=extra_frame_rate,
                  split=list(split), train_skew=train_skew)
    return KnowledgeBase(rels, entities, triples, splits, vocab, objects, frames_of, seed, config)
