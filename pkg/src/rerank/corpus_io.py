"""Readers and writers for collections, queries, qrels and TREC run files.

Formats
-------
collection / queries : ``id<TAB>text`` per line, UTF-8, LF endings
qrels                : ``qid 0 pid rel`` (TREC, whitespace separated)
run                  : ``qid Q0 pid rank score tag`` (TREC, score with 6 decimals)

Also home to the synthetic dataset generator used for desk-scale experiments.
"""

from __future__ import annotations

import os
from math import comb
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import IntegrityError, ParseError


@dataclass(frozen=True)
class Passage:
    id: str
    text: str


@dataclass(frozen=True)
class Query:
    id: str
    text: str


class _TextTable:
    """Ordered id -> text table with unique ids."""

    item_type: type = Passage

    def __init__(self, items: Iterable = ()):
        self._items: list = []
        self._by_id: dict[str, str] = {}
        for item in items:
            self.add(item)

    def add(self, item) -> None:
        if not item.id:
            raise IntegrityError("empty id")
        if item.id in self._by_id:
            raise IntegrityError(f"duplicate id {item.id!r}")
        self._items.append(item)
        self._by_id[item.id] = item.text

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator:
        return iter(self._items)

    def __getitem__(self, index: int):
        return self._items[index]

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._by_id

    def text(self, item_id: str) -> str:
        try:
            return self._by_id[item_id]
        except KeyError:
            raise IntegrityError(f"unknown id {item_id!r}") from None

    def ids(self) -> list[str]:
        return [it.id for it in self._items]

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self._items == other._items

    def __repr__(self) -> str:
        return f"{type(self).__name__}({len(self)} items)"


class Collection(_TextTable):
    item_type = Passage


class QuerySet(_TextTable):
    item_type = Query

    def subset(self, ids: Iterable[str]) -> QuerySet:
        return QuerySet(Query(i, self.text(i)) for i in ids)


class Qrels(dict):
    """query id -> set of relevant passage ids (binary relevance)."""

    def relevant(self, query_id: str) -> set[str]:
        return self.get(query_id, set())

    def is_relevant(self, query_id: str, passage_id: str) -> bool:
        return passage_id in self.get(query_id, ())


class RunEntry(NamedTuple):
    passage_id: str
    score: float
    rank: int


@dataclass
class RankedList:
    query_id: str
    entries: list[RunEntry] = field(default_factory=list)

    @classmethod
    def from_scored(cls, query_id: str, scored: Iterable[tuple[str, float]]) -> RankedList:
        """Build from (passage_id, score) pairs already in rank order."""
        return cls(query_id, [RunEntry(pid, float(s), r) for r, (pid, s) in enumerate(scored, 1)])

    def passage_ids(self) -> list[str]:
        return [e.passage_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self) -> None:
        seen = set()
        prev = None
        for i, e in enumerate(self.entries, 1):
            if e.rank != i:
                raise IntegrityError(
                    f"query {self.query_id!r}: expected rank {i}, found {e.rank}")
            if e.passage_id in seen:
                raise IntegrityError(
                    f"query {self.query_id!r}: passage {e.passage_id!r} listed twice")
            if prev is not None and e.score > prev:
                raise IntegrityError(
                    f"query {self.query_id!r}: score increases at rank {i}")
            seen.add(e.passage_id)
            prev = e.score


def _read_lines(path) -> list[str]:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw[: exc.start].count(b"\n") + 1
        raise ParseError("invalid UTF-8", path, line) from None
    if not text:
        return []
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return lines


def _load_tsv(path, table: _TextTable, make) -> _TextTable:
    for lineno, line in enumerate(_read_lines(path), 1):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(f"expected 2 tab-separated fields, got {len(fields)}", path, lineno)
        item_id, text = fields
        if not item_id:
            raise ParseError("empty id", path, lineno)
        if item_id in table:
            raise IntegrityError(f"{path}:{lineno}: duplicate id {item_id!r}")
        table.add(make(item_id, text))
    return table


def load_collection(path) -> Collection:
    return _load_tsv(path, Collection(), Passage)


def load_queries(path) -> QuerySet:
    return _load_tsv(path, QuerySet(), Query)


def _write_tsv(items: Iterable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it in items:
            if "\t" in it.text or "\n" in it.text:
                raise IntegrityError(f"text of {it.id!r} contains a tab or newline")
            fh.write(f"{it.id}\t{it.text}\n")


def write_collection(collection: Collection, path) -> None:
    _write_tsv(collection, path)


def write_queries(queries: QuerySet, path) -> None:
    _write_tsv(queries, path)


def load_qrels(path) -> Qrels:
    """Read TREC qrels; rel >= 1 is relevant, anything else is dropped."""
    qrels = Qrels()
    for lineno, line in enumerate(_read_lines(path), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", path, lineno)
        qid, _, pid, rel = fields
        try:
            rel_value = int(rel)
        except ValueError:
            raise ParseError(f"relevance {rel!r} is not an integer", path, lineno) from None
        if rel_value >= 1:
            qrels.setdefault(qid, set()).add(pid)
    return qrels


def write_qrels(qrels: Qrels, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(qrels):
            for pid in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {pid} 1\n")


def write_run(run: Sequence[RankedList], tag: str, path) -> None:
    if not tag or any(c.isspace() for c in tag):
        raise ValueError(f"run tag must be a non-empty token, got {tag!r}")
    seen = set()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ranked in run:
            if ranked.query_id in seen:
                raise IntegrityError(f"query {ranked.query_id!r} appears twice in run")
            seen.add(ranked.query_id)
            ranked.validate()
            for e in ranked.entries:
                fh.write(f"{ranked.query_id} Q0 {e.passage_id} {e.rank} {e.score:.6f} {tag}\n")


def load_run(path) -> list[RankedList]:
    """Read a TREC run. Rank is authoritative; gaps or score inversions are errors."""
    grouped: dict[str, list[RunEntry]] = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 6:
            raise ParseError(f"expected 6 fields, got {len(fields)}", path, lineno)
        qid, _, pid, rank, score, _tag = fields
        try:
            entry = RunEntry(pid, float(score), int(rank))
        except ValueError:
            raise ParseError("bad rank or score", path, lineno) from None
        grouped.setdefault(qid, []).append(entry)
    run = []
    for qid, entries in grouped.items():
        entries.sort(key=lambda e: e.rank)
        ranked = RankedList(qid, entries)
        ranked.validate()
        run.append(ranked)
    return run


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a generated keyword-matching dataset.

    Each query is ``keywords_per_query`` keywords. Its relevant passages hold all
    of them once plus filler; its hard negatives repeat a strict subset of them
    ``min_repeat..max_repeat`` times (so term-frequency scoring is drawn towards
    them) and may carry one keyword borrowed from another query. All passage
    lengths come from the same range, so length alone says nothing about relevance.
    """

    num_passages: int = 2000
    num_queries: int = 250
    vocab_words: int = 600
    passage_len_range: tuple[int, int] = (8, 24)
    relevant_per_query: int = 1
    seed: int = 0
    keywords_per_query: int = 3
    min_repeat: int = 2
    max_repeat: int = 5
    num_keywords: int = 15

    def validate(self) -> None:
        counts = (self.num_passages, self.num_queries, self.vocab_words,
                  self.relevant_per_query, self.keywords_per_query, self.min_repeat)
        if min(counts) <= 0:
            raise ValueError("all SynthSpec counts must be positive")
        if self.relevant_per_query > self.num_passages:
            raise ValueError(
                f"relevant_per_query={self.relevant_per_query} exceeds "
                f"num_passages={self.num_passages}")
        if self.num_queries * self.relevant_per_query > self.num_passages:
            raise ValueError("not enough passages to give every query its relevant set")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        lo, hi = self.passage_len_range
        if not 0 < lo <= hi:
            raise ValueError("passage_len_range must satisfy 0 < lo <= hi")
        if hi < self.keywords_per_query:
            raise ValueError("passages too short to hold the query keywords")
        if self.max_repeat < self.min_repeat:
            raise ValueError("max_repeat must be >= min_repeat")
        if self.keywords_per_query < 2:
            raise ValueError("keywords_per_query must be at least 2")
        if not self.keywords_per_query <= self.num_keywords < self.vocab_words:
            raise ValueError("need keywords_per_query <= num_keywords < vocab_words")


def _make_words(n: int, rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n:
        syllables = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syllables))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def generate_synthetic_dataset(spec: SynthSpec) -> tuple[Collection, QuerySet, Qrels]:
    """Deterministically generate (collection, queries, qrels) from ``spec``.

    A passage is relevant to a query iff it contains every keyword of that query.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.keywords_per_query
    words = _make_words(spec.vocab_words, rng)
    keywords, filler = words[: spec.num_keywords], words[spec.num_keywords:]

    if comb(len(keywords), k) < spec.num_queries:
        raise ValueError("num_keywords too small for the requested number of distinct queries")

    key_sets: list[tuple[str, ...]] = []
    taken: set[frozenset] = set()
    while len(key_sets) < spec.num_queries:
        pick = tuple(keywords[i] for i in rng.choice(len(keywords), size=k, replace=False))
        if frozenset(pick) in taken:
            continue
        taken.add(frozenset(pick))
        key_sets.append(pick)

    lo, hi = spec.passage_len_range

    def filler_words(n: int) -> list[str]:
        return [filler[i] for i in rng.integers(len(filler), size=n)]

    def relevant_passage(q: int) -> list[str]:
        length = int(rng.integers(max(lo, k), hi + 1))
        toks = list(key_sets[q]) + filler_words(length - k)
        rng.shuffle(toks)
        return toks

    def negative_passage(q: int) -> list[str]:
        while True:
            size = k - 1 if rng.random() < 0.75 else int(rng.integers(1, k))
            chosen = [key_sets[q][i] for i in rng.choice(k, size=size, replace=False)]
            if rng.random() < 0.5:
                other = key_sets[int(rng.integers(len(key_sets)))]
                chosen.append(other[int(rng.integers(k))])
            if frozenset(chosen) in taken:
                continue
            toks = []
            for w in dict.fromkeys(chosen):
                toks += [w] * int(rng.integers(spec.min_repeat, spec.max_repeat + 1))
            length = max(len(toks), int(rng.integers(lo, hi + 1)))
            toks += filler_words(length - len(toks))
            rng.shuffle(toks)
            return toks

    owners: list[tuple[int, bool]] = []
    for q in range(spec.num_queries):
        owners += [(q, True)] * spec.relevant_per_query
    n_neg = spec.num_passages - len(owners)
    owners += [(i % spec.num_queries, False) for i in range(n_neg)]

    order = rng.permutation(spec.num_passages)
    width = len(str(spec.num_passages))
    passages: list[Passage | None] = [None] * spec.num_passages
    qrels = Qrels()
    qwidth = len(str(spec.num_queries))
    for slot, (q, is_rel) in zip(order, owners):
        toks = relevant_passage(q) if is_rel else negative_passage(q)
        pid = f"p{int(slot):0{width}d}"
        passages[int(slot)] = Passage(pid, " ".join(toks))
        if is_rel:
            qrels.setdefault(f"q{q:0{qwidth}d}", set()).add(pid)

    queries = QuerySet()
    for q, ks in enumerate(key_sets):
        toks = list(ks)
        rng.shuffle(toks)
        queries.add(Query(f"q{q:0{qwidth}d}", " ".join(toks)))
    return Collection(passages), queries, qrels


def write_dataset(collection: Collection, queries: QuerySet, qrels: Qrels, out_dir) -> dict[str, str]:
    """Write a generated dataset as collection.tsv / queries.tsv / qrels.txt."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "collection": os.path.join(out_dir, "collection.tsv"),
        "queries": os.path.join(out_dir, "queries.tsv"),
        "qrels": os.path.join(out_dir, "qrels.txt"),
    }
    write_collection(collection, paths["collection"])
    write_queries(queries, paths["queries"])
    write_qrels(qrels, paths["qrels"])
    return paths
