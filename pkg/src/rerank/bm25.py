"""BM25 first-stage retrieval over an in-memory inverted index."""

from __future__ import annotations

import heapq
import math
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus_io import Collection, Query, RankedList
from .errors import ParseError

_TERM_RE = re.compile(r"[^\W_]+")

INDEX_MAGIC = "RERANK-BM25-INDEX"
INDEX_VERSION = 1


def analyze(text: str) -> list[str]:
    """Lowercase and split on every non-alphanumeric character."""
    return _TERM_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 0.9
    b: float = 0.4

    def __post_init__(self):
        if not self.k1 >= 0:
            raise ValueError(f"k1 must be non-negative, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must lie in [0, 1], got {self.b}")


def idf(df: int, n_docs: int) -> float:
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


class InvertedIndex:
    """Postings (doc ordinals ascending, term frequencies) plus length statistics.

    Immutable once built; safe to share between concurrent searches.
    """

    def __init__(self, postings: dict[str, tuple[np.ndarray, np.ndarray]],
                 doc_lengths: np.ndarray, doc_ids: list[str], params: Bm25Params):
        self.postings = postings
        self.doc_lengths = doc_lengths
        self.doc_ids = doc_ids
        self.params = params
        self.doc_count = len(doc_ids)
        self.avg_doc_length = float(doc_lengths.mean()) if self.doc_count else 0.0
        self.df = {t: len(p[0]) for t, p in postings.items()}
        self._ordinal = {pid: i for i, pid in enumerate(doc_ids)}
        self._idf = {t: idf(df, self.doc_count) for t, df in self.df.items()}
        self._norm = self._length_norm(params)

    def _length_norm(self, params: Bm25Params) -> np.ndarray:
        if self.avg_doc_length > 0:
            rel = self.doc_lengths / self.avg_doc_length
        else:
            # every document is empty; nothing can match anyway
            rel = np.ones(self.doc_count)
        return params.k1 * (1.0 - params.b + params.b * rel)

    def ordinal(self, passage_id: str) -> int:
        return self._ordinal[passage_id]

    def term_frequency(self, term: str, doc: int) -> int:
        if term not in self.postings:
            return 0
        docs, tfs = self.postings[term]
        pos = int(np.searchsorted(docs, doc))
        if pos < len(docs) and docs[pos] == doc:
            return int(tfs[pos])
        return 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        if (self.doc_ids != other.doc_ids or self.params != other.params
                or not np.array_equal(self.doc_lengths, other.doc_lengths)
                or self.postings.keys() != other.postings.keys()):
            return False
        return all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                   for a, b in ((self.postings[t], other.postings[t]) for t in self.postings))


def build_index(collection: Collection, params: Bm25Params = Bm25Params()) -> InvertedIndex:
    if len(collection) == 0:
        raise ValueError("cannot index an empty collection")
    docs: dict[str, list[int]] = {}
    tfs: dict[str, list[int]] = {}
    lengths = np.zeros(len(collection), dtype=np.int64)
    for ordinal, passage in enumerate(collection):
        terms = analyze(passage.text)
        lengths[ordinal] = len(terms)
        for term, tf in Counter(terms).items():
            docs.setdefault(term, []).append(ordinal)
            tfs.setdefault(term, []).append(tf)
    postings = {t: (np.asarray(docs[t], dtype=np.int64), np.asarray(tfs[t], dtype=np.int64))
                for t in sorted(docs)}
    return InvertedIndex(postings, lengths, collection.ids(), params)


def bm25_score(index: InvertedIndex, query_terms: list[str], doc: int,
               params: Bm25Params | None = None) -> float:
    """Score one document; repeated query terms count once."""
    params = params or index.params
    if not 0 <= doc < index.doc_count:
        raise IndexError(f"document ordinal {doc} out of range")
    dl = float(index.doc_lengths[doc])
    avgdl = index.avg_doc_length
    score = 0.0
    for term in dict.fromkeys(query_terms):
        tf = index.term_frequency(term, doc)
        if tf == 0:
            continue
        norm = params.k1 * (1.0 - params.b + params.b * dl / avgdl)
        score += idf(index.df[term], index.doc_count) * tf * (params.k1 + 1.0) / (tf + norm)
    return score


def score_all(index: InvertedIndex, query_terms: list[str]) -> np.ndarray:
    """Accumulate BM25 scores for every document via the postings lists."""
    scores = np.zeros(index.doc_count)
    k1 = index.params.k1
    for term in dict.fromkeys(query_terms):
        posting = index.postings.get(term)
        if posting is None:
            continue
        docs, tf = posting
        scores[docs] += index._idf[term] * tf * (k1 + 1.0) / (tf + index._norm[docs])
    return scores


def search(index: InvertedIndex, query: Query | str, k: int = 1000) -> RankedList:
    """Top-k positive-scoring passages; ties go to the smaller passage id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(query, Query):
        qid, text = query.id, query.text
    else:
        qid, text = "", query
    scores = score_all(index, analyze(text))
    hits = np.flatnonzero(scores > 0)
    ids = index.doc_ids
    top = heapq.nsmallest(k, hits.tolist(), key=lambda i: (-scores[i], ids[i]))
    return RankedList.from_scored(qid, ((ids[i], scores[i]) for i in top))


def save_index(index: InvertedIndex, path) -> None:
    """Line-based snapshot: header, params, doc table, then one line per term.

    ::

        RERANK-BM25-INDEX 1
        k1 <float repr> b <float repr>
        docs <N>
        <passage id>\\t<length>          (N lines, ordinal order)
        terms <T>
        <term>\\t<df>\\t<ord>:<tf> ...    (T lines, terms sorted)
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{INDEX_MAGIC} {INDEX_VERSION}\n")
        fh.write(f"k1 {index.params.k1!r} b {index.params.b!r}\n")
        fh.write(f"docs {index.doc_count}\n")
        for pid, dl in zip(index.doc_ids, index.doc_lengths.tolist()):
            fh.write(f"{pid}\t{dl}\n")
        fh.write(f"terms {len(index.postings)}\n")
        for term in sorted(index.postings):
            docs, tfs = index.postings[term]
            pairs = " ".join(f"{d}:{t}" for d, t in zip(docs.tolist(), tfs.tolist()))
            fh.write(f"{term}\t{len(docs)}\t{pairs}\n")


def load_index(path) -> InvertedIndex:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    try:
        magic, version = lines[0].split()
        if magic != INDEX_MAGIC or int(version) != INDEX_VERSION:
            raise ParseError(f"unsupported index header {lines[0]!r}", path, 1)
        _, k1, _, b = lines[1].split()
        params = Bm25Params(float(k1), float(b))
        n_docs = int(lines[2].split()[1])
        doc_ids, lengths = [], []
        for line in lines[3:3 + n_docs]:
            pid, dl = line.split("\t")
            doc_ids.append(pid)
            lengths.append(int(dl))
        pos = 3 + n_docs
        n_terms = int(lines[pos].split()[1])
        postings = {}
        for lineno in range(pos + 1, pos + 1 + n_terms):
            term, df, pairs = lines[lineno].split("\t")
            pairs_list = [p.split(":") for p in pairs.split()]
            docs = np.asarray([int(d) for d, _ in pairs_list], dtype=np.int64)
            tfs = np.asarray([int(t) for _, t in pairs_list], dtype=np.int64)
            if len(docs) != int(df):
                raise ParseError(f"df mismatch for term {term!r}", path, lineno + 1)
            postings[term] = (docs, tfs)
        if len(lines) != pos + 1 + n_terms:
            raise ParseError("trailing or missing lines", path, len(lines))
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"corrupt index file: {exc}", path) from None
    return InvertedIndex(postings, np.asarray(lengths, dtype=np.int64), doc_ids, params)
