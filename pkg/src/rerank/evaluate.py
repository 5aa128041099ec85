"""Re-ranking driver and the MRR@10 / MAP metrics."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import model as M
from .corpus_io import Collection, Qrels, Query, QuerySet, RankedList
from .errors import IntegrityError
from .tokenizer import Vocab, encode_pair, pad_batch


@dataclass(frozen=True)
class MetricReport:
    metric: str
    value: float
    num_queries_evaluated: int
    num_queries_skipped: int

    @property
    def empty(self) -> bool:
        return self.num_queries_evaluated == 0

    def tsv_row(self) -> str:
        return f"{self.metric}\t{self.value:.6f}\t{self.num_queries_evaluated}\t{self.num_queries_skipped}"

    def summary(self) -> str:
        text = (f"{self.metric} = {self.value:.4f} over {self.num_queries_evaluated} queries "
                f"({self.num_queries_skipped} skipped)")
        if self.empty:
            text += " [no query had a relevant passage]"
        return text


def score_candidates(params: M.Params, config: M.ModelConfig, vocab: Vocab, query_text: str,
                     passage_texts: Sequence[str], batch_size: int = 64,
                     max_query: int = 64, max_total: int = 512) -> np.ndarray:
    """Relevance probability of each passage, each scored independently."""
    pairs = [encode_pair(query_text, t, vocab, max_query, max_total) for t in passage_texts]
    out = np.empty(len(pairs))
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        out[start:start + len(chunk)] = M.predict(params, pad_batch(chunk), config)
    return out


def rerank(params: M.Params, config: M.ModelConfig, vocab: Vocab, query: Query,
           candidates: RankedList, collection: Collection, batch_size: int = 64,
           max_query: int = 64, max_total: int = 512) -> RankedList:
    """Order candidates by model probability, ties to the smaller passage id."""
    if len(candidates) == 0:
        raise ValueError(f"query {query.id!r} has no candidates to rerank")
    pids = candidates.passage_ids()
    texts = [collection.text(pid) for pid in pids]
    probs = score_candidates(params, config, vocab, query.text, texts, batch_size,
                             max_query, max_total)
    order = sorted(range(len(pids)), key=lambda i: (-probs[i], pids[i]))
    return RankedList.from_scored(query.id, ((pids[i], probs[i]) for i in order))


def rerank_run(params: M.Params, config: M.ModelConfig, vocab: Vocab, queries: QuerySet,
               first_stage_run: Sequence[RankedList], collection: Collection,
               batch_size: int = 64, max_query: int = 64, max_total: int = 512) -> list[RankedList]:
    out = []
    for ranked in first_stage_run:
        if ranked.query_id not in queries:
            raise IntegrityError(f"run query {ranked.query_id!r} is not in the query set")
        for pid in ranked.passage_ids():
            if pid not in collection:
                raise IntegrityError(f"candidate passage {pid!r} is not in the collection")
        if len(ranked) == 0:
            continue
        query = Query(ranked.query_id, queries.text(ranked.query_id))
        out.append(rerank(params, config, vocab, query, ranked, collection, batch_size,
                          max_query, max_total))
    return out


def reciprocal_rank_at_k(ranked: RankedList, relevant, k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    for e in ranked.entries[:k]:
        if e.passage_id in relevant:
            return 1.0 / e.rank
    return 0.0


def average_precision(ranked: RankedList, relevant, cutoff: int | None = None) -> float:
    if not relevant:
        raise ValueError("average precision needs at least one relevant passage")
    entries = ranked.entries if cutoff is None else ranked.entries[:cutoff]
    hits = 0
    total = 0.0
    for e in entries:
        if e.passage_id in relevant:
            hits += 1
            total += hits / e.rank
    return total / len(relevant)


def _check_unique(run: Sequence[RankedList]) -> None:
    seen = set()
    for ranked in run:
        if ranked.query_id in seen:
            raise IntegrityError(f"query {ranked.query_id!r} appears more than once in the run")
        seen.add(ranked.query_id)


def _mean_over_judged(name: str, run: Sequence[RankedList], qrels: Qrels, fn) -> MetricReport:
    _check_unique(run)
    values = []
    skipped = 0
    for ranked in run:
        relevant = qrels.get(ranked.query_id)
        if not relevant:
            skipped += 1
            continue
        values.append(fn(ranked, relevant))
    value = float(sum(values) / len(values)) if values else 0.0
    return MetricReport(name, value, len(values), skipped)


def mrr_at_10(run: Sequence[RankedList], qrels: Qrels, k: int = 10) -> MetricReport:
    name = "mrr@10" if k == 10 else f"mrr@{k}"
    return _mean_over_judged(name, run, qrels, lambda r, rel: reciprocal_rank_at_k(r, rel, k))


def map_metric(run: Sequence[RankedList], qrels: Qrels, cutoff: int | None = None) -> MetricReport:
    name = "map" if cutoff is None else f"map@{cutoff}"
    return _mean_over_judged(name, run, qrels, lambda r, rel: average_precision(r, rel, cutoff))


METRICS = {"mrr10": mrr_at_10, "map": map_metric}


def write_report(reports: Sequence[MetricReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(r.tsv_row() + "\n")
