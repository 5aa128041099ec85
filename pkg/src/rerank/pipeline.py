"""Stage wiring shared by the CLI and the experiment tests.

BM25 retrieval -> pair sampling -> cross-encoder fine-tuning -> re-ranking,
plus the training-size sweep.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

from . import model as M
from .bm25 import Bm25Params, InvertedIndex, build_index, search
from .corpus_io import Collection, Qrels, QuerySet, RankedList
from .evaluate import MetricReport, mrr_at_10, rerank_run
from .tokenizer import Vocab, build_vocab
from .train import OptimizerHyper, TrainResult, default_warmup, sample_training_pairs, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSettings:
    """Small-scale defaults. The learning rate is much higher than the optimizer's
    default because the encoder starts from random weights, not pretrained ones."""

    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn: int = 128
    dropout: float = 0.1
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    total_steps: int = 2000
    warmup_steps: int | None = None
    depth: int = 50
    negatives_per_query: int = 1000
    triples: bool = True
    vocab_size: int = 2000
    seed: int = 0
    clip_norm: float | None = None

    def hyper(self, total_steps: int | None = None) -> OptimizerHyper:
        total = self.total_steps if total_steps is None else total_steps
        warmup = self.warmup_steps if self.warmup_steps is not None else default_warmup(total)
        return OptimizerHyper(base_lr=self.lr, weight_decay=self.weight_decay,
                              warmup_steps=warmup, total_steps=total, clip_norm=self.clip_norm)

    def model_config(self, vocab_size: int) -> M.ModelConfig:
        return M.ModelConfig(num_layers=self.layers, num_heads=self.heads, hidden=self.hidden,
                             ffn=self.ffn, vocab_size=vocab_size, dropout=self.dropout,
                             seed=self.seed)


def retrieve(index: InvertedIndex, queries: QuerySet, k: int) -> list[RankedList]:
    """BM25 top-k per query; queries matching nothing are left out of the run."""
    run = []
    for q in queries:
        ranked = search(index, q, k)
        if len(ranked):
            run.append(ranked)
    return run


def truncate_run(run: Sequence[RankedList], depth: int) -> list[RankedList]:
    return [RankedList(r.query_id, r.entries[:depth]) for r in run]


def fit_reranker(collection: Collection, queries: QuerySet, qrels: Qrels,
                 first_stage: Sequence[RankedList], settings: TrainSettings,
                 vocab: Vocab | None = None, total_steps: int | None = None
                 ) -> tuple[TrainResult, M.ModelConfig, Vocab]:
    vocab = vocab or build_vocab(collection, queries, settings.vocab_size)
    examples = sample_training_pairs(qrels, first_stage, settings.depth,
                                     settings.negatives_per_query, settings.seed, settings.triples)
    config = settings.model_config(len(vocab))
    hyper = settings.hyper(total_steps)
    log.info("training on %d pairs for %d steps", len(examples), hyper.total_steps)
    result = train(M.init_params(config), config, examples, collection, queries, vocab, hyper,
                   batch_size=settings.batch_size, seed=settings.seed)
    return result, config, vocab


@dataclass
class Split:
    train: QuerySet
    heldout: QuerySet


def split_queries(queries: QuerySet, n_train: int, n_heldout: int) -> Split:
    ids = queries.ids()
    if n_train + n_heldout > len(ids):
        raise ValueError(f"asked for {n_train}+{n_heldout} queries but only {len(ids)} exist")
    return Split(queries.subset(ids[:n_train]), queries.subset(ids[n_train:n_train + n_heldout]))


@dataclass
class PipelineResult:
    bm25: MetricReport
    reranked: MetricReport
    train: TrainResult
    config: M.ModelConfig
    vocab: Vocab


def run_pipeline(collection: Collection, queries: QuerySet, qrels: Qrels, split: Split,
                 settings: TrainSettings, bm25: Bm25Params = Bm25Params(),
                 k: int = 1000) -> PipelineResult:
    """BM25 baseline vs. fine-tuned cross-encoder on the held-out queries."""
    index = build_index(collection, bm25)
    train_run = retrieve(index, split.train, k)
    held_run = retrieve(index, split.heldout, k)
    baseline = mrr_at_10(held_run, qrels)
    result, config, vocab = fit_reranker(collection, queries, qrels, train_run, settings)
    reranked = rerank_run(result.params, config, vocab, queries,
                          truncate_run(held_run, settings.depth), collection)
    return PipelineResult(baseline, mrr_at_10(reranked, qrels), result, config, vocab)


def learning_curve(collection: Collection, queries: QuerySet, qrels: Qrels, split: Split,
                   sizes: Sequence[int], settings: TrainSettings,
                   bm25: Bm25Params = Bm25Params(), k: int = 1000) -> list[tuple[int, float]]:
    """Held-out MRR@10 after training on each number of pairs (same seed each time).

    Each model runs ``ceil(pairs / batch_size)`` steps with its own warmup/decay schedule.
    """
    if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
        raise ValueError(f"sizes must be positive and strictly increasing, got {list(sizes)}")
    index = build_index(collection, bm25)
    train_run = retrieve(index, split.train, k)
    held_run = truncate_run(retrieve(index, split.heldout, k), settings.depth)
    vocab = build_vocab(collection, queries, settings.vocab_size)
    rows = []
    for pairs in sizes:
        steps = max(2, math.ceil(pairs / settings.batch_size))
        result, config, _ = fit_reranker(collection, queries, qrels, train_run, settings,
                                         vocab=vocab, total_steps=steps)
        reranked = rerank_run(result.params, config, vocab, queries, held_run, collection)
        value = mrr_at_10(reranked, qrels).value
        log.info("pairs %d -> mrr@10 %.4f", pairs, value)
        rows.append((pairs, value))
    return rows
