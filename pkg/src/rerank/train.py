"""Pointwise fine-tuning: cross-entropy loss, AdamW with warmup/linear decay, pair sampling."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import model as M
from .corpus_io import Collection, Qrels, QuerySet, RankedList
from .errors import NumericError
from .tokenizer import EncodedPair, Vocab, encode_pair, pad_batch

log = logging.getLogger(__name__)

DEFAULT_BASE_LR = 3e-6
DEFAULT_WARMUP_STEPS = 10_000


class TrainingExample(NamedTuple):
    query_id: str
    passage_id: str
    label: int


@dataclass(frozen=True)
class OptimizerHyper:
    base_lr: float = DEFAULT_BASE_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = DEFAULT_WARMUP_STEPS
    total_steps: int = 100_000
    clip_norm: float | None = None

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 < warmup_steps < total_steps "
                             f"(got {self.warmup_steps}, {self.total_steps})")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.base_lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("base_lr, weight_decay must be >= 0 and eps > 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


def default_warmup(total_steps: int) -> int:
    """10% of the run for short runs, a flat 10k steps otherwise."""
    if total_steps < 100_000:
        return max(1, total_steps // 10)
    return DEFAULT_WARMUP_STEPS


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: M.Params) -> OptimizerState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def bce_loss(probs, labels) -> float:
    """Summed binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} differ in shape")
    s = np.clip(probs, M.PROB_CLAMP, 1.0 - M.PROB_CLAMP)
    return float(-(labels * np.log(s) + (1.0 - labels) * np.log1p(-s)).sum())


def lr_schedule(step: int, hyper: OptimizerHyper) -> float:
    if not 0 <= step <= hyper.total_steps:
        raise ValueError(f"step {step} outside [0, {hyper.total_steps}]")
    if step <= hyper.warmup_steps:
        return hyper.base_lr * step / hyper.warmup_steps
    return hyper.base_lr * (hyper.total_steps - step) / (hyper.total_steps - hyper.warmup_steps)


def adam_step(params: M.Params, grads: M.Params, state: OptimizerState,
              hyper: OptimizerHyper, lr: float | None = None):
    """One AdamW update (decoupled decay, skipped for biases and norms). Updates in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    t = state.t
    if lr is None:
        lr = lr_schedule(min(t, hyper.total_steps), hyper)
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        if hyper.weight_decay and M.is_decayed(name):
            update = update + hyper.weight_decay * params[name]
        params[name] -= lr * update
    return params, state


def _clip(grads: M.Params, max_norm: float) -> None:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def sample_training_pairs(qrels: Qrels, first_stage_run: Sequence[RankedList], depth: int,
                          negatives_per_query: int = 1, seed: int = 0,
                          triples: bool = False) -> list[TrainingExample]:
    """All relevant passages plus sampled top-``depth`` non-relevant ones per run query.

    With ``triples`` every negative is preceded by a relevant passage (cycling
    through them), so the classes stay balanced however many negatives are drawn.
    """
    if depth < 1 or negatives_per_query < 1:
        raise ValueError("depth and negatives_per_query must be >= 1")
    rng = np.random.default_rng(seed)
    examples: list[TrainingExample] = []
    for ranked in first_stage_run:
        relevant = qrels.get(ranked.query_id)
        if not relevant:
            continue
        positives = sorted(relevant)
        pool = [e.passage_id for e in ranked.entries[:depth] if e.passage_id not in relevant]
        take = min(negatives_per_query, len(pool))
        negatives = [pool[i] for i in sorted(rng.choice(len(pool), size=take, replace=False).tolist())]
        if triples:
            for j, neg in enumerate(negatives):
                examples.append(TrainingExample(ranked.query_id, positives[j % len(positives)], 1))
                examples.append(TrainingExample(ranked.query_id, neg, 0))
        else:
            examples += [TrainingExample(ranked.query_id, pid, 1) for pid in positives]
            examples += [TrainingExample(ranked.query_id, pid, 0) for pid in negatives]
    return examples


def encode_examples(examples: Sequence[TrainingExample], collection: Collection,
                    queries: QuerySet, vocab: Vocab, max_query: int = 64,
                    max_total: int = 512) -> list[EncodedPair]:
    return [encode_pair(queries.text(ex.query_id), collection.text(ex.passage_id), vocab,
                        max_query, max_total) for ex in examples]


class LogRow(NamedTuple):
    step: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    params: M.Params
    log: list[LogRow] = field(default_factory=list)
    state: OptimizerState | None = None


def train(params: M.Params, config: M.ModelConfig, examples: Sequence[TrainingExample],
          collection: Collection, queries: QuerySet, vocab: Vocab, hyper: OptimizerHyper,
          batch_size: int = 32, seed: int = 0, steps: int | None = None,
          max_query: int = 64, max_total: int = 512,
          checkpoint_every: int | None = None, checkpoint_path=None) -> TrainResult:
    """Run ``steps`` (default ``hyper.total_steps``) optimisation steps.

    Examples are visited in seeded shuffled order, epoch after epoch. Row ``i``
    of the log holds the step number, the learning rate used and the summed
    batch loss measured before that step's update. ``params`` is not modified.
    """
    if not examples:
        raise ValueError("no training examples")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    steps = hyper.total_steps if steps is None else steps
    if not 0 <= steps <= hyper.total_steps:
        raise ValueError(f"steps must lie in [0, {hyper.total_steps}]")
    params = {k: v.copy() for k, v in params.items()}
    state = OptimizerState.zeros_like(params)
    encoded = encode_examples(examples, collection, queries, vocab, max_query, max_total)
    labels = np.asarray([ex.label for ex in examples], dtype=np.float64)
    rng = np.random.default_rng(seed)
    order = np.empty(0, dtype=np.int64)
    rows: list[LogRow] = []
    for step in range(1, steps + 1):
        while len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(len(examples))])
        idx, order = order[:batch_size], order[batch_size:]
        batch = pad_batch([encoded[i] for i in idx])
        try:
            probs, cache = M.forward(params, batch, config, "train", dropout_key=(seed, step))
            loss = bce_loss(probs, labels[idx])
            grads = M.backward(params, cache, labels[idx], config)
            if hyper.clip_norm is not None:
                _clip(grads, hyper.clip_norm)
            lr = lr_schedule(step, hyper)
            adam_step(params, grads, state, hyper, lr)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from None
        rows.append(LogRow(step, lr, loss))
        if step % 100 == 0:
            log.info("step %d lr %.3g loss %.4f", step, lr, loss / len(idx))
        if checkpoint_every and checkpoint_path and step % checkpoint_every == 0:
            M.save_checkpoint(params, config, f"{checkpoint_path}.step{step}")
    return TrainResult(params, rows, state)


def write_log(rows: Sequence[LogRow], path) -> None:
    """TSV ``step<TAB>lr<TAB>loss`` with a header line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step\tlr\tloss\n")
        for r in rows:
            fh.write(f"{r.step}\t{r.lr:.9g}\t{r.loss:.9g}\n")
