"""Command-line entry point: ``rerank <subcommand> ...``.

Every command writes its primary output plus ``<output>.manifest.json`` holding
the resolved flags. Outputs go to a temporary name first and are renamed into
place only once complete.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict

from . import __version__
from . import model as M
from .bm25 import Bm25Params, build_index, load_index, save_index
from .corpus_io import (
    SynthSpec,
    generate_synthetic_dataset,
    load_collection,
    load_qrels,
    load_queries,
    load_run,
    write_dataset,
    write_run,
)
from .errors import IntegrityError, NumericError, ParseError, StateError
from .evaluate import METRICS, rerank_run, write_report
from .pipeline import (
    TrainSettings,
    learning_curve,
    retrieve,
    split_queries,
    truncate_run,
)
from .tokenizer import Vocab, build_vocab
from .train import OptimizerHyper, default_warmup, sample_training_pairs, train, write_log

log = logging.getLogger("rerank")


@contextlib.contextmanager
def _staged(path):
    """Yield a temporary path that replaces ``path`` only on success."""
    tmp = f"{path}.partial"
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _write_manifest(args: argparse.Namespace, primary: str, inputs: dict, outputs: dict) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    manifest = {
        "command": args.command,
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
    }
    with _staged(f"{primary}.manifest.json") as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _sizes(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(num_passages=args.num_passages, num_queries=args.num_queries,
                     vocab_words=args.vocab_words,
                     passage_len_range=(args.min_len, args.max_len),
                     relevant_per_query=args.relevant_per_query, seed=args.seed,
                     keywords_per_query=args.keywords_per_query, num_keywords=args.num_keywords,
                     min_repeat=args.min_repeat, max_repeat=args.max_repeat)
    coll, queries, qrels = generate_synthetic_dataset(spec)
    paths = write_dataset(coll, queries, qrels, args.out_dir)
    _write_manifest(args, paths["collection"], {}, paths)
    print(f"wrote {len(coll)} passages, {len(queries)} queries to {args.out_dir}")
    return 0


def cmd_index(args) -> int:
    coll = load_collection(args.collection)
    index = build_index(coll, Bm25Params(args.k1, args.b))
    with _staged(args.out) as tmp:
        save_index(index, tmp)
    _write_manifest(args, args.out, {"collection": args.collection}, {"index": args.out})
    print(f"indexed {index.doc_count} passages, {len(index.postings)} terms")
    return 0


def cmd_search(args) -> int:
    index = load_index(args.index)
    queries = load_queries(args.queries)
    run = retrieve(index, queries, args.k)
    with _staged(args.out) as tmp:
        write_run(run, args.tag, tmp)
    _write_manifest(args, args.out, {"index": args.index, "queries": args.queries},
                    {"run": args.out})
    print(f"retrieved candidates for {len(run)} of {len(queries)} queries")
    return 0


def _settings(args, **overrides) -> TrainSettings:
    return TrainSettings(
        layers=args.layers, heads=args.heads, hidden=args.hidden, ffn=args.ffn,
        dropout=args.dropout, lr=args.lr, weight_decay=args.weight_decay,
        batch_size=args.batch_size, total_steps=args.total_steps,
        warmup_steps=args.warmup_steps, depth=args.depth,
        negatives_per_query=args.negatives_per_query, triples=args.triples,
        vocab_size=args.vocab_size,
        seed=args.seed, clip_norm=args.clip_norm, **overrides)


def _check_schedule(args) -> None:
    warmup = args.warmup_steps if args.warmup_steps is not None else default_warmup(args.total_steps)
    if not 0 < warmup < args.total_steps:
        raise ValueError(f"--warmup-steps ({warmup}) must be positive and below "
                         f"--total-steps ({args.total_steps})")


def cmd_train(args) -> int:
    _check_schedule(args)
    settings = _settings(args)
    hyper: OptimizerHyper = settings.hyper()
    steps = hyper.total_steps if args.steps is None else args.steps
    coll = load_collection(args.collection)
    queries = load_queries(args.queries)
    qrels = load_qrels(args.qrels)
    first_stage = load_run(args.run)
    if args.init_checkpoint:
        params, config = M.load_checkpoint(args.init_checkpoint)
    else:
        params, config = None, None
    vocab = Vocab.load(args.vocab) if args.vocab else build_vocab(coll, queries, settings.vocab_size)
    if config is None:
        config = settings.model_config(len(vocab))
        params = M.init_params(config)
    elif config.vocab_size != len(vocab):
        raise IntegrityError(f"checkpoint vocab size {config.vocab_size} != vocab file size {len(vocab)}")
    examples = sample_training_pairs(qrels, first_stage, settings.depth,
                                     settings.negatives_per_query, settings.seed, settings.triples)
    result = train(params, config, examples, coll, queries, vocab, hyper,
                   batch_size=settings.batch_size, seed=settings.seed, steps=steps,
                   checkpoint_every=args.checkpoint_every, checkpoint_path=args.out)
    vocab_out = args.vocab_out or f"{args.out}.vocab"
    log_out = args.log_out or f"{args.out}.log.tsv"
    with _staged(args.out) as tmp:
        M.save_checkpoint(result.params, config, tmp)
    with _staged(vocab_out) as tmp:
        vocab.save(tmp)
    with _staged(log_out) as tmp:
        write_log(result.log, tmp)
    _write_manifest(args, args.out,
                    {"collection": args.collection, "queries": args.queries, "qrels": args.qrels,
                     "run": args.run, "init_checkpoint": args.init_checkpoint, "vocab": args.vocab},
                    {"checkpoint": args.out, "vocab": vocab_out, "log": log_out,
                     "model_config": asdict(config)})
    msg = f"trained {len(result.log)} steps on {len(examples)} pairs"
    if result.log:
        msg += f"; last per-pair loss {result.log[-1].loss / min(settings.batch_size, len(examples)):.4f}"
    print(msg)
    return 0


def cmd_rerank(args) -> int:
    params, config = M.load_checkpoint(args.checkpoint)
    vocab = Vocab.load(args.vocab)
    if config.vocab_size != len(vocab):
        raise IntegrityError(f"checkpoint vocab size {config.vocab_size} != vocab file size {len(vocab)}")
    coll = load_collection(args.collection)
    queries = load_queries(args.queries)
    first_stage = load_run(args.run)
    if args.depth:
        first_stage = truncate_run(first_stage, args.depth)
    out = rerank_run(params, config, vocab, queries, first_stage, coll, batch_size=args.batch_size)
    with _staged(args.out) as tmp:
        write_run(out, args.tag, tmp)
    _write_manifest(args, args.out,
                    {"checkpoint": args.checkpoint, "vocab": args.vocab, "collection": args.collection,
                     "queries": args.queries, "run": args.run}, {"run": args.out})
    print(f"reranked {len(out)} queries")
    return 0


def cmd_eval(args) -> int:
    run = load_run(args.run)
    qrels = load_qrels(args.qrels)
    reports = [METRICS[m](run, qrels) for m in args.metric]
    for r in reports:
        print(r.summary())
    if args.out:
        with _staged(args.out) as tmp:
            write_report(reports, tmp)
        _write_manifest(args, args.out, {"run": args.run, "qrels": args.qrels}, {"report": args.out})
    return 0


def cmd_learning_curve(args) -> int:
    sizes = args.sizes
    if not sizes or sizes[0] < 1 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"--sizes must be positive and strictly increasing, got {sizes}")
    if args.collection:
        coll = load_collection(args.collection)
        queries = load_queries(args.queries)
        qrels = load_qrels(args.qrels)
    else:
        coll, queries, qrels = generate_synthetic_dataset(SynthSpec(seed=args.data_seed))
    split = split_queries(queries, args.train_queries, args.heldout_queries)
    rows = learning_curve(coll, queries, qrels, split, sizes, _settings(args),
                          Bm25Params(args.k1, args.b), args.k)
    with _staged(args.out) as tmp:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("pairs\tmrr10\n")
            for pairs, value in rows:
                fh.write(f"{pairs}\t{value:.6f}\n")
    _write_manifest(args, args.out, {"collection": args.collection, "queries": args.queries,
                                     "qrels": args.qrels}, {"curve": args.out})
    for pairs, value in rows:
        print(f"{pairs}\t{value:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    d = TrainSettings()
    g = p.add_argument_group("model and optimisation")
    g.add_argument("--layers", type=int, default=d.layers)
    g.add_argument("--heads", type=int, default=d.heads)
    g.add_argument("--hidden", type=int, default=d.hidden)
    g.add_argument("--ffn", type=int, default=d.ffn)
    g.add_argument("--dropout", type=float, default=d.dropout)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--total-steps", type=int, default=d.total_steps)
    g.add_argument("--warmup-steps", type=int, default=None,
                   help="default: 10%% of --total-steps below 100k, else 10000")
    g.add_argument("--depth", type=int, default=d.depth,
                   help="candidates per query used for negatives (and reranking)")
    g.add_argument("--negatives-per-query", type=int, default=d.negatives_per_query)
    g.add_argument("--triples", action=argparse.BooleanOptionalAction, default=d.triples,
                   help="pair every negative with a positive to keep classes balanced")
    g.add_argument("--vocab-size", type=int, default=d.vocab_size)
    g.add_argument("--clip-norm", type=float, default=None)
    g.add_argument("--seed", type=int, default=d.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rerank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic keyword-matching dataset")
    d = SynthSpec()
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-passages", type=int, default=d.num_passages)
    p.add_argument("--num-queries", type=int, default=d.num_queries)
    p.add_argument("--vocab-words", type=int, default=d.vocab_words)
    p.add_argument("--num-keywords", type=int, default=d.num_keywords)
    p.add_argument("--min-repeat", type=int, default=d.min_repeat)
    p.add_argument("--max-repeat", type=int, default=d.max_repeat)
    p.add_argument("--keywords-per-query", type=int, default=d.keywords_per_query)
    p.add_argument("--min-len", type=int, default=d.passage_len_range[0])
    p.add_argument("--max-len", type=int, default=d.passage_len_range[1])
    p.add_argument("--relevant-per-query", type=int, default=d.relevant_per_query)
    p.add_argument("--seed", type=int, default=d.seed)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="build a BM25 index")
    p.add_argument("--collection", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k1", type=float, default=Bm25Params.k1)
    p.add_argument("--b", type=float, default=Bm25Params.b)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="BM25 top-k retrieval to a TREC run")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--tag", default="bm25")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="fine-tune the cross-encoder")
    p.add_argument("--collection", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--run", required=True, help="first-stage run supplying negatives")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--vocab", help="reuse this vocab file instead of building one")
    p.add_argument("--vocab-out")
    p.add_argument("--log-out")
    p.add_argument("--init-checkpoint", help="resume from these weights (model flags ignored)")
    p.add_argument("--steps", type=int, default=None,
                   help="steps to run now (default --total-steps)")
    p.add_argument("--checkpoint-every", type=int, default=None)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", help="re-rank a first-stage run with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--collection", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth", type=int, default=None, help="rerank only the top DEPTH candidates")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--tag", default="rerank")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="MRR@10 / MAP of a run")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", action="append", choices=sorted(METRICS),
                   help="repeatable; default mrr10")
    p.add_argument("--out", help="TSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("learning-curve", help="held-out MRR@10 against training pairs seen")
    p.add_argument("--sizes", type=_sizes, default=[1000, 5000, 20000])
    p.add_argument("--out", required=True)
    p.add_argument("--collection")
    p.add_argument("--queries")
    p.add_argument("--qrels")
    p.add_argument("--data-seed", type=int, default=0,
                   help="synthetic dataset seed when no --collection is given")
    p.add_argument("--train-queries", type=int, default=200)
    p.add_argument("--heldout-queries", type=int, default=50)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--k1", type=float, default=Bm25Params.k1)
    p.add_argument("--b", type=float, default=Bm25Params.b)
    _add_model_flags(p)
    p.set_defaults(func=cmd_learning_curve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and not args.metric:
        args.metric = ["mrr10"]
    if args.command == "learning-curve" and args.collection and not (args.queries and args.qrels):
        parser.error("--collection needs --queries and --qrels")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, NumericError, StateError) as exc:
        kind = type(exc).__name__
        if isinstance(exc, (ParseError, IntegrityError)) or not isinstance(exc, OSError):
            print(f"error ({kind}): {exc}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
