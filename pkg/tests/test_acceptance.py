"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are written
straight to the terminal even when output capture is on.
"""

import math
import os
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rerank import model as M
from rerank.bm25 import Bm25Params, build_index, search
from rerank.cli import main
from rerank.corpus_io import Qrels, Query, RankedList, SynthSpec, generate_synthetic_dataset
from rerank.evaluate import map_metric, mrr_at_10
from rerank.pipeline import TrainSettings, learning_curve, run_pipeline, split_queries
from rerank.tokenizer import CHARS, RESERVED, Batch, Vocab, encode_pair, pad_batch, tokenize
from rerank.train import bce_loss
from tests.oracles import (
    ap_reference,
    brute_force_bm25,
    central_difference,
    mean_reference,
    random_corpus,
    rr_reference,
)


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return report


def test_gradient_finite_differences(verdict):
    cfg = M.ModelConfig(num_layers=2, num_heads=2, hidden=16, ffn=32, vocab_size=60,
                        max_positions=24, dropout=0.1, seed=11)
    rng = np.random.default_rng(123)
    params = {k: v + rng.normal(0, 0.3, v.shape) for k, v in M.init_params(cfg).items()}
    n, t = 3, 24
    tok = rng.integers(4, cfg.vocab_size, size=(n, t))
    seg = np.zeros((n, t), dtype=np.int64)
    mask = np.ones((n, t), dtype=np.int64)
    for i, length in enumerate((24, 19, 15)):
        seg[i, length // 3:length] = 1
        mask[i, length:] = 0
        tok[i, length:] = 0
        seg[i, length:] = 0
    batch = Batch(tok, seg, mask)
    labels = np.array([1.0, 0.0, 1.0])
    key = (3, 17)

    def loss():
        probs, _ = M.forward(params, batch, cfg, "train", key)
        return bce_loss(probs, labels)

    start = time.perf_counter()
    _, cache = M.forward(params, batch, cfg, "train", key)
    grads = M.backward(params, cache, labels, cfg)
    used_rows = np.unique(tok[mask == 1])
    worst, worst_abs, checked, zero, families = 0.0, 0.0, 0, 0, set()
    for name, value in params.items():
        for _ in range(6):
            if name == "emb.token":
                idx = (int(rng.choice(used_rows)), int(rng.integers(cfg.hidden)))
            else:
                idx = tuple(int(rng.integers(s)) for s in value.shape)
            fd = central_difference(loss, value, idx)
            an = grads[name][idx]
            scale = max(abs(fd), abs(an))
            if scale < 1e-7:
                # key biases cannot move softmax: the true gradient is 0 and
                # a ratio of two roundoff residues carries no information
                zero += 1
                worst_abs = max(worst_abs, abs(fd - an))
            else:
                worst = max(worst, abs(fd - an) / scale)
            checked += 1
            families.add(name)
    elapsed = time.perf_counter() - start
    ok = (checked - zero >= 200 and families == set(params) and worst <= 1e-4
          and worst_abs < 1e-9 and elapsed < 60)
    verdict("gradient check", ok,
            f"{checked - zero} nonzero coords over {len(families)} tensors, max rel err {worst:.2e}; "
            f"{zero} structurally zero within {worst_abs:.1e}; {elapsed:.1f}s")


def test_bm25_oracle(verdict):
    rng = np.random.default_rng(99)
    start = time.perf_counter()
    worst, mismatches = 0.0, 0
    for _ in range(50):
        n_docs, vocab_size = int(rng.integers(1, 201)), int(rng.integers(1, 21))
        coll = random_corpus(rng, n_docs, vocab_size)
        params = Bm25Params()
        index = build_index(coll, params)
        for _ in range(5):
            terms = [f"t{int(w)}" for w in rng.integers(0, vocab_size + 2, int(rng.integers(1, 5)))]
            got = search(index, Query("q", " ".join(terms)), k=n_docs)
            want = brute_force_bm25(coll, terms, params.k1, params.b)
            if got.passage_ids() != [pid for pid, _ in want]:
                mismatches += 1
                continue
            for e, (_, s) in zip(got.entries, want):
                worst = max(worst, abs(e.score - s))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and worst <= 1e-9 and elapsed < 60
    verdict("BM25 oracle", ok,
            f"250 queries on 50 corpora, {mismatches} ordering mismatches, "
            f"max score diff {worst:.1e}, {elapsed:.1f}s")


def _ranked(qid, pids):
    return RankedList.from_scored(qid, [(p, float(len(pids) - i)) for i, p in enumerate(pids)])


def test_metric_oracle(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    edge = {"no_relevant": 0, "beyond_cutoff": 0, "empty_list": 0}
    for trial in range(1000):
        run, qrels, run_ids = [], Qrels(), {}
        for qi in range(int(rng.integers(1, 6))):
            depth = int(rng.integers(0, 30))
            pool = [f"d{j}" for j in rng.permutation(50)[:depth]]
            run.append(_ranked(f"q{qi}", pool))
            run_ids[f"q{qi}"] = pool
            mode = rng.integers(4)
            if mode == 0:
                edge["no_relevant"] += 1
                continue
            if mode == 1 and depth > 10:
                rel = {pool[int(rng.integers(10, depth))]}
                edge["beyond_cutoff"] += 1
            else:
                rel = {f"d{j}" for j in rng.integers(0, 50, size=int(rng.integers(1, 5)))}
            edge["empty_list"] += depth == 0
            qrels[f"q{qi}"] = rel
        worst = max(worst,
                    abs(mrr_at_10(run, qrels).value - mean_reference(run_ids, qrels, rr_reference)),
                    abs(map_metric(run, qrels).value - mean_reference(run_ids, qrels, ap_reference)))
    ok = worst <= 1e-12 and all(edge.values())
    verdict("metric oracle", ok, f"1000 instances, max diff {worst:.1e}, edge cases {edge}")


def test_initial_loss(verdict):
    coll, queries, qrels = generate_synthetic_dataset(SynthSpec(num_passages=200, num_queries=20))
    vocab = Vocab(list(RESERVED) + list(CHARS) + ["##" + c for c in CHARS])
    cfg = M.ModelConfig(num_layers=2, num_heads=2, hidden=16, ffn=32, vocab_size=len(vocab), seed=4)
    pids = coll.ids()[:32]
    pairs = [encode_pair(queries.text(queries.ids()[i % 20]), coll.text(p), vocab)
             for i, p in enumerate(pids)]
    labels = np.arange(32) % 2
    probs, _ = M.forward(M.init_params(cfg), pad_batch(pairs), cfg, "train", (0, 1))
    per_example = bce_loss(probs, labels) / len(labels)
    err = abs(per_example - math.log(2))
    verdict("initial loss", err < 1e-6, f"mean per-example loss {per_example:.9f}, |diff from ln 2| {err:.1e}")


@pytest.fixture(scope="module")
def synthetic():
    coll, queries, qrels = generate_synthetic_dataset(SynthSpec())
    return coll, queries, qrels, split_queries(queries, 200, 50)


@pytest.mark.slow
def test_end_to_end_gap(verdict, synthetic):
    coll, queries, qrels, split = synthetic
    settings_ = TrainSettings()
    start = time.perf_counter()
    res = run_pipeline(coll, queries, qrels, split, settings_)
    elapsed = time.perf_counter() - start
    gap = res.reranked.value - res.bm25.value
    within_budget = (settings_.layers <= 4 and settings_.hidden <= 64
                     and len(res.train.log) <= 5000 and elapsed < 15 * 60)
    ok = len(coll) == 2000 and gap >= 0.10 and within_budget
    verdict("end-to-end gap", ok,
            f"BM25 {res.bm25.value:.4f} -> reranked {res.reranked.value:.4f} (gap {gap:+.4f}) "
            f"with {settings_.layers} layers, d={settings_.hidden}, {len(res.train.log)} steps, {elapsed:.0f}s")


@pytest.mark.slow
def test_learning_curve(verdict, synthetic):
    coll, queries, qrels, split = synthetic
    rows = learning_curve(coll, queries, qrels, split, [1000, 5000, 20000], TrainSettings())
    drops = [a[1] - b[1] for a, b in zip(rows, rows[1:])]
    ok = all(d <= 0.02 for d in drops)
    verdict("learning curve", ok, ", ".join(f"{p} pairs: {v:.4f}" for p, v in rows))


_WORD = st.text(alphabet="abcdefghij", min_size=1, max_size=3)


class _Truncation:
    worst_query = 0
    worst_total = 0
    cases = 0
    violations = 0


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 150).flatmap(lambda n: st.lists(_WORD, min_size=n, max_size=n)),
       st.integers(0, 700).flatmap(lambda n: st.lists(_WORD, min_size=n, max_size=n)))
def _check_truncation(q_words, p_words):
    vocab = _truncation_vocab()
    q_len = len(tokenize(" ".join(q_words), vocab))
    p_len = len(tokenize(" ".join(p_words), vocab))
    enc = encode_pair(" ".join(q_words), " ".join(p_words), vocab)
    got_q = int((enc.segment_ids == 0).sum()) - 2
    got_p = int((enc.segment_ids == 1).sum()) - 1
    want_q = min(q_len, 64)
    want_p = min(p_len, 512 - 3 - want_q)
    _Truncation.cases += 1
    _Truncation.worst_query = max(_Truncation.worst_query, got_q)
    _Truncation.worst_total = max(_Truncation.worst_total, enc.length)
    if (got_q, got_p) != (want_q, want_p) or enc.length > 512:
        _Truncation.violations += 1


def _truncation_vocab():
    if not hasattr(_truncation_vocab, "v"):
        _truncation_vocab.v = Vocab(list(RESERVED) + list(CHARS) + ["##" + c for c in CHARS] + ["ab", "##cd"])
    return _truncation_vocab.v


def test_truncation_contract(verdict):
    _check_truncation()
    vocab = _truncation_vocab()
    enc = encode_pair(" ".join(["a"] * 64), " ".join(["b"] * 1000), vocab)
    passage_pieces = int((enc.segment_ids == 1).sum()) - 1
    ok = (_Truncation.violations == 0 and passage_pieces == 445
          and _Truncation.worst_query == 64 and _Truncation.worst_total == 512)
    verdict("truncation contract", ok,
            f"{_Truncation.cases} random cases, {_Truncation.violations} violations, "
            f"max query {_Truncation.worst_query}, max total {_Truncation.worst_total}, "
            f"64-piece query leaves {passage_pieces} passage pieces")


def _all_commands():
    model = ["--layers", "1", "--heads", "2", "--hidden", "16", "--ffn", "32", "--batch-size", "8",
             "--depth", "20", "--negatives-per-query", "3"]
    data = ["--collection", "d/collection.tsv", "--queries", "d/queries.tsv"]
    return [
        ["synth", "--out-dir", "d", "--num-passages", "120", "--num-queries", "12", "--seed", "3"],
        ["index", "--collection", "d/collection.tsv", "--out", "idx"],
        ["search", "--index", "idx", "--queries", "d/queries.tsv", "--k", "40", "--out", "bm25.run"],
        ["train", *data, "--qrels", "d/qrels.txt", "--run", "bm25.run", "--out", "ck",
         "--total-steps", "10", "--checkpoint-every", "5", *model],
        ["rerank", "--checkpoint", "ck", "--vocab", "ck.vocab", *data, "--run", "bm25.run",
         "--depth", "20", "--out", "rr.run"],
        ["eval", "--run", "rr.run", "--qrels", "d/qrels.txt", "--metric", "mrr10", "--metric", "map",
         "--out", "report.tsv"],
        ["learning-curve", *data, "--qrels", "d/qrels.txt", "--train-queries", "8",
         "--heldout-queries", "4", "--sizes", "16,40", "--out", "curve.tsv", *model],
    ]


def _snapshot(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            path = os.path.join(dirpath, f)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


def test_cli_determinism(verdict, tmp_path, monkeypatch):
    snaps = []
    for name in ("first", "second"):
        work = tmp_path / name
        work.mkdir()
        monkeypatch.chdir(work)
        for argv in _all_commands():
            assert main(argv) == 0, argv
        snaps.append(_snapshot(work))
    a, b = snaps
    differing = sorted(k for k in a if a[k] != b.get(k)) + sorted(set(b) - set(a))
    verdict("CLI determinism", not differing and len(a) > 0,
            f"{len(_all_commands())} commands, {len(a)} artifacts compared, "
            f"{len(differing)} differ {differing if differing else ''}".rstrip())
