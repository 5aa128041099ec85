"""WordPiece-style subword tokenization and [CLS] A [SEP] B [SEP] packing."""

from __future__ import annotations

import string
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .bm25 import analyze
from .errors import ParseError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)
CHARS = string.ascii_lowercase + string.digits
MAX_CHARS_PER_WORD = 100


class Vocab:
    """Dense piece <-> id mapping; reserved tokens occupy ids 0..3."""

    def __init__(self, pieces: Sequence[str]):
        if tuple(pieces[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocab must start with {RESERVED}")
        self.pieces = list(pieces)
        self.ids = {}
        for i, p in enumerate(self.pieces):
            if p in self.ids:
                raise ValueError(f"duplicate vocab piece {p!r}")
            self.ids[p] = i

    pad_id = RESERVED.index(PAD)
    unk_id = RESERVED.index(UNK)
    cls_id = RESERVED.index(CLS)
    sep_id = RESERVED.index(SEP)

    def __len__(self) -> int:
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self.ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.pieces == other.pieces

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for p in self.pieces:
                fh.write(p + "\n")

    @classmethod
    def load(cls, path) -> Vocab:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        try:
            return cls(lines)
        except ValueError as exc:
            raise ParseError(str(exc), path) from None


def min_vocab_size() -> int:
    return len(RESERVED) + 2 * len(CHARS)


def vocab_from_texts(texts: Iterable[str], max_size: int) -> Vocab:
    """Reserved tokens, bare and ``##`` character pieces, then the most frequent words.

    Frequency ties go to the lexicographically smaller word.
    """
    if max_size < min_vocab_size():
        raise ValueError(f"max_size={max_size} is below the {min_vocab_size()} "
                         "reserved and character pieces")
    pieces = list(RESERVED) + list(CHARS) + ["##" + c for c in CHARS]
    present = set(pieces)
    counts = Counter()
    for text in texts:
        counts.update(analyze(text))
    for word, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(pieces) >= max_size:
            break
        if word not in present:
            pieces.append(word)
            present.add(word)
    return Vocab(pieces)


def build_vocab(collection, queries, max_size: int) -> Vocab:
    texts = [p.text for p in collection] + [q.text for q in queries]
    return vocab_from_texts(texts, max_size)


def wordpiece(word: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match-first; an unmatchable word becomes a single [UNK]."""
    if len(word) > MAX_CHARS_PER_WORD:
        return [vocab.unk_id]
    out = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end] if start == 0 else "##" + word[start:end]
            if piece in vocab.ids:
                match = vocab.ids[piece]
                break
            end -= 1
        if match is None:
            return [vocab.unk_id]
        out.append(match)
        start = end
    return out


def tokenize(text: str, vocab: Vocab) -> list[int]:
    ids: list[int] = []
    for word in analyze(text):
        ids.extend(wordpiece(word, vocab))
    return ids


def decode(ids: Iterable[int], vocab: Vocab) -> list[str]:
    """Reassemble words from piece ids, gluing ``##`` continuations."""
    words: list[str] = []
    for i in ids:
        piece = vocab.pieces[i]
        if piece.startswith("##") and words:
            words[-1] += piece[2:]
        else:
            words.append(piece)
    return words


@dataclass(frozen=True, eq=False)
class EncodedPair:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return len(self.token_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EncodedPair):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in (
            (self.token_ids, other.token_ids), (self.segment_ids, other.segment_ids),
            (self.mask, other.mask)))


def encode_pair(query_text: str, passage_text: str, vocab: Vocab,
                max_query: int = 64, max_total: int = 512) -> EncodedPair:
    """Pack ``[CLS] query [SEP] passage [SEP]`` with tail truncation."""
    if max_query < 0 or max_query + 3 > max_total:
        raise ValueError(f"need 0 <= max_query and max_query + 3 <= max_total "
                         f"(got {max_query}, {max_total})")
    a = tokenize(query_text, vocab)[:max_query]
    b = tokenize(passage_text, vocab)[: max_total - len(a) - 3]
    ids = [vocab.cls_id, *a, vocab.sep_id, *b, vocab.sep_id]
    segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return EncodedPair(np.asarray(ids, dtype=np.int64),
                       np.asarray(segments, dtype=np.int64),
                       np.ones(len(ids), dtype=np.int64))


@dataclass(frozen=True)
class Batch:
    """Right-padded (B, T) arrays ready for the encoder."""

    token_ids: np.ndarray
    segment_ids: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.token_ids.shape[0]


def pad_batch(pairs: Sequence[EncodedPair], length: int | None = None) -> Batch:
    if not pairs:
        raise ValueError("cannot pad an empty batch")
    longest = max(p.length for p in pairs)
    length = longest if length is None else length
    if length < longest:
        raise ValueError(f"pad length {length} shorter than longest sequence {longest}")
    n = len(pairs)
    tok = np.zeros((n, length), dtype=np.int64)
    seg = np.zeros((n, length), dtype=np.int64)
    mask = np.zeros((n, length), dtype=np.int64)
    for i, p in enumerate(pairs):
        tok[i, : p.length] = p.token_ids
        seg[i, : p.length] = p.segment_ids
        mask[i, : p.length] = p.mask
    return Batch(tok, seg, mask)
