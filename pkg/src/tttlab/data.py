"""Byte-level corpus ingestion, packing, and synthetic retrieval tasks.

Tokens are raw bytes 0-255 plus a BOS marker (id 256).  Documents shorter
than a minimum length are discarded before packing so that fast weights
are never reset mid-sequence for trivial fragments; survivors are shuffled
deterministically and concatenated into fixed-length sequences of T tokens
behind a BOS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

BYTE_VOCAB = 257
BOS_ID = 256


def encode_bytes(text, bos=False):
    """UTF-8 bytes as token ids, optionally prefixed with BOS."""
    ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    if bos:
        ids = np.concatenate([[BOS_ID], ids])
    return ids


def decode_bytes(ids):
    ids = np.asarray(ids)
    return bytes(int(i) for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


@dataclass
class PackedSequence:
    tokens: np.ndarray  # (T+1,), starts with BOS
    doc_ids: np.ndarray  # provenance per token; -1 for BOS


class EmptyCorpusError(ValueError):
    pass


def ingest(source, min_doc_len, T, seed, delimiter="\n\n"):
    """Deterministically shuffle, filter, and pack a plain-text corpus.

    `source` is a file path or raw text.  Documents below min_doc_len bytes
    are dropped; the rest are shuffled by seed, concatenated, and cut into
    sequences of exactly T tokens each, prefixed with BOS.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        try:
            with open(source) as fh:
                text = fh.read()
        except (OSError, ValueError):
            text = source
    docs = [d for d in text.split(delimiter) if d]
    kept = [(i, d) for i, d in enumerate(docs) if len(d.encode("utf-8")) >= min_doc_len]
    if not kept:
        raise EmptyCorpusError(
            f"no documents of length >= {min_doc_len} among {len(docs)} documents"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(kept))
    stream_tokens, stream_docs = [], []
    for j in order:
        doc_id, doc = kept[j]
        ids = encode_bytes(doc)
        stream_tokens.append(ids)
        stream_docs.append(np.full(len(ids), doc_id, dtype=np.int64))
    tokens = np.concatenate(stream_tokens)
    doc_ids = np.concatenate(stream_docs)
    out = []
    for start in range(0, len(tokens) - T + 1, T):
        out.append(
            PackedSequence(
                tokens=np.concatenate([[BOS_ID], tokens[start : start + T]]),
                doc_ids=np.concatenate([[-1], doc_ids[start : start + T]]),
            )
        )
    return out


def sequences_to_array(packed):
    return np.stack([p.tokens for p in packed])


# ---------------------------------------------------------------------------
# synthetic toy corpus

WORD_LEN = 5

_LETTERS = np.array(list("abcdefghijklmnopqrstuvwxyz"))


def _skewed_counts(words_per_doc, distinct_words):
    """Occurrence counts per distinct word: halve the remainder each rank."""
    counts, remaining = [], words_per_doc
    for i in range(distinct_words):
        c = remaining - (distinct_words - 1 - i) if i == distinct_words - 1 else max(
            1, remaining // 2
        )
        counts.append(c)
        remaining -= c
    counts[-1] += remaining
    return counts


def gen_toy_corpus(n_docs, doc_len, seed, words_per_doc=8, distinct_words=4,
                   alphabet_size=8):
    """Documents that cycle a private sentence of fixed-length words.

    Each document draws a private sub-alphabet, builds a few distinct
    words from it, repeats them as adjacent runs with a skewed frequency
    profile, and cycles the resulting sentence (terminated by a period,
    so its byte period is odd and stays decorrelated from power-of-two
    processing strides) to the requested length.  Three kinds of structure
    make the documents predictable from visible context in different ways:

    - the fixed byte period rewards copying at a constant lag;
    - the word runs reward very recent context (a word usually repeats,
      so the previous few bytes identify the likely next word);
    - the private alphabet and word frequencies reward absorbing the
      document's stationary statistics.

    A static model sees near-uniform choices across documents.  Returns
    one corpus string with blank-line document separators.
    """
    counts = _skewed_counts(words_per_doc, distinct_words)
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        sub = rng.choice(len(_LETTERS), size=alphabet_size, replace=False)
        words = set()
        while len(words) < distinct_words:
            words.add("".join(_LETTERS[rng.choice(sub, size=WORD_LEN)]))
        words = sorted(words)
        rng.shuffle(words)
        blocks = [[w] * c for w, c in zip(words, counts)]
        order = rng.permutation(distinct_words)
        sentence = " ".join(w for j in order for w in blocks[j]) + ". "
        reps = doc_len // len(sentence) + 1
        docs.append((sentence * reps)[:doc_len])
    return "\n\n".join(docs)


# ---------------------------------------------------------------------------
# single-needle retrieval instances

NIAH_KINDS = ("passkey", "number", "uuid")

_FILLER = (
    "The grass is green. The sky is blue. The sun is yellow. Here we go. "
    "There and back again. "
)

_QUERIES = {
    "passkey": "What is the pass key? The pass key is",
    "number": "What is the special magic number? The special magic number is",
    "uuid": "What is the special magic uuid? The special magic uuid is",
}


@dataclass
class NIAHInstance:
    haystack: str
    needle_key: str
    needle_value: str
    position: int
    kind: str
    query: str
    answer: str


def gen_niah(kind, haystack_len, seed):
    """One needle-in-a-haystack instance with a uniformly placed needle."""
    if kind not in NIAH_KINDS:
        raise ValueError(f"unknown kind {kind!r}; choose from {NIAH_KINDS}")
    rng = np.random.default_rng(seed)
    if kind == "passkey":
        value = str(rng.integers(10000, 100000))
        key = "The pass key is"
    elif kind == "number":
        value = "".join(str(d) for d in rng.integers(0, 10, size=8))
        key = "The special magic number is"
    else:
        value = "".join(np.base_repr(d, 16).lower() for d in rng.integers(0, 16, size=32))
        key = "The special magic uuid is"
    needle = f"{key} {value}. "
    query = _QUERIES[kind]
    if haystack_len < len(needle):
        raise ValueError(
            f"haystack_len {haystack_len} too short for needle of {len(needle)} chars"
        )
    filler_len = haystack_len - len(needle)
    filler = (_FILLER * (filler_len // len(_FILLER) + 1))[:filler_len]
    position = int(rng.integers(0, filler_len + 1))
    haystack = filler[:position] + needle + filler[position:]
    if haystack.count(value) != 1:
        raise ValueError("needle value not unique in haystack")
    return NIAHInstance(haystack, key, value, position, kind, query, value)


def niah_to_jsonl(instances, path):
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps({
                "haystack": inst.haystack, "query": inst.query,
                "answer": inst.answer, "position": inst.position,
                "kind": inst.kind,
            }) + "\n")
    return path
