"""Corpora and the non-repeating token stream.

The bundled corpus is a seeded order-3 Markov chain over a 64-symbol
printable alphabet. The previous byte picks a small candidate set and coarse
classes of the two bytes before it reweight that set, so bigram statistics are
learned quickly and longer context keeps paying off for bigger models.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels

HELD_OUT_FRACTION = 0.02
TOK16_MAGIC = b"TOK16 "

_ALPHABET = 64
_BYTE_OFFSET = 32
_CANDIDATES = 8
_CLASSES2 = 4  # coarse class of the second-previous byte
_CLASSES3 = 2  # coarse class of the third-previous byte
_MIX = 0.9


class DataExhausted(RuntimeError):
    """The stream cannot serve more unseen tokens."""


def synthetic_corpus(n_tokens=20_000_000, seed=0):
    """Deterministic byte corpus (uint8) of length ``n_tokens``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    a = _ALPHABET
    k2, k3 = _CLASSES2, _CLASSES3
    cls2 = rng.integers(0, k2, size=a)
    cls3 = rng.integers(0, k3, size=a)
    # the previous byte fixes the candidate set; older context only reweights it
    per_prev = np.stack([rng.choice(a, size=_CANDIDATES, replace=False) for _ in range(a)])
    s3, s2, s1 = np.meshgrid(np.arange(a), np.arange(a), np.arange(a), indexing="ij")
    bucket_of = ((s1 * k2 + cls2[s2]) * k3 + cls3[s3]).reshape(-1)
    n_buckets = a * k2 * k3
    cand = np.repeat(per_prev, k2 * k3, axis=0)
    w = rng.dirichlet(np.full(_CANDIDATES, 0.5), size=n_buckets)
    cand_cdf = np.cumsum(w, axis=1)
    unigram = rng.dirichlet(np.full(a, 2.0))
    uni_cdf = np.cumsum(unigram)

    out = np.zeros(n_tokens, dtype=np.int64)
    out[:3] = rng.integers(0, a, size=3)
    uniforms = rng.random(n_tokens)
    kernels.markov_walk(
        out,
        uniforms,
        np.ascontiguousarray(bucket_of, dtype=np.int64),
        np.ascontiguousarray(cand, dtype=np.int64),
        np.ascontiguousarray(cand_cdf),
        np.ascontiguousarray(uni_cdf),
        _MIX,
        a,
    )
    return (out + _BYTE_OFFSET).astype(np.uint8)


def write_tok16(path, ids, vocab):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab or vocab > 65536):
        raise ValueError("ids must lie in [0, vocab) with vocab <= 65536")
    with open(path, "wb") as f:
        f.write(TOK16_MAGIC + str(int(vocab)).encode() + b"\n")
        f.write(ids.astype("<u2").tobytes())


def load_corpus(path):
    """Read a raw byte file, or a TOK16 token file. Returns (ids, vocab)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw.startswith(TOK16_MAGIC):
        nl = raw.index(b"\n")
        vocab = int(raw[len(TOK16_MAGIC):nl].decode())
        ids = np.frombuffer(raw[nl + 1:], dtype="<u2").astype(np.int64)
        return ids, vocab
    return np.frombuffer(raw, dtype=np.uint8).copy(), 256


@dataclass
class Corpus:
    """Token ids split into a training prefix and a fixed held-out tail."""

    ids: np.ndarray
    vocab: int = 256
    held_out_fraction: float = HELD_OUT_FRACTION

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        n_held = int(len(self.ids) * self.held_out_fraction)
        self.split = len(self.ids) - n_held

    @classmethod
    def default(cls, n_tokens=20_000_000, seed=0):
        return cls(synthetic_corpus(n_tokens, seed))

    @classmethod
    def from_file(cls, path):
        ids, vocab = load_corpus(os.fspath(path))
        return cls(ids, vocab)

    @property
    def train(self):
        return self.ids[: self.split]

    @property
    def held_out(self):
        return self.ids[self.split:]


@dataclass
class TokenStream:
    """Serves contiguous (B, T) batches; each input offset is served at most once.

    Served input offsets are kept as merged half-open intervals so a chain of
    runs can be audited for repeats.
    """

    corpus: np.ndarray
    block_size: int
    batch_size: int
    cursor: int = 0
    served: list = field(default_factory=list)

    @property
    def tokens_per_batch(self):
        return self.block_size * self.batch_size

    def remaining(self):
        # the last served input needs one more token as its target
        return max(0, len(self.corpus) - 1 - self.cursor)

    def next_batch(self):
        n = self.tokens_per_batch
        c = self.cursor
        if c + n + 1 > len(self.corpus):
            raise DataExhausted(
                f"need {n} unseen tokens at offset {c}, corpus has {len(self.corpus)}"
            )
        chunk = self.corpus[c: c + n + 1].astype(np.int64)
        x = chunk[:-1].reshape(self.batch_size, self.block_size)
        y = chunk[1:].reshape(self.batch_size, self.block_size)
        if self.served and self.served[-1][1] == c:
            self.served[-1][1] = c + n
        else:
            self.served.append([c, c + n])
        self.cursor = c + n
        return x, y


def intervals_disjoint(intervals):
    """True if no two half-open [start, end) intervals overlap."""
    iv = sorted((int(a), int(b)) for a, b in intervals)
    return all(prev[1] <= cur[0] for prev, cur in zip(iv, iv[1:]))


def eval_batches(held_out, block_size, batch_size, eval_tokens):
    """Fixed (x, y) batches from the start of the held-out split."""
    per = block_size * batch_size
    n_batches = max(1, eval_tokens // per)
    if n_batches * per + 1 > len(held_out):
        n_batches = (len(held_out) - 1) // per
        if n_batches < 1:
            raise DataExhausted("held-out split smaller than one evaluation batch")
    out = []
    for i in range(n_batches):
        chunk = held_out[i * per: (i + 1) * per + 1].astype(np.int64)
        out.append((chunk[:-1].reshape(batch_size, block_size), chunk[1:].reshape(batch_size, block_size)))
    return out
