"""Byte-level tokenizer, text ingestion and a seeded two-topic synthetic corpus."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError

PAD, BOS, EOS = 256, 257, 258
VOCAB_SIZE = 259


def tokenize(text: str, specials: bool = True) -> list[int]:
    ids = list(text.encode("utf-8"))
    return [BOS, *ids, EOS] if specials else ids


def detokenize(ids: Sequence[int]) -> str:
    return bytes(int(i) for i in ids if int(i) < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class SyntheticSpec:
    """Word-level Markov text with one latent topic per sequence.

    Each topic draws its words from its own letter range, so the topic of a
    sequence is readable from any word, and every word has a small set of
    preferred successors.
    """

    n_topics: int = 2
    words_per_topic: int = 12
    successors: int = 2
    n_sequences: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.n_topics <= 4:
            raise ConfigError("n_topics must be between 1 and 4")
        if self.words_per_topic < 2 or self.successors < 1:
            raise ConfigError("need at least 2 words per topic and 1 successor")


_ALPHABETS = ("abcdefghijklm", "nopqrstuvwxyz", "ABCDEFGHIJKLM", "NOPQRSTUVWXYZ")


class SyntheticCorpus:
    def __init__(self, spec: SyntheticSpec) -> None:
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 1])
        self.vocab: list[list[str]] = []
        self.transitions: list[np.ndarray] = []
        for z in range(spec.n_topics):
            letters = _ALPHABETS[z]
            words: list[str] = []
            while len(words) < spec.words_per_topic:
                n = int(rng.integers(3, 7))
                w = "".join(rng.choice(list(letters), size=n))
                if w not in words:
                    words.append(w)
            self.vocab.append(words)
            trans = np.zeros((len(words), len(words)))
            weights = np.array([0.7, 0.2, 0.1, 0.05][: spec.successors])
            weights = weights / weights.sum()
            for i in range(len(words)):
                succ = rng.choice(len(words), size=spec.successors, replace=False)
                trans[i, succ] = weights
            self.transitions.append(trans)

    def text(self, rng: np.random.Generator, topic: int, n_chars: int) -> str:
        words = self.vocab[topic]
        trans = self.transitions[topic]
        w = int(rng.integers(len(words)))
        out = []
        size = 0
        while size < n_chars:
            out.append(words[w])
            size += len(words[w]) + 1
            w = int(rng.choice(len(words), p=trans[w]))
        return " ".join(out)

    def sequences(self, seq_len: int, n: int | None = None, offset: int = 0):
        """(tokens, topics): ``n`` sequences of exactly ``seq_len`` tokens each."""
        n = self.spec.n_sequences if n is None else n
        seqs = np.zeros((n, seq_len), dtype=np.int64)
        topics = np.zeros(n, dtype=np.int64)
        for i in range(n):
            rng = np.random.default_rng([self.spec.seed, 2, offset + i])
            z = int(rng.integers(self.spec.n_topics))
            ids = tokenize(self.text(rng, z, seq_len), specials=False)
            seqs[i] = [BOS, *ids[: seq_len - 1]]
            topics[i] = z
        return seqs, topics


def chunk_stream(stream: Sequence[int], seq_len: int) -> np.ndarray:
    n = len(stream) // seq_len
    if n == 0:
        padded = list(stream) + [PAD] * (seq_len - len(stream))
        return np.array([padded], dtype=np.int64)
    return np.asarray(stream[: n * seq_len], dtype=np.int64).reshape(n, seq_len)


def ingest_corpus(source: str | os.PathLike | SyntheticSpec, seq_len: int) -> np.ndarray:
    """Fixed-length training sequences from a UTF-8 text file or a synthetic spec."""
    if isinstance(source, SyntheticSpec):
        return SyntheticCorpus(source).sequences(seq_len)[0]
    with open(source, "r", encoding="utf-8") as fh:
        text = fh.read()
    docs = [d.strip() for d in text.split("\n\n") if d.strip()]
    if not docs:
        raise ConfigError(f"corpus {source} is empty")
    stream: list[int] = []
    for doc in docs:
        stream.extend(tokenize(doc))
    return chunk_stream(stream, seq_len)
