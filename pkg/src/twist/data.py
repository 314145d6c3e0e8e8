"""Text corpora as token streams, with a fixed contiguous train/valid/test split."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import InvalidInputError

SPLIT = (0.98, 0.01, 0.01)
TOKENIZERS = ("char", "byte")


class DatasetNotFoundError(FileNotFoundError):
    pass


class VocabOverflowError(ValueError):
    pass


@dataclass
class Corpus:
    tokenizer: str
    vocab: list[str]
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) if self.tokenizer == "char" else 256

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise InvalidInputError(f"unknown split {name!r}")
        return getattr(self, name)

    def encode(self, text: str) -> np.ndarray:
        if self.tokenizer == "byte":
            return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int32)
        lookup = {ch: i for i, ch in enumerate(self.vocab)}
        return np.array([lookup[ch] for ch in text if ch in lookup], dtype=np.int32)

    def decode(self, ids) -> str:
        ids = np.asarray(ids, dtype=np.int64)
        if self.tokenizer == "byte":
            return bytes(ids.astype(np.uint8).tolist()).decode("utf-8", errors="replace")
        return "".join(self.vocab[i] for i in ids)


def split_bounds(n: int, fractions=SPLIT) -> tuple[int, int]:
    a = int(n * fractions[0])
    b = a + int(n * fractions[1])
    return a, b


def load_corpus(path, tokenizer: str = "char", max_vocab: int | None = None) -> Corpus:
    """Read a text file and split it 98/1/1 in document order.

    For ``char`` the vocabulary is the sorted set of characters in the train
    split; characters that only occur in valid/test are dropped there.
    """
    if tokenizer not in TOKENIZERS:
        raise InvalidInputError(f"unknown tokenizer {tokenizer!r}; use one of {TOKENIZERS}")
    path = Path(path)
    if not path.is_file():
        raise DatasetNotFoundError(f"dataset not found: {path}")
    raw = path.read_bytes()
    if not raw:
        raise InvalidInputError(f"dataset {path} is empty")
    if tokenizer == "byte":
        ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int32)
        a, b = split_bounds(len(ids))
        vocab = [chr(i) for i in range(256)]
        corpus = Corpus("byte", vocab, ids[:a], ids[a:b], ids[b:])
    else:
        text = raw.decode("utf-8")
        a, b = split_bounds(len(text))
        vocab = sorted(set(text[:a]))
        corpus = Corpus("char", vocab, np.empty(0, np.int32), np.empty(0, np.int32),
                        np.empty(0, np.int32))
        corpus.train = corpus.encode(text[:a])
        corpus.valid = corpus.encode(text[a:b])
        corpus.test = corpus.encode(text[b:])
    if max_vocab is not None and corpus.vocab_size > max_vocab:
        raise VocabOverflowError(
            f"{tokenizer} vocabulary has {corpus.vocab_size} symbols, model allows {max_vocab}")
    return corpus


def sequences(stream: np.ndarray, seq_len: int) -> np.ndarray:
    """Non-overlapping windows of ``seq_len + 1`` tokens (inputs plus next-token targets)."""
    n = (len(stream) - 1) // seq_len
    if n < 1:
        return np.empty((0, seq_len + 1), dtype=np.int32)
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    return np.asarray(stream, dtype=np.int32)[idx]


def shard_batches(seqs: np.ndarray, S: int, batch_size: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Shuffle, cut into S equal contiguous shards and batch each one.

    Returns an array of shape (S, n_batches, batch_size, seq_len + 1); leftovers are dropped.
    """
    perm = rng.permutation(len(seqs))
    per_worker = len(seqs) // S
    n_batches = per_worker // batch_size
    if n_batches < 1:
        raise InvalidInputError(
            f"{len(seqs)} sequences cannot fill one batch of {batch_size} for each of {S} workers")
    keep = perm[:S * per_worker].reshape(S, per_worker)[:, :n_batches * batch_size]
    return seqs[keep].reshape(S, n_batches, batch_size, seqs.shape[1])
