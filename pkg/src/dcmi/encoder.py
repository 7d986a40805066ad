"""Whitespace tokenizer and a small bag-of-embeddings text encoder."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

UNK = "<unk>"
MAX_LEN = 128


@dataclass
class Vocab:
    """Token to id map. Id 0 is the unknown token and is never stored in ``tokens``."""

    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i + 1 for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens) + 1

    def __getitem__(self, token: str) -> int:
        return self.index.get(token, 0)

    def as_dict(self) -> dict[str, int]:
        return {UNK: 0, **self.index}

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


def build_vocab(corpus: Sequence[str], max_size: int) -> Vocab:
    """Keep the ``max_size - 1`` most frequent tokens, ties broken lexicographically."""
    if max_size < 2:
        raise ValueError("max_size must be at least 2")
    if len(corpus) == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in text.lower().split())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([tok for tok, _ in ranked[: max_size - 1]])


def tokenize(text: str, vocab: Vocab, max_len: int = MAX_LEN) -> list[int]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return [vocab[tok] for tok in text.lower().split()[:max_len]]


@dataclass
class EncoderParams:
    embedding: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    dropout: float = 0.5

    def tensors(self) -> list[Tensor]:
        return [self.embedding, self.w1, self.b1, self.w2, self.b2]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]


def init_encoder(
    vocab_size: int,
    dim: int,
    rng: np.random.Generator,
    emb_dim: int | None = None,
    hidden_dim: int | None = None,
    dropout: float = 0.5,
) -> EncoderParams:
    emb_dim = emb_dim or dim
    hidden_dim = hidden_dim or dim
    return EncoderParams(
        embedding=Tensor(rng.normal(0.0, 1.0, (vocab_size, emb_dim)), True, "enc.embedding"),
        w1=Tensor(rng.normal(0.0, 1.0 / np.sqrt(emb_dim), (emb_dim, hidden_dim)), True, "enc.w1"),
        b1=Tensor(np.zeros(hidden_dim), True, "enc.b1"),
        w2=Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (hidden_dim, dim)), True, "enc.w2"),
        b2=Tensor(np.zeros(dim), True, "enc.b2"),
        dropout=dropout,
    )


def pooling_matrix(batch: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Row i holds token frequencies of sequence i divided by its length."""
    pool = np.zeros((len(batch), vocab_size))
    for row, ids in enumerate(batch):
        if len(ids) == 0:
            raise ValueError(f"empty token sequence at batch position {row}")
        np.add.at(pool[row], np.asarray(ids, dtype=np.intp), 1.0)
        pool[row] /= len(ids)
    return pool


def encode(
    batch: Sequence[Sequence[int]],
    params: EncoderParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encode token-id sequences into a ``(len(batch), d)`` representation.

    Mean-pools token embeddings, then applies ``relu -> dropout -> tanh``
    feed-forward layers. Dropout draws from ``rng`` and is active only when
    ``train`` is set.
    """
    pooled = Tensor(pooling_matrix(batch, params.embedding.shape[0])) @ params.embedding
    hidden = ad.relu(pooled @ params.w1 + params.b1)
    hidden = ad.dropout(hidden, params.dropout, rng, train)
    return ad.tanh(hidden @ params.w2 + params.b2)


def encode_texts(
    texts: Iterable[str], vocab: Vocab, params: EncoderParams, max_len: int = MAX_LEN
) -> Tensor:
    return encode([tokenize(t, vocab, max_len) or [0] for t in texts], params)
