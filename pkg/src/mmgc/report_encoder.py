"""Whitespace vocabulary, tokenizer and a compact causal transformer for reports."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataIOError, EmptyCorpus, FormatError, ShapeMismatch
from .nn import Embedding, Module, Parameter, TransformerBlock, uniform_init
from .tensor import Tensor, embedding

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1


class Vocabulary:
    """Ordered unique tokens; id = position. Ids 0 and 1 are PAD and UNK."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = list(tokens)
        if self.tokens[:2] != [PAD, UNK]:
            raise FormatError("vocabulary must start with the PAD and UNK tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise FormatError("vocabulary contains duplicate tokens")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataIOError(f"cannot read vocabulary {path}: {exc}") from exc
        return cls(text.splitlines())


def build_vocab(corpus: list[str]) -> Vocabulary:
    counts = Counter(tok for report in corpus for tok in report.lower().split())
    for reserved in (PAD, UNK):
        counts.pop(reserved, None)
    if not counts:
        raise EmptyCorpus("corpus contains no tokens")
    ordered = sorted(counts, key=lambda tok: (-counts[tok], tok))
    return Vocabulary([PAD, UNK, *ordered])


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray  # (max_len,) int64, PAD beyond ``length``
    length: int


def tokenize(vocab: Vocabulary, report: str, max_len: int) -> TokenSequence:
    """Total: unknown words map to UNK and an empty report becomes a single UNK."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.id_of(tok) for tok in report.lower().split()][:max_len] or [UNK_ID]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return TokenSequence(out, len(ids))


def causal_padding_mask(lengths: np.ndarray, max_len: int) -> np.ndarray:
    """Boolean (..., L, L): query p may see key j iff j <= p and j < length."""
    lengths = np.asarray(lengths)
    causal = np.tril(np.ones((max_len, max_len), dtype=bool))
    valid = np.arange(max_len) < lengths[..., None]
    return causal & valid[..., None, :]


class ReportEncoder(Module):
    def __init__(self, vocab_size: int, dim: int, depth: int, heads: int, max_len: int,
                 rng: np.random.Generator):
        self.max_len = max_len
        self.tok = Embedding(vocab_size, dim, rng)
        self.pos = Parameter(uniform_init(rng, (max_len, dim), dim))
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(depth)]

    def hidden_states(self, ids, lengths) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[-1]
        if n > self.max_len:
            raise ShapeMismatch(f"sequence length {n} exceeds max_len {self.max_len}")
        x = self.tok(ids) + embedding(self.pos, np.arange(n))
        mask = causal_padding_mask(lengths, n)
        for block in self.blocks:
            x = block(x, mask)
        return x

    def forward(self, ids, lengths) -> Tensor:
        """Mean of final hidden states over the non-PAD positions: (..., L) -> (..., d)."""
        lengths = np.asarray(lengths)
        if (lengths < 1).any():
            raise ValueError("every sequence needs length >= 1")
        h = self.hidden_states(ids, lengths)
        n = h.shape[-2]
        weights = (np.arange(n) < lengths[..., None]) / lengths[..., None]
        return (h * weights[..., None]).sum(axis=-2)


def encode_report(enc: ReportEncoder, seq: TokenSequence) -> Tensor:
    return enc(seq.ids, seq.length)
