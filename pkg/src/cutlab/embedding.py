"""Input-embedding composition: token + position (+ segment) tables.

The composed L x d matrix is the surface every erasure operation acts on.
A reserved classification token (id 0) is prepended to classification
inputs by the data generators; its final hidden state is the pooled
representation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

CLS_ID = 0


@dataclass
class TokenSequence:
    """Integer token ids with optional per-token segment ids."""

    ids: list[int]
    segments: list[int] | None = None

    def __post_init__(self) -> None:
        if len(self.ids) < 1:
            raise ValueError("TokenSequence must contain at least one token")
        if self.segments is not None and len(self.segments) != len(self.ids):
            raise ValueError(
                f"segments length {len(self.segments)} != ids length {len(self.ids)}"
            )

    @property
    def length(self) -> int:
        return len(self.ids)


@dataclass
class EmbeddingTables:
    """Learnable token / position / segment tables sharing one width d."""

    token_table: Tensor
    position_table: Tensor
    segment_table: Tensor | None = None

    def __post_init__(self) -> None:
        d = self.token_table.shape[1]
        if self.position_table.shape[1] != d:
            raise ValueError(
                f"position table width {self.position_table.shape[1]} != token width {d}"
            )
        if self.segment_table is not None and self.segment_table.shape[1] != d:
            raise ValueError(
                f"segment table width {self.segment_table.shape[1]} != token width {d}"
            )

    @property
    def d(self) -> int:
        return self.token_table.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.token_table.shape[0]

    @property
    def max_length(self) -> int:
        return self.position_table.shape[0]

    @property
    def n_segments(self) -> int:
        return 0 if self.segment_table is None else self.segment_table.shape[0]


def make_tables(
    rng: np.random.Generator,
    vocab_size: int,
    max_length: int,
    d: int,
    n_segments: int = 1,
    std: float = 0.02,
) -> EmbeddingTables:
    """Freshly initialized tables, normal(0, std), all marked trainable."""
    seg = None
    if n_segments >= 1:
        seg = Tensor(rng.normal(0.0, std, (n_segments, d)), requires_grad=True)
    return EmbeddingTables(
        token_table=Tensor(rng.normal(0.0, std, (vocab_size, d)), requires_grad=True),
        position_table=Tensor(rng.normal(0.0, std, (max_length, d)), requires_grad=True),
        segment_table=seg,
    )


def compose(tables: EmbeddingTables, seq: TokenSequence) -> Tensor:
    """Sum the table rows for a sequence into its L x d embedding matrix.

    Differentiable with respect to every table; gradient reaches exactly the
    rows a sequence uses.
    """
    length = seq.length
    if length > tables.max_length:
        raise ValueError(f"sequence length {length} exceeds max length {tables.max_length}")
    if any(i < 0 or i >= tables.vocab_size for i in seq.ids):
        raise ValueError(f"token id out of range [0, {tables.vocab_size})")
    out = tables.token_table.gather_rows(seq.ids) + tables.position_table.gather_rows(
        range(length)
    )
    if tables.segment_table is not None:
        segments = seq.segments if seq.segments is not None else [0] * length
        if any(s < 0 or s >= tables.n_segments for s in segments):
            raise ValueError(f"segment id out of range [0, {tables.n_segments})")
        out = out + tables.segment_table.gather_rows(segments)
    return out
