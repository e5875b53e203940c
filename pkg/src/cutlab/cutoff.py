"""Structured erasure of input-embedding matrices.

Three mask families over an L x d embedding matrix: token (whole rows),
feature (whole columns), span (one contiguous block of rows). Erased counts
follow the floor law count = floor(ratio * eligible extent); a zero count
degrades to an identity view. Masks zero complete rows or columns, which is
what separates these views from unstructured dropout.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import Tensor


class CutoffKind(str, Enum):
    TOKEN = "token"
    FEATURE = "feature"
    SPAN = "span"
    NONE = "none"


@dataclass(frozen=True)
class CutoffSpec:
    """Declarative description of an erasure family.

    cutoff_ratio is the fraction of the eligible extent to erase (distinct
    from any loss coefficient); n_samples is the number of augmented views
    drawn per example. protect_cls keeps position 0 (the pooled
    classification token) out of every row mask.
    """

    kind: CutoffKind = CutoffKind.NONE
    cutoff_ratio: float = 0.0
    n_samples: int = 1
    protect_cls: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.cutoff_ratio < 1.0:
            raise ValueError(f"cutoff_ratio must be in [0, 1), got {self.cutoff_ratio}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")


@dataclass(frozen=True)
class CutoffMask:
    """Realized erasure: which rows/columns of an L x d matrix become zero."""

    kind: CutoffKind
    zeroed_rows: frozenset[int] = frozenset()
    zeroed_cols: frozenset[int] = frozenset()
    span: tuple[int, int] | None = None  # (start, length) for SPAN masks

    def is_empty(self) -> bool:
        return not self.zeroed_rows and not self.zeroed_cols


def sample_token_mask(length: int, spec: CutoffSpec, rng: np.random.Generator) -> CutoffMask:
    """Erase floor(ratio * eligible) distinct token rows, uniformly without replacement."""
    if spec.kind is not CutoffKind.TOKEN:
        raise ValueError(f"expected a token spec, got {spec.kind}")
    eligible = list(range(1, length)) if spec.protect_cls else list(range(length))
    count = int(spec.cutoff_ratio * len(eligible))
    if count == 0:
        return CutoffMask(kind=CutoffKind.TOKEN)
    rows = rng.choice(len(eligible), size=count, replace=False)
    return CutoffMask(kind=CutoffKind.TOKEN, zeroed_rows=frozenset(eligible[i] for i in rows))


def sample_feature_mask(d: int, spec: CutoffSpec, rng: np.random.Generator) -> CutoffMask:
    """Erase floor(ratio * d) distinct embedding columns, uniformly without replacement."""
    if spec.kind is not CutoffKind.FEATURE:
        raise ValueError(f"expected a feature spec, got {spec.kind}")
    count = int(spec.cutoff_ratio * d)
    if count == 0:
        return CutoffMask(kind=CutoffKind.FEATURE)
    cols = rng.choice(d, size=count, replace=False)
    return CutoffMask(kind=CutoffKind.FEATURE, zeroed_cols=frozenset(int(c) for c in cols))


def sample_span_mask(length: int, spec: CutoffSpec, rng: np.random.Generator) -> CutoffMask:
    """Erase one contiguous row block of length floor(ratio * L) at a uniform start."""
    if spec.kind is not CutoffKind.SPAN:
        raise ValueError(f"expected a span spec, got {spec.kind}")
    span_len = int(spec.cutoff_ratio * length)
    if span_len == 0:
        return CutoffMask(kind=CutoffKind.SPAN)
    lo = 1 if spec.protect_cls else 0
    start = int(rng.integers(lo, length - span_len + 1))
    return CutoffMask(
        kind=CutoffKind.SPAN,
        zeroed_rows=frozenset(range(start, start + span_len)),
        span=(start, span_len),
    )


def sample_mask(length: int, d: int, spec: CutoffSpec, rng: np.random.Generator) -> CutoffMask:
    if spec.kind is CutoffKind.TOKEN:
        return sample_token_mask(length, spec, rng)
    if spec.kind is CutoffKind.FEATURE:
        return sample_feature_mask(d, spec, rng)
    if spec.kind is CutoffKind.SPAN:
        return sample_span_mask(length, spec, rng)
    return CutoffMask(kind=CutoffKind.NONE)


def mask_matrix(mask: CutoffMask, length: int, d: int) -> np.ndarray:
    """The 0/1 multiplier matrix a mask denotes over an L x d surface."""
    if mask.zeroed_rows and max(mask.zeroed_rows) >= length:
        raise ValueError(f"mask row {max(mask.zeroed_rows)} out of range for length {length}")
    if mask.zeroed_cols and max(mask.zeroed_cols) >= d:
        raise ValueError(f"mask column {max(mask.zeroed_cols)} out of range for width {d}")
    m = np.ones((length, d))
    if mask.zeroed_rows:
        m[sorted(mask.zeroed_rows), :] = 0.0
    if mask.zeroed_cols:
        m[:, sorted(mask.zeroed_cols)] = 0.0
    return m


def apply_mask(W: Tensor, mask: CutoffMask) -> Tensor:
    """Zero the masked rows/columns of W; everything else passes through untouched.

    Implemented as an elementwise multiply by a constant 0/1 matrix so the
    graph records it: gradient is identity on kept entries, zero on erased
    ones.
    """
    length, d = W.shape
    return W * Tensor(mask_matrix(mask, length, d))


def make_views(W: Tensor, spec: CutoffSpec, rng: np.random.Generator) -> list[Tensor]:
    """Draw spec.n_samples independent masks and apply each to W.

    Draws consume the generator sequentially, so a fixed seed reproduces the
    same view set.
    """
    length, d = W.shape
    return [apply_mask(W, sample_mask(length, d, spec, rng)) for _ in range(spec.n_samples)]
