"""Deterministic synthetic tasks whose labels survive partial views.

Every generator is a pure function of its arguments including the seed, and
each task builds in enough redundancy that erasing a moderate fraction of
the input cannot flip the label. Classification sequences carry the reserved
classification token (id 0) at position 0.

File formats (one example per line, token ids space-separated):
    classification:  label<TAB>ids
    pairs:           src_ids<TAB>tgt_ids
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embedding import CLS_ID, TokenSequence

KEYWORD_ID = 1
MARKER_A = 1
MARKER_B = 2
BOS_ID = 0
EOS_ID = 1


@dataclass
class LabeledExample:
    tokens: TokenSequence
    label: int


@dataclass(frozen=True)
class PairExample:
    src: tuple[int, ...]
    tgt: tuple[int, ...]  # lexicon image of src, reversed, EOS-terminated


def gen_keyword_task(
    n: int,
    length: int,
    vocab_size: int,
    redundancy: int,
    seed: int,
    label_noise: float = 0.0,
) -> list[LabeledExample]:
    """Balanced keyword-presence task.

    Positive examples contain the keyword token at `redundancy` random
    positions, negatives never contain it; remaining positions are uniform
    filler tokens. A span of less than `redundancy` rows can never erase all
    keyword copies, so the label stays recoverable under moderate erasure.
    label_noise flips that fraction of stored labels (inputs untouched).
    """
    if redundancy < 3:
        raise ValueError(f"redundancy must be >= 3, got {redundancy}")
    if length < 2 * redundancy:
        raise ValueError(f"length {length} must be >= 2 * redundancy {redundancy}")
    if redundancy > length - 1:
        raise ValueError(f"redundancy {redundancy} infeasible for length {length}")
    if vocab_size < 3:
        raise ValueError(f"vocab_size must be >= 3, got {vocab_size}")
    rng = np.random.default_rng(seed)
    examples: list[LabeledExample] = []
    for i in range(n):
        label = i % 2
        ids = [CLS_ID] + [int(v) for v in rng.integers(2, vocab_size, length - 1)]
        if label == 1:
            slots = rng.choice(length - 1, size=redundancy, replace=False)
            for s in slots:
                ids[1 + int(s)] = KEYWORD_ID
        assert ids.count(KEYWORD_ID) == (redundancy if label == 1 else 0)
        examples.append(LabeledExample(tokens=TokenSequence(ids), label=label))
    perm = rng.permutation(n)
    examples = [examples[int(i)] for i in perm]
    n_flip = int(label_noise * n)
    if n_flip:
        for i in rng.choice(n, size=n_flip, replace=False):
            ex = examples[int(i)]
            examples[int(i)] = LabeledExample(tokens=ex.tokens, label=1 - ex.label)
    return examples


def gen_majority_task(n: int, length: int, seed: int) -> list[LabeledExample]:
    """Two-marker majority vote with a forced margin of at least 30% of L."""
    if length % 2 == 0:
        raise ValueError(f"length must be odd, got {length}")
    rng = np.random.default_rng(seed)
    slots = length - 1
    margin_min = math.ceil(0.3 * length)
    count_lo = math.ceil((slots + margin_min) / 2)
    if count_lo > slots:
        raise ValueError(f"length {length} too short for a {margin_min}-token margin")
    examples: list[LabeledExample] = []
    for i in range(n):
        label = i % 2
        major = int(rng.integers(count_lo, slots + 1))
        winner, loser = (MARKER_A, MARKER_B) if label == 0 else (MARKER_B, MARKER_A)
        body = [winner] * major + [loser] * (slots - major)
        rng.shuffle(body)
        assert body.count(winner) - body.count(loser) >= margin_min
        examples.append(LabeledExample(tokens=TokenSequence([CLS_ID] + body), label=label))
    perm = rng.permutation(n)
    return [examples[int(i)] for i in perm]


def make_lexicon(seed: int, src_vocab: int, tgt_vocab: int) -> dict[int, int]:
    """Seeded bijection from source content ids to target content ids."""
    n_src = src_vocab - 2
    if tgt_vocab - 2 < n_src:
        raise ValueError(f"target vocab {tgt_vocab} too small for source vocab {src_vocab}")
    rng = np.random.default_rng([seed, 97])
    images = rng.permutation(tgt_vocab - 2)[:n_src]
    return {2 + i: 2 + int(images[i]) for i in range(n_src)}


def gen_lexicon_pairs(
    n: int,
    length: int,
    seed: int,
    src_vocab: int = 14,
    tgt_vocab: int = 14,
) -> list[PairExample]:
    """Token-level translation: map each token through a fixed lexicon, reverse.

    Content ids start at 2 in both vocabularies (0, 1 are the begin/end
    sentinels); targets end with EOS_ID.
    """
    lexicon = make_lexicon(seed, src_vocab, tgt_vocab)
    rng = np.random.default_rng(seed)
    pairs: list[PairExample] = []
    for _ in range(n):
        src = tuple(int(v) for v in rng.integers(2, src_vocab, length))
        tgt = tuple(lexicon[t] for t in reversed(src)) + (EOS_ID,)
        pairs.append(PairExample(src=src, tgt=tgt))
    return pairs


def split_dataset(examples: list, seed: int) -> tuple[list, list, list]:
    """Deterministic 70/15/15 train/dev/test split by seeded shuffle."""
    rng = np.random.default_rng([seed, 13])
    order = rng.permutation(len(examples))
    shuffled = [examples[int(i)] for i in order]
    n_train = int(0.7 * len(examples))
    n_dev = int(0.15 * len(examples))
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_dev],
        shuffled[n_train + n_dev :],
    )


def save_labeled(path: str, examples: list[LabeledExample]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for ex in examples:
            fh.write(f"{ex.label}\t{' '.join(str(i) for i in ex.tokens.ids)}\n")


def load_labeled(path: str) -> list[LabeledExample]:
    out = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            label, ids = line.rstrip("\n").split("\t")
            out.append(
                LabeledExample(tokens=TokenSequence([int(t) for t in ids.split()]), label=int(label))
            )
    return out


def save_pairs(path: str, pairs: list[PairExample]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for p in pairs:
            src = " ".join(str(i) for i in p.src)
            tgt = " ".join(str(i) for i in p.tgt)
            fh.write(f"{src}\t{tgt}\n")


def load_pairs(path: str) -> list[PairExample]:
    out = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            src, tgt = line.rstrip("\n").split("\t")
            out.append(
                PairExample(
                    src=tuple(int(t) for t in src.split()),
                    tgt=tuple(int(t) for t in tgt.split()),
                )
            )
    return out
