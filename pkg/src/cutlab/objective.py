"""Training objective: cross-entropy plus a Jensen-Shannon consistency term.

The combined loss on one example with N augmented views is

    total = ce(original) + aug_ce_weight * sum_i ce(view_i)
          + js_weight * js_consistency(original prediction, view predictions)

where js_consistency is the mean KL divergence from each predictive
distribution to the average of all of them. Natural log throughout, so all
losses are in nats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import LOG_EPS, Tensor, _accum, logsumexp, make_op


@dataclass(frozen=True)
class LossWeights:
    """Coefficients on the augmented cross-entropy sum and the consistency term."""

    aug_ce_weight: float = 1.0
    js_weight: float = 1.0

    def __post_init__(self) -> None:
        for name in ("aug_ce_weight", "js_weight"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class LossBreakdown:
    """The combined objective split into its terms, all scalar graph tensors."""

    ce_original: Tensor
    ce_augmented: list[Tensor]
    js: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "ce_original": self.ce_original.item(),
            "ce_augmented_sum": math.fsum(t.item() for t in self.ce_augmented),
            "js": self.js.item(),
            "total": self.total.item(),
        }


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], computed in log space."""
    if logits.ndim != 1:
        raise ValueError(f"cross_entropy expects a logit vector, got shape {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range [0, {logits.shape[0]})")
    return logsumexp(logits) - logits.pick(label)


def js_consistency(preds: list[Tensor]) -> Tensor:
    """Mean KL from each distribution to the average distribution.

    preds holds M >= 2 probability vectors over the same classes; index 0 is
    the original input's prediction by convention. Probabilities are clamped
    at LOG_EPS inside logs; the average is treated as a function of the
    inputs, so gradients flow through both KL arguments. Summation uses fsum,
    which makes the result exactly invariant under permutation of preds.
    """
    m = len(preds)
    if m < 2:
        raise ValueError(f"js_consistency needs at least 2 predictions, got {m}")
    n_classes = preds[0].shape[0] if preds[0].ndim == 1 else -1
    for p in preds:
        if p.ndim != 1 or p.shape[0] != n_classes:
            raise ValueError("js_consistency predictions must be same-length vectors")
        if np.any(p.data < 0.0):
            raise ValueError("js_consistency predictions must be non-negative")
        if abs(math.fsum(p.data.tolist()) - 1.0) > 1e-9:
            raise ValueError("js_consistency predictions must sum to 1 within 1e-9")

    rows = [p.data for p in preds]
    if all(np.array_equal(rows[0], r) for r in rows[1:]):
        # Equal distributions: the divergence and all its input gradients are
        # exactly zero, so record a no-op backward rule.
        return make_op(0.0, tuple(preds), lambda g: None)

    avg = np.array([math.fsum(r[c] for r in rows) / m for c in range(n_classes)])
    log_p = [np.log(np.maximum(r, LOG_EPS)) for r in rows]
    log_avg = np.log(np.maximum(avg, LOG_EPS))
    kls = [math.fsum((r * (lp - log_avg)).tolist()) for r, lp in zip(rows, log_p)]
    value = math.fsum(kls) / m

    p_open = [r > LOG_EPS for r in rows]
    avg_open = avg > LOG_EPS

    def back(g: np.ndarray) -> None:
        scale = float(g) / m
        for p, r, lp, po in zip(preds, rows, log_p, p_open):
            _accum(p, scale * (lp - log_avg + po.astype(float) - avg_open.astype(float)))

    return make_op(value, tuple(preds), back)


def total_loss(
    logits_original: Tensor,
    logits_views: list[Tensor],
    label: int,
    weights: LossWeights,
) -> LossBreakdown:
    """Assemble the combined objective for one example and its N views."""
    if len(logits_views) < 1:
        raise ValueError("total_loss needs at least one augmented view")
    n_classes = logits_original.shape[0]
    for v in logits_views:
        if v.shape != (n_classes,):
            raise ValueError(f"view logits shape {v.shape} != original {logits_original.shape}")

    ce_orig = cross_entropy(logits_original, label)
    ce_views = [cross_entropy(v, label) for v in logits_views]
    preds = [logits_original.softmax()] + [v.softmax() for v in logits_views]
    js = js_consistency(preds)

    aug_sum = ce_views[0]
    for t in ce_views[1:]:
        aug_sum = aug_sum + t
    total = ce_orig + weights.aug_ce_weight * aug_sum + weights.js_weight * js
    return LossBreakdown(ce_original=ce_orig, ce_augmented=ce_views, js=js, total=total)
