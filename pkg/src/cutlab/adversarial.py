"""PGD-style embedding-perturbation baseline with pass accounting.

Sign-gradient ascent inside an inf-norm ball around the composed embedding
matrix. Each ascent iteration is a full model forward plus backward, so a
T-step perturbation costs T/T passes; the combined training loss adds one
more forward (the perturbed input) and, once the caller backpropagates it,
one more backward, for 1+T of each per optimization step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import cross_entropy
from .tensor import Tensor, backward, zero_grads


@dataclass(frozen=True)
class AdvConfig:
    """Ascent steps T, step size, and inf-norm radius of the perturbation ball."""

    steps: int = 1
    step_size: float = 0.01
    bound: float = 0.05

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size <= 0 or self.bound < 0:
            raise ValueError(f"step_size must be > 0 and bound >= 0, got {self}")


def _ascend(W_values: np.ndarray, label: int, model, cfg: AdvConfig, counter=None) -> tuple[np.ndarray, float]:
    """Run the T sign-gradient ascent iterations from delta = 0.

    Returns the final perturbation and the clean loss value (the first
    iteration evaluates the unperturbed input, since delta starts at zero).
    Parameter .grad fields are polluted by the ascent backwards; callers
    re-zero them before the training backward.
    """
    delta = np.zeros_like(W_values)
    clean_loss = 0.0
    for t in range(cfg.steps):
        d = Tensor(delta, requires_grad=True)
        loss = cross_entropy(model.classify(Tensor(W_values) + d, counter), label)
        if t == 0:
            clean_loss = loss.item()
        backward(loss, counter)
        g = d.grad if d.grad is not None else np.zeros_like(delta)
        delta = np.clip(delta + cfg.step_size * np.sign(g), -cfg.bound, cfg.bound)
    return delta, clean_loss


def pgd_perturb(W: Tensor, label: int, model, cfg: AdvConfig, counter=None) -> Tensor:
    """Worst-case-ish perturbed copy of W inside the inf-norm ball.

    Each of the T iterations counts one forward and one backward.
    """
    delta, _ = _ascend(W.data, label, model, cfg, counter)
    return Tensor(W.data + delta)


def adversarial_step_loss(W: Tensor, label: int, model, cfg: AdvConfig, counter=None) -> Tensor:
    """Clean-plus-perturbed cross-entropy for one example.

    The returned scalar's value is ce(W) + ce(W + delta). The clean term is
    the value observed in the first ascent iteration (delta = 0) and enters
    as a constant, so the caller's backward propagates through the perturbed
    branch; with that final backward the step totals 1+T forwards and
    1+T backwards.
    """
    delta, clean_loss = _ascend(W.data, label, model, cfg, counter)
    zero_grads(model.params.values())
    ce_pert = cross_entropy(model.classify(W + Tensor(delta), counter), label)
    return ce_pert + clean_loss
