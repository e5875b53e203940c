"""Optimization loop: view generation, combined loss, Adam, pass accounting.

Pass counting is batch-level: one sweep of the model over a batch is one
forward pass, one gradient propagation is one backward pass. Per
optimization step that makes the closed forms

    baseline     1 forward / 1 backward
    cutoff       N+1 forwards / 1 backward   (N views share one graph)
    adversarial  1+T forwards / 1+T backwards

which the trainer asserts after every step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adversarial import AdvConfig
from .cutoff import CutoffSpec, apply_mask, make_views, sample_mask
from .data import BOS_ID, LabeledExample, PairExample
from .models import EncoderClassifier, Seq2SeqModel
from .objective import LossBreakdown, LossWeights, cross_entropy, js_consistency, total_loss
from .tensor import Tensor, backward, no_grad, zero_grads

MODES = ("baseline", "cutoff", "adversarial")


class NonFiniteGradientError(RuntimeError):
    """Raised when an optimizer step sees a NaN or infinite gradient."""


@dataclass
class PassCounter:
    """Monotone tallies of model forward and backward graph traversals."""

    forwards: int = 0
    backwards: int = 0
    snapshots: list[tuple[int, int]] = field(default_factory=list)

    def mark_step(self) -> None:
        self.snapshots.append((self.forwards, self.backwards))

    def last_step_delta(self) -> tuple[int, int]:
        if not self.snapshots:
            return (self.forwards, self.backwards)
        cur = self.snapshots[-1]
        prev = self.snapshots[-2] if len(self.snapshots) > 1 else (0, 0)
        return (cur[0] - prev[0], cur[1] - prev[1])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.06
    weight_decay: float = 0.1
    mode: str = "baseline"
    cutoff: CutoffSpec = field(default_factory=CutoffSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    adv: AdvConfig = field(default_factory=AdvConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr over ceil(warmup_ratio * T) steps, linear decay after."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = math.ceil(cfg.warmup_ratio * total_steps)
    if step <= warm and warm > 0:
        return cfg.peak_lr * step / warm
    return cfg.peak_lr * (total_steps - step) / (total_steps - warm)


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Decay applies only to matrices (ndim >= 2); vectors, i.e. biases and
    layer-norm parameters, are excluded.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float, weight_decay: float = 0.0) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in {name}; step rejected")
            grads[name] = g
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = p.data - lr * update
            if p.data.ndim >= 2 and weight_decay > 0.0:
                p.data = p.data - lr * weight_decay * p.data


def _expected_passes(cfg: TrainConfig) -> tuple[int, int]:
    if cfg.mode == "cutoff":
        return (cfg.cutoff.n_samples + 1, 1)
    if cfg.mode == "adversarial":
        return (1 + cfg.adv.steps, 1 + cfg.adv.steps)
    return (1, 1)


def _mean_of(scalars: list[Tensor]) -> Tensor:
    total = scalars[0]
    for t in scalars[1:]:
        total = total + t
    return total * (1.0 / len(scalars))


class ClassifierTrainer:
    """Single-threaded training of an EncoderClassifier on labeled sequences."""

    def __init__(self, model: EncoderClassifier, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.opt = Adam(model.params)
        self.counter = PassCounter()
        self.rng_data = np.random.default_rng([cfg.seed, 1])
        self.rng_mask = np.random.default_rng([cfg.seed, 2])
        self.step_index = 0

    # -- single optimization step ------------------------------------------

    def train_step(self, batch: list[LabeledExample], lr: float) -> dict[str, float]:
        zero_grads(self.model.params.values())
        if self.cfg.mode == "baseline":
            agg = self._baseline_losses(batch)
        elif self.cfg.mode == "cutoff":
            agg = self._cutoff_losses(batch)
        else:
            agg = self._adversarial_losses(batch)
        backward(agg["_total_tensor"], self.counter)
        self.opt.step(lr, self.cfg.weight_decay)
        self.counter.mark_step()
        assert self.counter.last_step_delta() == _expected_passes(self.cfg)
        del agg["_total_tensor"]
        return agg

    def _baseline_losses(self, batch) -> dict:
        losses = [
            cross_entropy(self.model.classify(self.model.embed(ex.tokens)), ex.label)
            for ex in batch
        ]
        self.counter.forwards += 1
        total = _mean_of(losses)
        return {
            "_total_tensor": total,
            "ce_original": total.item(),
            "ce_augmented_sum": 0.0,
            "js": 0.0,
            "total": total.item(),
        }

    def _cutoff_losses(self, batch) -> dict:
        breakdowns: list[LossBreakdown] = []
        for ex in batch:
            W = self.model.embed(ex.tokens)
            views = make_views(W, self.cfg.cutoff, self.rng_mask)
            logits_orig = self.model.classify(W)
            logits_views = [self.model.classify(v) for v in views]
            breakdowns.append(total_loss(logits_orig, logits_views, ex.label, self.cfg.weights))
        self.counter.forwards += self.cfg.cutoff.n_samples + 1
        total = _mean_of([bd.total for bd in breakdowns])
        n = len(breakdowns)
        return {
            "_total_tensor": total,
            "ce_original": math.fsum(bd.ce_original.item() for bd in breakdowns) / n,
            "ce_augmented_sum": math.fsum(
                t.item() for bd in breakdowns for t in bd.ce_augmented
            )
            / n,
            "js": math.fsum(bd.js.item() for bd in breakdowns) / n,
            "total": total.item(),
        }

    def _adversarial_losses(self, batch) -> dict:
        # Batched sign-gradient ascent: iteration i forwards every example at
        # its current perturbation in one shared graph, so T iterations cost
        # T forwards and T backwards regardless of batch size.
        embedded = [self.model.embed(ex.tokens) for ex in batch]
        values = [W.data for W in embedded]
        deltas = [np.zeros_like(v) for v in values]
        clean: list[float] = []
        for t in range(self.cfg.adv.steps):
            leaves = [Tensor(d, requires_grad=True) for d in deltas]
            losses = [
                cross_entropy(self.model.classify(Tensor(v) + leaf), ex.label)
                for v, leaf, ex in zip(values, leaves, batch)
            ]
            if t == 0:
                clean = [ls.item() for ls in losses]
            self.counter.forwards += 1
            ascent_sum = losses[0]
            for ls in losses[1:]:
                ascent_sum = ascent_sum + ls
            backward(ascent_sum, self.counter)
            for i, leaf in enumerate(leaves):
                g = leaf.grad if leaf.grad is not None else np.zeros_like(deltas[i])
                deltas[i] = np.clip(
                    deltas[i] + self.cfg.adv.step_size * np.sign(g),
                    -self.cfg.adv.bound,
                    self.cfg.adv.bound,
                )
        zero_grads(self.model.params.values())
        perturbed = [
            cross_entropy(self.model.classify(W + Tensor(d)), ex.label) + c
            for W, d, c, ex in zip(embedded, deltas, clean, batch)
        ]
        self.counter.forwards += 1
        total = _mean_of(perturbed)
        return {
            "_total_tensor": total,
            "ce_original": math.fsum(clean) / len(clean),
            "ce_augmented_sum": total.item() - math.fsum(clean) / len(clean),
            "js": 0.0,
            "total": total.item(),
        }

    # -- full run -------------------------------------------------------------

    def train(self, train_set: list[LabeledExample], dev_set: list[LabeledExample] | None = None):
        steps_per_epoch = math.ceil(len(train_set) / self.cfg.batch_size)
        total_steps = self.cfg.epochs * steps_per_epoch
        self.step_index = 0
        history: list[dict] = []
        for epoch in range(1, self.cfg.epochs + 1):
            order = self.rng_data.permutation(len(train_set))
            epoch_losses = []
            for b in range(steps_per_epoch):
                idx = order[b * self.cfg.batch_size : (b + 1) * self.cfg.batch_size]
                batch = [train_set[int(i)] for i in idx]
                self.step_index += 1
                agg = self.train_step(batch, lr_at(self.step_index, total_steps, self.cfg))
                epoch_losses.append(agg["total"])
            row = {
                "epoch": epoch,
                "train_loss": math.fsum(epoch_losses) / len(epoch_losses),
                "forwards": self.counter.forwards,
                "backwards": self.counter.backwards,
            }
            if dev_set is not None:
                row["dev_accuracy"] = evaluate_classifier(self.model, dev_set)
            history.append(row)
        return history


def evaluate_classifier(model: EncoderClassifier, dataset: list[LabeledExample]) -> float:
    """Accuracy over a split; deterministic, no augmentation."""
    if not dataset:
        return 0.0
    hits = sum(1 for ex in dataset if model.predict(ex.tokens) == ex.label)
    return hits / len(dataset)


class Seq2SeqTrainer:
    """Teacher-forced training of the encoder-decoder on token pairs.

    Erasure views mask the source and the decoder-input embeddings
    independently at the same ratio; loss targets are always the unmasked
    gold tokens. The consistency term averages the per-position divergence
    across views.
    """

    def __init__(self, model: Seq2SeqModel, cfg: TrainConfig):
        if cfg.mode == "adversarial":
            raise ValueError("adversarial mode is classification-only")
        self.model = model
        self.cfg = cfg
        self.opt = Adam(model.params)
        self.counter = PassCounter()
        self.rng_data = np.random.default_rng([cfg.seed, 1])
        self.rng_mask = np.random.default_rng([cfg.seed, 2])
        self.step_index = 0

    def _pair_logits(self, W_src: Tensor, W_dec: Tensor) -> Tensor:
        return self.model.decode_logits(self.model.encode(W_src), W_dec)

    def _pair_ce(self, logits: Tensor, targets: list[int]) -> Tensor:
        return _mean_of([cross_entropy(logits.row(j), targets[j]) for j in range(len(targets))])

    def train_step(self, batch: list[PairExample], lr: float) -> dict[str, float]:
        zero_grads(self.model.params.values())
        totals: list[Tensor] = []
        ce_orig_items: list[float] = []
        ce_aug_items: list[float] = []
        js_items: list[float] = []
        n_views = self.cfg.cutoff.n_samples if self.cfg.mode == "cutoff" else 0
        for pair in batch:
            targets = list(pair.tgt)
            dec_in = [BOS_ID] + targets[:-1]
            W_src = self.model.embed_src(list(pair.src))
            W_dec = self.model.embed_tgt(dec_in)
            logits_orig = self._pair_logits(W_src, W_dec)
            ce_orig = self._pair_ce(logits_orig, targets)
            total = ce_orig
            ce_orig_items.append(ce_orig.item())
            if self.cfg.mode == "cutoff":
                view_logits = []
                for _ in range(n_views):
                    m_src = sample_mask(W_src.shape[0], W_src.shape[1], self.cfg.cutoff, self.rng_mask)
                    m_dec = sample_mask(W_dec.shape[0], W_dec.shape[1], self.cfg.cutoff, self.rng_mask)
                    view_logits.append(
                        self._pair_logits(apply_mask(W_src, m_src), apply_mask(W_dec, m_dec))
                    )
                ce_views = [self._pair_ce(lv, targets) for lv in view_logits]
                aug_sum = ce_views[0]
                for t in ce_views[1:]:
                    aug_sum = aug_sum + t
                js_positions = [
                    js_consistency(
                        [logits_orig.row(j).softmax()] + [lv.row(j).softmax() for lv in view_logits]
                    )
                    for j in range(len(targets))
                ]
                js = _mean_of(js_positions)
                total = ce_orig + self.cfg.weights.aug_ce_weight * aug_sum + self.cfg.weights.js_weight * js
                ce_aug_items.append(aug_sum.item())
                js_items.append(js.item())
            totals.append(total)
        self.counter.forwards += n_views + 1
        agg_total = _mean_of(totals)
        backward(agg_total, self.counter)
        self.opt.step(lr, self.cfg.weight_decay)
        self.counter.mark_step()
        assert self.counter.last_step_delta() == (n_views + 1, 1)
        n = len(batch)
        return {
            "ce_original": math.fsum(ce_orig_items) / n,
            "ce_augmented_sum": math.fsum(ce_aug_items) / n if ce_aug_items else 0.0,
            "js": math.fsum(js_items) / n if js_items else 0.0,
            "total": agg_total.item(),
        }

    def train(self, train_set: list[PairExample], dev_set: list[PairExample] | None = None):
        steps_per_epoch = math.ceil(len(train_set) / self.cfg.batch_size)
        total_steps = self.cfg.epochs * steps_per_epoch
        self.step_index = 0
        history: list[dict] = []
        for epoch in range(1, self.cfg.epochs + 1):
            order = self.rng_data.permutation(len(train_set))
            epoch_losses = []
            for b in range(steps_per_epoch):
                idx = order[b * self.cfg.batch_size : (b + 1) * self.cfg.batch_size]
                batch = [train_set[int(i)] for i in idx]
                self.step_index += 1
                agg = self.train_step(batch, lr_at(self.step_index, total_steps, self.cfg))
                if not math.isfinite(agg["total"]):
                    raise NonFiniteGradientError(f"training loss diverged at step {self.step_index}")
                epoch_losses.append(agg["total"])
            row = {
                "epoch": epoch,
                "train_loss": math.fsum(epoch_losses) / len(epoch_losses),
                "forwards": self.counter.forwards,
                "backwards": self.counter.backwards,
            }
            if dev_set is not None:
                row["dev_ce"] = evaluate_pairs_ce(self.model, dev_set)
            history.append(row)
        return history


def evaluate_pairs_ce(model: Seq2SeqModel, dataset: list[PairExample]) -> float:
    """Mean teacher-forced cross-entropy per position over a split."""
    if not dataset:
        return 0.0
    with no_grad():
        vals = []
        for pair in dataset:
            targets = list(pair.tgt)
            per_pos = model.forward(
                model.embed_src(list(pair.src)),
                model.embed_tgt([BOS_ID] + targets[:-1]),
                targets,
            )
            vals.append(float(per_pos.data.mean()))
    return math.fsum(vals) / len(vals)


def evaluate_exact_match(model: Seq2SeqModel, dataset: list[PairExample]) -> float:
    """Fraction of pairs whose greedy decode reproduces the gold target exactly."""
    if not dataset:
        return 0.0
    hits = 0
    for pair in dataset:
        decoded = model.greedy_decode(list(pair.src), max_len=len(pair.tgt) + 2)
        hits += decoded == list(pair.tgt)
    return hits / len(dataset)
