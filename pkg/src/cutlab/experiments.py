"""Experiment harnesses: ratio sweep, consistency-weight sweep, cost comparison.

Every run is an independent, fully seeded training; sweeps are
embarrassingly parallel and their record sets do not depend on execution
order. Floats are written with repr(), which round-trips float64 exactly
(up to 17 significant digits).
"""
from __future__ import annotations

import concurrent.futures
import math
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .adversarial import AdvConfig
from .cutoff import CutoffKind, CutoffSpec, apply_mask, sample_mask
from .data import (
    LabeledExample,
    gen_keyword_task,
    gen_lexicon_pairs,
    gen_majority_task,
    split_dataset,
)
from .models import EncoderClassifier, EncoderConfig, Seq2SeqConfig, Seq2SeqModel
from .objective import LossWeights
from .tensor import no_grad
from .trainer import (
    ClassifierTrainer,
    Seq2SeqTrainer,
    TrainConfig,
    evaluate_classifier,
    evaluate_exact_match,
)

# Reported optima and ablation accuracies from the original large-scale study
# (kept for orientation in reports; never asserted at desk scale).
REFERENCE_BEST_RATIOS = {"token": 0.15, "feature": 0.2, "span": 0.1}
REFERENCE_BETA_DEV_ACCURACY = {0.0: 88.21, 0.1: 88.27, 0.3: 88.32, 1.0: 88.36, 3.0: 88.12}

RATIO_GRID = (0.05, 0.1, 0.15, 0.2, 0.3, 0.4)
BETA_GRID = (0.0, 0.1, 0.3, 1.0, 3.0)
KIND_GRID = (CutoffKind.TOKEN, CutoffKind.FEATURE, CutoffKind.SPAN)

METRICS_COLUMNS = [
    "run_id",
    "seed",
    "mode",
    "cutoff_kind",
    "cutoff_ratio",
    "aug_ce_weight",
    "js_weight",
    "epoch",
    "split",
    "metric_name",
    "value",
    "forwards",
    "backwards",
    "wall_seconds",
]


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class RunFailure(RuntimeError):
    """A training run failed; partial records were preserved (exit code 3)."""

    def __init__(self, message: str, partial: dict | None = None):
        super().__init__(message)
        self.partial = partial or {}

    def partial_records(self) -> list["MetricsRecord"]:
        out: list[MetricsRecord] = []
        for run_id in sorted(self.partial):
            out.extend(self.partial[run_id][0])
        return out


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    mode: str
    cutoff_kind: str
    cutoff_ratio: float
    aug_ce_weight: float
    js_weight: float
    epoch: int
    split: str
    metric_name: str
    value: float
    forwards: int
    backwards: int
    wall_seconds: float


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat, JSON-mirrorable description of one training run."""

    task: str = "keyword"  # keyword | majority | lexicon
    n_examples: int = 200
    seq_length: int = 20
    vocab_size: int = 12
    redundancy: int = 3
    label_noise: float = 0.0
    layers: int = 2
    heads: int = 2
    d: int = 32
    ffn_width: int = 64
    epochs: int = 10
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.06
    weight_decay: float = 0.1
    mode: str = "baseline"
    cutoff_kind: str = "none"
    cutoff_ratio: float = 0.0
    n_samples: int = 1
    protect_cls: bool = True
    aug_ce_weight: float = 1.0
    js_weight: float = 1.0
    adv_steps: int = 1
    adv_step_size: float = 0.01
    adv_bound: float = 0.05
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.task not in ("keyword", "majority", "lexicon"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.mode not in ("baseline", "cutoff", "adversarial"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        try:
            self.cutoff_spec()
            self.loss_weights()
            if self.mode == "adversarial":
                self.adv_config()
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def cutoff_spec(self) -> CutoffSpec:
        return CutoffSpec(
            kind=CutoffKind(self.cutoff_kind),
            cutoff_ratio=self.cutoff_ratio,
            n_samples=self.n_samples,
            protect_cls=self.protect_cls,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(aug_ce_weight=self.aug_ce_weight, js_weight=self.js_weight)

    def adv_config(self) -> AdvConfig:
        return AdvConfig(steps=self.adv_steps, step_size=self.adv_step_size, bound=self.adv_bound)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            peak_lr=self.peak_lr,
            warmup_ratio=self.warmup_ratio,
            weight_decay=self.weight_decay,
            mode=self.mode,
            cutoff=self.cutoff_spec(),
            weights=self.loss_weights(),
            adv=self.adv_config(),
            seed=self.seed,
        )

    def run_id(self) -> str:
        return (
            f"{self.task}-{self.mode}-{self.cutoff_kind}{self.cutoff_ratio:g}"
            f"-a{self.aug_ce_weight:g}-b{self.js_weight:g}-T{self.adv_steps}-s{self.seed}"
        )


def build_dataset(cfg: ExperimentConfig):
    if cfg.task == "keyword":
        data = gen_keyword_task(
            cfg.n_examples,
            cfg.seq_length,
            cfg.vocab_size,
            cfg.redundancy,
            seed=cfg.seed,
            label_noise=cfg.label_noise,
        )
    elif cfg.task == "majority":
        data = gen_majority_task(cfg.n_examples, cfg.seq_length, seed=cfg.seed)
    else:
        data = gen_lexicon_pairs(
            cfg.n_examples, cfg.seq_length, seed=cfg.seed, src_vocab=cfg.vocab_size, tgt_vocab=cfg.vocab_size
        )
    return split_dataset(data, seed=cfg.seed)


def build_model(cfg: ExperimentConfig):
    if cfg.task == "lexicon":
        return Seq2SeqModel(
            Seq2SeqConfig(
                d=cfg.d,
                heads=cfg.heads,
                enc_layers=cfg.layers,
                dec_layers=cfg.layers,
                ffn_width=cfg.ffn_width,
                max_src_length=cfg.seq_length + 2,
                # BOS + gold target (L+1) + decode slack
                max_tgt_length=cfg.seq_length + 4,
                src_vocab=cfg.vocab_size,
                tgt_vocab=cfg.vocab_size,
            ),
            seed=cfg.seed,
        )
    return EncoderClassifier(
        EncoderConfig(
            layers=cfg.layers,
            heads=cfg.heads,
            d=cfg.d,
            ffn_width=cfg.ffn_width,
            max_length=cfg.seq_length + 1,
            vocab_size=cfg.vocab_size,
            n_classes=2,
        ),
        seed=cfg.seed,
    )


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[MetricsRecord]
    final_dev: float
    model: object | None = None
    trainer: object | None = None


def run_experiment(cfg: ExperimentConfig, clock=None, keep_model: bool = False) -> RunResult:
    """Train one fully seeded run and emit its metric records."""
    cfg.validate()
    clock = clock if clock is not None else time.perf_counter
    t0 = clock()
    train, dev, test = build_dataset(cfg)
    model = build_model(cfg)
    records: list[MetricsRecord] = []

    def rec(epoch: int, split: str, name: str, value: float, forwards: int, backwards: int, wall: float):
        records.append(
            MetricsRecord(
                run_id=cfg.run_id(),
                seed=cfg.seed,
                mode=cfg.mode,
                cutoff_kind=cfg.cutoff_kind,
                cutoff_ratio=cfg.cutoff_ratio,
                aug_ce_weight=cfg.aug_ce_weight,
                js_weight=cfg.js_weight,
                epoch=epoch,
                split=split,
                metric_name=name,
                value=value,
                forwards=forwards,
                backwards=backwards,
                wall_seconds=wall,
            )
        )

    if cfg.task == "lexicon":
        trainer = Seq2SeqTrainer(model, cfg.train_config())
        history = trainer.train(train, dev)
        for row in history:
            rec(row["epoch"], "train", "loss", row["train_loss"], row["forwards"], row["backwards"], clock() - t0)
            rec(row["epoch"], "dev", "ce", row["dev_ce"], row["forwards"], row["backwards"], clock() - t0)
        final_dev = evaluate_exact_match(model, dev)
        wall = clock() - t0
        c = trainer.counter
        rec(cfg.epochs, "dev", "exact_match", final_dev, c.forwards, c.backwards, wall)
        rec(cfg.epochs, "test", "exact_match", evaluate_exact_match(model, test), c.forwards, c.backwards, wall)
    else:
        trainer = ClassifierTrainer(model, cfg.train_config())
        history = trainer.train(train, dev)
        for row in history:
            rec(row["epoch"], "train", "loss", row["train_loss"], row["forwards"], row["backwards"], clock() - t0)
            rec(row["epoch"], "dev", "accuracy", row["dev_accuracy"], row["forwards"], row["backwards"], clock() - t0)
        final_dev = history[-1]["dev_accuracy"]
        wall = clock() - t0
        c = trainer.counter
        rec(cfg.epochs, "test", "accuracy", evaluate_classifier(model, test), c.forwards, c.backwards, wall)
    return RunResult(
        config=cfg,
        records=records,
        final_dev=final_dev,
        model=model if keep_model else None,
        trainer=trainer if keep_model else None,
    )


def _run_worker(raw: dict) -> tuple[str, list[dict], float]:
    result = run_experiment(ExperimentConfig.from_dict(raw))
    return result.config.run_id(), [asdict(r) for r in result.records], result.final_dev


def _execute_runs(configs: list[ExperimentConfig], jobs: int):
    """Run configs serially or in a process pool; results keyed by run id."""
    outcomes: dict[str, tuple[list[MetricsRecord], float]] = {}
    if jobs <= 1:
        for cfg in configs:
            try:
                result = run_experiment(cfg)
            except Exception as exc:
                raise RunFailure(f"run {cfg.run_id()} failed: {exc}", outcomes) from exc
            outcomes[cfg.run_id()] = (result.records, result.final_dev)
        return outcomes
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = {pool.submit(_run_worker, asdict(cfg)): cfg for cfg in configs}
        for fut in concurrent.futures.as_completed(futures):
            cfg = futures[fut]
            try:
                run_id, raw_records, final_dev = fut.result()
            except Exception as exc:
                raise RunFailure(f"run {cfg.run_id()} failed: {exc}", outcomes) from exc
            outcomes[run_id] = ([MetricsRecord(**r) for r in raw_records], final_dev)
    return outcomes


@dataclass
class SweepResult:
    records: list[MetricsRecord]
    summary: list[dict]      # one row per run
    aggregate: list[dict]    # mean +/- sample sd over seeds


def _summarize(configs, outcomes, group_key) -> SweepResult:
    records: list[MetricsRecord] = []
    summary: list[dict] = []
    for cfg in sorted(configs, key=lambda c: c.run_id()):
        recs, final_dev = outcomes[cfg.run_id()]
        records.extend(recs)
        summary.append(
            {
                "run_id": cfg.run_id(),
                "cutoff_kind": cfg.cutoff_kind,
                "cutoff_ratio": cfg.cutoff_ratio,
                "js_weight": cfg.js_weight,
                "seed": cfg.seed,
                "dev_metric": final_dev,
            }
        )
    groups: dict[tuple, list[float]] = {}
    for row in summary:
        groups.setdefault(group_key(row), []).append(row["dev_metric"])
    aggregate = []
    for key in sorted(groups):
        vals = groups[key]
        mean = math.fsum(vals) / len(vals)
        sd = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
        aggregate.append({"group": key, "mean": mean, "sd": sd, "n": len(vals)})
    return SweepResult(records=records, summary=summary, aggregate=aggregate)


def sweep_ratio(
    base: ExperimentConfig,
    seeds: list[int],
    ratios=RATIO_GRID,
    kinds=KIND_GRID,
    jobs: int = 1,
) -> SweepResult:
    """One cutoff run per (kind, ratio, seed); summary has exactly that many rows."""
    if len(seeds) < 3:
        raise ConfigError(f"sweep_ratio needs at least 3 seeds, got {len(seeds)}")
    configs = [
        replace(base, mode="cutoff", cutoff_kind=kind.value, cutoff_ratio=ratio, seed=seed)
        for kind in kinds
        for ratio in ratios
        for seed in seeds
    ]
    outcomes = _execute_runs(configs, jobs)
    return _summarize(configs, outcomes, lambda row: (row["cutoff_kind"], row["cutoff_ratio"]))


def sweep_beta(
    base: ExperimentConfig,
    seeds: list[int],
    betas=BETA_GRID,
    jobs: int = 1,
) -> SweepResult:
    """Vary the consistency weight with span cutoff fixed; one run per (beta, seed)."""
    if len(seeds) < 3:
        raise ConfigError(f"sweep_beta needs at least 3 seeds, got {len(seeds)}")
    configs = [
        replace(base, mode="cutoff", cutoff_kind="span", js_weight=beta, seed=seed)
        for beta in betas
        for seed in seeds
    ]
    outcomes = _execute_runs(configs, jobs)
    return _summarize(configs, outcomes, lambda row: (row["js_weight"],))


@dataclass
class ComparisonRow:
    variant: str
    mean_dev: float
    sd_dev: float
    per_step_passes: tuple[int, int]
    total_forwards: int
    total_backwards: int
    wall_seconds: float


def compare_adversarial(
    base: ExperimentConfig,
    seeds: list[int],
    adv_steps=(1, 3),
) -> list[ComparisonRow]:
    """Baseline vs cutoff (N=1) vs PGD at matched step budgets.

    Runs serially (it keeps each trainer's counter around for the report).
    Asserts the per-step pass-count ordering: cutoff is strictly cheaper than
    every adversarial variant.
    """
    variants: list[tuple[str, ExperimentConfig]] = [("baseline", replace(base, mode="baseline"))]
    variants.append(_cutoff_variant(base))
    for t_steps in adv_steps:
        variants.append((f"pgd-T{t_steps}", replace(base, mode="adversarial", adv_steps=t_steps)))
    rows: list[ComparisonRow] = []
    for name, vcfg in variants:
        devs, walls, fw, bw, per_step = [], [], 0, 0, (0, 0)
        for seed in seeds:
            cfg = replace(vcfg, seed=seed)
            result = run_experiment(cfg, keep_model=True)
            devs.append(result.final_dev)
            counter = result.trainer.counter
            per_step = counter.last_step_delta()
            fw += counter.forwards
            bw += counter.backwards
            walls.append(result.records[-1].wall_seconds)
        mean = math.fsum(devs) / len(devs)
        sd = math.sqrt(math.fsum((v - mean) ** 2 for v in devs) / (len(devs) - 1)) if len(devs) > 1 else 0.0
        rows.append(
            ComparisonRow(
                variant=name,
                mean_dev=mean,
                sd_dev=sd,
                per_step_passes=per_step,
                total_forwards=fw,
                total_backwards=bw,
                wall_seconds=math.fsum(walls),
            )
        )
    cutoff_row = next(r for r in rows if r.variant.startswith("cutoff"))
    for row in rows:
        if row.variant.startswith("pgd"):
            if sum(cutoff_row.per_step_passes) >= sum(row.per_step_passes):
                raise AssertionError(
                    f"pass ordering violated: cutoff {cutoff_row.per_step_passes} "
                    f"vs {row.variant} {row.per_step_passes}"
                )
    return rows


def _cutoff_variant(base: ExperimentConfig) -> tuple[str, ExperimentConfig]:
    kind = base.cutoff_kind if base.cutoff_kind != "none" else "span"
    ratio = base.cutoff_ratio if base.cutoff_ratio > 0 else 0.1
    return (
        f"cutoff-{kind}{ratio:g}",
        replace(base, mode="cutoff", cutoff_kind=kind, cutoff_ratio=ratio, n_samples=1),
    )


def measure_disagreement(
    model: EncoderClassifier,
    dataset: list[LabeledExample],
    spec: CutoffSpec,
    seed: int = 0,
    n_views: int = 2,
) -> dict:
    """Prediction disagreement between two erased views, plus per-view error rates.

    The multi-view bound (disagreement >= max per-view error) is reported,
    not asserted: these views do not satisfy its independence preconditions.
    """
    rng = np.random.default_rng([seed, 3])
    disagree = 0
    errors = [0] * n_views
    with no_grad():
        for ex in dataset:
            W = model.embed(ex.tokens)
            preds = []
            for _ in range(n_views):
                mask = sample_mask(W.shape[0], W.shape[1], spec, rng)
                preds.append(int(np.argmax(model.classify(apply_mask(W, mask)).data)))
            disagree += len(set(preds)) > 1
            for v, p in enumerate(preds):
                errors[v] += p != ex.label
    n = len(dataset)
    rates = [e / n for e in errors]
    out = {
        "disagreement": disagree / n,
        "error_rates": rates,
        "bound_holds": disagree / n >= max(rates) - 1e-12,
    }
    return out


# -- emission -------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path: str, records: list[MetricsRecord]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for r in records:
            d = asdict(r)
            fh.write(",".join(_fmt(d[c]) for c in METRICS_COLUMNS) + "\n")


def read_metrics_csv(path: str) -> list[MetricsRecord]:
    out: list[MetricsRecord] = []
    with open(path, encoding="ascii") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics header in {path}")
        for line in fh:
            vals = line.rstrip("\n").split(",")
            d = dict(zip(METRICS_COLUMNS, vals))
            out.append(
                MetricsRecord(
                    run_id=d["run_id"],
                    seed=int(d["seed"]),
                    mode=d["mode"],
                    cutoff_kind=d["cutoff_kind"],
                    cutoff_ratio=float(d["cutoff_ratio"]),
                    aug_ce_weight=float(d["aug_ce_weight"]),
                    js_weight=float(d["js_weight"]),
                    epoch=int(d["epoch"]),
                    split=d["split"],
                    metric_name=d["metric_name"],
                    value=float(d["value"]),
                    forwards=int(d["forwards"]),
                    backwards=int(d["backwards"]),
                    wall_seconds=float(d["wall_seconds"]),
                )
            )
    return out


def write_summary_csv(path: str, summary: list[dict]) -> None:
    if not summary:
        raise ValueError("empty summary")
    cols = list(summary[0])
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(cols) + "\n")
        for row in summary:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def write_aggregate_report(path: str, result: SweepResult, reference_note: str = "") -> None:
    lines = ["group\tmean\tsd\tn"]
    for row in result.aggregate:
        lines.append(f"{row['group']}\t{_fmt(row['mean'])}\t{_fmt(row['sd'])}\t{row['n']}")
    if reference_note:
        lines.append("")
        lines.append(reference_note)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def write_svg(path: str, title: str, xlabel: str, ylabel: str, series: dict[str, list[tuple[float, float]]]) -> None:
    """Self-contained SVG line chart, one polyline per series."""
    width, height, pad = 640, 420, 60
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        raise ValueError("write_svg needs at least one point")
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(x: float) -> float:
        return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(y: float) -> float:
        return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.1f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<text x="{width/2:.1f}" y="{height-16}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="18" y="{height/2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {height/2:.1f})">{ylabel}</text>',
        f'<text x="{pad}" y="{height-pad+16}" font-size="10" text-anchor="middle">{x_lo:g}</text>',
        f'<text x="{width-pad}" y="{height-pad+16}" font-size="10" text-anchor="middle">{x_hi:g}</text>',
        f'<text x="{pad-6}" y="{height-pad}" font-size="10" text-anchor="end">{y_lo:.4g}</text>',
        f'<text x="{pad-6}" y="{pad+4}" font-size="10" text-anchor="end">{y_hi:.4g}</text>',
    ]
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = SVG_COLORS[i % len(SVG_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(pts))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        parts.append(
            f'<text x="{width-pad+4}" y="{pad + 16*i}" font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(parts) + "\n")


def ratio_sweep_series(result: SweepResult) -> dict[str, list[tuple[float, float]]]:
    series: dict[str, list[tuple[float, float]]] = {}
    for row in result.aggregate:
        kind, ratio = row["group"]
        series.setdefault(str(kind), []).append((float(ratio), row["mean"]))
    return series


def beta_sweep_series(result: SweepResult) -> dict[str, list[tuple[float, float]]]:
    return {"span": [(float(row["group"][0]), row["mean"]) for row in result.aggregate]}
