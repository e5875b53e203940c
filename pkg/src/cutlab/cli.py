"""Command-line entry points for training runs, sweeps, and verification.

Exit codes: 0 success, 2 configuration error, 3 run failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .cutoff import CutoffKind, CutoffSpec
from .data import gen_keyword_task, gen_lexicon_pairs, gen_majority_task, save_labeled, save_pairs
from .embedding import TokenSequence
from .experiments import (
    BETA_GRID,
    RATIO_GRID,
    REFERENCE_BETA_DEV_ACCURACY,
    REFERENCE_BEST_RATIOS,
    ConfigError,
    ExperimentConfig,
    RunFailure,
    beta_sweep_series,
    compare_adversarial,
    measure_disagreement,
    ratio_sweep_series,
    run_experiment,
    sweep_beta,
    sweep_ratio,
    write_aggregate_report,
    write_metrics_csv,
    write_summary_csv,
    write_svg,
)
from .models import EncoderClassifier, EncoderConfig, Seq2SeqConfig, Seq2SeqModel, save_checkpoint
from .objective import cross_entropy
from .tensor import Tensor, gradcheck, layer_norm

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3


def load_config(path: str, seed_override: int | None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    cfg = ExperimentConfig.from_dict(raw)
    if seed_override is not None:
        cfg = replace(cfg, seed=seed_override)
    return cfg


def _seeds(cfg_seed: int, n: int) -> list[int]:
    return [cfg_seed + i for i in range(n)]


def _outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _outdir(args.out)
    result = run_experiment(cfg, keep_model=True)
    write_metrics_csv(os.path.join(out, "metrics.csv"), result.records)
    save_checkpoint(os.path.join(out, "checkpoint.txt"), result.model.params)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(cfg), fh, indent=2)
    print(f"run {cfg.run_id()}: final dev metric {result.final_dev:.4f}")
    print(f"outputs in {out}: metrics.csv, checkpoint.txt, config.json")
    return EXIT_OK


def _run_sweep(args, sweep_fn, series_fn, chart_name: str, reference_note: str) -> int:
    cfg = load_config(args.config, args.seed)
    out = _outdir(args.out)
    seeds = _seeds(cfg.seed, args.n_seeds)
    try:
        result = sweep_fn(cfg, seeds, jobs=args.jobs)
    except RunFailure as exc:
        partial = exc.partial_records()
        if partial:
            write_metrics_csv(os.path.join(out, "metrics.csv"), partial)
        print(f"sweep failed, {len(partial)} partial records preserved: {exc}", file=sys.stderr)
        return EXIT_RUN
    write_metrics_csv(os.path.join(out, "metrics.csv"), result.records)
    write_summary_csv(os.path.join(out, "summary.csv"), result.summary)
    write_aggregate_report(os.path.join(out, "aggregate.txt"), result, reference_note)
    write_svg(
        os.path.join(out, chart_name),
        chart_name.removesuffix(".svg"),
        args.xlabel,
        "dev metric",
        series_fn(result),
    )
    print(f"{len(result.summary)} runs complete; outputs in {out}")
    return EXIT_OK


def cmd_sweep_ratio(args) -> int:
    note = (
        "reference: large-scale study optima (not asserted here): "
        + ", ".join(f"{k}={v}" for k, v in REFERENCE_BEST_RATIOS.items())
    )
    args.xlabel = "cutoff ratio"
    return _run_sweep(args, sweep_ratio, ratio_sweep_series, "sweep_ratio.svg", note)


def cmd_sweep_beta(args) -> int:
    note = (
        "reference: large-scale study dev accuracies over the consistency weight "
        "(not asserted here): "
        + ", ".join(f"{b}: {v}" for b, v in REFERENCE_BETA_DEV_ACCURACY.items())
    )
    args.xlabel = "consistency weight"
    return _run_sweep(args, sweep_beta, beta_sweep_series, "sweep_beta.svg", note)


def cmd_compare_adv(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _outdir(args.out)
    rows = compare_adversarial(cfg, _seeds(cfg.seed, args.n_seeds))
    lines = ["variant\tmean_dev\tsd_dev\tpasses_per_step\ttotal_forwards\ttotal_backwards\twall_seconds"]
    for r in rows:
        lines.append(
            f"{r.variant}\t{r.mean_dev!r}\t{r.sd_dev!r}\t{r.per_step_passes[0]}F/{r.per_step_passes[1]}B"
            f"\t{r.total_forwards}\t{r.total_backwards}\t{r.wall_seconds!r}"
        )
    report = "\n".join(lines)
    with open(os.path.join(out, "compare_adv.txt"), "w", encoding="ascii") as fh:
        fh.write(report + "\n")
    print(report)
    return EXIT_OK


def cmd_disagreement(args) -> int:
    cfg = load_config(args.config, args.seed)
    if cfg.task == "lexicon":
        raise ConfigError("disagreement measurement is classification-only")
    out = _outdir(args.out)
    result = run_experiment(cfg, keep_model=True)
    from .experiments import build_dataset

    _, dev, _ = build_dataset(cfg)
    spec = cfg.cutoff_spec()
    if spec.kind is CutoffKind.NONE:
        spec = CutoffSpec(CutoffKind.SPAN, 0.1, 1)
    stats = measure_disagreement(result.model, dev, spec, seed=cfg.seed)
    report = json.dumps(stats, indent=2)
    with open(os.path.join(out, "disagreement.json"), "w", encoding="ascii") as fh:
        fh.write(report + "\n")
    print(report)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = _outdir(args.out)
    if cfg.task == "keyword":
        data = gen_keyword_task(
            cfg.n_examples, cfg.seq_length, cfg.vocab_size, cfg.redundancy, cfg.seed, cfg.label_noise
        )
        path = os.path.join(out, "keyword.tsv")
        save_labeled(path, data)
    elif cfg.task == "majority":
        data = gen_majority_task(cfg.n_examples, cfg.seq_length, cfg.seed)
        path = os.path.join(out, "majority.tsv")
        save_labeled(path, data)
    else:
        data = gen_lexicon_pairs(cfg.n_examples, cfg.seq_length, cfg.seed, cfg.vocab_size, cfg.vocab_size)
        path = os.path.join(out, "lexicon.tsv")
        save_pairs(path, data)
    print(f"wrote {len(data)} examples to {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    checks: list[tuple[str, float, float]] = []

    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    checks.append(("matmul", gradcheck(lambda: (a @ b).sum(), [a, b]), 1e-6))

    v = Tensor(rng.standard_normal(6), requires_grad=True)
    probe = Tensor(rng.standard_normal(6))
    checks.append(("softmax", gradcheck(lambda: (v.softmax() * probe).sum(), [v]), 1e-6))
    checks.append(("gelu", gradcheck(lambda: (v.gelu() * probe).sum(), [v]), 1e-6))
    checks.append(("cross_entropy", gradcheck(lambda: cross_entropy(v, 2), [v]), 1e-6))

    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    g = Tensor(rng.standard_normal(4), requires_grad=True)
    bias = Tensor(rng.standard_normal(4), requires_grad=True)
    probe2 = Tensor(rng.standard_normal((3, 4)))
    checks.append(("layer_norm", gradcheck(lambda: (layer_norm(x, g, bias) * probe2).sum(), [x, g, bias]), 1e-5))

    # Micro-batch losses keep every parameter's gradient well away from the
    # finite-difference noise floor.
    model = EncoderClassifier(
        EncoderConfig(layers=1, heads=2, d=8, ffn_width=16, max_length=8, vocab_size=10, n_classes=2),
        seed=2,
    )
    mrng = np.random.default_rng([2, 11])
    for p in model.params.values():
        p.data += mrng.normal(0, 0.25, p.data.shape)
    seqs = [TokenSequence([0] + [int(t) for t in mrng.integers(1, 10, 6)]) for _ in range(4)]
    labels = [int(mrng.integers(0, 2)) for _ in range(4)]

    def classifier_loss():
        total = None
        for s, y in zip(seqs, labels):
            ce = cross_entropy(model.classify(model.embed(s)), y)
            total = ce if total is None else total + ce
        return total

    checks.append(("classifier", gradcheck(classifier_loss, list(model.params.values())), 1e-4))

    s2s = Seq2SeqModel(
        Seq2SeqConfig(d=8, heads=2, enc_layers=1, dec_layers=1, ffn_width=16,
                      max_src_length=6, max_tgt_length=6, src_vocab=8, tgt_vocab=8),
        seed=0,
    )
    srng = np.random.default_rng([0, 12])
    for p in s2s.params.values():
        p.data += srng.normal(0, 0.25, p.data.shape)

    def s2s_loss():
        first = s2s.forward(s2s.embed_src([2, 3, 4, 5]), s2s.embed_tgt([0, 2, 3, 4]), [2, 3, 4, 1]).sum()
        second = s2s.forward(s2s.embed_src([5, 2, 6]), s2s.embed_tgt([0, 7, 2]), [7, 2, 1]).sum()
        return first + second

    checks.append(("seq2seq", gradcheck(s2s_loss, list(s2s.params.values())), 1e-4))

    failed = False
    for name, err, tol in checks:
        ok = err < tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error {err:.3g} (tolerance {tol:g})")
    return EXIT_RUN if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cutlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel runs for sweeps")

    p = sub.add_parser("train", help="single training run")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep-ratio", help=f"cutoff-ratio sweep over {RATIO_GRID}")
    common(p)
    p.add_argument("--n-seeds", type=int, default=3)
    p.set_defaults(fn=cmd_sweep_ratio)

    p = sub.add_parser("sweep-beta", help=f"consistency-weight sweep over {BETA_GRID}")
    common(p)
    p.add_argument("--n-seeds", type=int, default=3)
    p.set_defaults(fn=cmd_sweep_beta)

    p = sub.add_parser("compare-adv", help="baseline vs cutoff vs PGD cost/quality")
    common(p)
    p.add_argument("--n-seeds", type=int, default=3)
    p.set_defaults(fn=cmd_compare_adv)

    p = sub.add_parser("gradcheck", help="finite-difference verification of gradients")
    common(p, needs_config=False)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("disagreement", help="view-disagreement vs error-rate measurement")
    common(p)
    p.set_defaults(fn=cmd_disagreement)

    p = sub.add_parser("gen-data", help="generate and dump a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailure as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
