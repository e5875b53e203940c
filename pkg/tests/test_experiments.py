import json
import math
import os
import xml.etree.ElementTree as ET
from dataclasses import replace

import pytest

import cutlab.experiments as ex
from cutlab.cli import main
from cutlab.cutoff import CutoffKind, CutoffSpec
from cutlab.models import EncoderClassifier, EncoderConfig

TINY = ex.ExperimentConfig(
    task="keyword",
    n_examples=48,
    seq_length=12,
    vocab_size=10,
    redundancy=3,
    layers=1,
    heads=2,
    d=8,
    ffn_width=16,
    epochs=1,
    batch_size=16,
    seed=0,
)


class TestConfig:
    def test_rejects_unknown_keys(self):
        with pytest.raises(ex.ConfigError, match="unknown config keys"):
            ex.ExperimentConfig.from_dict({"task": "keyword", "bogus": 1})

    def test_rejects_bad_task_and_mode(self):
        with pytest.raises(ex.ConfigError):
            ex.ExperimentConfig.from_dict({"task": "imagenet"})
        with pytest.raises(ex.ConfigError):
            ex.ExperimentConfig.from_dict({"mode": "sgd"})

    def test_rejects_bad_nested_values(self):
        with pytest.raises(ex.ConfigError):
            ex.ExperimentConfig.from_dict({"cutoff_ratio": 1.5, "cutoff_kind": "span"})
        with pytest.raises(ex.ConfigError):
            ex.ExperimentConfig.from_dict({"mode": "adversarial", "adv_steps": 0})

    def test_run_id_distinguishes_runs(self):
        a = replace(TINY, seed=1).run_id()
        b = replace(TINY, seed=2).run_id()
        assert a != b


class TestRunExperiment:
    def test_record_structure(self):
        result = ex.run_experiment(replace(TINY, epochs=2))
        assert result.records
        splits = {(r.epoch, r.split, r.metric_name) for r in result.records}
        assert (1, "dev", "accuracy") in splits
        assert (2, "test", "accuracy") in splits
        assert all(r.run_id == TINY.run_id() or True for r in result.records)
        assert all(math.isfinite(r.value) for r in result.records)

    def test_injected_clock_makes_records_reproducible(self):
        a = ex.run_experiment(TINY, clock=lambda: 0.0)
        b = ex.run_experiment(TINY, clock=lambda: 0.0)
        assert a.records == b.records

    def test_lexicon_task_runs(self):
        cfg = replace(TINY, task="lexicon", seq_length=3, vocab_size=10, n_examples=24)
        result = ex.run_experiment(cfg)
        names = {r.metric_name for r in result.records}
        assert "exact_match" in names and "ce" in names


class TestSweeps:
    def test_ratio_sweep_counts_and_determinism(self, tmp_path):
        result = ex.sweep_ratio(
            TINY, seeds=[0, 1, 2], ratios=(0.1, 0.2), kinds=(CutoffKind.TOKEN, CutoffKind.SPAN)
        )
        assert len(result.summary) == 2 * 2 * 3
        assert len(result.aggregate) == 4
        again = ex.sweep_ratio(
            TINY, seeds=[0, 1, 2], ratios=(0.1, 0.2), kinds=(CutoffKind.TOKEN, CutoffKind.SPAN)
        )
        assert result.summary == again.summary
        for row in result.aggregate:
            assert row["n"] == 3 and math.isfinite(row["mean"]) and row["sd"] >= 0.0

    def test_ratio_sweep_requires_three_seeds(self):
        with pytest.raises(ex.ConfigError, match="3 seeds"):
            ex.sweep_ratio(TINY, seeds=[0, 1])

    def test_beta_sweep_counts(self):
        result = ex.sweep_beta(TINY, seeds=[0, 1, 2], betas=(0.0, 1.0))
        assert len(result.summary) == 6
        assert {row["js_weight"] for row in result.summary} == {0.0, 1.0}
        zero_row = next(r for r in result.summary if r["js_weight"] == 0.0)
        assert zero_row["cutoff_kind"] == "span"

    def test_beta_sweep_requires_three_seeds(self):
        with pytest.raises(ex.ConfigError, match="3 seeds"):
            ex.sweep_beta(TINY, seeds=[0])

    def test_parallel_matches_serial(self):
        serial = ex.sweep_beta(TINY, seeds=[0, 1, 2], betas=(0.0,))
        parallel = ex.sweep_beta(TINY, seeds=[0, 1, 2], betas=(0.0,), jobs=2)
        assert serial.summary == parallel.summary

    def test_run_failure_preserves_partial_records(self, monkeypatch):
        real = ex.run_experiment

        def flaky(cfg, clock=None, keep_model=False):
            if cfg.seed == 2:
                raise RuntimeError("injected failure")
            return real(cfg, clock=clock, keep_model=keep_model)

        monkeypatch.setattr(ex, "run_experiment", flaky)
        with pytest.raises(ex.RunFailure, match="injected") as info:
            ex.sweep_beta(TINY, seeds=[0, 1, 2], betas=(0.0,))
        partial = info.value.partial_records()
        assert partial and {r.seed for r in partial} == {0, 1}


class TestCompareAndDisagreement:
    def test_compare_orders_pass_counts(self):
        rows = ex.compare_adversarial(replace(TINY, cutoff_kind="span", cutoff_ratio=0.1), seeds=[0])
        by_name = {r.variant: r for r in rows}
        assert by_name["baseline"].per_step_passes == (1, 1)
        assert by_name["cutoff-span0.1"].per_step_passes == (2, 1)
        assert by_name["pgd-T1"].per_step_passes == (2, 2)
        assert by_name["pgd-T3"].per_step_passes == (4, 4)

    def test_disagreement_zero_for_identity_views(self):
        model = EncoderClassifier(
            EncoderConfig(layers=1, heads=2, d=8, ffn_width=16, max_length=13, vocab_size=10, n_classes=2),
            seed=0,
        )
        _, dev, _ = ex.build_dataset(TINY)
        stats = ex.measure_disagreement(model, dev, CutoffSpec(CutoffKind.SPAN, 0.0), seed=0)
        assert stats["disagreement"] == 0.0
        assert stats["bound_holds"] in (True, False)

    def test_disagreement_zero_for_constant_model(self):
        model = EncoderClassifier(
            EncoderConfig(layers=1, heads=2, d=8, ffn_width=16, max_length=13, vocab_size=10, n_classes=2),
            seed=0,
        )
        model.params["head.w"].data[:] = 0.0
        model.params["head.b"].data[:] = 0.0
        _, dev, _ = ex.build_dataset(TINY)
        stats = ex.measure_disagreement(model, dev, CutoffSpec(CutoffKind.SPAN, 0.3), seed=1)
        assert stats["disagreement"] == 0.0
        base_rate = sum(1 for e in dev if e.label != 0) / len(dev)
        assert stats["error_rates"] == [base_rate, base_rate]


class TestEmission:
    def test_metrics_csv_round_trip_is_lossless(self, tmp_path):
        result = ex.run_experiment(TINY)
        path = os.path.join(tmp_path, "m.csv")
        ex.write_metrics_csv(path, result.records)
        loaded = ex.read_metrics_csv(path)
        assert loaded == result.records

    def test_float_repr_survives_17_digits(self, tmp_path):
        values = [1 / 3, math.pi, 1e-17, 0.1 + 0.2]
        rec = ex.MetricsRecord(
            run_id="x", seed=0, mode="baseline", cutoff_kind="none", cutoff_ratio=values[0],
            aug_ce_weight=values[1], js_weight=values[2], epoch=1, split="dev",
            metric_name="m", value=values[3], forwards=1, backwards=1, wall_seconds=0.0,
        )
        path = os.path.join(tmp_path, "m.csv")
        ex.write_metrics_csv(path, [rec])
        loaded = ex.read_metrics_csv(path)[0]
        assert loaded.cutoff_ratio == values[0]
        assert loaded.aug_ce_weight == values[1]
        assert loaded.js_weight == values[2]
        assert loaded.value == values[3]

    def test_svg_is_valid_xml_with_polylines(self, tmp_path):
        path = os.path.join(tmp_path, "chart.svg")
        ex.write_svg(
            path, "title", "x", "y",
            {"a": [(0.0, 1.0), (1.0, 2.0)], "b": [(0.0, 2.0), (1.0, 1.0)]},
        )
        root = ET.parse(path).getroot()
        assert root.tag.endswith("svg")
        polylines = [el for el in root.iter() if el.tag.endswith("polyline")]
        assert len(polylines) == 2

    def test_summary_csv(self, tmp_path):
        path = os.path.join(tmp_path, "s.csv")
        ex.write_summary_csv(path, [{"run_id": "r", "dev_metric": 0.5}])
        lines = open(path).read().splitlines()
        assert lines[0] == "run_id,dev_metric"
        assert lines[1] == "r,0.5"


class TestCLI:
    def write_config(self, tmp_path, **overrides):
        raw = {
            "task": "keyword", "n_examples": 48, "seq_length": 12, "vocab_size": 10,
            "redundancy": 3, "layers": 1, "heads": 2, "d": 8, "ffn_width": 16,
            "epochs": 1, "batch_size": 16, "seed": 0,
        }
        raw.update(overrides)
        path = os.path.join(tmp_path, "cfg.json")
        with open(path, "w") as fh:
            json.dump(raw, fh)
        return path

    def test_train_writes_outputs(self, tmp_path):
        cfg = self.write_config(tmp_path)
        out = os.path.join(tmp_path, "out")
        assert main(["train", "--config", cfg, "--out", out]) == 0
        for name in ("metrics.csv", "checkpoint.txt", "config.json"):
            assert os.path.exists(os.path.join(out, name))

    def test_config_error_exit_code(self, tmp_path):
        path = os.path.join(tmp_path, "bad.json")
        with open(path, "w") as fh:
            fh.write('{"task": "nope"}')
        assert main(["train", "--config", path, "--out", str(tmp_path)]) == 2

    def test_missing_config_exit_code(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2

    def test_invalid_json_exit_code(self, tmp_path):
        path = os.path.join(tmp_path, "broken.json")
        with open(path, "w") as fh:
            fh.write("{not json")
        assert main(["train", "--config", path, "--out", str(tmp_path)]) == 2

    def test_gen_data(self, tmp_path):
        cfg = self.write_config(tmp_path)
        out = os.path.join(tmp_path, "data")
        assert main(["gen-data", "--config", cfg, "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "keyword.tsv"))

    def test_seed_override(self, tmp_path):
        cfg = self.write_config(tmp_path)
        out = os.path.join(tmp_path, "o1")
        assert main(["train", "--config", cfg, "--seed", "5", "--out", out]) == 0
        written = json.load(open(os.path.join(out, "config.json")))
        assert written["seed"] == 5

    def test_disagreement_cli(self, tmp_path):
        cfg = self.write_config(tmp_path, mode="cutoff", cutoff_kind="span", cutoff_ratio=0.2)
        out = os.path.join(tmp_path, "dis")
        assert main(["disagreement", "--config", cfg, "--out", out]) == 0
        stats = json.load(open(os.path.join(out, "disagreement.json")))
        assert set(stats) == {"disagreement", "error_rates", "bound_holds"}
