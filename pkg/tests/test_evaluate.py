import dataclasses
import json

import pytest

from fptnoise.attacks import AttackConfig
from fptnoise.data import SyntheticDatasetSpec
from fptnoise.defense import Branch, DefenseConfig
from fptnoise.encoders import TrainConfig
from fptnoise.errors import UsageError
from fptnoise.evaluate import (
    ABLATION_GRID,
    AblationFlags,
    DatasetConfig,
    EncoderArch,
    RunConfig,
    build_context,
    evaluate,
    evaluate_defense,
    run_ablation_grid,
    sweep,
)
from fptnoise.reports import (
    REPORT_JSON_SCHEMA,
    emit_report,
    read_report_csv,
    read_report_json,
    read_trace_csv,
    report_to_json_dict,
    summary_dict,
    write_trace_csv,
)

TINY_SPEC = SyntheticDatasetSpec(
    classes=3, per_class=6, image_shape=(3, 16, 16), jitter=0.03
)
TINY_ARCH = EncoderArch(
    patch_size=4, embed_dim=32, heads=4, blocks=2, feature_dim=32, mlp_dim=64,
    temperature=10.0, dfm_tokens=8, dfm_heads=2,
)


def tiny_run(**overrides) -> RunConfig:
    base = RunConfig(
        seed=123,
        dataset=DatasetConfig(kind="synthetic", synthetic=TINY_SPEC),
        encoder=TINY_ARCH,
        train=TrainConfig(epochs=6, batch_size=9, learning_rate=0.005, seed=1),
        attack_kind="pgd",
        attack=AttackConfig(epsilon=16 / 255, steps=5),
        timing_enabled=False,
    )
    return dataclasses.replace(base, **overrides)


@pytest.fixture(scope="module")
def tiny_ctx():
    return build_context(tiny_run())


class TestEvaluate:
    def test_report_fields(self, tiny_ctx):
        report = evaluate_defense(tiny_ctx)
        for name in (
            "clean_accuracy",
            "robust_accuracy",
            "defended_clean_accuracy",
            "defended_robust_accuracy",
        ):
            value = getattr(report, name)
            assert 0.0 <= value <= 1.0
        n = len(tiny_ctx.eval_set)
        assert sum(report.branch_hist_clean.values()) == n
        assert sum(report.branch_hist_adv.values()) == n
        assert len(report.traces) == 2 * n
        assert report.config["seed"] == 123

    def test_zero_epsilon_attack_keeps_accuracy(self):
        run = tiny_run(attack=AttackConfig(epsilon=0.0, steps=1))
        ctx = build_context(run)
        assert ctx.robust_accuracy == ctx.clean_accuracy

    def test_all_off_zero_budget_degenerates(self, tiny_ctx):
        cfg = DefenseConfig(sigma_min=0.0, sigma_max=0.0, counter_budget=0.0)
        flags = AblationFlags(dfm_on=False, fpt_on=False, sar_on=False, tte_on=False)
        report = evaluate_defense(tiny_ctx, defense=cfg, flags=flags)
        assert report.defended_clean_accuracy == tiny_ctx.clean_accuracy
        assert report.defended_robust_accuracy == tiny_ctx.robust_accuracy

    def test_trace_indices_are_contiguous(self, tiny_ctx):
        report = evaluate_defense(tiny_ctx)
        assert [row.index for row in report.traces] == list(range(len(report.traces)))

    def test_deterministic_reports(self, tiny_ctx):
        a = evaluate_defense(tiny_ctx)
        b = evaluate_defense(tiny_ctx)
        assert a.traces == b.traces
        assert summary_dict(a) == summary_dict(b)

    def test_worker_count_does_not_change_results(self, tmp_path):
        run1 = tiny_run(workers=1)
        run2 = tiny_run(workers=2)
        r1 = evaluate(run1)
        r2 = evaluate(run2)
        d1 = emit_report(r1, tmp_path / "w1", "csv")
        d2 = emit_report(r2, tmp_path / "w2", "csv")
        assert (tmp_path / "w1" / "traces.csv").read_bytes() == (
            tmp_path / "w2" / "traces.csv"
        ).read_bytes()
        assert (tmp_path / "w1" / "report.csv").read_bytes() == (
            tmp_path / "w2" / "report.csv"
        ).read_bytes()


class TestAblation:
    def test_grid_runs_and_reports(self, tiny_ctx):
        reports = run_ablation_grid(tiny_ctx.run, tiny_ctx)
        assert set(reports) == set(ABLATION_GRID)
        for report in reports.values():
            assert 0.0 <= report.defended_robust_accuracy <= 1.0

    def test_flags_map_to_config(self, tiny_ctx):
        report = evaluate_defense(
            tiny_ctx, flags=AblationFlags(dfm_on=False, fpt_on=True, sar_on=True)
        )
        mid_sigma = 0.5 * (tiny_ctx.run.defense.sigma_min + tiny_ctx.run.defense.sigma_max)
        assert all(row.sigma == mid_sigma for row in report.traces)


class TestSweep:
    def test_single_value_matches_evaluate(self, tiny_ctx):
        [(value, report)] = sweep("beta", [tiny_ctx.run.defense.beta], tiny_ctx.run, tiny_ctx)
        direct = evaluate_defense(tiny_ctx)
        assert summary_dict(report) == summary_dict(direct)

    def test_empty_values_rejected(self, tiny_ctx):
        with pytest.raises(UsageError):
            sweep("beta", [], tiny_ctx.run, tiny_ctx)

    def test_unknown_param_rejected(self, tiny_ctx):
        with pytest.raises(UsageError):
            sweep("gamma", [1.0], tiny_ctx.run, tiny_ctx)

    def test_beta_sweep_shifts_branches_monotonically(self, tiny_ctx):
        results = sweep("beta", [1.0, 1.125, 1.25], tiny_ctx.run, tiny_ctx)
        ratio_high = []
        suppressed = []
        for _, report in results:
            ratio_high.append(
                report.branch_hist_clean[Branch.COUNTER_FULL_RATIO_HIGH.value]
                + report.branch_hist_adv[Branch.COUNTER_FULL_RATIO_HIGH.value]
            )
            suppressed.append(
                report.branch_hist_clean[Branch.SUPPRESSED.value]
                + report.branch_hist_adv[Branch.SUPPRESSED.value]
            )
        assert ratio_high[0] >= ratio_high[1] >= ratio_high[2]
        assert suppressed[0] <= suppressed[1] <= suppressed[2]


class TestReports:
    def test_trace_csv_roundtrip(self, tiny_ctx, tmp_path):
        report = evaluate_defense(tiny_ctx)
        path = tmp_path / "traces.csv"
        write_trace_csv(report.traces, path)
        assert read_trace_csv(path) == report.traces
        header = path.read_text().splitlines()[0]
        assert header == (
            "index,tau,ttc_tau,sigma,k,r,w,branch,final_linf,pred,label,timing_ms"
        )

    def test_report_csv_roundtrip(self, tiny_ctx, tmp_path):
        report = evaluate_defense(tiny_ctx)
        paths = emit_report(report, tmp_path / "out", "csv")
        parsed = read_report_csv(paths["report"])
        assert parsed == summary_dict(report)

    def test_report_json_schema_and_roundtrip(self, tiny_ctx, tmp_path):
        jsonschema = pytest.importorskip("jsonschema")
        report = evaluate_defense(tiny_ctx)
        paths = emit_report(report, tmp_path / "out", "json")
        parsed = read_report_json(paths["report"])
        jsonschema.validate(parsed, REPORT_JSON_SCHEMA)
        assert parsed == json.loads(json.dumps(report_to_json_dict(report)))

    def test_histogram_columns_sum_to_dataset_size(self, tiny_ctx, tmp_path):
        report = evaluate_defense(tiny_ctx)
        paths = emit_report(report, tmp_path / "out", "csv")
        parsed = read_report_csv(paths["report"])
        n = len(tiny_ctx.eval_set)
        clean_total = sum(v for k, v in parsed.items() if k.startswith("branch_clean."))
        adv_total = sum(v for k, v in parsed.items() if k.startswith("branch_adv."))
        assert clean_total == n and adv_total == n


class TestDatasetConfig:
    def test_unknown_kind_rejected(self):
        from fptnoise.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            DatasetConfig(kind="webdataset")

    def test_idx_datasets_feed_the_pipeline(self, tmp_path):
        from fptnoise.data import generate_synthetic, quantize_images
        from fptnoise.data import write_idx_images, write_idx_labels

        spec = SyntheticDatasetSpec(classes=2, per_class=5, image_shape=(1, 8, 8))
        paths = {}
        for split, sample_seed in (("train", 1), ("eval", 2)):
            ds = generate_synthetic(spec, sample_seed)
            ipath = tmp_path / f"{split}-i.idx"
            lpath = tmp_path / f"{split}-l.idx"
            write_idx_images(ipath, quantize_images(ds.images))
            write_idx_labels(lpath, ds.labels)
            paths[split] = (str(ipath), str(lpath))

        run = tiny_run(
            dataset=DatasetConfig(
                kind="idx",
                train_images_path=paths["train"][0],
                train_labels_path=paths["train"][1],
                eval_images_path=paths["eval"][0],
                eval_labels_path=paths["eval"][1],
            ),
            encoder=EncoderArch(
                patch_size=4, embed_dim=16, heads=2, blocks=1, feature_dim=16,
                mlp_dim=32, temperature=10.0, dfm_tokens=4, dfm_heads=2,
            ),
            attack=AttackConfig(epsilon=8 / 255, steps=3),
        )
        report = evaluate(run)
        assert 0.0 <= report.defended_robust_accuracy <= 1.0
        assert len(report.traces) == 20


class TestRunConfigSerialization:
    def test_to_from_dict_roundtrip(self):
        run = tiny_run()
        raw = run.to_dict()
        back = RunConfig.from_dict(json.loads(json.dumps(raw)))
        assert back == run

    def test_unknown_key_rejected(self):
        with pytest.raises(UsageError):
            RunConfig.from_dict({"sed": 1})
