import csv
import io
import json
from dataclasses import replace

import jsonschema
import numpy as np
import pytest

from bcpt.config import TrainConfig
from bcpt.errors import InvalidArgumentError, StructuralError
from bcpt.experiment import ABLATION_VARIANTS, k_sweep, train_variants
from bcpt.report import (
    DEFAULT_TAUS,
    REPORT_SCHEMA,
    compare_report,
    evaluate_state,
    report_columns,
    report_csv,
    report_json,
    validate_report,
)
from bcpt.synth import SceneConfig, make_fold
from bcpt.trainer import init_state, pretrain


@pytest.fixture(scope="module")
def fold():
    return make_fold(SceneConfig(height=16, width=16), 6, 4, seed=1)


@pytest.fixture(scope="module")
def trained(fold):
    cfg = TrainConfig(epochs=3, embed_dim=6, hidden_dim=12)
    return pretrain(fold, cfg), pretrain(fold, replace(cfg, scheme="standard"))


class TestEvaluateState:
    def test_metric_keys_and_ranges(self, fold, trained):
        m = evaluate_state(trained[0], fold, seed=0)
        for tau in DEFAULT_TAUS:
            assert 0.0 <= m[f"fb_iou@{tau:g}"] <= 1.0
            assert 0.0 <= m[f"novel_miou@{tau:g}"] <= 1.0
        assert 0.0 <= m["nmi"] <= 1.0 and 0.0 < m["purity"] <= 1.0

    def test_seeded(self, fold, trained):
        assert evaluate_state(trained[0], fold, seed=3) == evaluate_state(trained[0], fold, seed=3)

    def test_empty_eval_fold(self, fold, trained):
        with pytest.raises(InvalidArgumentError):
            evaluate_state(trained[0], replace(fold, eval_scenes=[]))

    def test_feature_dim_mismatch(self, fold):
        state = init_state(TrainConfig(), 5, 3)
        with pytest.raises(StructuralError):
            evaluate_state(state, fold)


class TestCompareReport:
    def test_self_compare_gives_identical_columns(self, fold, trained):
        report = compare_report([("a", trained[0]), ("b", trained[0])], fold)
        a, b = report["rows"]
        for col in report["columns"][4:]:
            assert a[col] == b[col]

    def test_schema_and_json_round_trip(self, fold, trained):
        report = compare_report([("bcpt", trained[0]), ("standard", trained[1])], fold)
        validate_report(report)
        back = json.loads(report_json(report))
        jsonschema.validate(back, REPORT_SCHEMA)
        assert back == report

    def test_schema_rejects_missing_metric(self, fold, trained):
        report = compare_report([("bcpt", trained[0])], fold)
        del report["rows"][0]["nmi"]
        with pytest.raises(jsonschema.ValidationError):
            validate_report(report)

    def test_csv_columns_stable(self, fold, trained):
        report = compare_report([("bcpt", trained[0]), ("standard", trained[1])], fold, tau=0.7)
        rows = list(csv.reader(io.StringIO(report_csv(report))))
        assert rows[0] == report_columns(DEFAULT_TAUS, 0.7)
        assert [r[0] for r in rows[1:]] == ["bcpt", "standard"]
        assert report_csv(report) == report_csv(compare_report([("bcpt", trained[0]), ("standard", trained[1])], fold))

    def test_means_average_rows_with_one_name(self, fold, trained):
        report = compare_report([("x", trained[0]), ("x", trained[1])], fold)
        (mean,) = report["means"]
        assert mean["n_seeds"] == 2
        assert mean["nmi"] == pytest.approx(np.mean([r["nmi"] for r in report["rows"]]))

    def test_tau_outside_sweep_is_added(self, fold, trained):
        report = compare_report([("a", trained[0])], fold, tau=0.65)
        assert 0.65 in report["taus"]
        assert report["rows"][0]["fb_iou"] == report["rows"][0]["fb_iou@0.65"]

    def test_empty_eval_fold_gives_no_report(self, fold, trained):
        with pytest.raises(InvalidArgumentError):
            compare_report([("a", trained[0])], replace(fold, eval_scenes=[]))

    def test_no_checkpoints(self, fold):
        with pytest.raises(InvalidArgumentError):
            compare_report([], fold)

    def test_embedding_dims_must_agree(self, fold, trained):
        other = pretrain(fold, TrainConfig(epochs=0, embed_dim=3))
        with pytest.raises(StructuralError):
            compare_report([("a", trained[0]), ("b", other)], fold)


@pytest.mark.xfail(
    strict=True,
    reason="at seed 2 the online clusters merge novel regions with actual background on noise-free data",
)
def test_noise_free_bcpt_nmi_not_below_standard():
    fold = make_fold(SceneConfig(noise_sigma=0.0), 20, 6, seed=0)
    for seed in range(3):
        std = evaluate_state(pretrain(fold, TrainConfig(scheme="standard", seed=seed)), fold)
        bcpt = evaluate_state(pretrain(fold, TrainConfig(scheme="bcpt", seed=seed)), fold)
        assert bcpt["nmi"] >= std["nmi"], f"seed {seed}"


class TestExperiment:
    def test_ablation_rows(self, fold):
        runs = train_variants(fold, TrainConfig(epochs=1), seeds=(0, 1))
        assert [n for n, _ in runs] == list(ABLATION_VARIANTS) * 2
        assert [st.config.seed for _, st in runs] == [0, 0, 0, 1, 1, 1]
        assert runs[1][1].config.ocg_enabled is False and runs[2][1].config.ocg_enabled is True

    def test_k_sweep(self, fold):
        runs = k_sweep(fold, TrainConfig(epochs=1), ks=(2, 3, 6))
        assert [n for n, _, _ in runs] == ["k=2", "k=3", "k=6"]
        assert [st.clusters.k for _, st, _ in runs] == [2, 3, 6]
        assert all(secs > 0 for _, _, secs in runs)
