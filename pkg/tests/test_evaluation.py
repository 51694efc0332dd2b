import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from test_gam import spiculation_ramp
from nagam.errors import ConfigError, SingularSystem
from nagam.evaluation import (
    ExperimentConfig,
    aggregate,
    fit_linear,
    linear_baseline,
    pattern_suite,
    run_experiment,
    run_fold,
)
from nagam.gam import AdditiveModel, global_patterns
from nagam.ingest import Dataset, kfold_split
from nagam.surrogate import load_dataset


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_linear_recovers_generating_weights(seed, d):
    rng = np.random.default_rng(seed)
    X = rng.random((60, d))
    w, b = rng.normal(size=d), rng.normal()
    fit = fit_linear(X, X @ w + b)
    assert np.max(np.abs(fit.weights - w)) < 1e-6
    assert abs(fit.intercept - b) < 1e-6


def test_linear_against_lstsq():
    rng = np.random.default_rng(0)
    X, y = rng.random((50, 4)), rng.random(50)
    A = np.c_[X, np.ones(50)]
    ref = np.linalg.lstsq(A, y, rcond=None)[0]
    fit = fit_linear(X, y)
    assert np.allclose(fit.weights, ref[:4], atol=1e-7) and abs(fit.intercept - ref[4]) < 1e-7


def test_linear_handles_one_hot_collinearity(small_dataset):
    # each one-hot block sums to 1, which duplicates the intercept
    X = small_dataset.features()
    fit = fit_linear(X, small_dataset.targets())
    assert np.all(np.isfinite(fit.weights))
    with pytest.raises(SingularSystem):
        fit_linear(np.full((5, 2), np.nan), np.zeros(5))


def test_linear_baseline_per_fold(small_dataset):
    folds = kfold_split(len(small_dataset), 4, 0)
    maes = linear_baseline(small_dataset, folds)
    assert len(maes) == 4 and all(m >= 0 for m in maes)


def test_pattern_suite_zero_models(schema):
    patterns = global_patterns(AdditiveModel(schema)).to_dict()
    suite = pattern_suite([patterns] * 3)
    assert suite["inconclusive"]
    for claim in suite["claims"].values():
        assert claim["runs"] == 3 and claim["fraction"] == 0.0 and not claim["passed"]


def test_pattern_suite_handcrafted(schema):
    patterns = global_patterns(spiculation_ramp(schema)).to_dict()
    suite = pattern_suite([patterns] * 2)
    assert not suite["inconclusive"]
    assert suite["claims"]["spiculation_raises_score"]["passed"]
    assert suite["claims"]["spiculation_raises_score"]["fraction"] == 1.0
    assert not suite["claims"]["texture_lowers_score"]["passed"]


def test_pattern_suite_threshold():
    up = {"ordinal_deltas": {"spiculation": 0.1, "texture": -0.1}, "categorical_deltas": {"calcification": {"Absent": 0.2}}}
    down = {"ordinal_deltas": {"spiculation": -0.1, "texture": 0.1}, "categorical_deltas": {"calcification": {"Absent": -0.2}}}
    assert all(c["passed"] for c in pattern_suite([up, up, up, down, down])["claims"].values())
    assert not any(c["passed"] for c in pattern_suite([up, up, down, down, down])["claims"].values())


@pytest.fixture(scope="module")
def report(small_dataset):
    return run_experiment(small_dataset, ExperimentConfig(seeds=(0, 1), k=3, epochs=2, train_heads=True))


def test_report_structure(report, small_dataset):
    assert [(f.seed, f.fold) for f in report.folds] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    assert all(f.n_train + f.n_test == len(small_dataset) for f in report.folds)
    mean = report.aggregate["gam_mae"]["mean"]
    assert abs(mean - np.mean([f.gam_mae for f in report.folds])) <= 1e-12
    assert abs(report.aggregate["baseline_mae"]["mean"] - np.mean([f.baseline_mae for f in report.folds])) <= 1e-12
    assert set(report.aggregate["head_mae"]) == {*small_dataset.schema.ordinal_names, "malignancy"}
    assert all(0 <= v["mean"] <= 1 for v in report.aggregate["head_f1"].values())
    text = report.to_text(small_dataset.schema)
    assert "linear" in text and "spiculation_raises_score" in text
    json.dumps(report.to_dict())


def test_report_deterministic_and_parallel(report, small_dataset):
    again = run_experiment(small_dataset, ExperimentConfig(seeds=(0, 1), k=3, epochs=2, train_heads=True, jobs=2))
    assert json.dumps(again.to_dict()) == json.dumps(report.to_dict())


def test_predicted_sources(small_dataset):
    cfg = ExperimentConfig(k=2, epochs=1, train_target_source="predicted", explain_source="predicted")
    rep = run_experiment(small_dataset, cfg)
    assert len(rep.folds) == 2 and rep.folds[0].head_mae


def test_fold_leak_is_rejected(small_dataset):
    cfg = ExperimentConfig(k=2, epochs=0)
    idx = np.arange(len(small_dataset))
    with pytest.raises(RuntimeError):
        run_fold(small_dataset, cfg, 0, 0, idx[:80], idx[70:], (1, 2))


def test_no_leak_in_experiment_folds(small_dataset):
    for train, test in kfold_split(len(small_dataset), 5, 0):
        ids = small_dataset.ids
        assert not {ids[i] for i in train} & {ids[i] for i in test}


def test_config_errors(small_dataset):
    no_emb = Dataset(small_dataset.schema, small_dataset.rows)
    with pytest.raises(ConfigError):
        run_experiment(no_emb, ExperimentConfig(train_heads=True, epochs=0))
    with pytest.raises(ConfigError):
        ExperimentConfig(k=1).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(train_target_source="images").validate()
    with pytest.raises(ConfigError):
        run_experiment(no_emb.subset(range(3)), ExperimentConfig(k=5, epochs=0))


def test_fold_sizes_for_full_cohort():
    ds = load_dataset()
    rep = run_experiment(ds, ExperimentConfig(k=5, epochs=0))
    sizes = rep.aggregate["fold_sizes"]
    assert sorted(map(tuple, sizes)) == [(2120, 531)] + [(2121, 530)] * 4
    # an untrained model is the training-mean predictor
    assert all(abs(f.gam_mae - f.constant_mae) < 1e-12 for f in rep.folds)
