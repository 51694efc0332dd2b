"""Acceptance criteria, one test each, with one verdict line per criterion.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance
criteria" section of the summary (or pass ``-s`` to see lines inline).
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_features
from fd import numeric_grad, rel_error
from test_cli import run
from test_concept_heads import heads_gradient_errors
from test_gam import gam_gradient_errors
from nagam.concept_heads import eval_heads, macro_f1
from nagam.evaluation import ExperimentConfig, run_experiment
from nagam.gam import AdditiveModel, GAMConfig, fit_additive
from nagam.gradcore import AdamState, PlateauScheduler, adam_step, ce_loss, mse_loss, softmax
from nagam.ingest import kfold_split
from nagam.schema import ConceptSchema, OrdinalConceptDef, default_schema
from nagam.surrogate import load_dataset


def verdict(number, title, passed, detail, status=None):
    status = status or ("PASS" if passed else "FAIL")
    line = f"CRITERION {number}: {status} [{title}] {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def test_criterion_01_additivity():
    rng = np.random.default_rng(2024)
    schema = default_schema()
    worst = 0.0
    for i in range(1000):
        model = AdditiveModel(schema, int(rng.integers(1, 6)), int(rng.integers(1, 33)))
        model.params.data[:] = rng.normal(0, rng.uniform(0.1, 3.0), len(model.params))
        x = random_features(rng, schema, 1)
        x[:, : len(schema.ordinals)] = rng.uniform(-0.5, 1.5, (1, len(schema.ordinals)))
        pred, contrib = model.decompose(x)
        worst = max(worst, abs(pred[0] - model.bias - contrib.sum()))
    assert verdict(1, "additivity", worst < 1e-9, f"max |pred - bias - sum| over 1000 pairs = {worst:.2e} (< 1e-9)")


def _mse_errors(count=10):
    errors = []
    for seed in range(count):
        rng = np.random.default_rng(seed)
        pred, target = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        g = mse_loss(pred, target)[1]
        errors.append(rel_error(g, numeric_grad(lambda: mse_loss(pred, target)[0], pred)))
    return errors


def _ce_errors(count=10):
    errors = []
    for seed in range(count):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(5, 6)) * 2
        y = np.eye(6)[rng.integers(0, 6, 5)]
        g = ce_loss(softmax(z), y)[1]
        errors.append(rel_error(g, numeric_grad(lambda: ce_loss(softmax(z), y)[0], z)))
    return errors


def test_criterion_02_gradient_fidelity():
    start = time.perf_counter()
    groups = {"mse": _mse_errors(), "softmax+ce": _ce_errors(), "heads": heads_gradient_errors(), "gam": gam_gradient_errors()}
    elapsed = time.perf_counter() - start
    ok = all(len(e) >= 10 and max(e) < 1e-4 for e in groups.values()) and elapsed < 60
    detail = ", ".join(f"{k} {len(e)} seeds max rel err {max(e):.1e}" for k, e in groups.items())
    assert verdict(2, "gradient fidelity", ok, f"{detail}; {elapsed:.1f}s (< 60s)")


def test_criterion_03_adam_and_schedule():
    p = [np.zeros(1)]
    adam_step(p, [np.ones(1)], AdamState(learning_rate=1e-4))
    # hand-unrolled first step: m_hat = v_hat = 1
    expected = -1e-4 * 1.0 / (math.sqrt(1.0) + 1e-8)
    adam_ok = abs(p[0][0] - expected) < 1e-12 and abs(p[0][0] - (-9.99999995e-5)) < 1e-12
    sched = PlateauScheduler(learning_rate=1e-4, factor=0.9, patience=4)
    lrs = [sched.observe(0.5) for _ in range(6)]
    sched_ok = lrs[:5] == [1e-4] * 5 and lrs[5] == 9e-5
    assert verdict(
        3,
        "adam oracle and plateau schedule",
        adam_ok and sched_ok,
        f"first step {p[0][0]:.10e} (oracle {expected:.10e}); lr after 5th stalled epoch {lrs[5]!r}",
    )


def _recovery_trial(seed):
    schema = ConceptSchema([OrdinalConceptDef("x1"), OrdinalConceptDef("x2")], [], OrdinalConceptDef("y"))
    shapes = {"x1": lambda x: 0.3 * np.sin(2 * np.pi * x), "x2": lambda x: 0.5 * x**2}
    rng = np.random.default_rng(seed)
    X = rng.random((2000, 2))
    y = shapes["x1"](X[:, 0]) + shapes["x2"](X[:, 1]) + 0.2
    model, _ = fit_additive(X[:1600], y[:1600], schema, GAMConfig(seed=seed))
    mse = float(np.mean((model.predict(X[1600:]) - y[1600:]) ** 2))
    grid = np.linspace(0, 1, 101)
    rmse = {}
    for name, g in shapes.items():
        learned, truth = model.concept_contribution(name, grid[:, None]), g(grid)
        rmse[name] = float(np.sqrt(np.mean(((learned - learned.mean()) - (truth - truth.mean())) ** 2)))
    return mse, rmse


def test_criterion_04_synthetic_recovery():
    start = time.perf_counter()
    trials = [_recovery_trial(seed) for seed in range(5)]
    elapsed = time.perf_counter() - start
    good = sum(mse < 1e-3 and max(r.values()) < 0.05 for mse, r in trials)
    worst_mse = max(t[0] for t in trials)
    worst_rmse = max(max(t[1].values()) for t in trials)
    ok = good >= 4 and elapsed < 300
    detail = f"{good}/5 seeds recover (worst test MSE {worst_mse:.1e}, worst centered shape RMSE {worst_rmse:.4f}); {elapsed:.1f}s (< 300s)"
    assert verdict(4, "synthetic additive recovery", ok, detail)


def test_criterion_05_fold_arithmetic():
    sizes = sorted((len(tr), len(te)) for tr, te in kfold_split(2651, 5, seed=0))
    ok = sizes == [(2120, 531)] + [(2121, 530)] * 4
    assert verdict(5, "fold arithmetic", ok, f"train/test sizes {sizes}")


@pytest.fixture(scope="module")
def lidc_report(lidc_dataset):
    if lidc_dataset is None:
        return None
    return run_experiment(lidc_dataset, ExperimentConfig(seeds=(0, 1, 2, 3, 4), k=5))


def _dominance(folds):
    margins = [f.gam_mae - f.baseline_mae for f in folds]
    return all(m <= 0.005 for m in margins), max(margins)


def test_criterion_06_baseline_dominance(lidc_report):
    if lidc_report is not None:
        folds = [f for f in lidc_report.folds if f.seed == 0]
        source = f"LIDC-IDRI consensus ({folds[0].n_train + folds[0].n_test} nodules)"
    else:
        folds = run_experiment(load_dataset(), ExperimentConfig(seeds=(0,), k=5)).folds
        source = "bundled surrogate"
    ok, worst = _dominance(folds)
    gams = " ".join(f"{f.gam_mae:.4f}/{f.baseline_mae:.4f}" for f in folds)
    assert verdict(6, "baseline dominance", ok, f"{source}, gam/linear MAE per fold {gams}; worst gam - linear {worst:+.4f} (<= 0.005)")


def test_criterion_06_surrogate_also_dominates():
    folds = run_experiment(load_dataset(), ExperimentConfig(seeds=(0,), k=5)).folds
    ok, worst = _dominance(folds)
    assert ok, f"surrogate: worst gam - linear margin {worst:+.4f}"


def test_criterion_07_patterns(lidc_report):
    if lidc_report is None:
        verdict(7, "pattern reproduction", False, "LIDC-IDRI ratings unavailable", status="SKIPPED")
        pytest.skip("LIDC-IDRI ratings unavailable (install pylidc or set NAGAM_LIDC_ANNOTATIONS)")
    suite = lidc_report.patterns
    ok = len(lidc_report.folds) == 25 and not suite["inconclusive"] and all(c["passed"] for c in suite["claims"].values())
    detail = ", ".join(f"{name} {c['satisfied']}/{c['runs']}" for name, c in suite["claims"].items())
    assert verdict(7, "pattern reproduction", ok, f"5 seeds x 5 folds on LIDC-IDRI: {detail} (>= 60% each)")


def test_criterion_08_not_a_target():
    verdict(8, "published table reproduction", True, "not a target; criteria 4, 6, 7 and the module suites substitute", status="N/A")


def test_criterion_09_loss_oracles(small_dataset):
    ce = ce_loss(np.full(6, 1 / 6), np.eye(6)[5])[0]
    mse = mse_loss(np.array([0.0, 1.0]), np.array([1.0, 1.0]))[0]
    perfect_loss = mse_loss(np.array([0.2, 0.7]), np.array([0.2, 0.7]))[0] + ce_loss(np.eye(6)[3], np.eye(6)[3])[0]
    labels = np.array([0, 3, 5, 5, 1])
    f1 = macro_f1(labels, labels)
    ok = abs(ce - math.log(6)) < 1e-9 and mse == 0.5 and perfect_loss == 0.0 and f1 == 1.0
    assert verdict(9, "loss oracles", ok, f"CE(uniform 6) - ln 6 = {ce - math.log(6):.1e}; MSE = {mse}; perfect loss {perfect_loss}, F1 {f1}")


PIPELINE = [
    ("schema", "dump", "--out", "{o}/schema.json"),
    ("surrogate", "--out-dir", "{o}/raw", "--n", "200", "--seed", "11"),
    ("ingest", "--annotations", "{o}/raw/annotations.csv", "--embeddings", "{o}/raw/embeddings.csv", "--out", "{o}/data.jsonl"),
    ("train", "--data", "{o}/data.jsonl", "--out", "{o}/gam.json", "--epochs", "3", "--seed", "4"),
    ("train-heads", "--data", "{o}/data.jsonl", "--out", "{o}/heads.json", "--epochs", "3", "--seed", "4"),
    ("eval-heads", "--model", "{o}/heads.json", "--data", "{o}/data.jsonl", "--out", "{o}/heads_metrics.json"),
    ("evaluate", "--data", "{o}/data.jsonl", "--out-dir", "{o}/eval", "--epochs", "2", "--k", "3", "--seeds", "0", "1", "--heads"),
    ("explain", "--model", "{o}/gam.json", "--data", "{o}/data.jsonl", "--out", "{o}/explain.jsonl"),
    ("shapes", "--model", "{o}/gam.json", "--out-dir", "{o}/shapes", "--points", "11", "--center"),
    ("predict", "--model", "{o}/gam.json", "--data", "{o}/data.jsonl", "--out", "{o}/pred.csv", "--source", "predicted", "--heads", "{o}/heads.json"),
]


def test_criterion_10_determinism(tmp_path, capsys):
    snapshots = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        stdout = []
        for step in PIPELINE:
            # stdout may mention the output directory, so compare it path-free
            assert run(*[s.format(o=out) for s in step]) == 0
            stdout.append(capsys.readouterr().out.replace(str(out), "<out>"))
        files = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
        snapshots.append((files, stdout))
    (files_a, out_a), (files_b, out_b) = snapshots
    differing = sorted(str(k) for k in files_a.keys() | files_b.keys() if files_a.get(k) != files_b.get(k))
    ok = not differing and out_a == out_b
    detail = f"{len(files_a)} output files from {len(PIPELINE)} subcommands byte-identical across two runs"
    assert verdict(10, "determinism", ok, detail if ok else f"differing outputs: {differing}")
