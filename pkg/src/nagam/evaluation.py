"""Cross-validated experiments, the least-squares reference model and the
check of the published shape-function findings."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .concept_heads import HeadsConfig, eval_heads, predicted_features, train_heads
from .errors import ConfigError, SingularSystem
from .gam import GAMConfig, fit_additive, global_patterns
from .ingest import Dataset, kfold_split

log = logging.getLogger(__name__)

SOURCES = ("consensus", "predicted")


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = (0,)
    k: int = 5
    epochs: int = 80
    batch_size: int = 16
    base_lr: float = 1e-4
    subnets: int = 4
    hidden: int = 32
    val_fraction: float = 0.1
    train_target_source: str = "consensus"
    explain_source: str = "consensus"
    train_heads: bool = False
    head_hidden: tuple[int, ...] = (64, 32)
    jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.epochs < 0 or self.batch_size < 1 or self.subnets < 1 or self.hidden < 1 or self.jobs < 1:
            raise ConfigError("epochs >= 0 and positive batch_size, subnets, hidden, jobs required")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        for name in ("train_target_source", "explain_source"):
            if getattr(self, name) not in SOURCES:
                raise ConfigError(f"{name} must be one of {SOURCES}")
        return self

    @property
    def needs_heads(self) -> bool:
        return self.train_heads or "predicted" in (self.train_target_source, self.explain_source)

    def gam_config(self, seed: int) -> GAMConfig:
        return GAMConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.base_lr,
            subnets=self.subnets,
            hidden=self.hidden,
            val_fraction=self.val_fraction,
            seed=seed,
        )

    def heads_config(self, seed: int) -> HeadsConfig:
        return HeadsConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.base_lr,
            hidden=tuple(self.head_hidden),
            val_fraction=self.val_fraction,
            seed=seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["head_hidden"] = list(self.head_hidden)
        return d


@dataclass
class FoldResult:
    seed: int
    fold: int
    n_train: int
    n_test: int
    gam_mae: float
    baseline_mae: float
    constant_mae: float
    head_mae: dict[str, float] = field(default_factory=dict)
    head_f1: dict[str, float] = field(default_factory=dict)
    patterns: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LinearFit:
    weights: np.ndarray
    intercept: float

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.weights + self.intercept


def fit_linear(X, y, ridge: float = 1e-8) -> LinearFit:
    """Least squares with intercept via the (damped) normal equations.

    Features and target are centered first, so the intercept is never
    damped and a constant target gives zero weights exactly.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    A = X - x_mean
    gram = A.T @ A + ridge * np.eye(A.shape[1])
    try:
        w = np.linalg.solve(gram, A.T @ (y - y_mean))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(w)):
        raise SingularSystem("normal equations produced non-finite weights")
    return LinearFit(w, y_mean - float(x_mean @ w))


def linear_baseline(dataset: Dataset, folds, features=None) -> list[float]:
    """Held-out malignancy MAE of the linear model on each ``(train, test)`` fold."""
    X = dataset.features() if features is None else np.asarray(features)
    y = dataset.targets()
    out = []
    for train, test in folds:
        fit = fit_linear(X[train], y[train])
        out.append(float(np.mean(np.abs(fit.predict(X[test]) - y[test]))))
    return out


def _fold_seeds(seed: int, k: int) -> list[tuple[int, int]]:
    children = np.random.SeedSequence(seed).spawn(k)
    return [tuple(int(s) for s in c.generate_state(2)) for c in children]


def run_fold(dataset: Dataset, config: ExperimentConfig, seed: int, fold: int, train, test, fold_seeds) -> FoldResult:
    train_ids = {dataset.rows[i].nodule_id for i in train}
    test_ids = {dataset.rows[i].nodule_id for i in test}
    if train_ids & test_ids:
        raise RuntimeError(f"fold {fold}: nodules present in both training and test sets")
    train_ds, test_ds = dataset.subset(train), dataset.subset(test)
    gam_seed, heads_seed = fold_seeds
    head_mae, head_f1 = {}, {}
    X_train, X_test = train_ds.features(), test_ds.features()
    if config.needs_heads:
        heads, _ = train_heads(train_ds, config.heads_config(heads_seed))
        metrics = eval_heads(heads, test_ds)
        head_mae, head_f1 = metrics.mae, metrics.f1
        if config.train_target_source == "predicted":
            X_train = predicted_features(heads, train_ds)
        if config.explain_source == "predicted":
            X_test = predicted_features(heads, test_ds)
    y_train, y_test = train_ds.targets(), test_ds.targets()
    model, _ = fit_additive(X_train, y_train, dataset.schema, config.gam_config(gam_seed))
    gam_mae = float(np.mean(np.abs(model.predict(X_test) - y_test)))
    linear = fit_linear(X_train, y_train)
    baseline_mae = float(np.mean(np.abs(linear.predict(X_test) - y_test)))
    constant_mae = float(np.mean(np.abs(y_train.mean() - y_test)))
    log.info("seed %d fold %d: gam %.4f linear %.4f constant %.4f", seed, fold, gam_mae, baseline_mae, constant_mae)
    return FoldResult(
        seed=seed,
        fold=fold,
        n_train=len(train),
        n_test=len(test),
        gam_mae=gam_mae,
        baseline_mae=baseline_mae,
        constant_mae=constant_mae,
        head_mae=head_mae,
        head_f1=head_f1,
        patterns=global_patterns(model).to_dict(),
    )


def _run_fold_task(args):
    return run_fold(*args)


def _mean_std(values) -> dict:
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        return {"mean": None, "std": None}
    return {"mean": float(values.mean()), "std": float(values.std(ddof=1)) if values.size > 1 else 0.0}


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    folds: list[FoldResult]
    aggregate: dict
    patterns: dict

    def to_dict(self) -> dict:
        return {
            # worker count does not affect results, so it stays out of the report
            "config": {k: v for k, v in self.config.to_dict().items() if k != "jobs"},
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": self.aggregate,
            "patterns": self.patterns,
        }

    def to_text(self, schema=None) -> str:
        return format_table(self, schema)


def aggregate(folds: list[FoldResult]) -> dict:
    out = {
        "gam_mae": _mean_std(f.gam_mae for f in folds),
        "baseline_mae": _mean_std(f.baseline_mae for f in folds),
        "constant_mae": _mean_std(f.constant_mae for f in folds),
        "fold_sizes": [[f.n_train, f.n_test] for f in folds],
    }
    if folds and folds[0].head_mae:
        out["head_mae"] = {n: _mean_std(f.head_mae[n] for f in folds) for n in folds[0].head_mae}
        out["head_f1"] = {n: _mean_std(f.head_f1[n] for f in folds) for n in folds[0].head_f1}
    return out


def run_experiment(dataset: Dataset, config: ExperimentConfig | None = None) -> ExperimentReport:
    """Run k-fold cross-validation once per seed and collect the results.

    Fold splits, model initialization and shuffling all derive from the
    seed, so a report is reproducible byte for byte.
    """
    config = (config or ExperimentConfig()).validate()
    if config.needs_heads and not dataset.has_embeddings:
        raise ConfigError("concept heads need a dataset with embeddings")
    if len(dataset) < config.k:
        raise ConfigError(f"{len(dataset)} nodules cannot be split into {config.k} folds")
    tasks = []
    for seed in config.seeds:
        folds = kfold_split(len(dataset), config.k, seed)
        for fold, ((train, test), fold_seeds) in enumerate(zip(folds, _fold_seeds(seed, config.k))):
            tasks.append((dataset, config, seed, fold, train, test, fold_seeds))
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_run_fold_task, tasks))
    else:
        results = [_run_fold_task(t) for t in tasks]
    results.sort(key=lambda r: (config.seeds.index(r.seed), r.fold))
    return ExperimentReport(config, results, aggregate(results), pattern_suite(results))


CLAIMS = {
    "spiculation_raises_score": "higher spiculation contributes more than lower spiculation",
    "texture_lowers_score": "solid texture contributes less than ground-glass texture",
    "absent_calcification_raises_score": "absent calcification contributes more than the other calcification classes",
}


def _claim_value(name: str, patterns: dict):
    ordinal = patterns.get("ordinal_deltas", {})
    categorical = patterns.get("categorical_deltas", {})
    if name == "spiculation_raises_score":
        return None if "spiculation" not in ordinal else ordinal["spiculation"] > 0
    if name == "texture_lowers_score":
        return None if "texture" not in ordinal else ordinal["texture"] < 0
    calc = categorical.get("calcification", {})
    # a class beats the mean of the others iff its delta from the all-class mean is positive
    return None if "Absent" not in calc else calc["Absent"] > 0


def pattern_suite(fold_results, threshold: float = 0.6) -> dict:
    """Fraction of runs whose learned shapes agree with each published finding."""
    runs = [f.patterns if isinstance(f, FoldResult) else f for f in fold_results]
    deltas = []
    for p in runs:
        deltas.extend(p.get("ordinal_deltas", {}).values())
        for per_class in p.get("categorical_deltas", {}).values():
            deltas.extend(per_class.values())
    inconclusive = not runs or all(d == 0 for d in deltas)
    claims = {}
    for name, text in CLAIMS.items():
        verdicts = [v for v in (_claim_value(name, p) for p in runs) if v is not None]
        fraction = sum(verdicts) / len(verdicts) if verdicts else 0.0
        claims[name] = {
            "claim": text,
            "runs": len(verdicts),
            "satisfied": int(sum(verdicts)),
            "fraction": fraction,
            "passed": bool(verdicts) and not inconclusive and fraction >= threshold,
        }
    return {"threshold": threshold, "inconclusive": inconclusive, "claims": claims}


def _fmt(stat, digits=4):
    if not stat or stat.get("mean") is None:
        return "-"
    return f"{stat['mean']:.{digits}f} ± {stat['std']:.{digits}f}"


def format_table(report: ExperimentReport, schema=None) -> str:
    agg = report.aggregate
    head_mae = agg.get("head_mae", {})
    head_f1 = agg.get("head_f1", {})
    rows = list(head_mae) or ([*schema.ordinal_names, schema.target.name] if schema else ["malignancy"])
    if "malignancy" not in rows:
        rows.append("malignancy")
    cat_rows = list(head_f1) or (schema.categorical_names if schema else [])
    cols = ("concept", "heads", "gam", "linear", "constant")
    lines = []
    widths = (20, 19, 19, 19, 19)
    header = "".join(c.ljust(w) for c, w in zip(cols, widths))
    lines.append("Held-out MAE (numeric concepts) / macro F1 (categorical), mean ± std over runs")
    lines.append(header)
    lines.append("-" * len(header))
    for name in rows:
        cells = [name, _fmt(head_mae.get(name)), "-", "-", "-"]
        if name == "malignancy":
            cells[2:] = [_fmt(agg["gam_mae"]), _fmt(agg["baseline_mae"]), _fmt(agg["constant_mae"])]
        lines.append("".join(c.ljust(w) for c, w in zip(cells, widths)))
    for name in cat_rows:
        cells = [name, _fmt(head_f1.get(name)), "-", "-", "-"]
        lines.append("".join(c.ljust(w) for c, w in zip(cells, widths)))
    lines.append("")
    lines.append("Folds (seed/fold: train/test):")
    for f in report.folds:
        lines.append(f"  {f.seed}/{f.fold}: {f.n_train}/{f.n_test}")
    lines.append("")
    suite = report.patterns
    status = " (inconclusive)" if suite["inconclusive"] else ""
    lines.append(f"Shape-function findings, pass at >= {suite['threshold']:.0%} of runs{status}:")
    for name, c in suite["claims"].items():
        mark = "PASS" if c["passed"] else "FAIL"
        lines.append(f"  [{mark}] {name}: {c['satisfied']}/{c['runs']} ({c['fraction']:.0%}) - {c['claim']}")
    return "\n".join(lines) + "\n"
