"""Explainable nodule malignancy scoring with a neural additive model over radiologist concepts."""

from .concept_heads import ConceptHeads, HeadsConfig, eval_heads, joint_loss, predict_concepts, train_heads
from .errors import ConfigError, InputError, LookupFailure, NagamError
from .evaluation import ExperimentConfig, fit_linear, linear_baseline, pattern_suite, run_experiment
from .gam import AdditiveModel, Explanation, GAMConfig, gam_predict, global_patterns, shape_grid, train_gam
from .gradcore import AdamState, MicroNet, ParamSet, PlateauScheduler, adam_step, ce_loss, mse_loss
from .ingest import ConceptVector, Dataset, NoduleRecord, build_dataset, consensus, kfold_split, parse_annotations
from .schema import ConceptSchema, default_schema

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AdditiveModel",
    "ConceptHeads",
    "ConceptSchema",
    "ConceptVector",
    "ConfigError",
    "Dataset",
    "ExperimentConfig",
    "Explanation",
    "GAMConfig",
    "HeadsConfig",
    "InputError",
    "LookupFailure",
    "MicroNet",
    "NagamError",
    "NoduleRecord",
    "ParamSet",
    "PlateauScheduler",
    "adam_step",
    "build_dataset",
    "ce_loss",
    "consensus",
    "default_schema",
    "eval_heads",
    "fit_linear",
    "gam_predict",
    "global_patterns",
    "joint_loss",
    "kfold_split",
    "linear_baseline",
    "mse_loss",
    "parse_annotations",
    "pattern_suite",
    "predict_concepts",
    "run_experiment",
    "shape_grid",
    "train_gam",
    "train_heads",
]
