"""Task-specific heads mapping a feature embedding to concept predictions.

One sigmoid head per ordinal concept and for malignancy, one softmax head
per categorical concept. All heads read the same embedding and are trained
jointly on the sum of a mean squared error over the numeric outputs and a
batch-averaged cross-entropy per categorical concept.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatch, MissingEmbeddings, SchemaMismatch
from .gradcore import MicroNet, ParamSet, TrainState, ce_loss, mse_loss
from .ingest import ConceptVector, Dataset, validation_tail
from .schema import ConceptSchema

log = logging.getLogger(__name__)

HEADS_FORMAT = "nagam.concept_heads/1"


@dataclass
class HeadsConfig:
    epochs: int = 80
    batch_size: int = 16
    learning_rate: float = 1e-4
    hidden: tuple[int, ...] = (64, 32)
    val_fraction: float = 0.1
    plateau_factor: float = 0.9
    patience: int = 4
    min_lr: float = 0.0
    seed: int = 0

    def validate(self) -> "HeadsConfig":
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden widths must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        return self


@dataclass
class ConceptPrediction:
    numeric: dict[str, float]
    categorical: dict[str, np.ndarray]
    malignancy: float


@dataclass
class HeadsMetrics:
    mae: dict[str, float]
    f1: dict[str, float]

    def to_dict(self) -> dict:
        return {"mae": dict(self.mae), "f1": dict(self.f1)}


class ConceptHeads:
    def __init__(self, schema: ConceptSchema, input_dim: int, hidden=(64, 32), params=None):
        self.schema = schema
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.numeric_names = [*schema.ordinal_names, schema.target.name]
        self.categorical_names = schema.categorical_names
        layout = {n: ([self.input_dim, *self.hidden, 1], "sigmoid") for n in self.numeric_names}
        for c in schema.categoricals:
            layout[c.name] = ([self.input_dim, *self.hidden, c.n_classes], "softmax")
        shapes = {}
        for name, (dims, _) in layout.items():
            shapes.update(MicroNet.param_shapes(dims, None, f"{name}."))
        if params is None:
            params = ParamSet(shapes)
        elif params.shapes != shapes:
            raise SchemaMismatch("parameter layout does not match the heads topology")
        self.params = params
        self.nets = {name: MicroNet(dims, act, None, params, f"{name}.") for name, (dims, act) in layout.items()}

    @property
    def n_heads(self) -> int:
        return len(self.nets)

    def init(self, rng) -> "ConceptHeads":
        for net in self.nets.values():
            net.init(rng)
        return self

    def _check(self, E):
        E = np.asarray(E, dtype=float)
        if E.ndim != 2 or E.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected embeddings of width {self.input_dim}, got shape {E.shape}")
        return E

    def predict(self, E):
        """Batch outputs: numeric ``(n, n_ordinals + 1)`` and a list of class distributions."""
        E = self._check(E)
        numeric = np.column_stack([self.nets[n].forward(E)[:, 0] for n in self.numeric_names])
        cats = [self.nets[n].forward(E) for n in self.categorical_names]
        return numeric, cats

    def loss_terms(self, E, numeric_targets, onehot_targets) -> tuple[float, float]:
        numeric, cats = self.predict(E)
        mse, _ = mse_loss(numeric, numeric_targets)
        ce = sum(ce_loss(p, t)[0] for p, t in zip(cats, onehot_targets))
        return mse, float(ce)

    def loss_and_grad(self, E, numeric_targets, onehot_targets) -> float:
        """Joint loss; gradients are written into ``params.grad``."""
        E = self._check(E)
        tapes = {n: self.nets[n].new_tape() for n in self.nets}
        numeric = np.column_stack([self.nets[n].forward(E, tapes[n])[:, 0] for n in self.numeric_names])
        total, g_num = mse_loss(numeric, numeric_targets)
        for j, name in enumerate(self.numeric_names):
            self.nets[name].backward(tapes[name], g_num[:, j : j + 1])
        for name, target in zip(self.categorical_names, onehot_targets):
            probs = self.nets[name].forward(E, tapes[name])
            loss, g_logits = ce_loss(probs, target)
            total += loss
            self.nets[name].backward(tapes[name], g_logits, wrt_logits=True)
        return float(total)

    def to_dict(self, extra: dict | None = None) -> dict:
        doc = {
            "format": HEADS_FORMAT,
            "schema": self.schema.to_dict(),
            "schema_digest": self.schema.digest(),
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "params": self.params.to_dict(),
        }
        if extra:
            doc.update(extra)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ConceptHeads":
        if doc.get("format") != HEADS_FORMAT:
            raise SchemaMismatch(f"not a concept-heads checkpoint (format={doc.get('format')!r})")
        schema = ConceptSchema.from_dict(doc["schema"])
        return cls(schema, doc["input_dim"], doc["hidden"], ParamSet.from_dict(doc["params"]))

    def save(self, path, extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(extra), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ConceptHeads":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def predict_concepts(heads: ConceptHeads, embedding) -> ConceptPrediction:
    embedding = np.asarray(embedding, dtype=float)
    if embedding.ndim != 1:
        raise DimensionMismatch("predict_concepts takes a single embedding vector")
    numeric, cats = heads.predict(embedding[None, :])
    return ConceptPrediction(
        numeric=dict(zip(heads.schema.ordinal_names, numeric[0, :-1].tolist())),
        categorical={n: c[0] for n, c in zip(heads.categorical_names, cats)},
        malignancy=float(numeric[0, -1]),
    )


def head_targets(dataset: Dataset):
    numeric = np.array([[*r.ordinal_values, r.malignancy_target] for r in dataset.rows]).reshape(
        len(dataset), len(dataset.schema.ordinals) + 1
    )
    onehots = [
        np.array([r.categorical_onehots[m] for r in dataset.rows]).reshape(len(dataset), c.n_classes)
        for m, c in enumerate(dataset.schema.categoricals)
    ]
    return numeric, onehots


def joint_loss(heads: ConceptHeads, dataset: Dataset) -> float:
    numeric, onehots = head_targets(dataset)
    return heads.loss_and_grad(dataset.embedding_matrix(), numeric, onehots)


def train_heads(dataset: Dataset, config: HeadsConfig | None = None):
    """Train all heads jointly with Adam and the plateau schedule.

    Returns ``(heads, history)``; history holds one record per epoch.
    """
    config = (config or HeadsConfig()).validate()
    if not dataset.has_embeddings:
        raise MissingEmbeddings(dataset.ids)
    E = dataset.embedding_matrix()
    numeric, onehots = head_targets(dataset)
    rng = np.random.default_rng(config.seed)
    heads = ConceptHeads(dataset.schema, E.shape[1], config.hidden).init(rng)
    fit, val = validation_tail(rng.permutation(len(dataset)), config.val_fraction)
    state = TrainState.fresh(config.learning_rate, config.plateau_factor, config.patience, config.min_lr)

    def full_loss(idx):
        return sum(heads.loss_terms(E[idx], numeric[idx], [o[idx] for o in onehots]))

    for epoch in range(config.epochs):
        perm = fit[rng.permutation(len(fit))]
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            heads.loss_and_grad(E[idx], numeric[idx], [o[idx] for o in onehots])
            state.step(heads.params)
        train_loss = full_loss(fit)
        val_loss = full_loss(val) if len(val) else train_loss
        state.end_epoch({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss}, val_loss)
        log.debug("heads epoch %d train %.6f val %.6f", epoch + 1, train_loss, val_loss)
    return heads, state.history


def macro_f1(y_true, y_pred) -> float:
    """Macro-averaged F1 over classes present in either labels or predictions."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    classes = np.union1d(y_true, y_pred)
    if classes.size == 0:
        return 0.0
    scores = []
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def eval_heads(heads: ConceptHeads, dataset: Dataset) -> HeadsMetrics:
    numeric, cats = heads.predict(dataset.embedding_matrix())
    targets, onehots = head_targets(dataset)
    mae = {n: float(np.mean(np.abs(numeric[:, j] - targets[:, j]))) for j, n in enumerate(heads.numeric_names)}
    # argmax keeps the lowest index on ties
    f1 = {
        n: macro_f1(np.argmax(t, axis=1), np.argmax(p, axis=1))
        for n, p, t in zip(heads.categorical_names, cats, onehots)
    }
    return HeadsMetrics(mae, f1)


def predicted_vectors(heads: ConceptHeads, dataset: Dataset) -> list[ConceptVector]:
    """Concept vectors built from head outputs; categoricals become argmax one-hots.

    The malignancy target stays the consensus value.
    """
    numeric, cats = heads.predict(dataset.embedding_matrix())
    out = []
    for i, row in enumerate(dataset.rows):
        onehots = tuple(
            c.one_hot_at(int(np.argmax(p[i]))) for c, p in zip(dataset.schema.categoricals, cats)
        )
        out.append(ConceptVector(row.nodule_id, numeric[i, :-1].copy(), onehots, row.malignancy_target, row.n_raters))
    return out


def predicted_features(heads: ConceptHeads, dataset: Dataset) -> np.ndarray:
    rows = predicted_vectors(heads, dataset)
    if not rows:
        return np.zeros((0, dataset.schema.input_dim))
    return np.stack([r.features() for r in rows])
