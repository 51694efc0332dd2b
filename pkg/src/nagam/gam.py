"""Neural additive malignancy model over concept vectors.

Each input concept owns a bank of small subnetworks whose outputs are mixed
by learned weights; the score is the sum of the per-concept mixtures plus a
global bias, so every prediction decomposes exactly into contributions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, EmptyDataset, SchemaMismatch, UnknownConcept
from .gradcore import MicroNet, ParamSet, TrainState
from .ingest import ConceptVector, Dataset, validation_tail
from .schema import ConceptSchema

log = logging.getLogger(__name__)

MODEL_FORMAT = "nagam.additive_model/1"


@dataclass
class GAMConfig:
    epochs: int = 80
    batch_size: int = 16
    learning_rate: float = 1e-4
    subnets: int = 4
    hidden: int = 32
    val_fraction: float = 0.1
    plateau_factor: float = 0.9
    patience: int = 4
    min_lr: float = 0.0
    seed: int = 0

    def validate(self) -> "GAMConfig":
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1 or self.subnets < 1 or self.hidden < 1:
            raise ConfigError("batch_size, subnets and hidden must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        return self


@dataclass
class Explanation:
    nodule_id: str
    predicted_malignancy: float
    contributions: dict[str, float]
    bias: float
    inputs: dict = field(default_factory=dict)
    ground_truth: float | None = None

    def residual(self) -> float:
        return self.predicted_malignancy - self.bias - sum(self.contributions.values())

    def to_dict(self) -> dict:
        out = {
            "nodule_id": self.nodule_id,
            "prediction": self.predicted_malignancy,
            "bias": self.bias,
            "contributions": dict(self.contributions),
            "inputs": self.inputs,
        }
        if self.ground_truth is not None:
            out["ground_truth"] = self.ground_truth
        return out


@dataclass
class ShapeGrid:
    concept: str
    kind: str  # "ordinal" or "categorical"
    points: np.ndarray
    values: np.ndarray
    labels: list[str] | None = None

    def rows(self):
        if self.kind == "ordinal":
            return [(float(p), float(v)) for p, v in zip(self.points, self.values)]
        return [(lab, float(v)) for lab, v in zip(self.labels, self.values)]


@dataclass
class PatternReport:
    ordinal_deltas: dict[str, float]
    categorical_deltas: dict[str, dict[str, float]]
    findings: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


class AdditiveModel:
    """Banks of ``subnets`` scalar-output MLPs per concept, mixed and summed."""

    def __init__(self, schema: ConceptSchema, subnets: int = 4, hidden: int = 32, params=None):
        self.schema = schema
        self.subnets = int(subnets)
        self.hidden = int(hidden)
        self.names = schema.concept_names
        shapes = {}
        for name in self.names:
            shapes.update(MicroNet.param_shapes(self._dims(name), self.subnets, f"{name}."))
        shapes["mix"] = (len(self.names), self.subnets)
        shapes["bias"] = (1,)
        if params is None:
            params = ParamSet(shapes)
        elif params.shapes != shapes:
            raise SchemaMismatch("parameter layout does not match the schema")
        self.params = params
        self.banks = {
            name: MicroNet(self._dims(name), "identity", self.subnets, params, f"{name}.")
            for name in self.names
        }
        self.slices = [schema.feature_slice(n) for n in self.names]
        self.mix = params["mix"]
        self._bias = params["bias"]

    def _dims(self, name):
        width = self.schema.feature_slice(name).stop - self.schema.feature_slice(name).start
        return [width, self.hidden, 1]

    @property
    def bias(self) -> float:
        return float(self._bias[0])

    @property
    def n_params(self) -> int:
        return len(self.params)

    def init(self, rng, base: float = 0.0) -> "AdditiveModel":
        # last layers start at zero so the untrained model is the constant `base`
        for name in self.names:
            bank = self.banks[name]
            bank.init(rng, zero_last=True)
            if self.schema.is_ordinal(name):
                # place each hidden unit's kink at a random point of [0, 1];
                # with zero biases every unit would start linear on the domain
                w = bank.weights[0][:, 0, :]
                bank.biases[0][...] = -w * rng.random(w.shape)
        self.mix[...] = 1.0 / self.subnets
        self._bias[0] = base
        return self

    # -- evaluation --------------------------------------------------------

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.schema.input_dim:
            raise SchemaMismatch(f"expected concept matrix with {self.schema.input_dim} columns, got {X.shape}")
        return X

    def subnet_outputs(self, name: str, inputs, tape=None) -> np.ndarray:
        """Outputs of concept ``name``'s subnetworks, shape ``(subnets, n)``."""
        return self.banks[name].forward(inputs, tape)[..., 0]

    def concept_contribution(self, name: str, inputs) -> np.ndarray:
        if name not in self.banks:
            raise UnknownConcept(f"unknown concept {name!r}")
        k = self.names.index(name)
        return self.mix[k] @ self.subnet_outputs(name, np.atleast_2d(np.asarray(inputs, float)))

    def contributions(self, X) -> np.ndarray:
        """Per-concept contributions, shape ``(n, n_concepts)``."""
        X = self._check(X)
        out = np.empty((X.shape[0], len(self.names)))
        for k, (name, sl) in enumerate(zip(self.names, self.slices)):
            out[:, k] = self.mix[k] @ self.subnet_outputs(name, X[:, sl])
        return out

    def predict(self, X) -> np.ndarray:
        return self.contributions(X).sum(axis=1) + self._bias[0]

    def decompose(self, X) -> tuple[np.ndarray, np.ndarray]:
        contrib = self.contributions(X)
        return contrib.sum(axis=1) + self._bias[0], contrib

    def loss(self, X, y) -> float:
        diff = self.predict(X) - np.asarray(y, dtype=float)
        return float(np.mean(diff * diff))

    def loss_and_grad(self, X, y) -> float:
        """Mean squared error; writes its gradient into ``params.grad``."""
        X = self._check(X)
        y = np.asarray(y, dtype=float)
        n = X.shape[0]
        tapes, outs = [], []
        pred = np.full(n, self._bias[0])
        for k, (name, sl) in enumerate(zip(self.names, self.slices)):
            tape = self.banks[name].new_tape()
            f = self.subnet_outputs(name, X[:, sl], tape)
            pred += self.mix[k] @ f
            tapes.append(tape)
            outs.append(f)
        diff = pred - y
        dpred = (2.0 / n) * diff
        grads = self.params.grads
        grads["bias"][0] = dpred.sum()
        dmix = grads["mix"]
        for k, name in enumerate(self.names):
            dmix[k] = outs[k] @ dpred
            self.banks[name].backward(tapes[k], (self.mix[k][:, None] * dpred)[..., None])
        return float(np.mean(diff * diff))

    # -- explanation -------------------------------------------------------

    def vector_features(self, x: ConceptVector) -> np.ndarray:
        if len(x.ordinal_values) != len(self.schema.ordinals) or len(x.categorical_onehots) != len(
            self.schema.categoricals
        ):
            raise SchemaMismatch(f"{x.nodule_id}: concept vector does not match the model schema")
        for c, oh in zip(self.schema.categoricals, x.categorical_onehots):
            if len(oh) != c.n_classes:
                raise SchemaMismatch(f"{x.nodule_id}: {c.name} has {len(oh)} slots, expected {c.n_classes}")
        return x.features()

    def explain(self, x: ConceptVector, clip: bool = False) -> Explanation:
        feats = self.vector_features(x)
        pred, contrib = self.decompose(feats[None, :])
        inputs = {}
        for c, v in zip(self.schema.ordinals, x.ordinal_values):
            inputs[c.name] = float(v)
        for c, oh in zip(self.schema.categoricals, x.categorical_onehots):
            inputs[c.name] = c.classes[int(np.argmax(oh))]
        value = float(pred[0])
        if clip:
            value = min(max(value, 0.0), 1.0)
        return Explanation(
            nodule_id=x.nodule_id,
            predicted_malignancy=value,
            contributions={n: float(v) for n, v in zip(self.names, contrib[0])},
            bias=self.bias,
            inputs=inputs,
            ground_truth=float(x.malignancy_target),
        )

    # -- persistence -------------------------------------------------------

    def copy(self) -> "AdditiveModel":
        return AdditiveModel(self.schema, self.subnets, self.hidden, self.params.copy())

    def to_dict(self, extra: dict | None = None) -> dict:
        doc = {
            "format": MODEL_FORMAT,
            "schema": self.schema.to_dict(),
            "schema_digest": self.schema.digest(),
            "subnets_per_concept": self.subnets,
            "hidden": self.hidden,
            "params": self.params.to_dict(),
        }
        if extra:
            doc.update(extra)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "AdditiveModel":
        if doc.get("format") != MODEL_FORMAT:
            raise SchemaMismatch(f"not an additive-model checkpoint (format={doc.get('format')!r})")
        schema = ConceptSchema.from_dict(doc["schema"])
        if schema.digest() != doc.get("schema_digest"):
            raise SchemaMismatch("schema digest mismatch; checkpoint is corrupt")
        return cls(schema, doc["subnets_per_concept"], doc["hidden"], ParamSet.from_dict(doc["params"]))

    def save(self, path, extra: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(extra), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "AdditiveModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def gam_predict(model: AdditiveModel, x: ConceptVector) -> Explanation:
    return model.explain(x)


def fit_additive(X, y, schema: ConceptSchema, config: GAMConfig, rng=None):
    """Train an additive model on a concept matrix.

    The last ``val_fraction`` of a shuffled order is held out to drive the
    plateau schedule. Returns ``(model, train_state)``.
    """
    config.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    model = AdditiveModel(schema, config.subnets, config.hidden).init(rng, base=float(y.mean()))
    fit, val = validation_tail(rng.permutation(len(y)), config.val_fraction)
    state = TrainState.fresh(config.learning_rate, config.plateau_factor, config.patience, config.min_lr)
    Xf, yf = X[fit], y[fit]
    Xv, yv = X[val], y[val]
    bs = config.batch_size
    for epoch in range(config.epochs):
        perm = rng.permutation(len(fit))
        for start in range(0, len(perm), bs):
            idx = perm[start : start + bs]
            model.loss_and_grad(Xf[idx], yf[idx])
            state.step(model.params)
        train_loss = model.loss(Xf, yf)
        val_loss = model.loss(Xv, yv) if len(val) else train_loss
        state.end_epoch({"epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss}, val_loss)
        log.debug("gam epoch %d train %.6f val %.6f lr %.3g", epoch + 1, train_loss, val_loss, state.adam.learning_rate)
    return model, state


def train_gam(dataset: Dataset, config: GAMConfig | None = None, features=None):
    """Train on ``dataset``'s concept vectors (or on ``features`` if given).

    Returns ``(model, history)``.
    """
    config = config or GAMConfig()
    if len(dataset) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    X = dataset.features() if features is None else features
    model, state = fit_additive(X, dataset.targets(), dataset.schema, config)
    return model, state.history


def shape_grid(model: AdditiveModel, concept: str, n_points: int = 50, center: bool = False) -> ShapeGrid:
    """Contribution of one concept across its value range.

    Ordinal concepts are sampled at ``n_points`` equally spaced values in
    [0, 1]; categorical concepts at each class's one-hot vector.
    """
    if concept not in model.banks:
        raise UnknownConcept(f"unknown concept {concept!r}")
    if model.schema.is_ordinal(concept):
        if n_points < 2:
            raise ConfigError("an ordinal grid needs at least 2 points")
        points = np.linspace(0.0, 1.0, int(n_points))
        values = model.concept_contribution(concept, points[:, None])
        grid = ShapeGrid(concept, "ordinal", points, values)
    else:
        cdef = model.schema.concept(concept)
        points = np.eye(cdef.n_classes)
        values = model.concept_contribution(concept, points)
        grid = ShapeGrid(concept, "categorical", np.arange(cdef.n_classes), values, list(cdef.classes))
    if center:
        grid.values = grid.values - grid.values.mean()
    return grid


def global_patterns(model: AdditiveModel) -> PatternReport:
    """Signed effect of each concept over its range.

    Ordinal: contribution at 1.0 minus contribution at 0.0. Categorical:
    each class's contribution minus the mean over classes.
    """
    ordinal, categorical, findings = {}, {}, []
    for c in model.schema.ordinals:
        g = shape_grid(model, c.name, 2)
        delta = float(g.values[1] - g.values[0])
        ordinal[c.name] = delta
        direction = "raises" if delta > 0 else "lowers" if delta < 0 else "does not change"
        findings.append(f"{c.name}: moving {c.low_label or 'low'} -> {c.high_label or 'high'} {direction} the score by {delta:+.4f}")
    for c in model.schema.categoricals:
        g = shape_grid(model, c.name)
        deltas = g.values - g.values.mean()
        categorical[c.name] = {lab: float(d) for lab, d in zip(c.classes, deltas)}
        top = c.classes[int(np.argmax(deltas))]
        findings.append(f"{c.name}: largest contribution from '{top}' ({deltas.max():+.4f} vs class mean)")
    return PatternReport(ordinal, categorical, findings)
