"""Small fully-connected networks with hand-written reverse mode.

Networks are plain ReLU MLPs. A ``MicroNet`` may be *stacked*: ``n_stack``
independent copies of one topology evaluated on the same input in a single
batched matmul, which is how the additive model runs a bank of subnetworks.

All parameters of a model live in one contiguous float64 buffer
(``ParamSet``) so the optimizer touches a single array per step.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatch, LengthMismatch, ShapeMismatch, StaleTape

ACTIVATIONS = ("identity", "sigmoid", "softmax")
# sigmoid outputs are kept strictly inside (0, 1)
SIGMOID_EPS = 2.0**-53
CE_CLIP = 1e-12


class ParamSet:
    """Named arrays that are views into one flat parameter buffer.

    ``grad`` is a second buffer of the same layout; ``grads[name]`` views it.
    """

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.shapes = {name: tuple(int(d) for d in shape) for name, shape in shapes.items()}
        total = sum(math.prod(s) for s in self.shapes.values())
        self.data = np.zeros(total)
        self.grad = np.zeros(total)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.shapes.items():
            size = math.prod(shape)
            self.values[name] = self.data[offset : offset + size].reshape(shape)
            self.grads[name] = self.grad[offset : offset + size].reshape(shape)
            offset += size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __len__(self) -> int:
        return self.data.size

    @property
    def names(self) -> list[str]:
        return list(self.shapes)

    def zero_grad(self) -> None:
        self.grad[:] = 0.0

    def copy(self) -> "ParamSet":
        other = ParamSet(self.shapes)
        other.data[:] = self.data
        other.grad[:] = self.grad
        return other

    def to_dict(self) -> dict:
        return {
            name: {"shape": list(shape), "values": self.values[name].ravel().tolist()}
            for name, shape in self.shapes.items()
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParamSet":
        params = cls({name: tuple(entry["shape"]) for name, entry in data.items()})
        for name, entry in data.items():
            values = np.asarray(entry["values"], dtype=float)
            if values.size != params.values[name].size:
                raise ShapeMismatch(f"parameter {name}: {values.size} values for shape {entry['shape']}")
            params.values[name][...] = values.reshape(params.shapes[name])
        return params


@dataclass
class GradTape:
    """Forward cache plus gradient views for one network."""

    grads: list[np.ndarray]
    inputs: list[np.ndarray] | None = None
    output: np.ndarray | None = None
    single: bool = False
    input_grad: np.ndarray | None = None


def relu(z):
    return np.maximum(z, 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    y = 0.5 * (1.0 + np.tanh(0.5 * z))
    return np.clip(y, SIGMOID_EPS, 1.0 - SIGMOID_EPS)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class MicroNet:
    """ReLU MLP with an identity, sigmoid or softmax output.

    Args:
        layer_dims: widths from input to output, e.g. ``[16, 64, 32, 1]``.
        output_activation: one of ``identity``, ``sigmoid``, ``softmax``.
        n_stack: if set, hold that many independent copies of the network.
            Weights gain a leading stack axis and outputs have shape
            ``(n_stack, batch, d_out)``.
        params: an existing ``ParamSet`` to bind into; a private one is
            allocated when omitted.
        prefix: name prefix of this network's entries in ``params``.
        rng: if given, initialize weights; otherwise parameters stay zero.
    """

    def __init__(
        self,
        layer_dims,
        output_activation="identity",
        n_stack=None,
        params=None,
        prefix="",
        rng=None,
    ):
        self.layer_dims = [int(d) for d in layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ConfigError(f"invalid layer dims {layer_dims}")
        if output_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown output activation {output_activation!r}")
        self.output_activation = output_activation
        self.n_stack = None if n_stack is None else int(n_stack)
        self.prefix = prefix
        shapes = self.param_shapes(self.layer_dims, self.n_stack, prefix)
        if params is None:
            params = ParamSet(shapes)
        else:
            for name, shape in shapes.items():
                if params.shapes.get(name) != shape:
                    raise ShapeMismatch(f"parameter {name} missing or mis-shaped in ParamSet")
        self.params = params
        self.weights = [params.values[f"{prefix}W{i}"] for i in range(self.n_layers)]
        self.biases = [params.values[f"{prefix}b{i}"] for i in range(self.n_layers)]
        self.weight_grads = [params.grads[f"{prefix}W{i}"] for i in range(self.n_layers)]
        self.bias_grads = [params.grads[f"{prefix}b{i}"] for i in range(self.n_layers)]
        if rng is not None:
            self.init(rng)

    @staticmethod
    def param_shapes(layer_dims, n_stack=None, prefix="") -> dict[str, tuple[int, ...]]:
        lead = () if n_stack is None else (int(n_stack),)
        shapes = {}
        for i, (d_in, d_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            shapes[f"{prefix}W{i}"] = lead + (int(d_in), int(d_out))
            shapes[f"{prefix}b{i}"] = lead + (int(d_out),)
        return shapes

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_params(self) -> int:
        per_copy = sum(a * b + b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))
        return per_copy * (self.n_stack or 1)

    @property
    def stacked(self) -> bool:
        return self.n_stack is not None

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def gradients(self) -> list[np.ndarray]:
        return [g for pair in zip(self.weight_grads, self.bias_grads) for g in pair]

    def init(self, rng, zero_last=False) -> None:
        """He-uniform weights (std sqrt(2/fan_in)), zero biases."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if zero_last and i == self.n_layers - 1:
                w[...] = 0.0
            else:
                limit = math.sqrt(6.0 / self.layer_dims[i])
                w[...] = rng.uniform(-limit, limit, size=w.shape)
            b[...] = 0.0

    def new_tape(self) -> GradTape:
        return GradTape(grads=self.gradients())

    def _bias(self, i):
        b = self.biases[i]
        return b[:, None, :] if self.stacked else b

    def forward(self, x, tape: GradTape | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise DimensionMismatch(
                f"expected input width {self.layer_dims[0]}, got shape {x.shape if not single else x.shape[1:]}"
            )
        inputs = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.weights[i] + self._bias(i)
            if i < self.n_layers - 1:
                h = relu(z)
                inputs.append(h)
        if self.output_activation == "sigmoid":
            out = sigmoid(z)
        elif self.output_activation == "softmax":
            out = softmax(z)
        else:
            out = z
        if tape is not None:
            tape.inputs = inputs
            tape.output = out
            tape.single = single
        if single:
            out = out[..., 0, :]
        return out

    __call__ = forward

    def backward(self, tape: GradTape, output_grad, wrt_logits=False) -> GradTape:
        """Fill ``tape.grads`` for the loss whose output gradient is given.

        For sigmoid/softmax nets, ``wrt_logits=True`` means ``output_grad`` is
        already the gradient with respect to the pre-activation (as returned
        by :func:`ce_loss`). Gradient buffers are overwritten, not summed.
        """
        if tape.inputs is None:
            raise StaleTape("backward called before forward on this tape")
        g = np.asarray(output_grad, dtype=float)
        if tape.single:
            g = np.expand_dims(g, -2)
        if g.shape != tape.output.shape:
            raise ShapeMismatch(f"output gradient shape {g.shape} != output shape {tape.output.shape}")
        y = tape.output
        if wrt_logits or self.output_activation == "identity":
            gz = g
        elif self.output_activation == "sigmoid":
            gz = g * y * (1.0 - y)
        else:
            gz = y * (g - (g * y).sum(axis=-1, keepdims=True))
        grads = tape.grads
        for i in reversed(range(self.n_layers)):
            h = tape.inputs[i]
            grads[2 * i][...] = np.swapaxes(h, -1, -2) @ gz
            grads[2 * i + 1][...] = gz.sum(axis=-2)
            gh = gz @ np.swapaxes(self.weights[i], -1, -2)
            if i > 0:
                gz = gh * (h > 0)
            else:
                if self.stacked:
                    gh = gh.sum(axis=0)
                tape.input_grad = gh[0] if tape.single else gh
        return tape

    def copy(self) -> "MicroNet":
        shapes = self.param_shapes(self.layer_dims, self.n_stack, self.prefix)
        params = ParamSet(shapes)
        for name in shapes:
            params.values[name][...] = self.params.values[name]
        return MicroNet(self.layer_dims, self.output_activation, self.n_stack, params, self.prefix)

    def to_dict(self) -> dict:
        return {
            "layer_dims": self.layer_dims,
            "output_activation": self.output_activation,
            "n_stack": self.n_stack,
            "prefix": self.prefix,
            "params": {
                name: {"shape": list(self.params.shapes[name]), "values": self.params.values[name].ravel().tolist()}
                for name in self.param_shapes(self.layer_dims, self.n_stack, self.prefix)
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MicroNet":
        params = ParamSet.from_dict(data["params"])
        return cls(
            data["layer_dims"], data["output_activation"], data.get("n_stack"), params, data.get("prefix", "")
        )


def forward(net: MicroNet, x, tape: GradTape | None = None) -> np.ndarray:
    return net.forward(x, tape)


def backward(net: MicroNet, tape: GradTape, output_grad, wrt_logits=False) -> GradTape:
    return net.backward(tape, output_grad, wrt_logits)


# -- losses -----------------------------------------------------------------


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient wrt ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise LengthMismatch(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise LengthMismatch("mse_loss needs at least one element")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def ce_loss(probs, target) -> tuple[float, np.ndarray]:
    """Categorical cross-entropy and its gradient wrt the softmax logits.

    Accepts one distribution ``(C,)`` or a batch ``(B, C)``; a batch is
    averaged over rows.
    """
    probs = np.asarray(probs, dtype=float)
    target = np.asarray(target, dtype=float)
    if probs.shape != target.shape:
        raise LengthMismatch(f"probs shape {probs.shape} != target shape {target.shape}")
    if probs.size == 0:
        raise LengthMismatch("ce_loss needs at least one class")
    rows = 1 if probs.ndim == 1 else probs.shape[0]
    logp = np.log(np.clip(probs, CE_CLIP, 1.0))
    loss = -float(np.sum(target * logp)) / rows
    return loss, (probs - target) / rows


# -- optimization -----------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moments: list[np.ndarray] | None = None
    second_moments: list[np.ndarray] | None = None

    def clone(self) -> "AdamState":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "step_count": self.step_count,
            "first_moments": None
            if self.first_moments is None
            else [m.ravel().tolist() for m in self.first_moments],
            "second_moments": None
            if self.second_moments is None
            else [v.ravel().tolist() for v in self.second_moments],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AdamState":
        state = cls(
            learning_rate=data["learning_rate"],
            beta1=data["beta1"],
            beta2=data["beta2"],
            epsilon=data["epsilon"],
            step_count=data["step_count"],
        )
        if data.get("first_moments") is not None:
            state.first_moments = [np.asarray(m, dtype=float) for m in data["first_moments"]]
            state.second_moments = [np.asarray(v, dtype=float) for v in data["second_moments"]]
        return state


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` are equal-length lists of arrays (typically the
    single flat buffer of a ``ParamSet``). Returns ``(params, state)``.
    """
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeMismatch("params and grads must have matching shapes")
    if state.first_moments is None:
        state.first_moments = [np.zeros_like(p) for p in params]
        state.second_moments = [np.zeros_like(p) for p in params]
    elif any(m.shape != p.shape for m, p in zip(state.first_moments, params)):
        raise ShapeMismatch("optimizer moments do not match parameter shapes")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has
    failed to improve for more than ``patience`` consecutive epochs."""

    learning_rate: float = 1e-4
    factor: float = 0.9
    patience: int = 4
    min_lr: float = 0.0
    best_loss: float = math.inf
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError("plateau factor must lie in (0, 1)")
        if self.patience < 0:
            raise ConfigError("patience must be non-negative")

    def observe(self, val_loss: float) -> float:
        if val_loss < self.best_loss:
            self.best_loss = float(val_loss)
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement > self.patience:
                self.learning_rate = max(self.learning_rate * self.factor, self.min_lr)
                self.epochs_since_improvement = 0
        return self.learning_rate

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "factor": self.factor,
            "patience": self.patience,
            "min_lr": self.min_lr,
            "best_loss": None if math.isinf(self.best_loss) else self.best_loss,
            "epochs_since_improvement": self.epochs_since_improvement,
        }


def scheduler_observe(scheduler: PlateauScheduler, val_loss: float) -> float:
    return scheduler.observe(val_loss)


@dataclass
class TrainState:
    """Optimizer plus schedule for one model's flat parameter buffer."""

    adam: AdamState
    scheduler: PlateauScheduler
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, learning_rate: float, factor=0.9, patience=4, min_lr=0.0) -> "TrainState":
        return cls(
            AdamState(learning_rate=learning_rate),
            PlateauScheduler(learning_rate=learning_rate, factor=factor, patience=patience, min_lr=min_lr),
        )

    def step(self, params: ParamSet) -> None:
        adam_step([params.data], [params.grad], self.adam)

    def end_epoch(self, record: dict, monitored: float) -> None:
        self.adam.learning_rate = self.scheduler.observe(monitored)
        record["lr"] = self.adam.learning_rate
        self.history.append(record)
