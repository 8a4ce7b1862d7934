"""
Feed-forward network engine: parameter containers, forward/backward passes,
MSE loss, AdaGrad updates, input dropout, gradient checking and model JSON.

All arithmetic is float64. Activations are always kept as 2-D batches
(rows = samples) so the same code path serves single vectors and mini-batches.
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from behavior_dnn.core.errors import ConfigurationError, InputError, InternalError

MODEL_FORMAT = "behavior-dnn/model-1"
_SIGMOID_FLOOR = np.finfo(np.float64).eps


class Activation(Enum):
    """Unit non-linearities; derivatives are expressed through the unit output."""
    TANH = "tanh"
    SIGMOID = "sigmoid"
    LINEAR = "linear"

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.TANH:
            return np.tanh(z)
        if self is Activation.SIGMOID:
            # keeps scorer output strictly inside (0, 1)
            return np.clip(expit(z), _SIGMOID_FLOOR, 1.0 - _SIGMOID_FLOOR)
        return z

    def derivative(self, a: np.ndarray) -> np.ndarray:
        if self is Activation.TANH:
            return 1.0 - a * a
        if self is Activation.SIGMOID:
            return a * (1.0 - a)
        return np.ones_like(a)


@dataclass(frozen=True)
class LayerShape:
    input_dim: int
    output_dim: int
    activation: Activation = Activation.TANH

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError(
                f"Layer dimensions must be >= 1, got {self.input_dim}->{self.output_dim}")


@dataclass
class Layer:
    """One affine layer. ``mask`` marks which connections exist; absent ones stay exactly zero."""
    weights: np.ndarray
    biases: np.ndarray
    shape: LayerShape
    trainable: bool = True
    mask: Optional[np.ndarray] = None

    def copy(self) -> "Layer":
        return Layer(
            weights=self.weights.copy(),
            biases=self.biases.copy(),
            shape=self.shape,
            trainable=self.trainable,
            mask=None if self.mask is None else self.mask.copy(),
        )

    def parameter_count(self) -> int:
        connections = self.weights.size if self.mask is None else int(self.mask.sum())
        return connections + self.biases.size


@dataclass
class NetworkParams:
    """
    Ordered layers plus the feature-index assignment the network reads from a frame.

    ``feature_indices`` selects the frame columns fed to the first layer (None = all);
    ``groups`` records the named feature groups a composite was built from;
    ``info`` carries free-form metadata (regime, behavior code, trained flag).
    """
    layers: List[Layer]
    feature_indices: Optional[np.ndarray] = None
    groups: List[Tuple[str, Tuple[int, ...]]] = field(default_factory=list)
    info: Dict[str, Any] = field(default_factory=dict)

    @property
    def shapes(self) -> List[LayerShape]:
        return [layer.shape for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape.input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].shape.output_dim

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            layers=[layer.copy() for layer in self.layers],
            feature_indices=None if self.feature_indices is None else self.feature_indices.copy(),
            groups=list(self.groups),
            info=dict(self.info),
        )

    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.layers)

    def trainable_parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.layers if layer.trainable)

    def trainable_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.trainable]

    def select_inputs(self, frames: np.ndarray) -> np.ndarray:
        """Pick this network's feature slice out of full frame vectors."""
        frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
        if self.feature_indices is None:
            return frames
        return frames[:, self.feature_indices]


class LayerGradient(NamedTuple):
    weights: np.ndarray
    biases: np.ndarray


Gradients = Dict[int, LayerGradient]


@dataclass
class OptimizerState:
    """AdaGrad accumulators keyed by trainable layer index."""
    learning_rate: float = 0.05
    epsilon: float = 1e-8
    accumulators: Gradients = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")

    @classmethod
    def for_params(cls, params: NetworkParams, learning_rate: float = 0.05,
                   epsilon: float = 1e-8) -> "OptimizerState":
        accumulators = {
            i: LayerGradient(np.zeros_like(params.layers[i].weights), np.zeros_like(params.layers[i].biases))
            for i in params.trainable_indices()
        }
        return cls(learning_rate=learning_rate, epsilon=epsilon, accumulators=accumulators)


@dataclass(frozen=True)
class DropoutSpec:
    """Inverted dropout on the input layer; rate 0 is the identity."""
    rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigurationError(f"Dropout rate must lie in [0, 1), got {self.rate}")


def check_chain(shapes: Sequence[LayerShape]):
    if not shapes:
        raise ConfigurationError("A network needs at least one layer")
    for i in range(len(shapes) - 1):
        if shapes[i].output_dim != shapes[i + 1].input_dim:
            raise ConfigurationError(
                f"Layer {i} outputs {shapes[i].output_dim} but layer {i + 1} expects {shapes[i + 1].input_dim}")


def init_params(shapes: Sequence[LayerShape], seed: int) -> NetworkParams:
    """
    Draw a fresh network.

    Weights are uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)); biases are zero;
    every layer is trainable.

    Raises:
        ConfigurationError: if consecutive shapes do not chain
    """
    check_chain(shapes)
    rng = np.random.default_rng(seed)
    layers = []
    for shape in shapes:
        bound = np.sqrt(6.0 / (shape.input_dim + shape.output_dim))
        weights = rng.uniform(-bound, bound, size=(shape.output_dim, shape.input_dim))
        layers.append(Layer(weights=weights, biases=np.zeros(shape.output_dim), shape=shape))
    return NetworkParams(layers=layers)


def forward(params: NetworkParams, inputs) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Evaluate activation(W.x + b) layer by layer.

    Args:
        params: network to evaluate
        inputs: one vector of length input_dim, or a batch of shape (n, input_dim)

    Returns:
        (activations, output): activations[0] is the 2-D input batch and activations[i + 1]
        the output of layer i; output has the same rank as ``inputs``.

    Raises:
        InputError: if the input width does not match the first layer
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    if batch.ndim != 2 or batch.shape[1] != params.input_dim:
        raise InputError(f"Expected inputs of width {params.input_dim}, got shape {x.shape}")

    activations = [batch]
    for layer in params.layers:
        z = activations[-1] @ layer.weights.T + layer.biases
        activations.append(layer.shape.activation.apply(z))
    output = activations[-1][0] if single else activations[-1]
    return activations, output


def predict(params: NetworkParams, frames) -> np.ndarray:
    """Scalar scores for a batch of full frame vectors."""
    _, output = forward(params, params.select_inputs(frames))
    return output.reshape(len(output), -1)[:, 0]


def mse_loss(prediction, target) -> float:
    prediction = np.asarray(prediction, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if prediction.size != target.size:
        raise InputError(f"Prediction has {prediction.size} values but target has {target.size}")
    if prediction.size == 0:
        raise InputError("Cannot compute a loss over zero values")
    return float(np.mean((prediction - target) ** 2))


def backward(params: NetworkParams, activations: List[np.ndarray], target) -> Gradients:
    """
    Backpropagate the mean-square error through the trainable layers.

    Frozen layers receive no entry; propagation stops below the lowest trainable layer.

    Raises:
        InternalError: if ``activations`` were not produced by ``forward`` on these params
    """
    if len(activations) != len(params.layers) + 1:
        raise InternalError(
            f"Got {len(activations)} activation arrays for a {len(params.layers)}-layer network")
    n = activations[0].shape[0]
    for i, layer in enumerate(params.layers):
        if activations[i].shape != (n, layer.shape.input_dim) or \
                activations[i + 1].shape != (n, layer.shape.output_dim):
            raise InternalError(f"Stale activations at layer {i}")

    trainable = params.trainable_indices()
    if not trainable:
        return {}

    output = activations[-1]
    target = np.asarray(target, dtype=np.float64)
    if target.size != output.size:
        raise InputError(f"Target has {target.size} values but the network produced {output.size}")
    grad_a = 2.0 * (output - target.reshape(output.shape)) / output.size

    gradients: Gradients = {}
    lowest = trainable[0]
    for i in range(len(params.layers) - 1, lowest - 1, -1):
        layer = params.layers[i]
        delta = grad_a * layer.shape.activation.derivative(activations[i + 1])
        if layer.trainable:
            grad_w = delta.T @ activations[i]
            if layer.mask is not None:
                grad_w = grad_w * layer.mask
            gradients[i] = LayerGradient(grad_w, delta.sum(axis=0))
        if i > lowest:
            grad_a = delta @ layer.weights
    return gradients


def adagrad_step(params: NetworkParams, gradients: Gradients,
                 state: OptimizerState) -> Tuple[NetworkParams, OptimizerState]:
    """
    One AdaGrad update, in place on the caller's private copy.

    accumulator += g^2; parameter -= learning_rate * g / (sqrt(accumulator) + epsilon).

    Raises:
        InternalError: if gradients do not line up with the trainable layers
    """
    expected = params.trainable_indices()
    if sorted(gradients) != expected:
        raise InternalError(f"Gradients cover layers {sorted(gradients)}, trainable layers are {expected}")
    for i in expected:
        layer = params.layers[i]
        grad = gradients[i]
        if grad.weights.shape != layer.weights.shape or grad.biases.shape != layer.biases.shape:
            raise InternalError(f"Gradient shape mismatch at layer {i}")
        if i not in state.accumulators:
            state.accumulators[i] = LayerGradient(np.zeros_like(layer.weights), np.zeros_like(layer.biases))
        accumulator = state.accumulators[i]
        for value, g, acc in ((layer.weights, grad.weights, accumulator.weights),
                              (layer.biases, grad.biases, accumulator.biases)):
            acc += g * g
            denominator = np.sqrt(acc) + state.epsilon
            step = np.divide(g, denominator, out=np.zeros_like(g), where=denominator > 0)
            value -= state.learning_rate * step
    return params, state


def apply_input_dropout(inputs, dropout: DropoutSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero each component with probability ``dropout.rate``; scale survivors by 1 / (1 - rate)."""
    x = np.array(inputs, dtype=np.float64)
    if dropout.rate == 0.0:
        return x
    keep = rng.random(x.shape) >= dropout.rate
    return np.where(keep, x / (1.0 - dropout.rate), 0.0)


def grad_check(params: NetworkParams, inputs, target, fd_step: float = 1e-5,
               floor: float = 1e-8) -> float:
    """
    Largest relative disagreement between backprop and central differences.

    relative error = |analytic - numeric| / max(|analytic|, |numeric|, floor).
    A network with nothing trainable is a vacuous pass (0.0).
    """
    activations, _ = forward(params, inputs)
    analytic = backward(params, activations, target)
    if not analytic:
        return 0.0

    perturbed = params.copy()

    def loss_at() -> float:
        return mse_loss(forward(perturbed, inputs)[1], target)

    worst = 0.0
    for i, grad in analytic.items():
        layer = perturbed.layers[i]
        for values, grads, mask in ((layer.weights, grad.weights, layer.mask),
                                    (layer.biases, grad.biases, None)):
            for index in np.ndindex(values.shape):
                if mask is not None and not mask[index]:
                    continue
                original = values[index]
                values[index] = original + fd_step
                loss_plus = loss_at()
                values[index] = original - fd_step
                loss_minus = loss_at()
                values[index] = original
                numeric = (loss_plus - loss_minus) / (2.0 * fd_step)
                a = grads[index]
                error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, error)
    return worst


def params_to_dict(params: NetworkParams) -> Dict[str, Any]:
    layers = []
    for layer in params.layers:
        entry = {
            "input_dim": layer.shape.input_dim,
            "output_dim": layer.shape.output_dim,
            "activation": layer.shape.activation.value,
            "trainable": layer.trainable,
            "weights": layer.weights.tolist(),
            "biases": layer.biases.tolist(),
        }
        if layer.mask is not None:
            entry["mask"] = layer.mask.astype(int).tolist()
        layers.append(entry)
    return {
        "format": MODEL_FORMAT,
        "layers": layers,
        "feature_indices": None if params.feature_indices is None else params.feature_indices.tolist(),
        "groups": [{"name": name, "indices": list(indices)} for name, indices in params.groups],
        "info": params.info,
    }


def params_from_dict(document: Dict[str, Any]) -> NetworkParams:
    if document.get("format") != MODEL_FORMAT:
        raise InputError(f"Unsupported model format {document.get('format')!r}; expected {MODEL_FORMAT}")
    try:
        layers = []
        for entry in document["layers"]:
            shape = LayerShape(entry["input_dim"], entry["output_dim"], Activation(entry["activation"]))
            weights = np.array(entry["weights"], dtype=np.float64).reshape(shape.output_dim, shape.input_dim)
            biases = np.array(entry["biases"], dtype=np.float64).reshape(shape.output_dim)
            mask = None if "mask" not in entry else np.array(entry["mask"], dtype=bool).reshape(weights.shape)
            layers.append(Layer(weights, biases, shape, bool(entry["trainable"]), mask))
        check_chain([layer.shape for layer in layers])
        indices = document.get("feature_indices")
        return NetworkParams(
            layers=layers,
            feature_indices=None if indices is None else np.array(indices, dtype=np.int64),
            groups=[(g["name"], tuple(g["indices"])) for g in document.get("groups", [])],
            info=dict(document.get("info", {})),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise InputError(f"Malformed model document: {e}") from e


def save_params(params: NetworkParams, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(params_to_dict(params), f, indent=1, sort_keys=True)
        f.write("\n")


def load_params(path) -> NetworkParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"❌ Model file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as e:
            raise InputError(f"Model file {path} is not valid JSON: {e}") from e
    return params_from_dict(document)
