"""
Small differentiable classifiers.

Multinomial logistic regression (layer_sizes [F, L]) and ReLU MLPs
([F, h1, ..., L]) with hand-written forward, backward and SGD on numpy arrays.
Weights are stored (out, in) so a layer computes W @ x + b.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Layer widths [F, h1, ..., L] and the initialisation seed"""

    layer_sizes: Tuple[int, ...]
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ConfigError(f"need at least input and output sizes, got {list(self.layer_sizes)}")
        if min(self.layer_sizes) < 1:
            raise ConfigError(f"layer sizes must be positive, got {list(self.layer_sizes)}")

    @property
    def feature_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_labels(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class ModelParams:
    """
    Immutable parameter set. Arithmetic returns new instances.

    Gradients use the same type; shape congruence is checked on every
    binary operation.
    """

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.float64) for b in self.biases))
        if len(self.weights) != len(self.biases):
            raise ShapeError(f"{len(self.weights)} weight matrices but {len(self.biases)} bias vectors")
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {index}: weight {w.shape} incompatible with bias {b.shape}")
            if index and w.shape[1] != self.weights[index - 1].shape[0]:
                previous = self.weights[index - 1].shape[0]
                raise ShapeError(f"layer {index} expects {w.shape[1]} inputs, previous emits {previous}")

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def tensors(self) -> List[np.ndarray]:
        """Weights and biases interleaved layer by layer"""
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_tensors(cls, tensors: Sequence[np.ndarray]) -> "ModelParams":
        return cls(tuple(tensors[0::2]), tuple(tensors[1::2]))

    def _check_congruent(self, other: "ModelParams"):
        if self.layer_sizes != other.layer_sizes:
            raise ShapeError(f"shape mismatch: {self.layer_sizes} vs {other.layer_sizes}")

    def __add__(self, other: "ModelParams") -> "ModelParams":
        self._check_congruent(other)
        return ModelParams.from_tensors([a + b for a, b in zip(self.tensors(), other.tensors())])

    def __sub__(self, other: "ModelParams") -> "ModelParams":
        self._check_congruent(other)
        return ModelParams.from_tensors([a - b for a, b in zip(self.tensors(), other.tensors())])

    def scale(self, factor: float) -> "ModelParams":
        return ModelParams.from_tensors([factor * t for t in self.tensors()])

    def is_finite(self) -> bool:
        return all(bool(np.isfinite(t).all()) for t in self.tensors())

    def max_abs_diff(self, other: "ModelParams") -> float:
        self._check_congruent(other)
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.tensors(), other.tensors()))

    def predict_batch(self, features: np.ndarray) -> np.ndarray:
        """Argmax labels for each row of `features`, ties to the smallest index"""
        return np.argmax(forward_batch(self, features), axis=1)


Gradient = ModelParams


def zeros_like(params: ModelParams) -> ModelParams:
    return ModelParams.from_tensors([np.zeros_like(t) for t in params.tensors()])


def init_params(config: ModelConfig) -> ModelParams:
    """Glorot-uniform weights in [-s, s] with s = sqrt(6/(fan_in+fan_out)), zero biases"""
    rng = np.random.default_rng(config.init_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(config.layer_sizes[:-1], config.layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelParams(tuple(weights), tuple(biases))


def _as_batch(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ShapeError(f"expected inputs of width {params.layer_sizes[0]}, got shape {x.shape}")
    return x


def _activations(params: ModelParams, x: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Layer inputs and pre-activations; the last pre-activation is the logits"""
    inputs, pre = [], []
    a = x
    last = len(params.weights) - 1
    for index, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        a = z if index == last else np.maximum(z, 0.0)
    return inputs, pre


def forward_batch(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Logits of shape (count, L)"""
    _, pre = _activations(params, _as_batch(params, features))
    return pre[-1]


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Logits for a single feature vector"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a feature vector, got shape {x.shape}")
    return forward_batch(params, x[np.newaxis, :])[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_and_grad(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> Tuple[float, Gradient]:
    """
    Mean softmax cross-entropy over the batch and its exact gradient.

    Raises:
        ShapeError: empty batch, width mismatch or a label outside the output layer
        NumericError: a non-finite loss or gradient
    """
    x = _as_batch(params, features)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0 or y.shape != (x.shape[0],):
        raise ShapeError(f"batch needs matching non-empty features and labels, got {x.shape} and {y.shape}")
    num_labels = params.layer_sizes[-1]
    if y.min() < 0 or y.max() >= num_labels:
        raise ShapeError(f"labels must lie in [0, {num_labels}), got {y.min()}..{y.max()}")

    inputs, pre = _activations(params, x)
    logp = log_softmax(pre[-1])
    count = x.shape[0]
    loss = -float(logp[np.arange(count), y].mean())

    delta = np.exp(logp)
    delta[np.arange(count), y] -= 1.0
    delta /= count

    grad_w: List[np.ndarray] = [np.empty(0)] * len(params.weights)
    grad_b: List[np.ndarray] = [np.empty(0)] * len(params.weights)
    for index in range(len(params.weights) - 1, -1, -1):
        grad_w[index] = delta.T @ inputs[index]
        grad_b[index] = delta.sum(axis=0)
        if index:
            delta = (delta @ params.weights[index]) * (pre[index - 1] > 0)

    grad = ModelParams(tuple(grad_w), tuple(grad_b))
    if not np.isfinite(loss) or not grad.is_finite():
        raise NumericError("non-finite loss or gradient")
    return loss, grad


def sgd_step(params: ModelParams, grad: Gradient, eta: float) -> ModelParams:
    """params - eta * grad"""
    return params - grad.scale(eta)


def predict(params: ModelParams, x: np.ndarray) -> int:
    return int(np.argmax(forward(params, x)))


def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> Path:
    """Write `layers=...` then one blank-line separated block per tensor"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = ["layers=" + ",".join(str(s) for s in params.layer_sizes)]
    for tensor in params.tensors():
        rows = np.atleast_2d(tensor)
        blocks.append("\n".join(" ".join(repr(float(v)) for v in row) for row in rows))
    path.write_text("\n\n".join(blocks) + "\n")
    return path


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    path = Path(path)
    blocks = path.read_text().strip().split("\n\n")
    header = blocks[0]
    if not header.startswith("layers="):
        raise FormatError(f"checkpoint {path} lacks a layers= header")
    sizes = [int(s) for s in header[len("layers="):].split(",")]
    if len(blocks) != 1 + 2 * (len(sizes) - 1):
        raise FormatError(f"checkpoint {path} has {len(blocks) - 1} tensors for layers {sizes}")

    tensors = []
    for index, block in enumerate(blocks[1:]):
        values = np.array([[float(v) for v in line.split()] for line in block.splitlines()])
        fan_in, fan_out = sizes[index // 2], sizes[index // 2 + 1]
        if index % 2 == 0:
            if values.shape != (fan_out, fan_in):
                raise FormatError(f"weight block {index // 2} has shape {values.shape}")
            tensors.append(values)
        else:
            tensors.append(values.reshape(-1))
    return ModelParams.from_tensors(tensors)
