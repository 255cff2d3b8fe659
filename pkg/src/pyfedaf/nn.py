"""
A minimal feed-forward network engine with explicit backpropagation.

Every other module works on the flat parameter vector defined here, so the model
family is deliberately small: an MLP with rectifier hidden layers and a softmax
output, trained with plain stochastic gradient descent. All arithmetic is in 64-bit
floats, and every operation is a pure function of its inputs; :class:`ParamVector`
and :class:`Batch` hold read-only arrays.

The layout of a :class:`ParamVector` is, for each layer in order, the weight matrix
of shape ``(fan_in, fan_out)`` flattened row-major, followed by its bias.

Examples
--------
>>> spec = ModelSpec((784, 128, 10))
>>> params = xavier_init(spec, seed=1)
>>> probs = forward(params, spec, features)  # doctest: +SKIP
"""

from __future__ import annotations

import attr
import logging
import math
import numpy as np
from scipy.special import log_softmax, softmax
from typing import Sequence

from ._utils import DivergenceError, EmptyBatchError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

_LABEL_SUM_TOL = 1e-9


def _readonly_vector(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


def _readonly_matrix(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    arr.setflags(write=False)
    return arr


def _int_tuple(values) -> tuple[int, ...]:
    out = []
    for v in values:
        if int(v) != v:
            raise ValueError(f"layer dimensions must be integers, got {v!r}")
        out.append(int(v))
    return tuple(out)


@attr.define(frozen=True)
class LayerShape:
    """Shape record of one affine layer inside a :class:`ParamVector`."""

    rows: int
    cols: int
    bias: int

    @property
    def size(self) -> int:
        """Number of scalars stored for this layer."""
        return self.rows * self.cols + self.bias


@attr.define(frozen=True)
class ModelSpec:
    """
    The architecture of an MLP classifier.

    Parameters
    ----------
    layer_dims : tuple of int
        Input dimension, hidden widths, and finally the class count.
    activation : str
        The hidden nonlinearity. Only ``"relu"`` is supported.
    """

    layer_dims: tuple[int, ...] = attr.field(converter=_int_tuple)
    activation: str = attr.field(
        default="relu", validator=attr.validators.in_(("relu",))
    )

    @layer_dims.validator
    def _layer_dims_vld(self, attribute, value):
        if len(value) < 2:
            raise ValueError("layer_dims needs at least an input and an output size")
        if any(d < 1 for d in value):
            raise ValueError(f"all layer dims must be >= 1, got {value}")

    @property
    def input_dim(self) -> int:
        """Width of the feature vectors."""
        return self.layer_dims[0]

    @property
    def class_count(self) -> int:
        """Number of output classes."""
        return self.layer_dims[-1]

    @property
    def layer_shapes(self) -> tuple[LayerShape, ...]:
        """The per-layer shape records, in forward order."""
        return tuple(
            LayerShape(rows=a, cols=b, bias=b)
            for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:])
        )

    @property
    def n_params(self) -> int:
        """Total number of scalar parameters."""
        return sum(s.size for s in self.layer_shapes)


@attr.define(frozen=True, eq=False)
class ParamVector:
    """
    Flat, immutable model parameters with per-layer shape metadata.

    Parameters
    ----------
    values : array-like
        The flat parameter values; copied into a read-only float64 array.
    shapes : tuple of :class:`LayerShape`
        The layout of ``values``.
    """

    values: np.ndarray = attr.field(converter=_readonly_vector)
    shapes: tuple[LayerShape, ...] = attr.field(converter=tuple)

    def __attrs_post_init__(self):
        expected = sum(s.size for s in self.shapes)
        if expected != self.values.size:
            raise ShapeError(
                f"ParamVector has {self.values.size} values but its shapes "
                f"describe {expected}."
            )
        if not np.all(np.isfinite(self.values)):
            raise DivergenceError("Parameter vector contains non-finite values.")

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        """Bitwise equality of values and identical layout."""
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.shapes == other.shapes and np.array_equal(
            self.values, other.values
        )

    __hash__ = None

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only ``(weight, bias)`` views for each layer."""
        out = []
        start = 0
        for shape in self.shapes:
            w_end = start + shape.rows * shape.cols
            weight = self.values[start:w_end].reshape(shape.rows, shape.cols)
            bias = self.values[w_end : w_end + shape.bias]
            out.append((weight, bias))
            start = w_end + shape.bias
        return out

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[np.ndarray, np.ndarray]]):
        """Build a vector from ``(weight, bias)`` pairs."""
        shapes = []
        parts = []
        for weight, bias in layers:
            weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
            bias = np.asarray(bias, dtype=np.float64).reshape(-1)
            shapes.append(LayerShape(*weight.shape, bias=bias.size))
            parts.extend([weight.ravel(), bias])
        return cls(np.concatenate(parts), tuple(shapes))

    @classmethod
    def zeros(cls, spec: ModelSpec) -> ParamVector:
        """All-zero parameters for a model spec."""
        return cls(np.zeros(spec.n_params), spec.layer_shapes)

    def zeros_like(self) -> ParamVector:
        """All-zero parameters with this layout."""
        return ParamVector(np.zeros_like(self.values), self.shapes)

    def with_values(self, values) -> ParamVector:
        """A new vector with this layout and the given values."""
        return ParamVector(values, self.shapes)

    def check_compatible(self, other: ParamVector, what: str = "parameters"):
        """Raise :class:`ShapeError` unless ``other`` has the same layout."""
        if self.shapes != other.shapes:
            raise ShapeError(f"{what}: layouts differ ({self.shapes} vs {other.shapes}).")

    def distance(self, other: ParamVector) -> float:
        """Euclidean distance to another vector of the same layout."""
        self.check_compatible(other)
        return float(np.linalg.norm(self.values - other.values))


@attr.define(frozen=True, eq=False)
class Batch:
    """
    Features paired with row-stochastic labels.

    Labels may be one-hot or soft; each row must sum to one.
    """

    features: np.ndarray = attr.field(converter=_readonly_matrix)
    labels: np.ndarray = attr.field(converter=_readonly_matrix)

    def __attrs_post_init__(self):
        n = self.features.shape[0]
        if n < 1:
            raise EmptyBatchError()
        if self.labels.shape[0] != n:
            raise ShapeError(
                f"Batch has {n} feature rows but {self.labels.shape[0]} label rows."
            )
        sums = self.labels.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > _LABEL_SUM_TOL) or np.any(self.labels < 0):
            raise ParameterError("Batch labels must be rows on the probability simplex.")
        if np.any(self.features < 0) or np.any(self.features > 1):
            raise ParameterError("Batch features must lie in [0, 1].")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def class_count(self) -> int:
        """Width of the label rows."""
        return self.labels.shape[1]

    def take(self, indices) -> Batch:
        """The rows at ``indices``, in that order."""
        return Batch(self.features[indices], self.labels[indices])


def _check_spec(params: ParamVector, spec: ModelSpec):
    if params.shapes != spec.layer_shapes:
        for i, (got, want) in enumerate(zip(params.shapes, spec.layer_shapes)):
            if got != want:
                raise ShapeError(
                    f"layer {i}: parameters have shape {got} but the model spec "
                    f"expects {want}."
                )
        raise ShapeError(
            f"parameters have {len(params.shapes)} layers but the model spec "
            f"has {len(spec.layer_shapes)}."
        )


def _forward_pass(params: ParamVector, spec: ModelSpec, features: np.ndarray):
    """Run the network, returning the input of every layer and the logits."""
    _check_spec(params, spec)
    a = np.asarray(features, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != spec.input_dim:
        raise ShapeError(
            f"layer 0: expected features of width {spec.input_dim}, "
            f"got array of shape {a.shape}."
        )

    layers = params.layers()
    inputs = []
    for i, (weight, bias) in enumerate(layers):
        inputs.append(a)
        z = a @ weight + bias
        if i < len(layers) - 1:
            a = np.maximum(z, 0.0)
    return inputs, z


def _backward_deltas(params: ParamVector, inputs, dlogits: np.ndarray):
    """Per-sample error signals at the output of every layer."""
    layers = params.layers()
    deltas = [None] * len(layers)
    delta = dlogits
    for i in range(len(layers) - 1, -1, -1):
        deltas[i] = delta
        if i > 0:
            delta = (delta @ layers[i][0].T) * (inputs[i] > 0)
    return deltas


def _gradient(params: ParamVector, inputs, deltas) -> ParamVector:
    parts = []
    for a, d in zip(inputs, deltas):
        parts.append((a.T @ d).ravel())
        parts.append(d.sum(axis=0))
    return params.with_values(np.concatenate(parts))


def _squared_gradient_sum(inputs, deltas) -> np.ndarray:
    """Sum over samples of the elementwise-squared per-sample gradients.

    For an affine layer the per-sample weight gradient is the outer product
    ``a_i d_i^T``, so its square summed over samples is ``(a**2).T @ d**2``.
    """
    parts = []
    for a, d in zip(inputs, deltas):
        d2 = d**2
        parts.append(((a**2).T @ d2).ravel())
        parts.append(d2.sum(axis=0))
    return np.concatenate(parts)


def xavier_init(spec: ModelSpec, seed) -> ParamVector:
    """
    Xavier-uniform initialization.

    Each weight is drawn from ``U(-b, b)`` with ``b = sqrt(6 / (fan_in + fan_out))``;
    biases are zero.

    Parameters
    ----------
    spec : :class:`ModelSpec`
        The architecture.
    seed : int or :class:`numpy.random.SeedSequence`
        Identical seeds give bitwise-identical parameters.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for shape in spec.layer_shapes:
        bound = math.sqrt(6.0 / (shape.rows + shape.cols))
        weight = rng.uniform(-bound, bound, size=(shape.rows, shape.cols))
        layers.append((weight, np.zeros(shape.bias)))
    return ParamVector.from_layers(layers)


def forward(params: ParamVector, spec: ModelSpec, features) -> np.ndarray:
    """Softmax class probabilities, one row per feature row."""
    _, logits = _forward_pass(params, spec, features)
    return softmax(logits, axis=1)


def predict(params: ParamVector, spec: ModelSpec, features) -> np.ndarray:
    """Predicted class indices; ties go to the lowest class index."""
    _, logits = _forward_pass(params, spec, features)
    return np.argmax(logits, axis=1)


def loss_and_grad(
    params: ParamVector, spec: ModelSpec, batch: Batch
) -> tuple[float, ParamVector]:
    """
    Mean cross-entropy and its gradient.

    The loss is ``-mean_n sum_c y_nc log p_nc`` for possibly-soft labels ``y``. The
    softmax and cross-entropy are fused, so the gradient at the logits is
    ``(p - y) / N``.

    Raises
    ------
    DivergenceError
        If the loss is not finite.
    """
    inputs, logits = _forward_pass(params, spec, batch.features)
    log_probs = log_softmax(logits, axis=1)
    n = len(batch)
    loss = float(-np.sum(batch.labels * log_probs) / n)
    if not np.isfinite(loss):
        raise DivergenceError(term="cross_entropy")

    dlogits = (np.exp(log_probs) - batch.labels) / n
    deltas = _backward_deltas(params, inputs, dlogits)
    return loss, _gradient(params, inputs, deltas)


def evaluate_loss(params: ParamVector, spec: ModelSpec, batch: Batch) -> float:
    """Mean cross-entropy without the gradient."""
    _, logits = _forward_pass(params, spec, batch.features)
    return float(-np.sum(batch.labels * log_softmax(logits, axis=1)) / len(batch))


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """Return ``params - lr * grad``."""
    params.check_compatible(grad, "sgd_step")
    if lr < 0:
        raise ParameterError(f"learning rate must be non-negative, got {lr}")
    return params.with_values(params.values - lr * grad.values)


def accuracy(params: ParamVector, spec: ModelSpec, batch: Batch) -> float:
    """Fraction of rows whose predicted class is the argmax of the label row."""
    predicted = predict(params, spec, batch.features)
    return float(np.mean(predicted == np.argmax(batch.labels, axis=1)))
