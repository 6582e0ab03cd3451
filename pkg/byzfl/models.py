"""Linear, logistic and one-hidden-layer MLP models with analytic gradients.

Parameter layout (row-major, concatenated):
    linear:   w (input_dim), b (1)
    logistic: W (input_dim × L), b (L)
    mlp:      W1 (input_dim × h), b1 (h), W2 (h × L), b2 (L)
"""
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
import numpy.typing as npt

from byzfl.exceptions import DataError, DimensionError, ParameterError
from byzfl.numcore import ParamVector, RngStream
from byzfl.schemas import ModelSpec

MODEL_DESCRIPTIONS: Dict[str, str] = {
    "linear": "Linear regression, mean squared error",
    "logistic": "Multinomial logistic regression, cross-entropy",
    "mlp": "One hidden layer (relu|tanh) + softmax, cross-entropy",
}


@dataclass(frozen=True)
class Batch:
    features: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    targets: Optional[npt.NDArray[np.float64]] = None  # regression targets; labels used when absent

    def __post_init__(self):
        features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.shape[0] != labels.shape[0]:
            raise DimensionError(f"{features.shape[0]} feature rows vs {labels.shape[0]} labels")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.targets is not None:
            object.__setattr__(self, "targets", np.asarray(self.targets, dtype=np.float64).reshape(-1))

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    def regression_targets(self) -> npt.NDArray[np.float64]:
        return self.targets if self.targets is not None else self.labels.astype(np.float64)


class Evaluation(NamedTuple):
    loss: float
    accuracy: float


def _unpack(spec: ModelSpec, w: ParamVector) -> Tuple[npt.NDArray[np.float64], ...]:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.param_dim,):
        raise DimensionError(f"expected {spec.param_dim} parameters, got {w.shape[0] if w.ndim else 0}")
    n_in, n_out = spec.input_dim, spec.num_classes
    if spec.kind == "linear":
        return w[:n_in], w[n_in:]
    if spec.kind == "logistic":
        return w[: n_in * n_out].reshape(n_in, n_out), w[n_in * n_out:]
    h = spec.hidden_dim
    o = 0
    W1 = w[o:o + n_in * h].reshape(n_in, h); o += n_in * h
    b1 = w[o:o + h]; o += h
    W2 = w[o:o + h * n_out].reshape(h, n_out); o += h * n_out
    b2 = w[o:o + n_out]
    return W1, b1, W2, b2


def init_params(spec: ModelSpec, rng: RngStream) -> ParamVector:
    """Weights ~ U(−1/√fan_in, 1/√fan_in), biases zero."""
    gen = rng.generator()
    w = np.zeros(spec.param_dim, dtype=np.float64)
    n_in, n_out = spec.input_dim, spec.num_classes
    bound = 1.0 / np.sqrt(n_in)
    if spec.kind == "linear":
        w[:n_in] = gen.uniform(-bound, bound, n_in)
    elif spec.kind == "logistic":
        w[: n_in * n_out] = gen.uniform(-bound, bound, n_in * n_out)
    else:
        h = spec.hidden_dim
        w[: n_in * h] = gen.uniform(-bound, bound, n_in * h)
        start = n_in * h + h
        w[start:start + h * n_out] = gen.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h), h * n_out)
    return w


def _check_labels(spec: ModelSpec, batch: Batch) -> None:
    if spec.kind == "linear":
        return
    if batch.size and (batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes):
        raise DataError(f"labels must lie in [0, {spec.num_classes})")


def _log_softmax(z: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    # max-subtraction keeps exp() finite
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _activate(spec: ModelSpec, a):
    if spec.activation == "tanh":
        return np.tanh(a)
    return np.maximum(a, 0.0)


def _activation_grad(spec: ModelSpec, a, hidden):
    if spec.activation == "tanh":
        return 1.0 - hidden ** 2
    return (a > 0).astype(np.float64)


def predict(spec: ModelSpec, w: ParamVector, features: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Class scores (n × L), or regression outputs (n,) for the linear model."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != spec.input_dim:
        raise DimensionError(f"expected {spec.input_dim} features, got {x.shape[1]}")
    params = _unpack(spec, w)
    if spec.kind == "linear":
        coef, bias = params
        return x @ coef + bias[0]
    if spec.kind == "logistic":
        W, b = params
        return x @ W + b
    W1, b1, W2, b2 = params
    return _activate(spec, x @ W1 + b1) @ W2 + b2


def loss_and_grad(spec: ModelSpec, w: ParamVector, batch: Batch) -> Tuple[float, ParamVector]:
    """Mean loss over the batch and its exact gradient."""
    _check_labels(spec, batch)
    params = _unpack(spec, w)
    x, y = batch.features, batch.labels
    n = batch.size
    if n == 0:
        raise ParameterError("batch must contain at least one sample")

    if spec.kind == "linear":
        coef, bias = params
        residual = x @ coef + bias[0] - batch.regression_targets()
        loss = float(np.mean(residual ** 2))
        g = (2.0 / n) * residual
        return loss, np.concatenate([x.T @ g, [g.sum()]])

    if spec.kind == "logistic":
        W, b = params
        logp = _log_softmax(x @ W + b)
        loss = float(-logp[np.arange(n), y].mean())
        dz = np.exp(logp)
        dz[np.arange(n), y] -= 1.0
        dz /= n
        return loss, np.concatenate([(x.T @ dz).ravel(), dz.sum(axis=0)])

    W1, b1, W2, b2 = params
    a = x @ W1 + b1
    hidden = _activate(spec, a)
    logp = _log_softmax(hidden @ W2 + b2)
    loss = float(-logp[np.arange(n), y].mean())
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    dW2 = hidden.T @ dz
    db2 = dz.sum(axis=0)
    da = (dz @ W2.T) * _activation_grad(spec, a, hidden)
    dW1 = x.T @ da
    db1 = da.sum(axis=0)
    return loss, np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])


def evaluate(spec: ModelSpec, w: ParamVector, data: Batch) -> Evaluation:
    """Loss and accuracy; argmax ties resolve to the lowest class index."""
    if data.size == 0:
        raise ParameterError("cannot evaluate on empty data")
    loss, _ = loss_and_grad(spec, w, data)
    scores = predict(spec, w, data.features)
    if spec.kind == "linear":
        predicted = np.clip(np.rint(scores), 0, max(spec.num_classes - 1, 0)).astype(np.int64)
    else:
        predicted = np.argmax(scores, axis=1)
    return Evaluation(loss, float(np.mean(predicted == data.labels)))


def check_gradient(spec: ModelSpec, w: ParamVector, batch: Batch, h: float = 1e-6) -> float:
    """Max relative error of the analytic gradient against central differences."""
    w = np.array(w, dtype=np.float64)
    _, analytic = loss_and_grad(spec, w, batch)
    numeric = np.empty_like(w)
    for i in range(w.shape[0]):
        step = np.zeros_like(w)
        step[i] = h
        plus, _ = loss_and_grad(spec, w + step, batch)
        minus, _ = loss_and_grad(spec, w - step, batch)
        numeric[i] = (plus - minus) / (2.0 * h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / scale))
