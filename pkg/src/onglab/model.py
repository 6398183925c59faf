"""ReLU multilayer perceptron with softmax outputs, written directly in numpy.

Parameters live in one flat float64 vector so that optimizer updates,
projections and preconditioning all act on the same layout: for each layer
the weight matrix (row-major, ``out x in``) followed by its bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, StructuralError

DEFAULT_DIMS = (784, 100, 100, 10)


def parameter_count(dims) -> int:
    return sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))


def _check_dims(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise StructuralError(f"layer sizes must be at least two positive ints, got {dims}")
    return dims


def layer_offsets(dims):
    """Yield ``(fan_in, fan_out, weight_start, bias_start, end)`` per layer."""
    off = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w_end = off + fan_in * fan_out
        end = w_end + fan_out
        yield fan_in, fan_out, off, w_end, end
        off = end


@dataclass
class ModelParams:
    dims: tuple[int, ...]
    flat: np.ndarray

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (parameter_count(self.dims),):
            raise StructuralError(
                f"flat parameter vector has shape {self.flat.shape}, "
                f"expected ({parameter_count(self.dims)},)"
            )

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def layer_offsets(self):
        return layer_offsets(self.dims)

    @property
    def weights(self) -> list[np.ndarray]:
        # views into ``flat``; writing to them updates the parameters
        return [self.flat[s:w].reshape(o, i) for i, o, s, w, _ in self.layer_offsets()]

    @property
    def biases(self) -> list[np.ndarray]:
        return [self.flat[w:e] for _, _, _, w, e in self.layer_offsets()]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, self.flat.copy())

    @classmethod
    def from_layers(cls, weights, biases) -> "ModelParams":
        dims = [np.shape(weights[0])[1]] + [np.shape(w)[0] for w in weights]
        pieces = []
        for w, b in zip(weights, biases):
            pieces.append(np.asarray(w, dtype=np.float64).ravel())
            pieces.append(np.asarray(b, dtype=np.float64).ravel())
        return cls(tuple(dims), np.concatenate(pieces))


def init_kaiming(dims=DEFAULT_DIMS, seed=0) -> ModelParams:
    """He-normal weights (variance ``2 / fan_in``) and zero biases."""
    if dims is None or len(dims) == 0:
        raise StructuralError("init_kaiming needs at least one layer size")
    dims = _check_dims(dims)
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, np.sqrt(2.0 / i), size=(o, i)) for i, o in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(o) for o in dims[1:]]
    return ModelParams.from_layers(weights, biases)


def grad_to_layer_matrices(dims, flat_grad) -> list[np.ndarray]:
    """Split a flat gradient into per-layer ``out x (in + 1)`` blocks ``[dW | db]``."""
    flat_grad = np.asarray(flat_grad, dtype=np.float64)
    if flat_grad.shape != (parameter_count(dims),):
        raise StructuralError(
            f"gradient length {flat_grad.shape} does not match {parameter_count(dims)} parameters"
        )
    blocks = []
    for fan_in, fan_out, s, w, e in layer_offsets(dims):
        blocks.append(np.hstack([flat_grad[s:w].reshape(fan_out, fan_in), flat_grad[w:e, None]]))
    return blocks


def layer_matrices_to_grad(blocks) -> np.ndarray:
    return np.concatenate([np.concatenate([b[:, :-1].ravel(), b[:, -1]]) for b in blocks])


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.int64).ravel()
        if self.x.shape[0] == 0 or self.x.shape[0] != self.y.shape[0]:
            raise StructuralError(
                f"batch needs n >= 1 rows with one label each, got x {self.x.shape}, y {self.y.shape}"
            )

    def __len__(self):
        return self.x.shape[0]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # a_l, without the homogeneous coordinate
    preacts: list[np.ndarray]  # z_l
    probs: np.ndarray

    @property
    def logits(self) -> np.ndarray:
        return self.preacts[-1]


@dataclass
class LayerStats:
    """Per-example quantities that EKFAC needs for one layer.

    ``a`` is ``n x (in + 1)`` with a trailing column of ones; ``delta`` is
    ``n x out`` and holds the gradient of each example's own loss with
    respect to the layer pre-activation (not divided by ``n``).
    """

    a: np.ndarray
    delta: np.ndarray


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ModelParams, x) -> ForwardCache:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != params.dims[0]:
        raise StructuralError(f"input width {x.shape[1]} does not match layer 0 width {params.dims[0]}")
    inputs, preacts = [], []
    a = x
    last = params.n_layers - 1
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported below
        for l, (w, b) in enumerate(zip(params.weights, params.biases)):
            inputs.append(a)
            z = a @ w.T + b
            preacts.append(z)
            a = z if l == last else np.maximum(z, 0.0)
    if not np.all(np.isfinite(a)):
        raise NumericalError("non-finite logits in forward pass")
    return ForwardCache(inputs, preacts, softmax(a))


def _backprop(params: ModelParams, cache: ForwardCache, dz_out: np.ndarray) -> list[np.ndarray]:
    """Per-example pre-activation gradients for every layer given the output one."""
    deltas = [None] * params.n_layers
    dz = dz_out
    weights = params.weights
    for l in range(params.n_layers - 1, -1, -1):
        deltas[l] = dz
        if l > 0:
            # ReLU'(0) taken as 0
            dz = (dz @ weights[l]) * (cache.preacts[l - 1] > 0.0)
    return deltas


def _with_ones(a: np.ndarray) -> np.ndarray:
    return np.hstack([a, np.ones((a.shape[0], 1))])


def _one_hot(labels, n_classes) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise StructuralError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss_and_backward(params: ModelParams, batch: Batch, cache: ForwardCache | None = None):
    """Mean cross-entropy, its exact gradient, and per-layer EKFAC statistics.

    Returns ``(loss, grad, stats)`` where ``grad`` is flat and ``stats`` is a
    list of :class:`LayerStats`.
    """
    if cache is None:
        cache = forward(params, batch.x)
    n = len(batch)
    onehot = _one_hot(batch.y, params.dims[-1])
    z = cache.logits - cache.logits.max(axis=1, keepdims=True)
    log_p = z[np.arange(n), batch.y] - np.log(np.exp(z).sum(axis=1))
    loss = float(-log_p.mean())
    deltas = _backprop(params, cache, cache.probs - onehot)
    stats, pieces = [], []
    for a, d in zip(cache.inputs, deltas):
        pieces.append((d.T @ a / n).ravel())
        pieces.append(d.mean(axis=0))
        stats.append(LayerStats(_with_ones(a), d))
    grad = np.concatenate(pieces)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericalError("non-finite loss or gradient")
    return loss, grad, stats


def score_stats(params: ModelParams, cache: ForwardCache, labels) -> list[LayerStats]:
    """EKFAC statistics for the per-example loss ``-log p(labels | x)``."""
    deltas = _backprop(params, cache, cache.probs - _one_hot(labels, params.dims[-1]))
    return [LayerStats(_with_ones(a), d) for a, d in zip(cache.inputs, deltas)]


def logit_gradients(params: ModelParams, x, classes) -> np.ndarray:
    """Row ``i`` is the gradient of logit ``classes[i]`` at example ``x[i]``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    classes = np.asarray(classes, dtype=np.int64).ravel()
    if classes.shape[0] != x.shape[0]:
        raise StructuralError("logit_gradients needs one class index per example")
    cache = forward(params, x)
    deltas = _backprop(params, cache, _one_hot(classes, params.dims[-1]))
    n = x.shape[0]
    out = np.empty((n, params.flat.size))
    for (fan_in, fan_out, s, w, e), a, d in zip(params.layer_offsets(), cache.inputs, deltas):
        out[:, s:w] = np.einsum("no,ni->noi", d, a).reshape(n, fan_out * fan_in)
        out[:, w:e] = d
    return out


def logit_gradient(params: ModelParams, x, class_index: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if not 0 <= int(class_index) < params.dims[-1]:
        raise StructuralError(f"class index {class_index} outside [0, {params.dims[-1]})")
    return logit_gradients(params, x[None, :], [class_index])[0]


def sample_labels(probs, seed=None) -> np.ndarray:
    """One label per row drawn from that row's categorical distribution.

    ``probs`` may be a :class:`ForwardCache`; ``seed`` may be an int or a
    ``numpy.random.Generator`` (which is advanced).
    """
    if isinstance(probs, ForwardCache):
        probs = probs.probs
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(probs.shape[0])
    return (cdf <= u[:, None]).sum(axis=1).astype(np.int64)


def predict(params: ModelParams, x, chunk: int = 4096) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], chunk):
        out[start:start + chunk] = forward(params, x[start:start + chunk]).logits.argmax(axis=1)
    return out


def accuracy(params: ModelParams, x, y) -> float:
    y = np.asarray(y).ravel()
    return float(np.mean(predict(params, x) == y))
