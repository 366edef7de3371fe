"""Dense ReLU multilayer perceptron trained from scratch.

Inputs are bias-augmented: a feature vector ``x`` is identified with
``(x, 1)``, so ``layer_dims[0]`` counts that trailing constant. Hidden layers
apply ``max(0, .)``; the output layer is linear and softmax lives in the loss.

With ``hidden_bias=True`` the last unit of every hidden layer is a constant 1:
the last row of each non-output matrix is pinned to a one-hot on the previous
layer's constant unit and never trained. The outgoing weights of that unit
play the role of biases, and because the pinned rows hold exact 1s the
path-norm product still counts every bias edge.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import DomainError, ParseError, ShapeError


@dataclass(frozen=True, eq=False)
class ReluMlp:
    layer_dims: tuple[int, ...]
    params: np.ndarray
    hidden_bias: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ShapeError(f"layer_dims must hold at least two positive widths, got {dims}")
        params = np.array(self.params, dtype=np.float64, copy=True).ravel()
        expected = sum(dims[l] * dims[l + 1] for l in range(len(dims) - 1))
        if params.size != expected:
            raise ShapeError(f"expected {expected} weights for dims {dims}, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise DomainError("weights must be finite")
        params.flags.writeable = False
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "hidden_bias", bool(self.hidden_bias))

    @classmethod
    def from_weights(cls, weights: Sequence[np.ndarray], hidden_bias: bool = False) -> "ReluMlp":
        mats = [np.atleast_2d(np.asarray(w, dtype=np.float64)) for w in weights]
        dims = [mats[0].shape[1]]
        for l, w in enumerate(mats):
            if w.ndim != 2 or w.shape[1] != dims[-1]:
                raise ShapeError(f"matrix {l} has shape {w.shape}, expected (*, {dims[-1]})")
            dims.append(w.shape[0])
        flat = np.concatenate([w.ravel() for w in mats]) if mats else np.zeros(0)
        return cls(tuple(dims), flat, hidden_bias)

    @property
    def depth(self) -> int:
        """Number of weight matrices (``L + 1``)."""
        return len(self.layer_dims) - 1

    @property
    def hidden_layers(self) -> int:
        return self.depth - 1

    @property
    def dims_array(self) -> np.ndarray:
        return np.asarray(self.layer_dims, dtype=np.int64)

    @property
    def weights(self) -> list[np.ndarray]:
        return unflatten(self.params, self.layer_dims)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def class_count(self) -> int:
        return self.layer_dims[-1]

    def with_params(self, params: np.ndarray) -> "ReluMlp":
        return ReluMlp(self.layer_dims, params, self.hidden_bias)

    def trainable_mask(self) -> np.ndarray:
        mask = np.ones(self.params.size, dtype=bool)
        if self.hidden_bias:
            for l, w in enumerate(unflatten(mask, self.layer_dims)[:-1]):
                w[-1, :] = False
        return mask

    def __eq__(self, other):
        if not isinstance(other, ReluMlp):
            return NotImplemented
        return (
            self.layer_dims == other.layer_dims
            and self.hidden_bias == other.hidden_bias
            and np.array_equal(self.params, other.params)
        )

    __hash__ = None


def unflatten(flat: np.ndarray, layer_dims: Sequence[int]) -> list[np.ndarray]:
    """Views of ``flat`` reshaped into the per-layer matrices."""
    out = []
    off = 0
    for l in range(len(layer_dims) - 1):
        rows, cols = layer_dims[l + 1], layer_dims[l]
        out.append(flat[off:off + rows * cols].reshape(rows, cols))
        off += rows * cols
    return out


def init_mlp(layer_dims: Sequence[int], seed: int, hidden_bias: bool = True) -> ReluMlp:
    """Fan-based uniform init: each matrix draws from U(-a, a), a = sqrt(6 / (d_in + d_out))."""
    dims = tuple(int(d) for d in layer_dims)
    rng = np.random.default_rng(seed)
    mats = []
    for l in range(len(dims) - 1):
        d_in, d_out = dims[l], dims[l + 1]
        bound = math.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        if hidden_bias and l < len(dims) - 2:
            w[-1, :] = 0.0
            w[-1, -1] = 1.0
        mats.append(w)
    return ReluMlp(dims, np.concatenate([w.ravel() for w in mats]), hidden_bias)


def augment(features: np.ndarray) -> np.ndarray:
    """Append the constant-1 bias input to each row (or to a single vector)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        return np.append(features, 1.0)
    return np.hstack([features, np.ones((features.shape[0], 1))])


def forward(model: ReluMlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise ShapeError(f"input has shape {x.shape}, model expects ({model.input_dim},)")
    return forward_batch(model, x[None, :])[0]


def forward_batch(model: ReluMlp, X: np.ndarray) -> np.ndarray:
    """Logits for each row of the augmented input matrix ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"input has shape {X.shape}, model expects (n, {model.input_dim})")
    a = X
    weights = model.weights
    for w in weights[:-1]:
        a = np.maximum(a @ w.T, 0.0)
    return a @ weights[-1].T


def log_sum_exp(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]


def cross_entropy_loss(logits: np.ndarray, label: int, class_count: int | None = None) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    c = logits.shape[-1] if class_count is None else class_count
    if logits.ndim != 1 or logits.shape[0] != c:
        raise ShapeError(f"logits of shape {logits.shape} do not match {c} classes")
    if not 0 <= label < c:
        raise DomainError(f"label {label} outside [0, {c})")
    return float(log_sum_exp(logits) - logits[label])


def per_class_losses(logits: np.ndarray) -> np.ndarray:
    """Cross-entropy for every (row, class) pair: ``lse(f) - f_i``."""
    return log_sum_exp(logits)[:, None] - logits


def batch_losses(model: ReluMlp, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    logits = forward_batch(model, X)
    return log_sum_exp(logits) - logits[np.arange(len(y)), y]


def _check_batch(model: ReluMlp, X: np.ndarray, y: np.ndarray):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("batch must be a nonempty 2-D array")
    if X.shape[1] != model.input_dim:
        raise ShapeError(f"batch width {X.shape[1]} != input dim {model.input_dim}")
    if y.shape != (X.shape[0],):
        raise ShapeError("labels must be one per example")
    if y.min() < 0 or y.max() >= model.class_count:
        raise DomainError(f"labels must lie in [0, {model.class_count})")
    return X, y


def backward_flat(model: ReluMlp, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    X, y = _check_batch(model, X, y)
    grad = np.empty(model.params.size)
    params = np.array(model.params)
    loss = _kernels.forward_backward(params, model.dims_array, model.hidden_bias, X, y, grad)
    return grad, float(loss)


def backward(model: ReluMlp, X: np.ndarray, y: np.ndarray) -> tuple[list[np.ndarray], float]:
    """Gradient of the mean batch cross-entropy, one array per weight matrix.

    Pinned bias rows (``hidden_bias``) get a zero gradient. At a ReLU input of
    exactly 0 the derivative is taken as 0.
    """
    grad, loss = backward_flat(model, X, y)
    return unflatten(grad, model.layer_dims), loss


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise DomainError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")


@dataclass(frozen=True, eq=False)
class LocalResult:
    model: ReluMlp
    mean_loss: float
    steps: int


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def train_local(model: ReluMlp, dataset, config: SgdConfig, correction: np.ndarray | None = None,
                use_numba: bool | None = None) -> LocalResult:
    """Minibatch SGD for ``config.epochs`` passes over ``dataset``.

    ``correction`` is added to every minibatch gradient before the step
    (SCAFFOLD's ``c - c_k``). The reported loss is the mean of the minibatch
    losses seen during training.
    """
    if len(dataset) == 0:
        raise DomainError("cannot train on an empty dataset")
    X = augment(dataset.features)
    y = np.ascontiguousarray(dataset.labels, dtype=np.int64)
    X, y = _check_batch(model, X, y)
    if correction is not None:
        correction = np.ascontiguousarray(correction, dtype=np.float64)
        if correction.shape != model.params.shape:
            raise ShapeError("correction must match the parameter vector")
    params = np.array(model.params)
    dims = model.dims_array
    total, steps = 0.0, 0
    for epoch in range(config.epochs):
        order = epoch_order(len(y), config.seed, epoch)
        t, s = _kernels.train_epoch(params, dims, model.hidden_bias, X, y, order,
                                    config.learning_rate, config.batch_size, correction,
                                    use_numba=use_numba)
        total += t
        steps += s
    if not np.all(np.isfinite(params)):
        raise DomainError("training diverged to non-finite weights")
    return LocalResult(model.with_params(params), total / steps, steps)


def sgd_epochs(model: ReluMlp, dataset, config: SgdConfig) -> ReluMlp:
    return train_local(model, dataset, config).model


def path_norm_proxy(model: ReluMlp) -> float:
    """Sum over input-to-output paths of the product of absolute edge weights.

    Evaluated as ``1^T |W_L| ... |W_0| 1`` instead of enumerating paths.
    """
    v = np.ones(model.input_dim)
    for w in model.weights:
        v = np.abs(w) @ v
    return float(v.sum())


def max_abs_logit(model: ReluMlp, X: np.ndarray) -> float:
    return float(np.max(np.abs(forward_batch(model, X))))


def accuracy(model: ReluMlp, dataset) -> float:
    logits = forward_batch(model, augment(dataset.features))
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


# ---------------------------------------------------------------------------
# snapshot format: "RMLP", version, dim count, flags (all <u4), dims <u4, weights <f8

SNAPSHOT_MAGIC = b"RMLP"
SNAPSHOT_VERSION = 1
_FLAG_HIDDEN_BIAS = 1


def snapshot_bytes(model: ReluMlp) -> bytes:
    flags = _FLAG_HIDDEN_BIAS if model.hidden_bias else 0
    header = SNAPSHOT_MAGIC + struct.pack("<III", SNAPSHOT_VERSION, len(model.layer_dims), flags)
    dims = np.asarray(model.layer_dims, dtype="<u4").tobytes()
    return header + dims + model.params.astype("<f8").tobytes()


def model_from_snapshot(blob: bytes) -> ReluMlp:
    if len(blob) < 16:
        raise ParseError("header", f"need 16 bytes, got {len(blob)}")
    if blob[:4] != SNAPSHOT_MAGIC:
        raise ParseError("magic", f"wrong magic {blob[:4]!r}")
    version, count, flags = struct.unpack("<III", blob[4:16])
    if version != SNAPSHOT_VERSION:
        raise ParseError("version", f"unsupported version {version}")
    end_dims = 16 + 4 * count
    if len(blob) < end_dims:
        raise ParseError("layer_dims", "truncated")
    dims = tuple(int(d) for d in np.frombuffer(blob, dtype="<u4", count=count, offset=16))
    n_params = sum(dims[l] * dims[l + 1] for l in range(len(dims) - 1))
    if len(blob) != end_dims + 8 * n_params:
        raise ParseError("weights", f"expected {8 * n_params} bytes, got {len(blob) - end_dims}")
    params = np.frombuffer(blob, dtype="<f8", count=n_params, offset=end_dims).astype(np.float64)
    return ReluMlp(dims, params, bool(flags & _FLAG_HIDDEN_BIAS))


def save_snapshot(model: ReluMlp, path: str | Path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(snapshot_bytes(model))
    tmp.replace(path)
    return path


def load_snapshot(path: str | Path) -> ReluMlp:
    return model_from_snapshot(Path(path).read_bytes())
