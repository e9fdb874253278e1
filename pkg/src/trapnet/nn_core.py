"""Small fixed-architecture ReLU MLP with analytic gradients.

Inputs are float64 arrays of shape ``(input_dim,)`` for a single example or
``(n, input_dim)`` for a batch. Layers compute ``z = a @ W + b`` with ``W`` of
shape ``(fan_in, fan_out)``. The hidden vector ``h(x)`` is the post-ReLU
output of the last hidden layer, i.e. the layer feeding the logits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateError, NumericError, ShapeError


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ConfigError(f"all layer dimensions must be >= 1: {self}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def hidden_dim(self) -> int:
        return self.hidden_dims[-1]

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]


@dataclass
class ModelParams:
    arch: Architecture
    layers: list[tuple[np.ndarray, np.ndarray]]
    seed: int | None = None

    def __post_init__(self):
        dims = self.arch.layer_dims
        if len(self.layers) != len(dims) - 1:
            raise ShapeError(f"expected {len(dims) - 1} layers, got {len(self.layers)}")
        for i, (w, b) in enumerate(self.layers):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: got W{w.shape} b{b.shape}, "
                    f"expected W{(dims[i], dims[i + 1])} b{(dims[i + 1],)}"
                )

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, [(w.copy(), b.copy()) for w, b in self.layers], self.seed)

    def to_dict(self) -> dict:
        return {
            "format": "trapnet-checkpoint/1",
            "architecture": {
                "input_dim": self.arch.input_dim,
                "hidden_dims": list(self.arch.hidden_dims),
                "num_classes": self.arch.num_classes,
                "activation": self.arch.activation,
            },
            "seed": self.seed,
            "layers": [
                {
                    "weight_shape": list(w.shape),
                    "weight": w.ravel().tolist(),
                    "bias": b.tolist(),
                }
                for w, b in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelParams":
        a = doc["architecture"]
        arch = Architecture(a["input_dim"], tuple(a["hidden_dims"]), a["num_classes"], a["activation"])
        layers = []
        for layer in doc["layers"]:
            w = np.asarray(layer["weight"], dtype=np.float64).reshape(layer["weight_shape"])
            layers.append((w, np.asarray(layer["bias"], dtype=np.float64)))
        return cls(arch, layers, doc.get("seed"))

    def to_json(self) -> str:
        # repr of a Python float round-trips float64 exactly
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class ForwardTrace:
    pre: list[np.ndarray]
    post: list[np.ndarray]
    hidden: np.ndarray
    logits: np.ndarray
    batched: bool = field(default=True, repr=False)


def init_model(arch: Architecture, seed: int) -> ModelParams:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    dims = arch.layer_dims
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(arch, layers, seed)


def _as_batch(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != params.arch.input_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input_dim {params.arch.input_dim}")
    return x2, single


def relu(z):
    return np.maximum(z, 0.0)


def forward(params: ModelParams, x) -> ForwardTrace:
    a, single = _as_batch(params, x)
    pre, post = [], [a]
    n_hidden = len(params.arch.hidden_dims)
    for i, (w, b) in enumerate(params.layers):
        z = a @ w + b
        pre.append(z)
        a = relu(z) if i < n_hidden else z
        post.append(a)
    hidden, logits = post[-2], post[-1]
    if single:
        hidden, logits = hidden[0], logits[0]
    return ForwardTrace(pre, post, hidden, logits, batched=not single)


def hidden(params: ModelParams, x) -> np.ndarray:
    return forward(params, x).hidden


def logits(params: ModelParams, x) -> np.ndarray:
    return forward(params, x).logits


def predict(params: ModelParams, x) -> np.ndarray:
    return np.argmax(forward(params, x).logits, axis=-1)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def xent_loss(logits, y):
    """Cross-entropy ``-log softmax(logits)[y]``.

    A 1-D ``logits`` with an integer ``y`` gives a float; a 2-D batch with a
    label array gives per-example losses.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y_arr = np.asarray(y)
    num_classes = logits.shape[-1]
    if np.any(y_arr < 0) or np.any(y_arr >= num_classes):
        raise IndexError(f"label {y} out of range for {num_classes} classes")
    lp = log_softmax(logits)
    if logits.ndim == 1:
        return float(-lp[int(y_arr)])
    return -lp[np.arange(len(lp)), y_arr]


def _backward(params: ModelParams, trace: ForwardTrace, d_logits=None, d_hidden=None):
    """Backpropagate upstream gradients; returns (param_grads, input_grad).

    ``d_logits``/``d_hidden`` are (n, dim) gradients of a scalar-per-row
    objective. Parameter gradients are summed over rows.
    """
    n_layers = len(params.layers)
    grads: list = [None] * n_layers
    if d_logits is not None:
        w, _ = params.layers[-1]
        a_prev = trace.post[-2]
        grads[-1] = (a_prev.T @ d_logits, d_logits.sum(axis=0))
        da = d_logits @ w.T
    else:
        grads[-1] = tuple(np.zeros_like(p) for p in params.layers[-1])
        da = d_hidden
    for i in range(n_layers - 2, -1, -1):
        dz = da * (trace.pre[i] > 0)
        w, _ = params.layers[i]
        grads[i] = (trace.post[i].T @ dz, dz.sum(axis=0))
        da = dz @ w.T
    return grads, da


def _check_labels(params: ModelParams, y, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y)).astype(np.int64)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= params.arch.num_classes):
        raise IndexError(f"labels out of range for {params.arch.num_classes} classes")
    return y


def grad_params(params: ModelParams, inputs, labels) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradient of the mean cross-entropy over the batch w.r.t. all weights and biases."""
    x, _ = _as_batch(params, inputs)
    if len(x) == 0:
        raise ShapeError("empty batch")
    y = _check_labels(params, labels, len(x))
    trace = forward(params, x)
    d_logits = softmax(trace.logits)
    d_logits[np.arange(len(x)), y] -= 1.0
    d_logits /= len(x)
    grads, _ = _backward(params, trace, d_logits=d_logits)
    return grads


def mean_xent(params: ModelParams, inputs, labels) -> float:
    x, _ = _as_batch(params, inputs)
    y = _check_labels(params, labels, len(x))
    return float(np.mean(xent_loss(forward(params, x).logits, y)))


def xent_and_input_grad(params: ModelParams, x, y, trace: ForwardTrace | None = None):
    """Per-example cross-entropy and its gradient w.r.t. the input pixels."""
    xb, single = _as_batch(params, x)
    yb = _check_labels(params, y, len(xb))
    if trace is None:
        trace = forward(params, xb)
    p = softmax(trace.logits)
    loss = xent_loss(trace.logits, yb)
    p[np.arange(len(xb)), yb] -= 1.0
    _, g = _backward(params, trace, d_logits=p)
    if single:
        return float(loss[0]), g[0]
    return loss, g


def grad_input_xent(params: ModelParams, x, y) -> np.ndarray:
    """Gradient of cross-entropy w.r.t. input pixels (per example for batches)."""
    return xent_and_input_grad(params, x, y)[1]


def cosine(a, b) -> np.ndarray:
    """Row-wise cosine similarity; raises on zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateError("cosine similarity undefined for a zero vector")
    return np.sum(a * b, axis=-1) / (na * nb)


def detection_and_input_grad(params: ModelParams, x, phi, trace: ForwardTrace | None = None):
    """Cosine similarity sim(h(x), phi) and its gradient w.r.t. input pixels.

    ``phi`` may be one vector or one per batch row. Rows whose hidden vector
    is zero get score -1, zero gradient, and are flagged in the returned mask.
    Returns ``(scores, grads, degenerate_mask)``.
    """
    xb, single = _as_batch(params, x)
    phi = np.asarray(phi, dtype=np.float64)
    k = params.arch.hidden_dim
    if phi.shape[-1] != k:
        raise ShapeError(f"phi dimension {phi.shape[-1]} != hidden dimension {k}")
    phi_b = np.broadcast_to(phi, (len(xb), k))
    phi_norm = np.linalg.norm(phi_b, axis=1)
    if np.any(phi_norm == 0):
        raise DegenerateError("signature phi is the zero vector")
    if trace is None:
        trace = forward(params, xb)
    h = trace.post[-2]
    h_norm = np.linalg.norm(h, axis=1)
    degenerate = h_norm == 0
    safe = np.where(degenerate, 1.0, h_norm)
    score = np.sum(h * phi_b, axis=1) / (safe * phi_norm)
    # d cos / d h = phi/(|h||phi|) - cos * h/|h|^2
    d_h = phi_b / (safe * phi_norm)[:, None] - (score / safe**2)[:, None] * h
    d_h[degenerate] = 0.0
    score = np.where(degenerate, -1.0, score)
    _, g = _backward(params, trace, d_hidden=d_h)
    if single:
        return float(score[0]), g[0], bool(degenerate[0])
    return score, g, degenerate


def grad_input_detection(params: ModelParams, x, phi) -> np.ndarray:
    """Gradient of cosine(h(x), phi) w.r.t. input pixels.

    Raises DegenerateError when phi or any h(x) is the zero vector.
    """
    _, g, degenerate = detection_and_input_grad(params, x, phi)
    if np.any(degenerate):
        raise DegenerateError("hidden vector h(x) is zero; cosine gradient undefined")
    return g


def sgd_step(params: ModelParams, grads, lr: float) -> ModelParams:
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    new_layers = []
    for (w, b), (gw, gb) in zip(params.layers, grads):
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError("non-finite gradient")
        new_layers.append((w - lr * gw, b - lr * gb))
    return ModelParams(params.arch, new_layers, params.seed)
