"""Small fully connected networks with exact backpropagation and plain SGD.

ReLU on hidden layers; the head is either the identity (regression) or a
softmax (classification). Losses are summed over the batch, never
averaged.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ParameterError


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class SgdState:
    learning_rate: float
    minibatch_size: int
    stream: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError("learning rate must be positive")
        if self.minibatch_size < 1:
            raise ParameterError("minibatch size must be >= 1")


class MlpModel:
    """Multilayer perceptron ``layer_sizes = [N, h_1, ..., M]``.

    Weights are He-scaled Gaussians, biases start at zero. Parameters are
    float64 and owned by the instance; ``sgd_step`` updates in place.
    """

    def __init__(self, layer_sizes: Sequence[int], head: str = "softmax",
                 dropout_rate: float = 0.0, seed=None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ParameterError(f"invalid layer sizes {layer_sizes}")
        if head not in ("softmax", "identity"):
            raise ParameterError(f"unknown head {head!r}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ParameterError("dropout rate must lie in [0, 1)")
        self.layer_sizes = sizes
        self.head = head
        self.dropout_rate = float(dropout_rate)
        rng = np.random.default_rng(seed)
        self.weights = [rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
                        for fan_in, fan_out in zip(sizes[:-1], sizes[1:])]
        self.biases = [np.zeros(fan_out) for fan_out in sizes[1:]]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def dim_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def dim_out(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpModel":
        other = MlpModel.__new__(MlpModel)
        other.layer_sizes = list(self.layer_sizes)
        other.head = self.head
        other.dropout_rate = self.dropout_rate
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.dim_in:
            raise ParameterError(f"input width {x.shape[1]} != model input {self.dim_in}")
        return x

    def _run(self, x, rng):
        acts = [x]
        masks = []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if k == last:
                break
            h = np.maximum(z, 0.0)
            if rng is not None and self.dropout_rate > 0:
                keep = 1.0 - self.dropout_rate
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
            else:
                mask = None
            masks.append(mask)
            acts.append(h)
        out = softmax(z) if self.head == "softmax" else z
        return acts, masks, out

    def forward(self, x, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Outputs for a batch; dropout is active only when ``rng`` is given."""
        return self._run(self._check_input(x), rng)[2]

    def logits(self, x) -> np.ndarray:
        x = self._check_input(x)
        acts, _, out = self._run(x, None)
        return acts[-1] @ self.weights[-1].T + self.biases[-1]

    def backward(self, x, y, loss: str = "ce", rng: Optional[np.random.Generator] = None):
        """Loss summed over the batch and its exact gradient.

        ``loss="ce"`` takes integer labels and needs the softmax head.
        ``loss="mse"`` takes target rows and differentiates
        ``sum |f(x) - y|^2`` through whichever head the model has.
        Returns ``(value, grads)`` with ``grads`` a list of ``(dW, db)``.
        """
        x = self._check_input(x)
        acts, masks, out = self._run(x, rng)
        if loss == "ce":
            if self.head != "softmax":
                raise ParameterError("cross-entropy needs the softmax head")
            labels = np.asarray(y, dtype=int)
            if labels.shape != (x.shape[0],):
                raise ParameterError("expected one label per example")
            picked = out[np.arange(len(labels)), labels]
            value = float(-np.sum(np.log(np.maximum(picked, 1e-300))))
            delta = out.copy()
            delta[np.arange(len(labels)), labels] -= 1.0
        elif loss == "mse":
            target = np.asarray(y, dtype=float).reshape(out.shape)
            diff = out - target
            value = float(np.sum(diff * diff))
            dout = 2.0 * diff
            if self.head == "softmax":
                delta = out * (dout - np.sum(dout * out, axis=1, keepdims=True))
            else:
                delta = dout
        else:
            raise ParameterError(f"unknown loss {loss!r}")
        grads = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
            if k == 0:
                break
            delta = delta @ self.weights[k]
            if masks[k - 1] is not None:
                delta = delta * masks[k - 1]
            delta = delta * (acts[k] > 0)
        return value, grads

    def sgd_step(self, grads, lr: float) -> "MlpModel":
        """``w <- w - lr * grad`` in place; returns self."""
        for k, (dw, db) in enumerate(grads):
            self.weights[k] -= lr * dw
            self.biases[k] -= lr * db
        return self

    def get_flat(self) -> np.ndarray:
        """Parameters in layer order, each weight matrix row-major, then its bias."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_flat(self, flat) -> "MlpModel":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ParameterError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[k] = flat[pos:pos + b.size].copy()
            pos += b.size
        return self

    def to_json(self) -> str:
        return json.dumps({"layers": self.layer_sizes, "params": self.get_flat().tolist(),
                           "head": self.head})

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        obj = json.loads(text)
        model = cls(obj["layers"], head=obj.get("head", "softmax"))
        return model.set_flat(obj["params"])


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])


def sgd_step(model: MlpModel, grads, lr: float) -> MlpModel:
    """Functional form: returns an updated copy and leaves ``model`` alone."""
    return model.copy().sgd_step(grads, lr)


def predict_set(model: MlpModel, points) -> np.ndarray:
    """Model outputs on every grid point as an ``(S, M)`` grid function."""
    return model.forward(np.asarray(points, dtype=float))


def accuracy(model: MlpModel, x, labels, top: int = 1) -> float:
    """Fraction of examples whose label is among the ``top`` highest outputs."""
    scores = model.logits(x)
    labels = np.asarray(labels)
    if top == 1:
        return float(np.mean(np.argmax(scores, axis=1) == labels))
    best = np.argsort(-scores, axis=1, kind="stable")[:, :top]
    return float(np.mean(np.any(best == labels[:, None], axis=1)))
