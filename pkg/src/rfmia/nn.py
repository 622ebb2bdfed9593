"""Small feedforward networks in plain numpy.

ReLU hidden layers, softmax output, cross-entropy training with Adam, and
gradients of an output readout with respect to the *inputs* (the defense
solver needs those).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    hidden_activation: str = "relu"
    output_activation: str = "softmax"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ValueError("all layer dims must be >= 1")

    @property
    def dims(self) -> tuple:
        return (self.input_dim,) + self.hidden_dims + (self.output_dim,)

    def n_params(self) -> int:
        d = self.dims
        return sum((a + 1) * b for a, b in zip(d[:-1], d[1:]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    weight_decay: float = 0.0  # L2 coefficient on weights (not biases)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class MlpModel:
    spec: LayerSpec
    weights: list
    biases: list
    # inputs are standardised as (x - input_shift) / input_scale before layer 0
    input_shift: np.ndarray = None
    input_scale: np.ndarray = None
    trained: bool = False

    def __post_init__(self):
        d = self.spec.dims
        if len(self.weights) != len(d) - 1 or len(self.biases) != len(d) - 1:
            raise ValueError("layer count does not match spec")
        for W, b, a, c in zip(self.weights, self.biases, d[:-1], d[1:]):
            if W.shape != (a, c) or b.shape != (c,):
                raise ValueError(f"bad layer shape {W.shape}/{b.shape}, expected {(a, c)}")
        if self.input_shift is None:
            self.input_shift = np.zeros(self.spec.input_dim)
        if self.input_scale is None:
            self.input_scale = np.ones(self.spec.input_dim)

    def copy(self) -> "MlpModel":
        return MlpModel(self.spec, [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], self.input_shift.copy(),
                        self.input_scale.copy(), self.trained)

    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def fit_input_scaling(self, X: np.ndarray) -> None:
        X = np.asarray(X, dtype=float)
        std = X.std(axis=0)
        self.input_shift = X.mean(axis=0)
        self.input_scale = np.where(std > 1e-12, std, 1.0)

    def __call__(self, X):
        return predict_scores(self, X)


def init(spec: LayerSpec, seed: int) -> MlpModel:
    """He-uniform weights, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d = spec.dims
    weights, biases = [], []
    for a, c in zip(d[:-1], d[1:]):
        bound = np.sqrt(6.0 / a)
        weights.append(rng.uniform(-bound, bound, (a, c)))
        biases.append(np.zeros(c))
    return MlpModel(spec, weights, biases)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(model: MlpModel, X: np.ndarray):
    h = (X - model.input_shift) / model.input_scale
    acts = [h]
    pre = []
    n = len(model.weights)
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < n - 1 else z
        acts.append(h)
    return pre, acts, softmax(pre[-1])


def _as_batch(model: MlpModel, features):
    X = np.asarray(features, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.spec.input_dim:
        raise ValueError(f"expected {model.spec.input_dim} features, got {X.shape[1]}")
    return X, single


def predict_scores(model: MlpModel, features) -> np.ndarray:
    """Class probabilities; a 1-D input gives a 1-D score vector."""
    X, single = _as_batch(model, features)
    probs = _forward(model, X)[2]
    return probs[0] if single else probs


def predict_class(model: MlpModel, features) -> np.ndarray:
    return np.argmax(predict_scores(model, features), axis=-1)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _backward(model, pre, acts, dlogits):
    """Parameter gradients given d(loss)/d(logits) for a batch."""
    gW, gb = [], []
    delta = dlogits
    for k in range(len(model.weights) - 1, -1, -1):
        gW.append(acts[k].T @ delta)
        gb.append(delta.sum(axis=0))
        if k:
            delta = (delta @ model.weights[k].T) * (pre[k - 1] > 0)
    return gW[::-1], gb[::-1]


def cross_entropy(probs: np.ndarray, y: np.ndarray, weights=None) -> float:
    p = np.clip(probs[np.arange(len(y)), y], 1e-300, None)
    nll = -np.log(p)
    if weights is None:
        return float(nll.mean())
    return float((weights * nll).sum() / weights.sum())


def train(model: MlpModel, X, y, cfg: TrainConfig, sample_weight=None):
    """Minibatch Adam on (optionally weighted) softmax cross-entropy.

    Returns ``(model, losses)`` where ``losses`` holds the mean training loss
    of each epoch.  The model is updated in place.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    X, _ = _as_batch(model, X)
    if y.min() < 0 or y.max() >= model.spec.output_dim:
        raise ValueError("labels outside the output range")
    w = None if sample_weight is None else np.asarray(sample_weight, dtype=float)

    params = model.weights + model.biases
    opt = Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n_layers = len(model.weights)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pre, acts, probs = _forward(model, X[idx])
            onehot = np.zeros_like(probs)
            onehot[np.arange(len(idx)), y[idx]] = 1.0
            if w is None:
                bw = np.full(len(idx), 1.0 / len(idx))
            else:
                bw = w[idx] / w[idx].sum()
            total += cross_entropy(probs, y[idx], bw) * len(idx)
            # softmax + cross-entropy fused gradient
            dlogits = (probs - onehot) * bw[:, None]
            gW, gb = _backward(model, pre, acts, dlogits)
            if cfg.weight_decay:
                gW = [g + cfg.weight_decay * W for g, W in zip(gW, model.weights)]
            opt.step(gW + gb)
        losses.append(total / len(X))
        if len(losses) % 25 == 0:
            log.debug("epoch %d loss %.5f", len(losses), losses[-1])
    model.weights = params[:n_layers]
    model.biases = params[n_layers:]
    if cfg.epochs:
        model.trained = True
    return model, losses


@dataclass(frozen=True)
class Readout:
    """Scalar read from the output layer.

    ``kind="component"`` reads probability ``index``; ``kind="half_distance"``
    reads ``|p[index] - 0.5|`` whose derivative is taken as 0 at the kink;
    ``kind="logit"`` reads ``log(p[index] / (1 - p[index]))`` computed from the
    logits, which stays informative where the probability saturates.
    """

    kind: str = "component"
    index: int = 1

    def __post_init__(self):
        if self.kind not in ("component", "half_distance", "logit"):
            raise ValueError(f"unsupported readout {self.kind!r}")


def input_gradient(model: MlpModel, features, readout: Readout = Readout()) -> np.ndarray:
    """d(readout)/d(features) for one input or a batch of inputs.

    ReLU'(0) is taken as 0.
    """
    X, single = _as_batch(model, features)
    pre, acts, probs = _forward(model, X)
    k = readout.index
    onehot = np.zeros(probs.shape[1])
    onehot[k] = 1.0
    if readout.kind == "logit":
        # d/dz [z_k - logsumexp(z_{-k})]
        dlogits = onehot - softmax(np.where(onehot > 0, -np.inf, pre[-1]))
    else:
        pk = probs[:, k:k + 1]
        dlogits = pk * (onehot - probs)
        if readout.kind == "half_distance":
            dlogits *= np.sign(probs[:, k] - 0.5)[:, None]
    delta = dlogits
    for j in range(len(model.weights) - 1, -1, -1):
        delta = delta @ model.weights[j].T
        if j:
            delta = delta * (pre[j - 1] > 0)
    grad = delta / model.input_scale
    return grad[0] if single else grad


def _logit_of(logits: np.ndarray, k: int) -> np.ndarray:
    others = np.delete(logits, k, axis=-1)
    top = others.max(axis=-1, keepdims=True)
    lse = top[..., 0] + np.log(np.exp(others - top).sum(axis=-1))
    return logits[..., k] - lse


def readout_value(model: MlpModel, features, readout: Readout = Readout()) -> np.ndarray:
    X, single = _as_batch(model, features)
    pre, _, probs = _forward(model, X)
    if readout.kind == "logit":
        v = _logit_of(pre[-1], readout.index)
    else:
        v = probs[:, readout.index]
        if readout.kind == "half_distance":
            v = np.abs(v - 0.5)
    return v[0] if single else v


# --------------------------------------------------------------------------
# serialization: JSON, floats written with repr so the round trip is exact


def to_dict(model: MlpModel) -> dict:
    spec = model.spec
    return {
        "format": "rfmia-mlp",
        "version": FORMAT_VERSION,
        "spec": {"input_dim": spec.input_dim, "hidden_dims": list(spec.hidden_dims),
                 "output_dim": spec.output_dim, "hidden_activation": spec.hidden_activation,
                 "output_activation": spec.output_activation},
        "trained": model.trained,
        "input_shift": model.input_shift.tolist(),
        "input_scale": model.input_scale.tolist(),
        "weights": [W.tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def from_dict(d: dict) -> MlpModel:
    if d.get("format") != "rfmia-mlp":
        raise ValueError("not an rfmia model dump")
    if d.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {d.get('version')}")
    spec = LayerSpec(**d["spec"])
    return MlpModel(spec, [np.array(W, dtype=float) for W in d["weights"]],
                    [np.array(b, dtype=float) for b in d["biases"]],
                    np.array(d["input_shift"], dtype=float),
                    np.array(d["input_scale"], dtype=float), bool(d["trained"]))


def save(model: MlpModel, path) -> None:
    Path(path).write_text(json.dumps(to_dict(model)))


def load(path) -> MlpModel:
    return from_dict(json.loads(Path(path).read_text()))
