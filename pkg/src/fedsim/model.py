"""A small numpy MLP classifier with hand-written backprop and SGD-momentum training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamVector, make_layout


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths from input to class count; ReLU hidden layers, softmax output."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.layer_sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def layout(self):
        shapes = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            shapes.append((f"fc{i}.weight", fan_in * fan_out))
            shapes.append((f"fc{i}.bias", fan_out))
        return make_layout(shapes)

    @property
    def n_params(self) -> int:
        return sum(seg.length for seg in self.layout())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def _unpack(values: np.ndarray, spec: MLPSpec):
    layers = []
    pos = 0
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        w = values[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = values[pos : pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def _weight_mask(spec: MLPSpec) -> np.ndarray:
    mask = np.zeros(spec.n_params)
    for seg in spec.layout():
        if seg.name.endswith(".weight"):
            mask[seg.offset : seg.offset + seg.length] = 1.0
    return mask


def init_model(spec: MLPSpec, seed: int) -> ParamVector:
    """Uniform(+-sqrt(6 / fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.n_params)
    for seg, (fan_in, fan_out) in zip(
        spec.layout()[::2], zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])
    ):
        bound = np.sqrt(6.0 / fan_in)
        values[seg.offset : seg.offset + seg.length] = rng.uniform(-bound, bound, fan_in * fan_out)
    return ParamVector(values, spec.layout())


def _check_features(features: np.ndarray, spec: MLPSpec) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected features of shape (n, {spec.input_dim}), got {x.shape}")
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(values: np.ndarray, spec: MLPSpec, x: np.ndarray):
    acts = [x]
    h = x
    layers = _unpack(values, spec)
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return acts, layers


def forward(params: ParamVector, spec: MLPSpec, features) -> np.ndarray:
    x = _check_features(features, spec)
    acts, _ = _forward(params.values, spec, x)
    return _softmax(acts[-1])


def predict(params: ParamVector, spec: MLPSpec, features) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(forward(params, spec, features), axis=1)


def _check_labels(labels, spec: MLPSpec, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise ValueError(f"{y.size} labels for {n} samples")
    if y.size and (y.min() < 0 or y.max() >= spec.n_classes):
        raise ValueError(f"labels must lie in [0, {spec.n_classes})")
    return y


def loss(params: ParamVector, spec: MLPSpec, features, labels, weight_decay: float = 0.0) -> float:
    """Mean cross-entropy plus ``weight_decay / 2 * ||weights||^2`` (biases excluded)."""
    x = _check_features(features, spec)
    y = _check_labels(labels, spec, x.shape[0])
    acts, _ = _forward(params.values, spec, x)
    logits = acts[-1]
    m = logits.max(axis=1, keepdims=True)
    logz = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    ce = float(np.mean(logz - logits[np.arange(y.size), y]))
    w = params.values * _weight_mask(spec)
    return ce + 0.5 * weight_decay * float(w @ w)


def _grad_values(values: np.ndarray, spec: MLPSpec, x, y, weight_decay, mask) -> np.ndarray:
    acts, layers = _forward(values, spec, x)
    n = x.shape[0]
    g = _softmax(acts[-1])
    g[np.arange(n), y] -= 1.0
    g /= n
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append(((acts[i].T @ g).reshape(-1), g.sum(axis=0)))
        if i > 0:
            g = (g @ w.T) * (acts[i] > 0)
    flat = np.concatenate([part for pair in reversed(grads) for part in pair])
    return flat + weight_decay * mask * values


def grad(params: ParamVector, spec: MLPSpec, features, labels, weight_decay: float = 0.0) -> ParamVector:
    """Analytic gradient of :func:`loss`."""
    x = _check_features(features, spec)
    y = _check_labels(labels, spec, x.shape[0])
    return ParamVector(
        _grad_values(params.values, spec, x, y, weight_decay, _weight_mask(spec)), params.layout
    )


def train_local(global_params: ParamVector, spec: MLPSpec, dataset, cfg: TrainConfig, seed):
    """Local SGD with momentum starting from the global model.

    Momentum buffers start at zero. Returns ``(theta, theta - global_params)``.
    """
    x = _check_features(dataset.features, spec)
    y = _check_labels(dataset.labels, spec, x.shape[0])
    if x.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    mask = _weight_mask(spec)
    w = np.array(global_params.values, dtype=np.float64)
    buf = np.zeros_like(w)
    n = x.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            g = _grad_values(w, spec, x[batch], y[batch], cfg.weight_decay, mask)
            buf = cfg.momentum * buf + g
            w = w - cfg.learning_rate * buf
    theta = ParamVector(w, global_params.layout)
    return theta, theta - global_params


def accuracy(params: ParamVector, spec: MLPSpec, dataset) -> float:
    if len(dataset.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(params, spec, dataset.features)
    return float(np.mean(pred == np.asarray(dataset.labels)))

