"""A small fully-connected classifier with exact numpy gradients.

Clients train locally and contribute the accumulated parameter delta
rescaled by the client learning rate, so the server-side update
``w <- w - eta * AGR(contributions)`` treats every contribution as a
gradient-like descent direction regardless of how many local steps
produced it.
"""

from dataclasses import dataclass

import numpy as np

from .rng import stream


@dataclass
class ModelSpec:
    """Layer widths run input -> hidden... -> classes; ReLU between."""

    layer_widths: tuple = (196, 64, 10)
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def dim(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_widths, self.layer_widths[1:]))


@dataclass
class TrainConfig:
    client_lr: float = 0.1
    local_epochs: int = 1
    batch_size: int = 32
    server_lr: float = 1.0
    rounds: int = 100
    seed: int = 0

    def __post_init__(self):
        if min(self.client_lr, self.server_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.local_epochs < 0 or self.batch_size < 1 or self.rounds < 1:
            raise ValueError("epochs/batch size/rounds out of range")


def init_params(spec: ModelSpec) -> np.ndarray:
    """Fan-in scaled uniform weights, zero biases, flattened."""
    chunks = []
    for layer, (fan_in, fan_out) in enumerate(zip(spec.layer_widths, spec.layer_widths[1:])):
        rng = stream(spec.init_seed, f"init/layer{layer}")
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unflatten(w: np.ndarray, spec: ModelSpec):
    """Split a flat vector into [(W, b), ...] views."""
    layers = []
    offset = 0
    for fan_in, fan_out in zip(spec.layer_widths, spec.layer_widths[1:]):
        W = w[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = w[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    if offset != w.size:
        raise ValueError(f"vector of length {w.size} does not fit {spec.layer_widths}")
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])


def _forward(w: np.ndarray, spec: ModelSpec, X: np.ndarray):
    """Logits plus the per-layer activations needed for backprop."""
    layers = unflatten(w, spec)
    activations = [X]
    pre = []
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        activations.append(a)
    return activations[-1], activations, pre


def logits(w: np.ndarray, spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    return _forward(w, spec, X)[0]


def predict(w: np.ndarray, spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    return np.argmax(logits(w, spec, X), axis=1)


def loss_and_grad(w: np.ndarray, spec: ModelSpec, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and its flat gradient."""
    out, activations, pre = _forward(w, spec, X)
    n = X.shape[0]
    shifted = out - out.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), y]))

    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n

    layers = unflatten(w, spec)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads[i] = (activations[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W.T) * (pre[i - 1] > 0.0)
    return loss, flatten(grads)


def batch_loss(w: np.ndarray, spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> float:
    out = logits(w, spec, X)
    shifted = out - out.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(X.shape[0]), y]))


def local_train(w: np.ndarray, spec: ModelSpec, X: np.ndarray, y: np.ndarray,
                cfg: TrainConfig, seed: int) -> np.ndarray:
    """One client's round contribution.

    Runs ``local_epochs`` of seeded minibatch SGD at ``client_lr`` and
    returns (w_start - w_end) / client_lr: the accumulated batch
    gradients along the local path, dimensionally a gradient.
    """
    if len(y) == 0:
        raise ValueError("client shard is empty")
    w_run = w.copy()
    rng = stream(seed, "batch-order")
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, g = loss_and_grad(w_run, spec, X[batch], y[batch])
            w_run -= cfg.client_lr * g
    return (w - w_run) / cfg.client_lr


def evaluate(w: np.ndarray, spec: ModelSpec, X: np.ndarray, y: np.ndarray,
             trigger=None) -> dict:
    """Main-task accuracy, plus backdoor accuracy when a trigger is given.

    BA counts trigger-stamped test examples (excluding those whose true
    label already is the target) classified as the target label.
    """
    preds = predict(w, spec, X)
    ma = float(np.mean(preds == y))
    if trigger is None:
        return {"MA": ma, "BA": 0.0}

    side = int(np.sqrt(X.shape[1]))
    keep = y != trigger.target_label
    images = X[keep].reshape(-1, side, side)
    stamped = images.copy()
    r, c, h, wd = trigger.row, trigger.col, trigger.height, trigger.width
    stamped[:, r:r + h, c:c + wd] = trigger.pixel_value
    preds_bd = predict(w, spec, stamped.reshape(stamped.shape[0], -1))
    ba = float(np.mean(preds_bd == trigger.target_label))
    return {"MA": ma, "BA": ba}
