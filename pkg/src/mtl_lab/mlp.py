"""Fully connected network trained from scratch with Adam.

One architecture serves both halves of the two-stage localizer: ELU hidden
layers with either a linear head (coordinate regression, MSE) or a softmax
head (transmitter-count classification, cross-entropy). Everything is plain
numpy in double precision, so gradients can be verified against finite
differences and checkpoints round-trip bit for bit.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .datasets import Normalizer
from .propagation import TransmitterSet
from .streams import seed_sequence

HEADS = ("linear", "softmax")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MlpNetwork:
    """Layer dimensions plus per-layer weights (n_in, n_out) and biases."""

    layer_dims: tuple
    weights: list
    biases: list
    output_head: str = "linear"

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output layers")
        if self.output_head not in HEADS:
            raise ValueError(f"output_head must be one of {HEADS}")
        for l, (din, dout) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            if self.weights[l].shape != (din, dout) or self.biases[l].shape != (dout,):
                raise ValueError(f"layer {l}: parameter shapes do not match layer_dims")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims)

    def clone(self) -> "MlpNetwork":
        return MlpNetwork(tuple(self.layer_dims), [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.output_head)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 40
    l2: float = 0.01
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.l2 < 0 or self.epochs < 0:
            raise ValueError("invalid training configuration")


@dataclass
class AdamState:
    m_w: list
    v_w: list
    m_b: list
    v_b: list
    t: int = 0

    @staticmethod
    def for_net(net: MlpNetwork) -> "AdamState":
        return AdamState(m_w=[np.zeros_like(w) for w in net.weights],
                         v_w=[np.zeros_like(w) for w in net.weights],
                         m_b=[np.zeros_like(b) for b in net.biases],
                         v_b=[np.zeros_like(b) for b in net.biases])


@dataclass
class TrainHistory:
    train_loss: list
    val_loss: list
    best_epoch: int


def init_xavier(layer_dims, output_head: str, rng: np.random.Generator) -> MlpNetwork:
    """Glorot-uniform weights, U(+-sqrt(6/(fan_in+fan_out))); zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (din + dout))
        weights.append(rng.uniform(-limit, limit, size=(din, dout)))
        biases.append(np.zeros(dout))
    return MlpNetwork(dims, weights, biases, output_head)


def elu(x: np.ndarray) -> np.ndarray:
    """ELU with alpha=1: x for x > 0, exp(x) - 1 otherwise."""
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of elu; continuous at 0 where both branches equal 1."""
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward(net: MlpNetwork, x: np.ndarray):
    """Batch forward pass; returns (outputs, cache) with cache for backward.

    cache holds the layer inputs and hidden pre-activations, reused to avoid
    recomputing exp() in the backward pass.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != net.layer_dims[0]:
        raise ValueError(f"feature length {x.shape[1]} does not match input "
                         f"dimension {net.layer_dims[0]}")
    activations = [x]
    pre_acts = []
    a = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        pre_acts.append(z)
        a = elu(z) if l < last else z
        activations.append(a)
    out = softmax(a) if net.output_head == "softmax" else a
    return out, (activations, pre_acts)


def predict(net: MlpNetwork, x: np.ndarray) -> np.ndarray:
    out, _ = forward(net, x)
    return out


def loss_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared difference over batch and output units."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    return float(np.mean((pred - target) ** 2))


def loss_xent(probs: np.ndarray, classes: np.ndarray) -> float:
    """Batch-averaged negative log probability of the true class index."""
    probs = np.atleast_2d(probs)
    classes = np.atleast_1d(classes).astype(int)
    picked = probs[np.arange(len(classes)), classes]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def l2_penalty(net: MlpNetwork, l2: float) -> float:
    """l2/2 * sum of squared weights (biases excluded)."""
    return 0.5 * l2 * sum(float(np.sum(w * w)) for w in net.weights)


def batch_objective(net: MlpNetwork, out: np.ndarray, target: np.ndarray, l2: float) -> float:
    if net.output_head == "softmax":
        data = loss_xent(out, target)
    else:
        data = loss_mse(out, target)
    return data + l2_penalty(net, l2)


def backward(net: MlpNetwork, cache, target: np.ndarray, l2: float = 0.0):
    """Exact gradients of (data loss + L2 penalty) for every parameter.

    target: (B, K) values for the linear head, (B,) class indices for softmax.
    Returns (grad_weights, grad_biases) matching the network lists.
    """
    activations, pre_acts = cache
    batch = activations[0].shape[0]
    out_pre = pre_acts[-1]
    if net.output_head == "softmax":
        probs = softmax(out_pre)
        classes = np.atleast_1d(target).astype(int)
        delta = probs
        delta[np.arange(batch), classes] -= 1.0
        delta /= batch
    else:
        target = np.atleast_2d(target)
        delta = 2.0 * (out_pre - target) / target.size
    grad_w = [None] * len(net.weights)
    grad_b = [None] * len(net.biases)
    for l in range(len(net.weights) - 1, -1, -1):
        grad_w[l] = activations[l].T @ delta
        if l2:
            grad_w[l] += l2 * net.weights[l]
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ net.weights[l].T
            # hidden activation was elu; its derivative is a+1 on the negative branch
            z, a = pre_acts[l - 1], activations[l]
            delta *= np.where(z > 0, 1.0, a + 1.0)
    return grad_w, grad_b


def adam_step(state: AdamState, net: MlpNetwork, grads, config: TrainConfig):
    """One Adam update with bias correction; mutates net and state in place."""
    grad_w, grad_b = grads
    state.t += 1
    c1 = 1.0 - config.beta1 ** state.t
    c2 = 1.0 - config.beta2 ** state.t
    for params, gs, ms, vs in ((net.weights, grad_w, state.m_w, state.v_w),
                               (net.biases, grad_b, state.m_b, state.v_b)):
        for p, g, m, v in zip(params, gs, ms, vs):
            m *= config.beta1
            m += (1.0 - config.beta1) * g
            v *= config.beta2
            v += (1.0 - config.beta2) * (g * g)
            p -= config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return net, state


def _data_loss(net: MlpNetwork, x: np.ndarray, target: np.ndarray) -> float:
    out, _ = forward(net, x)
    if net.output_head == "softmax":
        return loss_xent(out, target)
    return loss_mse(out, target)


def train(net: MlpNetwork, train_data, val_data, config: TrainConfig):
    """Mini-batch Adam training with best-validation-loss checkpointing.

    train_data / val_data: (features, targets) pairs, already normalized.
    Shuffles every epoch with the config seed's stream; the last partial batch
    is used. Records per-epoch mean train loss and val loss (data terms, no
    penalty) and returns (network at the best val epoch, history).
    """
    x_train, y_train = train_data
    x_val, y_val = val_data
    n = len(x_train)
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds training size {n}")
    rng = np.random.Generator(np.random.PCG64(seed_sequence(config.seed, "shuffle")))
    state = AdamState.for_net(net)
    history = TrainHistory(train_loss=[], val_loss=[], best_epoch=-1)
    best_val = np.inf
    best_params = ([w.copy() for w in net.weights], [b.copy() for b in net.biases])
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            out, cache = forward(net, xb)
            data = loss_xent(out, yb) if net.output_head == "softmax" else loss_mse(out, yb)
            if not np.isfinite(data):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            grads = backward(net, cache, yb, config.l2)
            adam_step(state, net, grads, config)
            epoch_losses.append(data)
        val = _data_loss(net, x_val, y_val)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(float(np.mean(epoch_losses)))
        history.val_loss.append(val)
        if val < best_val:
            best_val = val
            history.best_epoch = epoch
            best_params = ([w.copy() for w in net.weights], [b.copy() for b in net.biases])
    best_net = MlpNetwork(tuple(net.layer_dims), best_params[0], best_params[1],
                          net.output_head)
    return best_net, history


def count_multiplications(net: MlpNetwork) -> int:
    """Real multiplications per forward pass: sum of (N_in + 1) * N_out."""
    dims = net.layer_dims
    return int(sum((dims[l - 1] + 1) * dims[l] for l in range(1, len(dims))))


def predict_count(classifier: MlpNetwork, rss: np.ndarray, norm: Normalizer):
    """Stage one: estimated transmitter count and class probabilities.

    Classes are counts 1..C; exact probability ties resolve to the smaller
    count. Accepts a single RSS vector or a batch.
    """
    rss = np.asarray(rss, dtype=float)
    single = rss.ndim == 1
    probs = predict(classifier, norm.normalize_features(np.atleast_2d(rss)))
    counts = np.argmax(probs, axis=1) + 1
    if single:
        return int(counts[0]), probs[0]
    return counts, probs


def predict_coordinates(regressor: MlpNetwork, rss: np.ndarray,
                        norm: Normalizer) -> TransmitterSet:
    """Stage two: coordinates in meters for one RSS vector, clipped to the area."""
    rss = np.asarray(rss, dtype=float)
    if rss.ndim != 1:
        raise ValueError("predict_coordinates expects a single RSS vector")
    if regressor.layer_dims[-1] % 2 != 0:
        raise ValueError("regressor output size must be even (x/y pairs)")
    out = predict(regressor, norm.normalize_features(rss[None, :]))[0]
    coords = norm.invert_targets(out).reshape(-1, 2)
    coords[:, 0] = np.clip(coords[:, 0], 0.0, norm.area_width)
    coords[:, 1] = np.clip(coords[:, 1], 0.0, norm.area_height)
    return TransmitterSet(coords)


def predict_coordinates_batch(regressor: MlpNetwork, rss: np.ndarray,
                              norm: Normalizer) -> np.ndarray:
    """Vectorized predict_coordinates: (B, N_s) RSS to (B, n_t, 2) meters."""
    out = predict(regressor, norm.normalize_features(np.atleast_2d(rss)))
    coords = norm.invert_targets(out).reshape(len(out), -1, 2)
    coords[:, :, 0] = np.clip(coords[:, :, 0], 0.0, norm.area_width)
    coords[:, :, 1] = np.clip(coords[:, :, 1], 0.0, norm.area_height)
    return coords


def save_model(net: MlpNetwork, norm, path) -> None:
    """Text checkpoint: dims/head/norm headers then row-major parameters.

    Values are written at 17 significant digits, which round-trips IEEE
    doubles exactly, so reloaded models predict bit for bit.
    """
    lines = [
        "dims=" + ",".join(str(d) for d in net.layer_dims),
        "head=" + net.output_head,
        "norm=" + (norm.encode() if norm is not None else "none"),
    ]
    for w, b in zip(net.weights, net.biases):
        for row in w:
            lines.append(" ".join(f"{v:.17g}" for v in row))
        lines.append(" ".join(f"{v:.17g}" for v in b))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path):
    """Inverse of save_model; returns (network, normalizer-or-None).

    Leading '#' comment lines are skipped.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    while lines and lines[0].startswith("#"):
        lines = lines[1:]
    if len(lines) < 3 or not lines[0].startswith("dims=") \
            or not lines[1].startswith("head=") or not lines[2].startswith("norm="):
        raise ValueError(f"{path}: malformed model checkpoint header")
    dims = tuple(int(d) for d in lines[0][5:].split(","))
    head = lines[1][5:]
    norm_text = lines[2][5:]
    norm = None if norm_text == "none" else Normalizer.decode(norm_text)
    weights, biases = [], []
    lineno = 3
    for din, dout in zip(dims[:-1], dims[1:]):
        rows = []
        for _ in range(din):
            rows.append([float(v) for v in lines[lineno].split()])
            lineno += 1
        weights.append(np.array(rows))
        biases.append(np.array([float(v) for v in lines[lineno].split()]))
        lineno += 1
        if weights[-1].shape != (din, dout) or biases[-1].shape != (dout,):
            raise ValueError(f"{path}: parameter block does not match dims header")
    return MlpNetwork(dims, weights, biases, head), norm
