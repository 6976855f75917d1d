"""
neuralnet.py
Minimal dense-network core in NumPy: dense layers with a forward tape for exact
reverse-mode gradients, inverted dropout, softmax, discrete KL divergence,
Adam/SGD with decoupled weight decay and a linear learning-rate decay.

Everything is computed in float64. Inputs are batches (rows are instances);
a 1-D input is treated as a batch of one.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from src.errors import NonFiniteGradientError, ScheduleError, ShapeError, TapeConsumedError

IDENTITY = "identity"
RELU = "relu"


# -------------
# Core layers
# -------------

@dataclass
class DenseLayer:
    """Affine map W·x + b followed by an activation; gradients accumulate in grad_weight/grad_bias."""
    name: str
    weight: np.ndarray
    bias: Optional[np.ndarray]
    activation: str = IDENTITY
    grad_weight: np.ndarray = field(init=False, repr=False)
    grad_bias: Optional[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"{self.name}: weight must be 2-D")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.weight.shape[0]:
                raise ShapeError(f"{self.name}: bias length {self.bias.shape[0]} != out_dim {self.weight.shape[0]}")
        if self.activation not in (IDENTITY, RELU):
            raise ValueError(f"unknown activation {self.activation!r}")
        self.zero_grad()

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])

    def zero_grad(self) -> None:
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = None if self.bias is None else np.zeros_like(self.bias)

    def named_parameters(self):
        """(name, value, gradient) triples in checkpoint order: weight, then bias."""
        out = [(f"{self.name}.weight", self.weight, self.grad_weight)]
        if self.bias is not None:
            out.append((f"{self.name}.bias", self.bias, self.grad_bias))
        return out

    def parameter_count(self) -> int:
        return int(self.weight.size + (0 if self.bias is None else self.bias.size))


def init_dense(name, in_dim, out_dim, rng, activation=IDENTITY, bias=True):
    """Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)); zero biases."""
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    weight = rng.uniform(-limit, limit, size=(out_dim, in_dim))
    return DenseLayer(name, weight, np.zeros(out_dim) if bias else None, activation)


@dataclass
class DenseCache:
    inputs: np.ndarray
    pre_activation: np.ndarray
    activation: str


class ForwardTape:
    """
    Activations and dropout masks recorded by one forward pass.

    Entries are taken (removed) as backward consumes them, so a second backward
    over the same tape fails instead of double-counting gradients.
    """

    def __init__(self):
        self._entries: Dict[str, object] = {}
        self._consumed = False

    def save(self, key, value):
        if self._consumed:
            raise TapeConsumedError("cannot record onto a consumed tape")
        if key in self._entries:
            raise ValueError(f"tape entry {key!r} recorded twice")
        self._entries[key] = value

    def take(self, key):
        if self._consumed:
            raise TapeConsumedError("tape was already consumed by a backward pass")
        try:
            return self._entries.pop(key)
        except KeyError:
            raise TapeConsumedError(f"tape entry {key!r} missing or already consumed") from None

    def finish(self):
        """Mark the tape consumed. Every recorded entry must have been used."""
        leftover = sorted(self._entries)
        self._entries.clear()
        self._consumed = True
        if leftover:
            raise ValueError(f"backward left tape entries unused: {leftover}")

    @property
    def consumed(self) -> bool:
        return self._consumed

    def relu_margin(self) -> float:
        """Smallest |pre-activation| over recorded ReLU layers (inf when there are none)."""
        margins = [np.abs(c.pre_activation).min() for c in self._entries.values()
                   if isinstance(c, DenseCache) and c.activation == RELU and c.pre_activation.size]
        return float(min(margins)) if margins else math.inf


def _as_batch(inputs, in_dim, name):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ShapeError(f"{name}: expected input width {in_dim}, got shape {np.shape(inputs)}")
    return x


def dense_forward(layer, inputs, tape=None, key=None):
    squeeze = np.ndim(inputs) == 1
    x = _as_batch(inputs, layer.in_dim, layer.name)
    pre = x @ layer.weight.T
    if layer.bias is not None:
        pre = pre + layer.bias
    out = np.maximum(pre, 0.0) if layer.activation == RELU else pre
    if tape is not None:
        tape.save(key or layer.name, DenseCache(x, pre, layer.activation))
    return out[0] if squeeze else out


def dense_backward(layer, cache, upstream):
    """Accumulate parameter gradients for one recorded forward; return the gradient w.r.t. the input."""
    g = np.asarray(upstream, dtype=np.float64)
    squeeze = g.ndim == 1
    g = g.reshape(cache.pre_activation.shape)
    if cache.activation == RELU:
        g = g * (cache.pre_activation > 0)
    layer.grad_weight += g.T @ cache.inputs
    if layer.bias is not None:
        layer.grad_bias += g.sum(axis=0)
    grad_input = g @ layer.weight
    return grad_input[0] if squeeze else grad_input


def backward(tape, layer, upstream, key=None):
    """Reverse one dense forward recorded on the tape under key (default: the layer name)."""
    return dense_backward(layer, tape.take(key or layer.name), upstream)


# ----------------------
# Regularization and probability helpers
# ----------------------

def dropout(inputs, rate, mode, rng):
    """
    Inverted dropout. Returns (output, mask) where mask holds 0 or 1/(1-rate);
    eval mode (or rate 0) is the identity with an all-ones mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(inputs, dtype=np.float64)
    if mode != "train" or rate == 0.0:
        return x, np.ones_like(x)
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask, upstream):
    return np.asarray(upstream, dtype=np.float64) * mask


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs, upstream):
    """Gradient w.r.t. logits given the softmax output and the gradient w.r.t. it."""
    dot = (probs * upstream).sum(axis=-1, keepdims=True)
    return probs * (upstream - dot)


def kl_discrete(p, q):
    """KL(p || q) along the last axis, with 0·ln(0/q) = 0 and q clamped below at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"KL operands differ in shape: {p.shape} vs {q.shape}")
    q = np.maximum(q, 1e-12)
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * np.log(safe_p / q), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_grad_logits(p, q):
    """Gradient of KL(softmax(logits) || q) w.r.t. the logits, q held fixed."""
    q = np.maximum(np.asarray(q, dtype=np.float64), 1e-12)
    log_ratio = np.log(np.maximum(p, 1e-300)) - np.log(q)
    return softmax_backward(p, log_ratio)


# ---------------
# Optimizers
# ---------------

def linear_decay_lr(step, total_steps, base_lr):
    if step < 0 or step > total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * (1.0 - step / total_steps)


@dataclass
class OptimizerState:
    """Moments keyed by parameter name, plus the schedule. total_steps=None keeps the LR constant."""
    base_lr: float
    weight_decay: float = 0.0
    total_steps: Optional[int] = None
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: Dict[str, List[np.ndarray]] = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.total_steps is None:
            return self.base_lr
        return linear_decay_lr(min(self.step, self.total_steps), self.total_steps, self.base_lr)


def _named(layers: Iterable[DenseLayer]):
    params = []
    for layer in layers:
        params.extend(layer.named_parameters())
    for name, _, grad in params:
        if not np.isfinite(grad).all():
            raise NonFiniteGradientError(name)
    return params


def adam_step(layers, state):
    """One Adam update (bias-corrected) with decoupled weight decay; zeroes the gradients afterward."""
    layers = list(layers)
    params = _named(layers)
    lr = state.current_lr()
    state.step += 1
    t = state.step
    for name, value, grad in params:
        if name not in state.moments:
            state.moments[name] = [np.zeros_like(value), np.zeros_like(value)]
        m, v = state.moments[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        value -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * value)
    for layer in layers:
        layer.zero_grad()


def sgd_step(layers, state):
    layers = list(layers)
    params = _named(layers)
    lr = state.current_lr()
    state.step += 1
    for _, value, grad in params:
        value -= lr * (grad + state.weight_decay * value)
    for layer in layers:
        layer.zero_grad()


def optimizer_step(layers, state):
    if state.kind == "adam":
        adam_step(layers, state)
    elif state.kind == "sgd":
        sgd_step(layers, state)
    else:
        raise ValueError(f"unknown optimizer {state.kind!r}")


# ----------------------
# Gradient checking
# ----------------------

def gradient_check(loss_fn: Callable[[], float], accumulate_fn: Callable[[], None], layers, eps=1e-4):
    """
    Compare analytic gradients against central differences.

    accumulate_fn runs forward+backward once (gradients accumulate into the layers);
    loss_fn re-evaluates the loss deterministically. Returns the maximum relative
    error |a - n| / max(|a|, |n|, 1e-3·max|a|, 1e-8) over every parameter entry.
    """
    layers = list(layers)
    for layer in layers:
        layer.zero_grad()
    accumulate_fn()
    analytic = {name: grad.copy() for layer in layers for name, _, grad in layer.named_parameters()}
    scale = max((np.abs(g).max() for g in analytic.values() if g.size), default=0.0)
    worst = 0.0
    for layer in layers:
        for name, value, _ in layer.named_parameters():
            flat = value.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            for i in range(flat.shape[0]):
                original = flat[i]
                flat[i] = original + eps
                plus = loss_fn()
                flat[i] = original - eps
                minus = loss_fn()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * eps)
                denom = max(abs(a_flat[i]), abs(numeric), 1e-3 * scale, 1e-8)
                worst = max(worst, abs(a_flat[i] - numeric) / denom)
    for layer in layers:
        layer.zero_grad()
    return worst
