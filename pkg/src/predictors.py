"""
predictors.py
The six single-head return predictors: Factors Alone, News Alone, FININ and the
three representation-fusion methods (combination, summation, attention).

Layer stacks per kind (H = hidden_dim, every head ends in a linear output layer
whose input goes through dropout):
    FACTORS_ALONE       two ReLU dense layers with additive skips (bias-free projection when d_f != H)
    NEWS_ALONE          linear output on x_n
    FUSION_COMBINATION  ReLU bottleneck x_n -> ceil(d_n/2), concat with x_f, ReLU fusion layer -> H
    FUSION_SUMMATION    linear projections h_f, h_n -> H, summed
    FUSION_ATTENTION    same projections, softmax weights from a logits layer on (x_f ⊕ x_n)
    FININ               same projections, news weight = h_f·h_n / sqrt(H), u = h_f + weight·h_n
"""
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from app.models import PredictorKind, PredictorSpec
from src.errors import ShapeError, WrongKindError
from src.neuralnet import (IDENTITY, RELU, DenseLayer, ForwardTape, backward, dense_forward, dropout,
                           dropout_backward, init_dense, softmax, softmax_backward)


@dataclass
class PredictorParams:
    spec: PredictorSpec
    layers: Dict[str, DenseLayer]
    prefix: str = ""

    def layer(self, short_name) -> DenseLayer:
        return self.layers[short_name]

    def layer_list(self):
        return list(self.layers.values())

    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.layers.values())

    def zero_grad(self):
        for layer in self.layers.values():
            layer.zero_grad()


def bottleneck_dim(d_n):
    return int(math.ceil(d_n / 2))


def build(spec, rng, prefix="", zero_init=False):
    """Initialize the layer stack for spec.kind; zero_init gives an all-zero map (useful in tests)."""
    H, d_f, d_n = spec.hidden_dim, spec.d_f, spec.d_n
    plan = []
    if spec.kind == PredictorKind.FACTORS_ALONE:
        plan.append(("hidden1", d_f, H, RELU, True))
        if d_f != H:
            plan.append(("skip1", d_f, H, IDENTITY, False))
        plan.append(("hidden2", H, H, RELU, True))
        plan.append(("output", H, 1, IDENTITY, True))
    elif spec.kind == PredictorKind.NEWS_ALONE:
        plan.append(("output", d_n, 1, IDENTITY, True))
    elif spec.kind == PredictorKind.FUSION_COMBINATION:
        b = bottleneck_dim(d_n)
        plan.append(("bottleneck", d_n, b, RELU, True))
        plan.append(("fusion", d_f + b, H, RELU, True))
        plan.append(("output", H, 1, IDENTITY, True))
    elif spec.kind in (PredictorKind.FUSION_SUMMATION, PredictorKind.FUSION_ATTENTION, PredictorKind.FININ):
        plan.append(("proj_f", d_f, H, IDENTITY, True))
        plan.append(("proj_n", d_n, H, IDENTITY, True))
        if spec.kind == PredictorKind.FUSION_ATTENTION:
            plan.append(("logits", d_f + d_n, 2, IDENTITY, True))
        plan.append(("output", H, 1, IDENTITY, True))
    else:
        raise WrongKindError(f"unknown predictor kind {spec.kind}")

    layers = {}
    for short, fan_in, fan_out, activation, bias in plan:
        layer = init_dense(prefix + short, fan_in, fan_out, rng, activation=activation, bias=bias)
        if zero_init:
            layer.weight[...] = 0.0
        layers[short] = layer
    return PredictorParams(spec, layers, prefix)


def _inputs(params, x_f, x_n):
    x_f = np.asarray(x_f, dtype=np.float64)
    x_n = np.asarray(x_n, dtype=np.float64)
    if x_f.ndim == 1:
        x_f = x_f[None, :]
    if x_n.ndim == 1:
        x_n = x_n[None, :]
    spec = params.spec
    if x_f.shape[1:] != (spec.d_f,) or x_n.shape[1:] != (spec.d_n,) or x_f.shape[0] != x_n.shape[0]:
        raise ShapeError(f"inputs {x_f.shape}/{x_n.shape} do not match d_f={spec.d_f}, d_n={spec.d_n}")
    return x_f, x_n


def predict_batch(params, x_f, x_n, mode="eval", rng=None, tape=None):
    """Predictions for a batch (shape (B,)). Train mode applies dropout to the output layer's input."""
    x_f, x_n = _inputs(params, x_f, x_n)
    kind = params.spec.kind
    L = params.layers
    p = params.prefix

    if kind == PredictorKind.FACTORS_ALONE:
        a1 = dense_forward(L["hidden1"], x_f, tape)
        s1 = dense_forward(L["skip1"], x_f, tape) if "skip1" in L else x_f
        h1 = a1 + s1
        h2 = dense_forward(L["hidden2"], h1, tape) + h1
        head_input = h2
    elif kind == PredictorKind.NEWS_ALONE:
        head_input = x_n
    elif kind == PredictorKind.FUSION_COMBINATION:
        z = dense_forward(L["bottleneck"], x_n, tape)
        head_input = dense_forward(L["fusion"], np.concatenate([x_f, z], axis=1), tape)
    else:
        h_f = dense_forward(L["proj_f"], x_f, tape)
        h_n = dense_forward(L["proj_n"], x_n, tape)
        if kind == PredictorKind.FUSION_SUMMATION:
            head_input = h_f + h_n
        elif kind == PredictorKind.FUSION_ATTENTION:
            a = softmax(dense_forward(L["logits"], np.concatenate([x_f, x_n], axis=1), tape))
            head_input = a[:, :1] * h_f + a[:, 1:] * h_n
            if tape is not None:
                tape.save(p + "attention", (h_f, h_n, a))
        else:
            weight = (h_f * h_n).sum(axis=1) / math.sqrt(params.spec.hidden_dim)
            head_input = h_f + weight[:, None] * h_n
            if tape is not None:
                tape.save(p + "finin", (h_f, h_n, weight))

    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    dropped, mask = dropout(head_input, params.spec.dropout_rate, mode, rng)
    if tape is not None:
        tape.save(p + "dropout", mask)
    return dense_forward(L["output"], dropped, tape)[:, 0]


def predict(params, x_f, x_n, mode="eval", rng=None, tape=None):
    """Scalar prediction for one instance."""
    return float(predict_batch(params, np.atleast_2d(x_f), np.atleast_2d(x_n), mode, rng, tape)[0])


def predictor_backward(params, tape, upstream, finish=True):
    """
    Reverse a recorded forward: accumulate parameter gradients given dL/dŷ (shape (B,)).
    Returns (dL/dx_f, dL/dx_n). finish=False leaves the tape open for a caller that shares it.
    """
    kind = params.spec.kind
    L = params.layers
    p = params.prefix
    g_y = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)

    g_head = backward(tape, L["output"], g_y)
    g_head = dropout_backward(tape.take(p + "dropout"), g_head)
    batch = g_head.shape[0]

    if kind == PredictorKind.FACTORS_ALONE:
        g_h1 = g_head + backward(tape, L["hidden2"], g_head)
        g_xf = backward(tape, L["hidden1"], g_h1)
        g_xf = g_xf + (backward(tape, L["skip1"], g_h1) if "skip1" in L else g_h1)
        g_xn = np.zeros((batch, params.spec.d_n))
    elif kind == PredictorKind.NEWS_ALONE:
        g_xf = np.zeros((batch, params.spec.d_f))
        g_xn = g_head
    elif kind == PredictorKind.FUSION_COMBINATION:
        g_cat = backward(tape, L["fusion"], g_head)
        g_xf = g_cat[:, :params.spec.d_f]
        g_xn = backward(tape, L["bottleneck"], g_cat[:, params.spec.d_f:])
    else:
        if kind == PredictorKind.FUSION_SUMMATION:
            g_hf, g_hn = g_head, g_head
            g_extra = None
        elif kind == PredictorKind.FUSION_ATTENTION:
            h_f, h_n, a = tape.take(p + "attention")
            g_hf = a[:, :1] * g_head
            g_hn = a[:, 1:] * g_head
            g_a = np.stack([(g_head * h_f).sum(axis=1), (g_head * h_n).sum(axis=1)], axis=1)
            g_extra = backward(tape, L["logits"], softmax_backward(a, g_a))
        else:
            h_f, h_n, weight = tape.take(p + "finin")
            root = math.sqrt(params.spec.hidden_dim)
            g_w = (g_head * h_n).sum(axis=1, keepdims=True)
            g_hf = g_head + g_w * h_n / root
            g_hn = weight[:, None] * g_head + g_w * h_f / root
            g_extra = None
        g_xf = backward(tape, L["proj_f"], g_hf)
        g_xn = backward(tape, L["proj_n"], g_hn)
        if g_extra is not None:
            g_xf = g_xf + g_extra[:, :params.spec.d_f]
            g_xn = g_xn + g_extra[:, params.spec.d_f:]

    if finish:
        tape.finish()
    return g_xf, g_xn


def attention_weights(params, x_f, x_n):
    """(a_f, a_n) of a FUSION_ATTENTION predictor; arrays of shape (B,)."""
    if params.spec.kind != PredictorKind.FUSION_ATTENTION:
        raise WrongKindError(f"attention weights need FUSION_ATTENTION, got {params.spec.kind.value}")
    x_f, x_n = _inputs(params, x_f, x_n)
    a = softmax(dense_forward(params.layers["logits"], np.concatenate([x_f, x_n], axis=1)))
    return a[:, 0], a[:, 1]


def squared_error_step(params, x_f, x_n, r, mode="train", rng=None):
    """Batch-mean squared error with gradients accumulated into params. Returns the loss."""
    tape = ForwardTape()
    y = predict_batch(params, x_f, x_n, mode, rng, tape)
    residual = np.asarray(r, dtype=np.float64) - y
    loss = float(np.mean(residual ** 2))
    predictor_backward(params, tape, -2.0 * residual / residual.shape[0])
    return loss
