"""
mixture.py
Two-component gated mixture: a factors component (FACTORS_ALONE), a fusion
component (FUSION_COMBINATION) and a dense gate on (x_f ⊕ x_n) whose softmax
weights combine the two predictions. Two training objectives:

  conventional  mean (r - ŷ)² through the mixture prediction (all groups entangled)
  decoupled     each component on its own squared error, plus the gate matched by
                KL to a target distribution built from the components' current errors
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from app.models import MixtureSpec, PredictorKind, Split
from src.errors import MetricError, ShapeError, TrainingDivergedError
from src.neuralnet import (DenseLayer, ForwardTape, backward, dense_forward, init_dense, kl_discrete, kl_grad_logits,
                           softmax, softmax_backward)
from src.predictors import PredictorParams, build, predict_batch, predictor_backward


class Batch(NamedTuple):
    x_f: np.ndarray
    x_n: np.ndarray
    r: np.ndarray


@dataclass
class MixtureModel:
    spec: MixtureSpec
    factors: PredictorParams
    fusion: PredictorParams
    gate: DenseLayer
    tau: float = 0.01

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature tau must be positive")

    def layer_list(self):
        return self.factors.layer_list() + self.fusion.layer_list() + [self.gate]

    def parameter_count(self) -> int:
        return self.factors.parameter_count() + self.fusion.parameter_count() + self.gate.parameter_count()

    def zero_grad(self):
        for layer in self.layer_list():
            layer.zero_grad()


def build_mixture(spec, rng, tau=0.01, component_rngs=None):
    """
    Factors component, fusion component, then the gate, all drawn from rng unless
    component_rngs gives separate (factors, fusion) generators; the gate always uses rng.
    """
    rng_f, rng_u = component_rngs if component_rngs is not None else (rng, rng)
    factors = build(spec.component(PredictorKind.FACTORS_ALONE), rng_f, prefix="factors.")
    fusion = build(spec.component(PredictorKind.FUSION_COMBINATION), rng_u, prefix="fusion.")
    gate = init_dense("gate", spec.d_f + spec.d_n, 2, rng)
    return MixtureModel(spec, factors, fusion, gate, tau)


def _gate_logits(model, x_f, x_n, tape=None):
    x_f = np.atleast_2d(np.asarray(x_f, dtype=np.float64))
    x_n = np.atleast_2d(np.asarray(x_n, dtype=np.float64))
    if x_f.shape[1] != model.spec.d_f or x_n.shape[1] != model.spec.d_n:
        raise ShapeError(f"inputs {x_f.shape}/{x_n.shape} do not match d_f={model.spec.d_f}, d_n={model.spec.d_n}")
    return dense_forward(model.gate, np.concatenate([x_f, x_n], axis=1), tape)


def gate_probs(model, x_f, x_n):
    """(p_f, p_u), each of shape (B,)."""
    p = softmax(_gate_logits(model, x_f, x_n))
    return p[:, 0], p[:, 1]


def _forward(model, x_f, x_n, mode, rng, tape):
    g_f = predict_batch(model.factors, x_f, x_n, mode, rng, tape)
    g_u = predict_batch(model.fusion, x_f, x_n, mode, rng, tape)
    p = softmax(_gate_logits(model, x_f, x_n, tape))
    return g_f, g_u, p


def mixture_predict(model, x_f, x_n, mode="eval", rng=None):
    g_f, g_u, p = _forward(model, x_f, x_n, mode, rng, None)
    return p[:, 0] * g_f + p[:, 1] * g_u


def component_predictions(model, x_f, x_n):
    """Eval-mode component outputs and gate probabilities, for per-component evaluation."""
    g_f, g_u, p = _forward(model, x_f, x_n, "eval", None, None)
    return {"g_f": g_f, "g_u": g_u, "p_f": p[:, 0], "p_u": p[:, 1], "mixture": p[:, 0] * g_f + p[:, 1] * g_u}


def _check_finite(loss, what):
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite {what} loss")


@dataclass(frozen=True)
class ConventionalLoss:
    loss: float
    mse_f: float
    mse_u: float


def conventional_loss_step(model, batch, mode="train", rng=None):
    """
    Mean (r - ŷ)² of the mixture prediction; gradients accumulate into θ_f, θ_u and φ jointly.
    Also reports each component's own squared error on the batch, for training curves.
    """
    r = np.asarray(batch.r, dtype=np.float64)
    if r.size == 0:
        raise ShapeError("empty batch")
    tape = ForwardTape()
    g_f, g_u, p = _forward(model, batch.x_f, batch.x_n, mode, rng, tape)
    y = p[:, 0] * g_f + p[:, 1] * g_u
    residual = r - y
    loss = float(np.mean(residual ** 2))
    _check_finite(loss, "conventional")

    g_y = -2.0 * residual / r.shape[0]
    predictor_backward(model.factors, tape, g_y * p[:, 0], finish=False)
    predictor_backward(model.fusion, tape, g_y * p[:, 1], finish=False)
    g_p = g_y[:, None] * np.stack([g_f, g_u], axis=1)
    backward(tape, model.gate, softmax_backward(p, g_p))
    tape.finish()
    return ConventionalLoss(loss, float(np.mean((r - g_f) ** 2)), float(np.mean((r - g_u) ** 2)))


def target_distribution(r, y_f, y_u, tau):
    """softmax(-(r - y_f)²/τ, -(r - y_u)²/τ): more mass on the component with the smaller error."""
    if not tau > 0:
        raise ValueError("temperature tau must be positive")
    r = np.asarray(r, dtype=np.float64)
    scores = np.stack([-(r - np.asarray(y_f)) ** 2 / tau, -(r - np.asarray(y_u)) ** 2 / tau], axis=-1)
    q = softmax(scores)
    return q[..., 0], q[..., 1]


@dataclass(frozen=True)
class DecoupledLoss:
    independent: float
    matching: float
    targets: np.ndarray
    mse_f: float
    mse_u: float

    @property
    def total(self) -> float:
        return self.independent + self.matching


def decoupled_loss_step(model, batch, lambda_match=1.0, mode="train", rng=None, targets=None):
    """
    Decoupled objective. The independent term trains each component on its own residual;
    the matching term trains only the gate, against targets computed from the current
    component predictions with gradients stopped (the latest-value estimate of the
    component parameters). Pass targets to hold them fixed instead.
    """
    r = np.asarray(batch.r, dtype=np.float64)
    if r.size == 0:
        raise ShapeError("empty batch")
    tape = ForwardTape()
    g_f, g_u, p = _forward(model, batch.x_f, batch.x_n, mode, rng, tape)
    n = r.shape[0]

    res_f, res_u = r - g_f, r - g_u
    independent = float(np.mean(res_f ** 2 + res_u ** 2))
    if targets is None:
        q_f, q_u = target_distribution(r, g_f.copy(), g_u.copy(), model.tau)
        targets = np.stack([q_f, q_u], axis=1)
    matching = float(lambda_match * np.mean(kl_discrete(p, targets)))
    _check_finite(independent, "independent")
    _check_finite(matching, "matching")

    predictor_backward(model.factors, tape, -2.0 * res_f / n, finish=False)
    predictor_backward(model.fusion, tape, -2.0 * res_u / n, finish=False)
    backward(tape, model.gate, lambda_match * kl_grad_logits(p, targets) / n)
    tape.finish()
    return DecoupledLoss(independent, matching, targets, float(np.mean(res_f ** 2)), float(np.mean(res_u ** 2)))


def decoupled_loss(model, batch, targets, lambda_match=1.0, mode="eval", rng=None):
    """Value of the decoupled objective for fixed targets (no gradients)."""
    g_f, g_u, p = _forward(model, batch.x_f, batch.x_n, mode, rng, None)
    r = np.asarray(batch.r, dtype=np.float64)
    return float(np.mean((r - g_f) ** 2 + (r - g_u) ** 2) + lambda_match * np.mean(kl_discrete(p, targets)))


def alignment_statistic(p_f, err_f, err_u):
    """Fraction of untied instances where the lower-error component gets probability > 0.5."""
    p_f = np.asarray(p_f, dtype=np.float64)
    err_f = np.asarray(err_f, dtype=np.float64)
    err_u = np.asarray(err_u, dtype=np.float64)
    if p_f.size == 0:
        raise MetricError("alignment over an empty set of instances")
    untied = err_f != err_u
    if not untied.any():
        raise MetricError("every instance has tied component errors")
    p_lower = np.where(err_f < err_u, p_f, 1.0 - p_f)
    return float(np.mean(p_lower[untied] > 0.5))


def gate_error_alignment(model, dataset, split=Split.TEST):
    x_f, x_n, r = dataset.arrays(split)
    if r.size == 0:
        raise MetricError(f"split {Split.parse(split).label} is empty")
    parts = component_predictions(model, x_f, x_n)
    return alignment_statistic(parts["p_f"], (r - parts["g_f"]) ** 2, (r - parts["g_u"]) ** 2)
