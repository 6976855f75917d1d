"""
variance_lab.py
Per-instance component gradients of a mixture and the moments that govern their
variance. For component i with gate probability p and signal
ζ = (r - r̂)·∇θ g_i, the sampled gradient is δ = -2·p·ζ. When p and ζ are
independent,

    Var(δ) = 4·E[p]²·Var(ζ) + 4·E[‖ζ‖²]·Var(p)

with the trace convention Var(v) = E‖v - E v‖². A standalone component has
p = 1 and reduces to Var(δ) = 4·Var(ζ).
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from app.models import Split, VarianceEstimate
from src.errors import ConfigError, MetricError, NonFiniteGradientError, WrongKindError
from src.mixture import MixtureModel, component_predictions
from src.neuralnet import ForwardTape
from src.predictors import PredictorParams, predict_batch, predictor_backward

logger = logging.getLogger(__name__)

MIXTURE = "mixture"
STANDALONE = "standalone"


@dataclass
class GradientSamples:
    """Per-instance ζ (N×P), p (N,) and δ (N×P) for one component."""
    component: str
    zeta: np.ndarray
    p: np.ndarray
    delta: np.ndarray

    def __len__(self) -> int:
        return int(self.p.shape[0])


def flat_gradient(layers):
    return np.concatenate([grad.ravel() for layer in layers for _, _, grad in layer.named_parameters()])


def output_gradients(params, x_f, x_n):
    """Eval-mode g(x) and ∇θ g(x) for each row; returns (N,) predictions and (N×P) gradients."""
    layers = params.layer_list()
    preds, grads = [], []
    for row in range(x_f.shape[0]):
        for layer in layers:
            layer.zero_grad()
        tape = ForwardTape()
        y = predict_batch(params, x_f[row:row + 1], x_n[row:row + 1], "eval", None, tape)
        predictor_backward(params, tape, np.ones(1))
        grad = flat_gradient(layers)
        if not np.isfinite(grad).all():
            raise NonFiniteGradientError(f"{params.prefix or params.spec.kind.value} output gradient (row {row})")
        preds.append(y[0])
        grads.append(grad)
    for layer in layers:
        layer.zero_grad()
    return np.asarray(preds), np.vstack(grads)


def sample_gradients(model, x_f, x_n, r, scheme=MIXTURE):
    """
    Per-instance (ζ, p, δ) for each component of a mixture, keyed "f" and "u".

    mixture:     r̂ = mixture prediction, ζ = (r - r̂)·∇g_i, δ = -2·p_i·ζ
    standalone:  r̂ = g_i,                ζ = (r - g_i)·∇g_i, p = 1, δ = -2·ζ
    A bare PredictorParams is accepted under the standalone scheme (key "single").
    """
    x_f = np.atleast_2d(np.asarray(x_f, dtype=np.float64))
    x_n = np.atleast_2d(np.asarray(x_n, dtype=np.float64))
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if scheme not in (MIXTURE, STANDALONE):
        raise ValueError(f"unknown scheme {scheme!r}")

    if isinstance(model, PredictorParams):
        if scheme != STANDALONE:
            raise WrongKindError("a single predictor has no gate; use the standalone scheme")
        components = {"single": (model, None)}
        mixed = None
    elif isinstance(model, MixtureModel):
        parts = component_predictions(model, x_f, x_n)
        components = {"f": (model.factors, parts["p_f"]), "u": (model.fusion, parts["p_u"])}
        mixed = parts["mixture"]
    else:
        raise WrongKindError(f"cannot sample gradients of a {type(model).__name__}")

    out = {}
    for key, (params, p) in components.items():
        g, grad = output_gradients(params, x_f, x_n)
        if scheme == MIXTURE:
            zeta = (r - mixed)[:, None] * grad
        else:
            zeta = (r - g)[:, None] * grad
            p = np.ones_like(r)
        delta = -2.0 * p[:, None] * zeta
        out[key] = GradientSamples(key, zeta, np.asarray(p, dtype=np.float64), delta)
    return out


def _trace_var(v):
    return float(v.var(axis=0, ddof=1).sum())


def empirical_variance(samples):
    """Unbiased moments of one component's samples."""
    n = len(samples)
    if n < 2:
        raise MetricError(f"variance needs at least 2 samples, got {n}")
    zeta = samples.zeta.reshape(n, -1)
    delta = samples.delta.reshape(n, -1)
    return VarianceEstimate(
        n=n,
        mean_delta=delta.mean(axis=0),
        var_delta=_trace_var(delta),
        mean_p=float(samples.p.mean()),
        var_p=float(samples.p.var(ddof=1)),
        var_zeta=_trace_var(zeta),
        mean_sq_norm_zeta=float((zeta ** 2).sum(axis=1).mean()),
    )


# ----------------------
# Identity check on an independent sampler
# ----------------------

@dataclass(frozen=True)
class IdentitySpec:
    """p constant (p_constant) or Uniform(p_low, p_high); ζ Gaussian per coordinate (std 0 = deterministic)."""
    zeta_mean: tuple = (1.0,)
    zeta_std: tuple = (1.0,)
    p_low: float = 0.2
    p_high: float = 0.8
    p_constant: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "zeta_mean", tuple(float(v) for v in self.zeta_mean))
        object.__setattr__(self, "zeta_std", tuple(float(v) for v in self.zeta_std))
        if not self.zeta_mean or len(self.zeta_mean) != len(self.zeta_std):
            raise ConfigError("varlab.zeta_std", "zeta_mean and zeta_std need the same non-zero length")
        if any(s < 0 for s in self.zeta_std):
            raise ConfigError("varlab.zeta_std", "standard deviations must be >= 0")
        if self.p_constant is not None:
            if not 0.0 <= self.p_constant <= 1.0:
                raise ConfigError("varlab.p_constant", "must lie in [0, 1]")
        elif not 0.0 <= self.p_low <= self.p_high <= 1.0:
            raise ConfigError("varlab.p_low", "need 0 <= p_low <= p_high <= 1")

    @classmethod
    def from_section(cls, section):
        return cls(tuple(section.zeta_mean), tuple(section.zeta_std), section.p_low, section.p_high,
                   section.p_constant)

    @property
    def mean_p(self) -> float:
        return self.p_constant if self.p_constant is not None else 0.5 * (self.p_low + self.p_high)

    @property
    def var_p(self) -> float:
        return 0.0 if self.p_constant is not None else (self.p_high - self.p_low) ** 2 / 12.0

    @property
    def var_zeta(self) -> float:
        return float(np.sum(np.square(self.zeta_std)))

    @property
    def mean_sq_norm_zeta(self) -> float:
        return float(np.sum(np.square(self.zeta_mean)) + self.var_zeta)

    def closed_form(self) -> float:
        return 4.0 * self.mean_p ** 2 * self.var_zeta + 4.0 * self.mean_sq_norm_zeta * self.var_p

    def sample(self, n, rng):
        """n independent (p, ζ) draws; δ = -2·p·ζ."""
        if self.p_constant is not None:
            p = np.full(n, float(self.p_constant))
        else:
            p = rng.uniform(self.p_low, self.p_high, size=n)
        noise = rng.standard_normal((n, len(self.zeta_mean)))
        zeta = np.asarray(self.zeta_mean) + noise * np.asarray(self.zeta_std)
        return GradientSamples("synthetic", zeta, p, -2.0 * p[:, None] * zeta)


@dataclass
class IdentityCheck:
    n: int
    empirical: float
    closed_form: float
    relative_gap: float
    estimate: VarianceEstimate

    def to_dict(self):
        return {
            "n": self.n,
            "empirical_var_delta": self.empirical,
            "closed_form_var_delta": self.closed_form,
            "relative_gap": self.relative_gap,
            "moments": self.estimate.to_dict(),
        }


def relative_gap(empirical, closed):
    if closed == 0.0:
        return 0.0 if empirical == 0.0 else float("inf")
    return abs(empirical - closed) / abs(closed)


def verify_identity(spec, n, rng):
    """Monte-Carlo Var(δ) from independent p and ζ against the closed form from the analytic moments."""
    samples = spec.sample(int(n), rng)
    estimate = empirical_variance(samples)
    closed = spec.closed_form()
    gap = relative_gap(estimate.var_delta, closed)
    logger.info("identity check: N=%d empirical=%.6g closed form=%.6g gap=%.3g%%",
                estimate.n, estimate.var_delta, closed, 100.0 * gap)
    return IdentityCheck(estimate.n, estimate.var_delta, closed, gap, estimate)


# ----------------------
# Probe on a trained mixture
# ----------------------

PROBE_NOTE = ("diagnostic decomposition: p and zeta are not independent in a trained model, "
              "so signal_term + gate_term need not equal the empirical Var(delta)")


@dataclass
class EntanglementTerms:
    component: str
    signal_term: float
    gate_term: float
    empirical_var_delta: float
    estimate: VarianceEstimate

    def to_dict(self):
        return {
            "component": self.component,
            "signal_term": self.signal_term,
            "gate_term": self.gate_term,
            "empirical_var_delta": self.empirical_var_delta,
            "moments": self.estimate.to_dict(),
        }


def training_entanglement_probe(model, dataset, n_instances, split=Split.TRAIN, rng=None):
    """
    The two terms 4·E[p]²·Var(ζ) (signal) and 4·E[‖ζ‖²]·Var(p) (gate) for each
    component of a frozen mixture, on up to n_instances rows of a split (a seeded
    random subset when rng is given, else the first rows).
    """
    if not isinstance(model, MixtureModel):
        raise WrongKindError("the entanglement probe needs a mixture model")
    x_f, x_n, r = dataset.arrays(split)
    n = min(int(n_instances), r.shape[0])
    if n < 2:
        raise MetricError(f"probe needs at least 2 instances, split has {r.shape[0]}")
    rows = np.sort(rng.choice(r.shape[0], size=n, replace=False)) if rng is not None else np.arange(n)
    samples = sample_gradients(model, x_f[rows], x_n[rows], r[rows], MIXTURE)

    report: List[EntanglementTerms] = []
    for key, component_samples in samples.items():
        est = empirical_variance(component_samples)
        terms = EntanglementTerms(
            component=key,
            signal_term=4.0 * est.mean_p ** 2 * est.var_zeta,
            gate_term=4.0 * est.mean_sq_norm_zeta * est.var_p,
            empirical_var_delta=est.var_delta,
            estimate=est,
        )
        logger.info("probe %s: signal term %.6g, gate term %.6g, empirical Var(delta) %.6g",
                    key, terms.signal_term, terms.gate_term, terms.empirical_var_delta)
        report.append(terms)
    return {"note": PROBE_NOTE, "n_instances": n, "components": [t.to_dict() for t in report]}
