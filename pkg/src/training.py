"""
training.py
Epoch/batch driver for standalone predictors and for the mixture under either
objective, plus evaluation and per-component training curves.

Each epoch reshuffles the train split with a seeded generator; the last short
batch is kept. The learning rate decays linearly to 0 over
epochs × ceil(n_train / batch_size) optimizer steps.
"""
import copy
import logging
import math
import time

import numpy as np

from app.models import MixtureSpec, PredictorSpec, Scheme, Split, TrainLog, TrainRecord
from src.checkpoint import save_checkpoint
from src.errors import (ConfigError, EmptyPartitionError, NonFiniteGradientError, ShapeError, TrainingDivergedError,
                        WrongKindError)
from src.mixture import (Batch, MixtureModel, build_mixture, component_predictions, conventional_loss_step,
                         decoupled_loss_step, mixture_predict)
from src.neuralnet import OptimizerState, optimizer_step
from src.predictors import build, predict_batch, squared_error_step

logger = logging.getLogger(__name__)


def total_steps(n_train, config):
    return config.epochs * math.ceil(n_train / config.batch_size)


def init_model(spec, config, init_ss):
    """
    Fresh parameters from the init SeedSequence. Mixture components are drawn exactly like the
    standalone predictor of the same kind and seed, so paired runs start from identical weights.
    """
    if isinstance(spec, PredictorSpec):
        if config.scheme != Scheme.STANDALONE:
            raise ConfigError("train.scheme", f"{config.scheme.value} needs a mixture model, got {spec.kind.value}")
        return build(spec, np.random.default_rng(init_ss))
    if isinstance(spec, MixtureSpec):
        if config.scheme == Scheme.STANDALONE:
            raise ConfigError("train.scheme", "a mixture model needs mixture_conventional or mixture_decoupled")
        gate_ss, = init_ss.spawn(1)
        components = (np.random.default_rng(init_ss), np.random.default_rng(init_ss))
        return build_mixture(spec, np.random.default_rng(gate_ss), tau=config.tau, component_rngs=components)
    raise WrongKindError(f"cannot train a {type(spec).__name__}")


def _batch_step(model, batch, config, rng):
    """Forward/backward for one batch; returns {component: mse} and the KL term (nan when absent)."""
    if config.scheme == Scheme.STANDALONE:
        loss = squared_error_step(model, batch.x_f, batch.x_n, batch.r, "train", rng)
        if not np.isfinite(loss):
            raise TrainingDivergedError("non-finite loss")
        return {"single": loss}, math.nan
    if config.scheme == Scheme.MIXTURE_CONVENTIONAL:
        out = conventional_loss_step(model, batch, "train", rng)
        return {"f": out.mse_f, "u": out.mse_u}, math.nan
    out = decoupled_loss_step(model, batch, config.lambda_match, "train", rng)
    return {"f": out.mse_f, "u": out.mse_u}, out.matching


def train(dataset, spec, config, out_dir=None, log_every=None):
    """
    Train a predictor (standalone scheme) or a mixture (either mixture scheme).
    Returns (model, TrainLog). On a non-finite loss or gradient the run aborts with
    TrainingDivergedError carrying the parameters from the last completed epoch
    (also written as a checkpoint when out_dir is given).
    """
    x_f, x_n, r = dataset.arrays(Split.TRAIN)
    n = r.shape[0]
    if n == 0:
        raise EmptyPartitionError("train split is empty")
    config.validate(n)
    if (spec.d_f, spec.d_n) != (dataset.d_f, dataset.d_n):
        raise ShapeError(f"model dims (d_f={spec.d_f}, d_n={spec.d_n}) != dataset dims "
                         f"(d_f={dataset.d_f}, d_n={dataset.d_n})")
    log_every = log_every or config.log_every

    init_ss, shuffle_ss, dropout_ss = np.random.SeedSequence(config.seed).spawn(3)
    model = init_model(spec, config, init_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    state = OptimizerState(config.base_lr, config.weight_decay, total_steps(n, config), kind=config.optimizer)
    log = TrainLog(config.scheme)
    layers = model.layer_list()
    last_good = copy.deepcopy(model)
    started = time.perf_counter()
    window, window_kl = {}, []

    def flush(epoch):
        kl = float(np.mean(window_kl)) if window_kl else math.nan
        for component, values in window.items():
            record = TrainRecord(
                step=state.step, epoch=epoch, scheme=config.scheme.value, component=component,
                mse=float(np.mean(values)), kl=kl,
                lr=state.current_lr(), wall_clock=time.perf_counter() - started,
            )
            log.append(record)
            logger.info("step %d epoch %d %s mse=%.6g kl=%.6g lr=%.3g",
                        record.step, epoch, component, record.mse, record.kl, record.lr)
        window.clear()
        window_kl.clear()

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            batch = Batch(x_f[rows], x_n[rows], r[rows])
            try:
                mses, kl = _batch_step(model, batch, config, dropout_rng)
                optimizer_step(layers, state)
            except (TrainingDivergedError, NonFiniteGradientError) as e:
                logger.warning("training diverged at step %d (epoch %d): %s", state.step, epoch, e)
                if out_dir is not None:
                    save_checkpoint(last_good, out_dir, seed=config.seed, step=state.step)
                raise TrainingDivergedError(f"diverged at step {state.step}: {e}", last_good=last_good,
                                            step=state.step) from e
            for component, value in mses.items():
                window.setdefault(component, []).append(value)
            if not math.isnan(kl):
                window_kl.append(kl)
            if state.step % log_every == 0 or start + config.batch_size >= n:
                flush(epoch)
        last_good = copy.deepcopy(model)

    logger.info("finished %d epochs, %d optimizer steps, final lr %.3g", config.epochs, state.step, state.current_lr())
    return model, log


def evaluate(model, dataset, split=Split.TEST):
    """Eval-mode predictions for a split, in dataset order."""
    x_f, x_n, _ = dataset.arrays(split)
    if (model.spec.d_f, model.spec.d_n) != (dataset.d_f, dataset.d_n):
        raise ShapeError(f"model dims (d_f={model.spec.d_f}, d_n={model.spec.d_n}) != dataset dims "
                         f"(d_f={dataset.d_f}, d_n={dataset.d_n})")
    if x_f.shape[0] == 0:
        return np.zeros(0)
    if isinstance(model, MixtureModel):
        return mixture_predict(model, x_f, x_n, "eval")
    return predict_batch(model, x_f, x_n, "eval")


def evaluate_components(model, dataset, split=Split.TEST):
    """Per-instance g_f, g_u, p_f, p_u and mixture prediction of a mixture, with keys and targets."""
    if not isinstance(model, MixtureModel):
        raise WrongKindError("component evaluation needs a mixture model")
    x_f, x_n, _ = dataset.arrays(split)
    frame = dataset.split_frame(split)
    for key, values in component_predictions(model, x_f, x_n).items():
        frame[key] = values
    return frame


def component_curves(log):
    """Aligned factors (f) and fusion (u) training-MSE series indexed by step."""
    if log.scheme == Scheme.STANDALONE:
        raise WrongKindError("component curves need a mixture training log")
    frame = log.to_frame()
    curves = frame.pivot(index="step", columns="component", values="mse")
    return curves.reindex(columns=["f", "u"])


def final_mse(log):
    """Last logged training MSE per component."""
    frame = log.to_frame()
    if frame.empty:
        return {}
    return frame.groupby("component")["mse"].last().to_dict()


def save_train_log(log, path):
    log.to_frame().to_csv(path, index=False)
