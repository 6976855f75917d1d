"""
experiments.py
Seed-swept comparisons on synthetic panels.

Mixture sweep (run_seed / seed_sweep), on default_config with a visible news regime:
  * training curves   final per-component training MSE of each mixture scheme
                      against the same architecture trained standalone
  * adaptivity        decoupled mixture test MSE against both standalone baselines
  * alignment         share of test instances where the gate favours the lower-error component

One seed trains four models on the same generated panel: Factors Alone and
Fusion Combination standalone, and the mixture under both objectives. Standalone
models and mixture components share the init seed, so paired runs start equal.

Method comparison (run_methods / method_sweep): every predictor kind and both
mixture schemes, backtested on monthly-scale universes where news does or does
not move returns.
"""
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from app.models import MixtureSpec, PredictorKind, PredictorSpec, Scheme, Split, TrainConfig
from src.dataset_io import split_by_time, standardize_factors
from src.evaluation import LONG_ONLY, LONG_SHORT, UNIVERSE, full_report
from src.mixture import component_predictions, gate_error_alignment
from src.synth import default_boundaries, default_config, demo_config, generate
from src.training import evaluate, train

logger = logging.getLogger(__name__)

TOLERANCE = 1.1

NEWS_INFORMATIVE = "news_informative"
NEWS_UNINFORMATIVE = "news_uninformative"
UNIVERSES = (NEWS_INFORMATIVE, NEWS_UNINFORMATIVE)

METHODS = tuple(kind.value for kind in PredictorKind) + (Scheme.MIXTURE_CONVENTIONAL.value,
                                                         Scheme.MIXTURE_DECOUPLED.value)


@dataclass
class ExperimentSetup:
    """
    Generator and training settings shared by every seed of a sweep.

    Departs from default_config by shifting news in BOTH months (news_regime_shift), so the
    regime is visible to the gate. Dropout is off so a decoupled component and its standalone
    twin see identical updates; 40 epochs bring both to their training-loss floor.
    """
    news_regime_shift: float = 2.0
    hidden_dim: int = 32
    dropout_rate: float = 0.0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=64, epochs=40, base_lr=1e-3))
    # SynthConfig fields overridden on every generated panel (sizes, schedule)
    panel: dict = field(default_factory=dict)

    def synth_config(self, seed):
        return dataclasses.replace(default_config(seed), news_regime_shift=self.news_regime_shift, **self.panel)

    def train_config(self, seed, scheme, return_scale=1.0):
        # the gate temperature is in units of squared returns
        return dataclasses.replace(self.train, seed=seed, scheme=scheme, dropout=self.dropout_rate,
                                   tau=self.train.tau * return_scale ** 2)

    def predictor_spec(self, kind, dataset):
        return PredictorSpec(kind, dataset.d_f, dataset.d_n, self.hidden_dim, self.dropout_rate)

    def mixture_spec(self, dataset):
        return MixtureSpec(dataset.d_f, dataset.d_n, self.hidden_dim, self.dropout_rate)


def universe_config(universe, seed):
    """Monthly-scale panel (demo_config); news_uninformative zeroes the news loading on returns."""
    config = demo_config(seed)
    if universe == NEWS_INFORMATIVE:
        return config
    if universe == NEWS_UNINFORMATIVE:
        return dataclasses.replace(config, beta_news=0.0)
    raise ValueError(f"unknown universe {universe!r}; expected one of {', '.join(UNIVERSES)}")


def prepare_panel(synth_config):
    """Generated panel, split by time at the default boundaries, factors z-scored."""
    dataset = split_by_time(generate(synth_config), *default_boundaries(synth_config))
    dataset, _ = standardize_factors(dataset)
    return dataset


def mse(preds, actuals):
    return float(np.mean((np.asarray(actuals) - np.asarray(preds)) ** 2))


def run_seed(seed, setup=None):
    """Train the four models for one seed; returns one flat record of MSEs and alignment."""
    setup = setup or ExperimentSetup()
    dataset = prepare_panel(setup.synth_config(seed))
    _, _, r_train = dataset.arrays(Split.TRAIN)
    _, _, r_test = dataset.arrays(Split.TEST)
    record = {"seed": seed}

    for key, kind in (("f", PredictorKind.FACTORS_ALONE), ("u", PredictorKind.FUSION_COMBINATION)):
        model, _ = train(dataset, setup.predictor_spec(kind, dataset), setup.train_config(seed, Scheme.STANDALONE))
        record[f"standalone_{key}_train_mse"] = mse(evaluate(model, dataset, Split.TRAIN), r_train)
        record[f"standalone_{key}_test_mse"] = mse(evaluate(model, dataset, Split.TEST), r_test)

    mixture_spec = setup.mixture_spec(dataset)
    for scheme, label in ((Scheme.MIXTURE_CONVENTIONAL, "conventional"), (Scheme.MIXTURE_DECOUPLED, "decoupled")):
        model, _ = train(dataset, mixture_spec, setup.train_config(seed, scheme))
        x_f, x_n, _ = dataset.arrays(Split.TRAIN)
        parts = component_predictions(model, x_f, x_n)
        record[f"{label}_f_train_mse"] = mse(parts["g_f"], r_train)
        record[f"{label}_u_train_mse"] = mse(parts["g_u"], r_train)
        record[f"{label}_test_mse"] = mse(evaluate(model, dataset, Split.TEST), r_test)
        record[f"{label}_alignment"] = gate_error_alignment(model, dataset, Split.TEST)

    logger.info("seed %d: decoupled test mse %.5g vs standalone f %.5g / u %.5g, alignment %.3f",
                seed, record["decoupled_test_mse"], record["standalone_f_test_mse"],
                record["standalone_u_test_mse"], record["decoupled_alignment"])
    return record


def seed_sweep(seeds, setup=None):
    """One row per seed (see run_seed)."""
    return pd.DataFrame([run_seed(int(seed), setup) for seed in seeds]).set_index("seed")


def claim_table(sweep, tolerance=TOLERANCE):
    """Per-seed booleans for the three qualitative claims."""
    out = pd.DataFrame(index=sweep.index)
    out["decoupled_tracks_standalone"] = (
        (sweep["decoupled_f_train_mse"] <= tolerance * sweep["standalone_f_train_mse"])
        & (sweep["decoupled_u_train_mse"] <= tolerance * sweep["standalone_u_train_mse"])
    )
    out["conventional_lags_standalone"] = (
        (sweep["conventional_f_train_mse"] > tolerance * sweep["standalone_f_train_mse"])
        | (sweep["conventional_u_train_mse"] > tolerance * sweep["standalone_u_train_mse"])
    )
    out["decoupled_beats_both"] = sweep["decoupled_test_mse"] < sweep[["standalone_f_test_mse",
                                                                       "standalone_u_test_mse"]].min(axis=1)
    out["gate_aligned"] = sweep["decoupled_alignment"] > 0.55
    return out


def summarize(sweep, tolerance=TOLERANCE):
    """Count of seeds satisfying each claim, plus the sweep size."""
    claims = claim_table(sweep, tolerance)
    summary = {name: int(claims[name].sum()) for name in claims.columns}
    summary["n_seeds"] = int(len(claims))
    return summary


# ----------------------
# Method comparison
# ----------------------

def _value(metric):
    return np.nan if metric is None else metric


def _method_models(dataset, setup, seed, return_scale):
    for kind in PredictorKind:
        config = setup.train_config(seed, Scheme.STANDALONE, return_scale)
        yield kind.value, train(dataset, setup.predictor_spec(kind, dataset), config)[0]
    for scheme in (Scheme.MIXTURE_CONVENTIONAL, Scheme.MIXTURE_DECOUPLED):
        config = setup.train_config(seed, scheme, return_scale)
        yield scheme.value, train(dataset, setup.mixture_spec(dataset), config)[0]


def run_methods(seed, setup=None, universes=UNIVERSES):
    """
    Train every predictor kind and both mixture schemes on each universe for one seed and
    backtest their test-split predictions. One row per (universe, method).
    """
    setup = setup or ExperimentSetup()
    rows = []
    for universe in universes:
        synth = dataclasses.replace(universe_config(universe, seed), **setup.panel)
        dataset = prepare_panel(synth)
        _, _, r_test = dataset.arrays(Split.TEST)
        for method, model in _method_models(dataset, setup, seed, synth.return_scale):
            predictions = evaluate(model, dataset, Split.TEST)
            report = full_report(predictions, dataset)
            rows.append({
                "seed": seed, "universe": universe, "method": method,
                "test_mse": mse(predictions, r_test), "mape": report.mape, "ic": _value(report.ic),
                "annualized_long_only": _value(report.annualized_return[LONG_ONLY]),
                "annualized_long_short": _value(report.annualized_return[LONG_SHORT]),
                "annualized_universe": _value(report.annualized_return[UNIVERSE]),
                "sharpe_long_only": _value(report.sharpe_ratio[LONG_ONLY]),
                "sharpe_long_short": _value(report.sharpe_ratio[LONG_SHORT]),
                "max_drawdown_long_short": _value(report.max_drawdown[LONG_SHORT]),
            })
            logger.info("seed %d %s %s: test mse %.5g", seed, universe, method, rows[-1]["test_mse"])
    return pd.DataFrame(rows)


def method_sweep(seeds, setup=None, universes=UNIVERSES):
    """run_methods for every seed, stacked."""
    return pd.concat([run_methods(int(seed), setup, universes) for seed in seeds], ignore_index=True)


def method_table(methods):
    """Seed-mean of each metric by universe and method, methods in declaration order."""
    table = methods.drop(columns="seed").groupby(["universe", "method"], sort=False).mean()
    order = [(u, m) for u in methods["universe"].unique() for m in METHODS if (u, m) in table.index]
    return table.loc[order]
