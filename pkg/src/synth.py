"""
synth.py
Synthetic panels whose returns depend on factor latents in every month and on
news latents only in BOTH-regime months, plus the Bayes oracle for those panels.

Draw order (fixed; determinism depends on it):
  1. structure stream: A (d_f x k_f), B (d_n x k_n), w_f (k_f), w_n (k_n), news regime direction (d_n)
  2. latent stream: one row per instance in (month, stock) order holding
     s_f (k_f), s_n (k_n), eps_f (d_f), eps_n (d_n), eps_r (1)
Both streams are children of numpy's SeedSequence(seed), so the structure does
not depend on n_stocks or n_months.
"""
import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from app.models import Latents, PanelDataset, Regime, Split, SynthConfig
from src.errors import LatentsUnavailableError

logger = logging.getLogger(__name__)

DAYS_PER_MONTH = 30


def alternating_schedule(n_months, block=3, first=Regime.FACTORS_ONLY):
    other = Regime.BOTH if first == Regime.FACTORS_ONLY else Regime.FACTORS_ONLY
    return [first if (m // block) % 2 == 0 else other for m in range(n_months)]


def default_config(seed=0):
    """Desk-scale acceptance config: 100 stocks x 36 months, alternating 3-month regime blocks."""
    return SynthConfig(
        n_stocks=100, n_months=36, d_f=20, d_n=32,
        factor_signal_dim=4, news_signal_dim=4,
        noise_std_factors=0.1, noise_std_news=0.1, noise_std_return=0.03,
        regime_schedule=alternating_schedule(36, 3), beta_news=1.0, seed=seed,
    )


def demo_config(seed=0):
    """default_config with monthly-return magnitudes (r scaled by 0.05) and a news-visible regime."""
    return dataclasses.replace(default_config(seed), return_scale=0.05, news_regime_shift=2.0)


def month_day(config, month):
    return int(config.start_day + DAYS_PER_MONTH * month)


def default_boundaries(config):
    """(train_end, val_end) epoch-days giving roughly a 2/3, 1/6, 1/6 split of the months."""
    n = config.n_months
    train_months = max(1, (2 * n) // 3)
    val_months = max(train_months + 1, (5 * n) // 6)
    return month_day(config, train_months - 1), month_day(config, val_months - 1)


class _Structure:
    def __init__(self, config):
        structure_ss, _ = np.random.SeedSequence(config.seed).spawn(2)
        rng = np.random.default_rng(structure_ss)
        k_f, k_n = config.factor_signal_dim, config.news_signal_dim
        self.A = rng.standard_normal((config.d_f, k_f)) / np.sqrt(k_f)
        self.B = rng.standard_normal((config.d_n, k_n)) / np.sqrt(k_n)
        w_f = rng.standard_normal(k_f)
        w_n = rng.standard_normal(k_n)
        self.w_f = w_f / np.linalg.norm(w_f)
        self.w_n = w_n / np.linalg.norm(w_n)
        u = rng.standard_normal(config.d_n)
        self.news_direction = u / np.linalg.norm(u)


def _latent_rng(config):
    _, latent_ss = np.random.SeedSequence(config.seed).spawn(2)
    return np.random.default_rng(latent_ss)


def _signal(config, structure, s_f, s_n, both):
    signal = s_f @ structure.w_f + np.where(both, config.beta_news, 0.0) * (s_n @ structure.w_n)
    return config.return_scale * signal


def generate_with_latents(config):
    config.validate()
    structure = _Structure(config)
    k_f, k_n, d_f, d_n = config.factor_signal_dim, config.news_signal_dim, config.d_f, config.d_n
    n = config.n_stocks * config.n_months

    draws = _latent_rng(config).standard_normal((n, k_f + k_n + d_f + d_n + 1))
    s_f = draws[:, :k_f]
    s_n = draws[:, k_f:k_f + k_n]
    eps_f = draws[:, k_f + k_n:k_f + k_n + d_f]
    eps_n = draws[:, k_f + k_n + d_f:k_f + k_n + d_f + d_n]
    eps_r = draws[:, -1]

    months = np.repeat(np.arange(config.n_months), config.n_stocks)
    stock_ids = np.tile(np.arange(config.n_stocks), config.n_months)
    timestamps = config.start_day + DAYS_PER_MONTH * months
    regimes = [config.regime_schedule[m] for m in months]
    both = np.array([r == Regime.BOTH for r in regimes])

    factors = s_f @ structure.A.T + config.noise_std_factors * eps_f
    news = s_n @ structure.B.T + config.noise_std_news * eps_n
    news = news + config.news_regime_shift * both[:, None] * structure.news_direction[None, :]
    targets = _signal(config, structure, s_f, s_n, both) + config.return_scale * config.noise_std_return * eps_r

    # stored values are f32-representable so binary round trips are exact
    as_f32 = lambda a: a.astype(np.float32).astype(np.float64)
    dataset = PanelDataset(
        stock_ids=stock_ids, timestamps=timestamps, splits=np.full(n, Split.TRAIN, dtype=np.uint8),
        targets=as_f32(targets), factors=as_f32(factors), news=as_f32(news),
        horizon_months=config.horizon_months,
    )
    latents = Latents(stock_ids=stock_ids, timestamps=timestamps, s_f=s_f.copy(), s_n=s_n.copy(),
                      regimes=tuple(regimes))
    logger.info("generated %d instances (%d stocks x %d months, %d BOTH months)",
                n, config.n_stocks, config.n_months, sum(r == Regime.BOTH for r in config.regime_schedule))
    return dataset, latents


def generate(config):
    dataset, _ = generate_with_latents(config)
    return dataset


def oracle_predict(config, s_f, s_n=None, regime=Regime.FACTORS_ONLY):
    """Conditional mean of r given the latents and the month's regime (the noiseless return)."""
    if s_f is None:
        raise LatentsUnavailableError("oracle needs the instance's factor latents")
    regime = Regime(regime)
    if regime == Regime.BOTH and s_n is None:
        raise LatentsUnavailableError("oracle needs news latents in a BOTH month")
    structure = _Structure(config)
    s_f = np.asarray(s_f, dtype=np.float64)
    s_n = np.zeros(config.news_signal_dim) if s_n is None else np.asarray(s_n, dtype=np.float64)
    return float(_signal(config, structure, s_f, s_n, regime == Regime.BOTH))


def oracle_predict_all(config, latents):
    if latents is None:
        raise LatentsUnavailableError("no latents retained for this dataset")
    structure = _Structure(config)
    both = np.array([r == Regime.BOTH for r in latents.regimes])
    return _signal(config, structure, latents.s_f, latents.s_n, both)


def save_latents(latents, path):
    payload = {
        "stock_ids": latents.stock_ids.tolist(),
        "timestamps": latents.timestamps.tolist(),
        "s_f": latents.s_f.tolist(),
        "s_n": latents.s_n.tolist(),
        "regimes": [r.value for r in latents.regimes],
    }
    Path(path).write_text(json.dumps(payload))


def load_latents(path):
    path = Path(path)
    if not path.exists():
        raise LatentsUnavailableError(f"latents sidecar not found: {path}")
    payload = json.loads(path.read_text())
    return Latents(
        stock_ids=np.asarray(payload["stock_ids"], dtype=np.int64),
        timestamps=np.asarray(payload["timestamps"], dtype=np.int64),
        s_f=np.asarray(payload["s_f"], dtype=np.float64),
        s_n=np.asarray(payload["s_n"], dtype=np.float64),
        regimes=tuple(Regime(r) for r in payload["regimes"]),
    )


def latents_path_for(dataset_path):
    dataset_path = Path(dataset_path)
    return dataset_path.with_name(dataset_path.stem + ".latents.json")
