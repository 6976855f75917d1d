import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../')))
import dataclasses

import numpy as np
import pytest

from app.models import Regime, SynthConfig
from src.dataset_io import save_dataset
from src.errors import ConfigError, LatentsUnavailableError
from src.synth import (alternating_schedule, default_config, demo_config, generate, generate_with_latents,
                       latents_path_for, load_latents, oracle_predict, oracle_predict_all, save_latents)


def small_config(**overrides):
    base = SynthConfig(n_stocks=50, n_months=24, d_f=6, d_n=8, factor_signal_dim=3, news_signal_dim=3,
                       regime_schedule=alternating_schedule(24, 3), seed=11)
    return dataclasses.replace(base, **overrides)


@pytest.fixture(scope="module")
def generated():
    config = small_config()
    dataset, latents = generate_with_latents(config)
    return config, dataset, latents


def test_instance_count(generated):
    _, dataset, latents = generated
    assert len(dataset) == 1200
    assert len(latents) == 1200
    assert (dataset.d_f, dataset.d_n) == (6, 8)


def test_alternating_schedule():
    schedule = alternating_schedule(8, 3)
    assert schedule == [Regime.FACTORS_ONLY] * 3 + [Regime.BOTH] * 3 + [Regime.FACTORS_ONLY] * 2


def test_schedule_length_must_match():
    config = small_config(regime_schedule=alternating_schedule(12, 3))
    with pytest.raises(ConfigError) as err:
        generate(config)
    assert err.value.key_path == "regime_schedule"


def test_same_seed_gives_identical_files(tmp_path):
    config = small_config(n_stocks=10, n_months=6, regime_schedule=alternating_schedule(6, 3))
    save_dataset(generate(config), tmp_path / "a.mfnr")
    save_dataset(generate(config), tmp_path / "b.mfnr")
    assert (tmp_path / "a.mfnr").read_bytes() == (tmp_path / "b.mfnr").read_bytes()


def test_structure_depends_only_on_seed():
    a = small_config(n_stocks=10, n_months=6, regime_schedule=[Regime.FACTORS_ONLY] * 6, noise_std_return=0.0)
    b = dataclasses.replace(a, n_stocks=25, n_months=3, regime_schedule=[Regime.FACTORS_ONLY] * 3)
    s_f = np.array([0.3, -1.2, 0.7])
    assert oracle_predict(a, s_f) == oracle_predict(b, s_f)


def test_noiseless_factor_regime_is_linear_in_latents():
    config = small_config(noise_std_return=0.0, regime_schedule=[Regime.FACTORS_ONLY] * 24)
    dataset, latents = generate_with_latents(config)
    coef, *_ = np.linalg.lstsq(latents.s_f, dataset.targets, rcond=None)
    residual = dataset.targets - latents.s_f @ coef
    # targets are stored as f32
    assert np.abs(residual).max() < 1e-6


def test_oracle_matches_noiseless_returns():
    config = small_config(noise_std_return=0.0)
    dataset, latents = generate_with_latents(config)
    np.testing.assert_allclose(oracle_predict_all(config, latents), dataset.targets, atol=1e-6)


def test_oracle_ignores_news_in_factor_months(generated):
    config, _, _ = generated
    s_f = np.array([1.0, 0.5, -0.5])
    base = oracle_predict(config, s_f, np.zeros(3), Regime.FACTORS_ONLY)
    assert oracle_predict(config, s_f, np.array([5.0, -3.0, 2.0]), Regime.FACTORS_ONLY) == base
    assert oracle_predict(config, s_f, np.array([5.0, -3.0, 2.0]), Regime.BOTH) != base


def test_oracle_needs_latents(generated):
    config, _, _ = generated
    with pytest.raises(LatentsUnavailableError):
        oracle_predict(config, np.zeros(3), None, Regime.BOTH)
    with pytest.raises(LatentsUnavailableError):
        oracle_predict_all(config, None)


def test_oracle_residual_matches_noise_variance():
    config = small_config(n_stocks=500, n_months=24, noise_std_return=0.05)
    dataset, latents = generate_with_latents(config)
    mse = np.mean((dataset.targets - oracle_predict_all(config, latents)) ** 2)
    assert abs(mse - 0.0025) <= 0.05 * 0.0025


def test_both_months_have_higher_return_variance(generated):
    _, dataset, latents = generated
    both = np.array([r == Regime.BOTH for r in latents.regimes])
    assert dataset.targets[both].var() > dataset.targets[~both].var()


def test_news_shift_separates_regimes():
    config = small_config(news_regime_shift=3.0)
    dataset, latents = generate_with_latents(config)
    both = np.array([r == Regime.BOTH for r in latents.regimes])
    gap = np.linalg.norm(dataset.news[both].mean(axis=0) - dataset.news[~both].mean(axis=0))
    assert gap > 2.5


def test_return_scale_scales_targets():
    plain = generate(small_config())
    scaled = generate(small_config(return_scale=0.05))
    np.testing.assert_allclose(scaled.targets, 0.05 * plain.targets, rtol=1e-6, atol=1e-9)


def test_values_are_finite(generated):
    _, dataset, _ = generated
    assert np.isfinite(dataset.factors).all() and np.isfinite(dataset.news).all()


def test_latents_sidecar_round_trip(generated, tmp_path):
    _, _, latents = generated
    path = latents_path_for(tmp_path / "panel.mfnr")
    assert path.name == "panel.latents.json"
    save_latents(latents, path)
    loaded = load_latents(path)
    assert np.array_equal(loaded.s_f, latents.s_f)
    assert loaded.regimes == latents.regimes
    with pytest.raises(LatentsUnavailableError):
        load_latents(tmp_path / "missing.latents.json")


def test_default_configs():
    config = default_config(3)
    assert (config.n_stocks, config.n_months, config.d_f, config.d_n) == (100, 36, 20, 32)
    assert config.regime_schedule[:6] == [Regime.FACTORS_ONLY] * 3 + [Regime.BOTH] * 3
    demo = demo_config(3)
    assert demo.return_scale == 0.05 and demo.seed == 3
