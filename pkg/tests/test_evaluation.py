import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../')))
import json
import math

import numpy as np
import pandas as pd
import pytest

from app.models import CrossSection, PanelDataset
from src.errors import MetricError, ShapeError
from src.evaluation import (LONG_ONLY, LONG_SHORT, UNIVERSE, annualized_return, cross_sections_from_arrays,
                            cumulative_curve, decile_assign, decile_returns, full_report, information_coefficient,
                            mape, max_drawdown, portfolio_series, sharpe_ratio, spearman, universe_series,
                            write_report)

N_STOCKS = 20


def hand_realized(month):
    """Realized returns for the 20-stock oracle panel; stock i in month t."""
    return np.array([((7 * i + 3 * month) % 20) / 1000.0 - 0.008 + 0.002 * month for i in range(N_STOCKS)])


def hand_sections():
    # prediction of stock i is (3i mod 20): a permutation, so every decile holds exactly two stocks
    preds = np.array([(3 * i) % 20 for i in range(N_STOCKS)], dtype=float)
    return [CrossSection(30 * t, np.arange(N_STOCKS), preds, hand_realized(t)) for t in range(3)]


def hand_decile_means(month):
    # 7 is the inverse of 3 mod 20: the stock with prediction k is 7k mod 20
    r = hand_realized(month)
    return [(r[(7 * 2 * d) % 20] + r[(7 * (2 * d + 1)) % 20]) / 2 for d in range(10)]


def panel_from_sections(n_stocks, n_months, targets):
    n = n_stocks * n_months
    return PanelDataset(stock_ids=np.tile(np.arange(n_stocks), n_months),
                        timestamps=np.repeat(np.arange(n_months) * 30, n_stocks),
                        splits=np.full(n, 2), targets=targets,
                        factors=np.zeros((n, 1)), news=np.zeros((n, 1)))


# ----------------------
# MAPE and IC
# ----------------------

def test_mape_example():
    assert mape([0.2, -0.1], [0.1, -0.2]) == pytest.approx(0.75, abs=1e-12)


def test_mape_floor_on_zero_actual():
    assert mape([0.01], [0.0]) == pytest.approx(100.0)
    with pytest.raises(MetricError):
        mape([], [])
    with pytest.raises(ShapeError):
        mape([0.1, 0.2], [0.1])


def test_spearman_examples():
    assert spearman([1, 2, 4, 3], [1, 2, 3, 4]) == pytest.approx(0.8, abs=1e-12)
    assert spearman([4, 3, 2, 1], [1, 2, 3, 4]) == pytest.approx(-1.0, abs=1e-12)
    assert spearman([1, 1, 1], [1, 2, 3]) is None


def test_ic_averages_sections_and_tallies_skips():
    sections = [
        CrossSection(0, [0, 1, 2, 3], [1, 2, 4, 3], [1, 2, 3, 4]),
        CrossSection(30, [0, 1, 2, 3], [4, 3, 2, 1], [1, 2, 3, 4]),
        CrossSection(60, [0, 1, 2, 3], [5, 5, 5, 5], [1, 2, 3, 4]),
    ]
    ic = information_coefficient(sections)
    assert ic.value == pytest.approx(-0.1, abs=1e-12)
    assert (ic.n_used, ic.n_skipped) == (2, 1)
    only_constant = information_coefficient(sections[2:])
    assert only_constant.value is None and only_constant.n_skipped == 1


def test_pooled_ic():
    sections = [CrossSection(0, [0, 1], [1, 2], [0.1, 0.2]), CrossSection(30, [0, 1], [3, 4], [0.3, 0.4])]
    ic = information_coefficient(sections, pooled=True)
    assert ic.pooled and ic.value == pytest.approx(1.0)


# ----------------------
# Deciles
# ----------------------

def test_decile_sizes_for_23_stocks():
    section = CrossSection(0, np.arange(23), np.random.default_rng(0).normal(size=23), np.zeros(23))
    sizes = np.bincount(decile_assign(section), minlength=10)
    assert tuple(sizes) == (3, 2, 2, 3, 2, 2, 3, 2, 2, 2)


def test_decile_ties_broken_by_stock_id():
    section = CrossSection(0, [15, 3, 8, 1, 0, 2, 9, 7, 6, 4], np.zeros(10), np.zeros(10))
    labels = decile_assign(section)
    assert labels.tolist() == [9, 3, 7, 1, 0, 2, 8, 6, 5, 4]


def test_too_few_stocks_for_deciles():
    with pytest.raises(MetricError):
        decile_assign(CrossSection(0, np.arange(9), np.arange(9.0), np.zeros(9)))


def test_hand_oracle_deciles_and_series():
    sections = hand_sections()
    expected = np.array([hand_decile_means(t) for t in range(3)])
    np.testing.assert_allclose(decile_returns(sections), expected.mean(axis=0), rtol=0, atol=1e-12)

    long_only = portfolio_series(sections, LONG_ONLY)
    long_short = portfolio_series(sections, LONG_SHORT)
    np.testing.assert_allclose(long_only, expected[:, 9], rtol=0, atol=1e-12)
    np.testing.assert_allclose(long_short, expected[:, 9] - expected[:, 0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(universe_series(sections), [hand_realized(t).mean() for t in range(3)], atol=1e-12)

    growth = (1 + long_only[0]) * (1 + long_only[1]) * (1 + long_only[2])
    assert annualized_return(long_only) == pytest.approx(growth ** 4 - 1, abs=1e-12)
    mean = sum(long_short) / 3
    std = math.sqrt(sum((x - mean) ** 2 for x in long_short) / 2)
    assert sharpe_ratio(long_short) == pytest.approx(mean / std * math.sqrt(12), abs=1e-12)


def test_perfect_ranking_gives_nondecreasing_deciles():
    rng = np.random.default_rng(1)
    realized = rng.normal(size=100)
    means = decile_returns([CrossSection(0, np.arange(100), realized, realized)])
    assert (np.diff(means) >= 0).all()


def test_rank_invariance_under_affine_map():
    rng = np.random.default_rng(2)
    sections = [CrossSection(t, np.arange(40), rng.normal(size=40), rng.normal(size=40)) for t in range(4)]
    moved = [CrossSection(s.timestamp, s.stock_ids, 2 * s.predictions + 0.01, s.realized) for s in sections]
    for a, b in zip(sections, moved):
        assert np.array_equal(decile_assign(a), decile_assign(b))
    assert information_coefficient(sections) == information_coefficient(moved)
    assert np.array_equal(decile_returns(sections), decile_returns(moved))
    for mode in (LONG_ONLY, LONG_SHORT):
        assert np.array_equal(portfolio_series(sections, mode), portfolio_series(moved, mode))


# ----------------------
# Series statistics
# ----------------------

def test_annualized_constant_return():
    assert annualized_return(np.full(24, 0.01)) == pytest.approx(0.126825, abs=1e-6)
    with pytest.raises(MetricError):
        annualized_return([0.1, -1.0])


def test_sharpe_examples():
    assert sharpe_ratio([0.02, 0.00, 0.04]) == pytest.approx(math.sqrt(12), abs=1e-12)
    with pytest.raises(MetricError):
        sharpe_ratio([0.01, 0.01, 0.01])
    with pytest.raises(MetricError):
        sharpe_ratio([0.01])


def test_cumulative_and_drawdown():
    np.testing.assert_allclose(cumulative_curve([0.1, 0.1]), [0.1, 0.21])
    assert max_drawdown([0.1, 0.1]) == 0.0
    assert max_drawdown([0.1, -0.5, 0.2]) == pytest.approx(-0.5)
    assert max_drawdown([-0.2]) == pytest.approx(-0.2)


# ----------------------
# Full report
# ----------------------

def test_full_report_with_perfect_predictions():
    rng = np.random.default_rng(3)
    targets = rng.normal(scale=0.05, size=12 * 50)
    panel = panel_from_sections(50, 12, targets)
    report = full_report(panel.targets.copy(), panel)
    assert report.ic == pytest.approx(1.0)
    assert report.ic_sections_used == 12 and report.ic_sections_skipped == 0
    assert report.decile_returns[9] == max(report.decile_returns)
    assert report.mape == 0.0
    assert len(report.long_only) == 12
    assert report.annualized_return[LONG_SHORT] > report.annualized_return[UNIVERSE]


def test_shuffled_predictions_have_small_ic():
    rng = np.random.default_rng(4)
    panel = panel_from_sections(1000, 12, rng.normal(scale=0.05, size=12 * 1000))
    preds = rng.permutation(panel.targets)
    assert abs(full_report(preds, panel).ic) < 0.1


def test_single_section_report_has_no_sharpe():
    panel = panel_from_sections(20, 1, np.linspace(-0.05, 0.05, 20))
    report = full_report(np.arange(20.0), panel)
    assert report.sharpe_ratio == {LONG_ONLY: None, LONG_SHORT: None, UNIVERSE: None}


def test_write_report_files(tmp_path):
    panel = panel_from_sections(20, 3, np.concatenate([hand_realized(t) for t in range(3)]))
    preds = np.tile([(3 * i) % 20 for i in range(N_STOCKS)], 3).astype(float)
    report = full_report(preds, panel)
    write_report(report, tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert {"long_only", "decile_returns", "annualized_return", "sharpe_ratio", "ic", "mape"} <= set(data)
    monthly = pd.read_csv(tmp_path / "monthly.csv", float_precision="round_trip")
    assert list(monthly.columns) == ["timestamp", LONG_ONLY, LONG_SHORT, UNIVERSE]
    np.testing.assert_array_equal(monthly[LONG_ONLY].to_numpy(), report.long_only)
    assert len(pd.read_csv(tmp_path / "deciles.csv")) == 10
    assert len(pd.read_csv(tmp_path / "cumulative.csv")) == 3


def test_wiped_out_month_leaves_compounding_statistics_unreported(tmp_path, caplog):
    # the two top-ranked stocks lose everything in the first month
    first = np.where(np.arange(N_STOCKS) >= 18, -1.0, 0.0)
    panel = panel_from_sections(N_STOCKS, 2, np.concatenate([first, np.linspace(-0.05, 0.05, N_STOCKS)]))
    report = full_report(np.tile(np.arange(float(N_STOCKS)), 2), panel)
    assert report.long_only[0] == -1.0
    for name in (LONG_ONLY, LONG_SHORT):
        assert report.annualized_return[name] is None
        assert report.max_drawdown[name] is None
    assert report.cumulative_long_only is None and report.cumulative_long_short is None
    assert report.annualized_return[UNIVERSE] is not None
    assert report.max_drawdown[UNIVERSE] < 0.0
    assert report.sharpe_ratio[LONG_ONLY] is not None
    assert "annualized_return of long_only not reported" in caplog.text
    write_report(report, tmp_path)
    assert json.loads((tmp_path / "report.json").read_text())["annualized_return"][LONG_ONLY] is None
    cumulative = pd.read_csv(tmp_path / "cumulative.csv", float_precision="round_trip")
    assert cumulative[LONG_ONLY].isna().all()
    assert cumulative[UNIVERSE].notna().all()


def test_cross_sections_from_arrays():
    sections = cross_sections_from_arrays([1, 0, 1], [30, 0, 0], [0.3, 0.2, 0.1], [3.0, 2.0, 1.0])
    assert [s.timestamp for s in sections] == [0, 30]
    assert sections[0].stock_ids.tolist() == [0, 1]
    assert sections[1].realized.tolist() == [3.0]
