"""
evaluation.py
Prediction metrics (MAPE, rank IC) and the decile backtest: decile assignment,
decile mean returns, long-only (decile 9) and long-short (decile 9 minus
decile 0) monthly series, the equal-weight universe benchmark, and summary
statistics over those series.

Conventions: portfolios are equally weighted and rebalanced every
cross-section with no costs; annualization is geometric over 12 periods;
Sharpe uses the sample standard deviation, zero risk-free rate and sqrt(12).
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from app.models import BacktestReport, CrossSection, Split
from src.dataset_io import group_by_timestamp
from src.errors import MetricError, ShapeError

logger = logging.getLogger(__name__)

N_DECILES = 10
PERIODS_PER_YEAR = 12
LONG_ONLY = "long_only"
LONG_SHORT = "long_short"
UNIVERSE = "universe"
SERIES = (LONG_ONLY, LONG_SHORT, UNIVERSE)


# ----------------------
# Prediction metrics
# ----------------------

def mape(preds, actuals, eps=1e-4):
    """Mean of |r - ŷ| / max(|r|, eps)."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    actuals = np.asarray(actuals, dtype=np.float64).reshape(-1)
    if preds.shape != actuals.shape:
        raise ShapeError(f"{preds.shape[0]} predictions vs {actuals.shape[0]} actuals")
    if preds.size == 0:
        raise MetricError("MAPE over zero instances")
    if not eps > 0:
        raise MetricError(f"MAPE floor must be positive, got {eps}")
    return float(np.mean(np.abs(actuals - preds) / np.maximum(np.abs(actuals), eps)))


@dataclass(frozen=True)
class ICResult:
    value: Optional[float]
    n_used: int
    n_skipped: int
    pooled: bool = False


def spearman(preds, actuals):
    """Spearman correlation with average ranks for ties; None when either ranking is constant."""
    rp = rankdata(preds)
    ra = rankdata(actuals)
    dp = rp - rp.mean()
    da = ra - ra.mean()
    denom = np.sqrt((dp @ dp) * (da @ da))
    if denom == 0.0:
        return None
    return float(np.clip((dp @ da) / denom, -1.0, 1.0))


def information_coefficient(sections, pooled=False):
    """
    Rank IC. Per-date (default): Spearman within each cross-section, averaged
    over the sections whose rankings are not constant; degenerate sections are
    counted in n_skipped. pooled=True ranks every instance together.
    """
    sections = list(sections)
    if not sections:
        raise MetricError("IC over zero cross-sections")
    if pooled:
        preds = np.concatenate([s.predictions for s in sections])
        realized = np.concatenate([s.realized for s in sections])
        value = spearman(preds, realized) if preds.size >= 2 else None
        return ICResult(value, int(value is not None), int(value is None), pooled=True)

    values, skipped = [], 0
    for section in sections:
        rho = spearman(section.predictions, section.realized) if len(section) >= 2 else None
        if rho is None:
            skipped += 1
            logger.debug("IC: skipped degenerate cross-section at %d", section.timestamp)
        else:
            values.append(rho)
    if skipped:
        logger.info("IC: %d of %d cross-sections skipped (constant ranking)", skipped, len(sections))
    value = float(np.mean(values)) if values else None
    return ICResult(value, len(values), skipped)


# ----------------------
# Deciles and portfolios
# ----------------------

def decile_assign(section):
    """Decile label (0..9) per stock, aligned with the section's order."""
    n = len(section)
    if n < N_DECILES:
        raise MetricError(f"cross-section at {section.timestamp} has {n} stocks; deciles need at least {N_DECILES}")
    # primary key: prediction, ties by stock_id
    order = np.lexsort((section.stock_ids, section.predictions))
    labels = np.empty(n, dtype=np.int64)
    labels[order] = (N_DECILES * np.arange(n)) // n
    return labels


def section_decile_means(section):
    labels = decile_assign(section)
    sums = np.bincount(labels, weights=section.realized, minlength=N_DECILES)
    counts = np.bincount(labels, minlength=N_DECILES)
    return sums / counts


def decile_returns(sections):
    """Mean realized return per decile, averaged across cross-sections."""
    sections = list(sections)
    if not sections:
        raise MetricError("decile returns over zero cross-sections")
    return np.mean([section_decile_means(s) for s in sections], axis=0)


def portfolio_series(sections, mode=LONG_ONLY):
    """One return per cross-section: mean of decile 9 (long_only) or decile 9 minus decile 0 (long_short)."""
    out = []
    for section in sections:
        means = section_decile_means(section)
        if mode == LONG_ONLY:
            out.append(means[N_DECILES - 1])
        elif mode == LONG_SHORT:
            out.append(means[N_DECILES - 1] - means[0])
        else:
            raise ValueError(f"unknown portfolio mode {mode!r}")
    return np.asarray(out, dtype=np.float64)


def universe_series(sections):
    """Equal-weight mean realized return of every name in each cross-section."""
    return np.asarray([s.realized.mean() for s in sections], dtype=np.float64)


# ----------------------
# Series statistics
# ----------------------

def _series(monthly, min_len=1):
    r = np.asarray(monthly, dtype=np.float64).reshape(-1)
    if r.size < min_len:
        raise MetricError(f"series needs at least {min_len} periods, got {r.size}")
    return r


def _check_solvent(r):
    if (r <= -1.0).any():
        raise MetricError("a period return <= -100% leaves no wealth to compound")


def annualized_return(monthly):
    r = _series(monthly)
    _check_solvent(r)
    # log-sum keeps long series from overflowing the product
    return float(np.expm1(np.log1p(r).sum() * PERIODS_PER_YEAR / r.size))


def sharpe_ratio(monthly):
    r = _series(monthly, min_len=2)
    std = r.std(ddof=1)
    if std == 0.0:
        raise MetricError("Sharpe ratio of a constant series is undefined")
    return float(r.mean() / std * np.sqrt(PERIODS_PER_YEAR))


def cumulative_curve(monthly):
    """Compounded wealth minus one after each period."""
    r = _series(monthly)
    _check_solvent(r)
    return np.cumprod(1.0 + r) - 1.0


def max_drawdown(monthly):
    """Largest peak-to-trough wealth decline as a non-positive fraction (0 when wealth never falls)."""
    wealth = np.concatenate([[1.0], 1.0 + cumulative_curve(monthly)])
    return float((wealth / np.maximum.accumulate(wealth) - 1.0).min())


# ----------------------
# Report
# ----------------------

def _guarded(metric, name, values):
    try:
        return metric(values)
    except MetricError as e:
        logger.warning("%s of %s not reported: %s", metric.__name__, name, e)
        return None


def _fmt(value):
    return "n/a" if value is None else f"{value:.4f}"


def full_report(predictions, dataset, eps=1e-4, pooled=False, split=Split.TEST):
    """
    Every backtest and prediction metric for one split's predictions (dataset order).
    A series statistic that is undefined (a month at or below -100%, a constant series) is None.
    """
    sections = group_by_timestamp(predictions, dataset, split)
    if not sections:
        raise MetricError(f"split {Split.parse(split).label} has no cross-sections")
    _, _, actuals = dataset.arrays(split)

    series = {
        LONG_ONLY: portfolio_series(sections, LONG_ONLY),
        LONG_SHORT: portfolio_series(sections, LONG_SHORT),
        UNIVERSE: universe_series(sections),
    }
    cumulative = {name: _guarded(cumulative_curve, name, values) for name, values in series.items()}

    ic = information_coefficient(sections, pooled=pooled)
    report = BacktestReport(
        timestamps=[s.timestamp for s in sections],
        long_only=series[LONG_ONLY].tolist(),
        long_short=series[LONG_SHORT].tolist(),
        universe=series[UNIVERSE].tolist(),
        cumulative_long_only=None if cumulative[LONG_ONLY] is None else cumulative[LONG_ONLY].tolist(),
        cumulative_long_short=None if cumulative[LONG_SHORT] is None else cumulative[LONG_SHORT].tolist(),
        cumulative_universe=None if cumulative[UNIVERSE] is None else cumulative[UNIVERSE].tolist(),
        decile_returns=decile_returns(sections).tolist(),
        annualized_return={name: _guarded(annualized_return, name, v) for name, v in series.items()},
        sharpe_ratio={name: _guarded(sharpe_ratio, name, v) for name, v in series.items()},
        max_drawdown={name: _guarded(max_drawdown, name, v) for name, v in series.items()},
        mape=mape(predictions, actuals, eps),
        ic=ic.value,
        ic_sections_used=ic.n_used,
        ic_sections_skipped=ic.n_skipped,
    )
    logger.info("backtest over %d cross-sections: IC=%s long-only ann.=%s long-short ann.=%s",
                len(sections), _fmt(ic.value),
                _fmt(report.annualized_return[LONG_ONLY]), _fmt(report.annualized_return[LONG_SHORT]))
    return report


def monthly_frame(report):
    return pd.DataFrame({
        "timestamp": report.timestamps,
        LONG_ONLY: report.long_only,
        LONG_SHORT: report.long_short,
        UNIVERSE: report.universe,
    })


def cumulative_frame(report):
    """Cumulative curves by month; a curve that cannot compound is a NaN column."""
    n = len(report.timestamps)
    column = lambda curve: np.full(n, np.nan) if curve is None else curve
    return pd.DataFrame({
        "timestamp": report.timestamps,
        LONG_ONLY: column(report.cumulative_long_only),
        LONG_SHORT: column(report.cumulative_long_short),
        UNIVERSE: column(report.cumulative_universe),
    })


def deciles_frame(report):
    return pd.DataFrame({"decile": np.arange(N_DECILES), "mean_return": report.decile_returns})


def write_report(report, out_dir):
    """report.json, monthly.csv, deciles.csv and cumulative.csv under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    monthly_frame(report).to_csv(out_dir / "monthly.csv", index=False, float_format="%.17g")
    deciles_frame(report).to_csv(out_dir / "deciles.csv", index=False, float_format="%.17g")
    cumulative_frame(report).to_csv(out_dir / "cumulative.csv", index=False, float_format="%.17g")
    logger.info("report files written to %s", out_dir)
    return out_dir / "report.json"


def cross_sections_from_arrays(stock_ids, timestamps, predictions, realized):
    """Group flat arrays into time-ordered cross-sections (for predictions that never lived in a dataset)."""
    frame = pd.DataFrame({"stock_id": stock_ids, "timestamp": timestamps,
                          "prediction": predictions, "realized": realized})
    return [CrossSection(int(ts), g["stock_id"].to_numpy(), g["prediction"].to_numpy(), g["realized"].to_numpy())
            for ts, g in frame.groupby("timestamp", sort=True)]
