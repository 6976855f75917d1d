"""
models.py
Domain records for the fusion-learning toolkit: panel data, synthetic-generator
configuration, predictor/mixture specs, training configuration and logs, and
backtest/variance reports. Every record here is plain data; the behaviour lives
in the modules under src/.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum, IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.errors import ConfigError, DatasetError, DuplicateInstanceError, NonFiniteValueError, ShapeError


class Split(IntEnum):
    TRAIN = 0
    VAL = 1
    TEST = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "Split":
        if isinstance(value, Split):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise DatasetError(f"unknown split tag {value!r}") from None
        return cls(int(value))


class Regime(str, Enum):
    FACTORS_ONLY = "FACTORS_ONLY"
    BOTH = "BOTH"


class PredictorKind(str, Enum):
    FACTORS_ALONE = "FACTORS_ALONE"
    NEWS_ALONE = "NEWS_ALONE"
    FININ = "FININ"
    FUSION_COMBINATION = "FUSION_COMBINATION"
    FUSION_SUMMATION = "FUSION_SUMMATION"
    FUSION_ATTENTION = "FUSION_ATTENTION"


class Scheme(str, Enum):
    STANDALONE = "standalone"
    MIXTURE_CONVENTIONAL = "mixture_conventional"
    MIXTURE_DECOUPLED = "mixture_decoupled"


# ---------------------------
# Panel data
# ---------------------------

@dataclass(frozen=True)
class Instance:
    """One (stock, timestamp) sample."""
    stock_id: int
    timestamp: int
    factors: np.ndarray
    news_embedding: np.ndarray
    target_return: float
    split: Split = Split.TRAIN


def _frozen(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


class PanelDataset:
    """
    Time-indexed collection of instances, stored column-wise.

    Rows are kept sorted by (timestamp, stock_id). The arrays are read-only, so
    a dataset can be shared freely; every transformation returns a new one.
    """

    def __init__(
        self,
        stock_ids: Sequence[int],
        timestamps: Sequence[int],
        splits: Sequence[int],
        targets: Sequence[float],
        factors: np.ndarray,
        news: np.ndarray,
        horizon_months: int = 1,
    ):
        stock_ids = np.asarray(stock_ids, dtype=np.int64).reshape(-1)
        timestamps = np.asarray(timestamps, dtype=np.int64).reshape(-1)
        splits = np.asarray(splits).reshape(-1)
        if splits.dtype.kind not in "iu":
            splits = np.array([int(Split.parse(s)) for s in splits], dtype=np.int64)
        if np.any((splits < 0) | (splits > Split.TEST)):
            raise DatasetError("split tag out of range")
        splits = splits.astype(np.uint8)
        targets = np.asarray(targets, dtype=np.float64).reshape(-1)
        factors = np.asarray(factors, dtype=np.float64)
        news = np.asarray(news, dtype=np.float64)

        n = stock_ids.shape[0]
        if factors.ndim != 2 or news.ndim != 2:
            raise ShapeError("factors and news must be 2-D (instances x dims)")
        if not (timestamps.shape[0] == splits.shape[0] == targets.shape[0]
                == factors.shape[0] == news.shape[0] == n):
            raise ShapeError("column lengths differ")
        if factors.shape[1] < 1 or news.shape[1] < 1:
            raise ShapeError("d_f and d_n must be positive")
        if horizon_months < 1:
            raise DatasetError("horizon_months must be positive")
        if not (np.isfinite(targets).all() and np.isfinite(factors).all() and np.isfinite(news).all()):
            raise NonFiniteValueError("dataset contains NaN or Inf")
        if np.any(stock_ids < 0):
            raise DatasetError("stock ids must be nonnegative")

        order = np.lexsort((stock_ids, timestamps))
        stock_ids, timestamps, splits = stock_ids[order], timestamps[order], splits[order]
        targets, factors, news = targets[order], factors[order], news[order]

        if n > 1:
            same = (np.diff(timestamps) == 0) & (np.diff(stock_ids) == 0)
            if same.any():
                i = int(np.flatnonzero(same)[0])
                raise DuplicateInstanceError(
                    f"duplicate instance stock_id={stock_ids[i]} timestamp={timestamps[i]}")
        _check_split_order(timestamps, splits)

        self.horizon_months = int(horizon_months)
        self.stock_ids = _frozen(stock_ids)
        self.timestamps = _frozen(timestamps)
        self.splits = _frozen(splits)
        self.targets = _frozen(targets)
        self.factors = _frozen(factors)
        self.news = _frozen(news)

    @classmethod
    def from_instances(cls, instances: Sequence[Instance], d_f: int, d_n: int,
                       horizon_months: int = 1) -> "PanelDataset":
        for inst in instances:
            if len(inst.factors) != d_f or len(inst.news_embedding) != d_n:
                raise ShapeError(f"instance ({inst.stock_id}, {inst.timestamp}) does not match d_f={d_f}, d_n={d_n}")
        return cls(
            stock_ids=[i.stock_id for i in instances],
            timestamps=[i.timestamp for i in instances],
            splits=np.array([int(i.split) for i in instances], dtype=np.uint8),
            targets=[i.target_return for i in instances],
            factors=np.array([i.factors for i in instances], dtype=np.float64).reshape(len(instances), d_f),
            news=np.array([i.news_embedding for i in instances], dtype=np.float64).reshape(len(instances), d_n),
            horizon_months=horizon_months,
        )

    @property
    def d_f(self) -> int:
        return int(self.factors.shape[1])

    @property
    def d_n(self) -> int:
        return int(self.news.shape[1])

    def __len__(self) -> int:
        return int(self.stock_ids.shape[0])

    @property
    def instances(self) -> Tuple[Instance, ...]:
        return tuple(
            Instance(int(s), int(t), self.factors[i], self.news[i], float(r), Split(int(tag)))
            for i, (s, t, tag, r) in enumerate(zip(self.stock_ids, self.timestamps, self.splits, self.targets))
        )

    def split_mask(self, split) -> np.ndarray:
        return self.splits == int(Split.parse(split))

    def split_size(self, split) -> int:
        return int(self.split_mask(split).sum())

    def arrays(self, split=None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x_f, x_n, r) for one split, or for every row when split is None."""
        if split is None:
            return self.factors, self.news, self.targets
        mask = self.split_mask(split)
        return self.factors[mask], self.news[mask], self.targets[mask]

    def replace(self, splits=None, factors=None) -> "PanelDataset":
        return PanelDataset(
            self.stock_ids, self.timestamps,
            self.splits if splits is None else np.asarray(splits, dtype=np.uint8),
            self.targets,
            self.factors if factors is None else factors,
            self.news, self.horizon_months,
        )

    def split_frame(self, split=None) -> pd.DataFrame:
        """Key columns (stock_id, timestamp, split, target) of one split as a DataFrame."""
        mask = np.ones(len(self), dtype=bool) if split is None else self.split_mask(split)
        return pd.DataFrame({
            "stock_id": self.stock_ids[mask],
            "timestamp": self.timestamps[mask],
            "split": [Split(int(s)).label for s in self.splits[mask]],
            "target": self.targets[mask],
        })

    def __eq__(self, other) -> bool:
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (
            self.horizon_months == other.horizon_months
            and self.factors.shape == other.factors.shape
            and self.news.shape == other.news.shape
            and np.array_equal(self.stock_ids, other.stock_ids)
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.splits, other.splits)
            and np.array_equal(self.targets, other.targets)
            and np.array_equal(self.factors, other.factors)
            and np.array_equal(self.news, other.news)
        )

    __hash__ = None

    def __repr__(self) -> str:
        counts = {s.label: self.split_size(s) for s in Split}
        return f"PanelDataset(n={len(self)}, d_f={self.d_f}, d_n={self.d_n}, horizon={self.horizon_months}, splits={counts})"


def _check_split_order(timestamps: np.ndarray, splits: np.ndarray) -> None:
    # train < val < test in time, with no shared timestamps across tags
    bounds = []
    for tag in Split:
        ts = timestamps[splits == tag]
        if ts.size:
            bounds.append((tag, int(ts.min()), int(ts.max())))
    for (tag_a, _, max_a), (tag_b, min_b, _) in zip(bounds, bounds[1:]):
        if max_a >= min_b:
            raise DatasetError(
                f"split boundaries are not contiguous in time: {tag_a.label} ends at {max_a}, "
                f"{tag_b.label} starts at {min_b}")


@dataclass(frozen=True)
class CrossSection:
    """Stocks sharing one rebalance timestamp, with predicted and realized returns."""
    timestamp: int
    stock_ids: np.ndarray
    predictions: np.ndarray
    realized: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "stock_ids", np.asarray(self.stock_ids, dtype=np.int64))
        object.__setattr__(self, "predictions", np.asarray(self.predictions, dtype=np.float64))
        object.__setattr__(self, "realized", np.asarray(self.realized, dtype=np.float64))
        n = self.stock_ids.shape[0]
        if n < 1 or self.predictions.shape[0] != n or self.realized.shape[0] != n:
            raise ShapeError("cross-section sequences must be non-empty and of equal length")
        if np.unique(self.stock_ids).shape[0] != n:
            raise DuplicateInstanceError(f"duplicate stock_id in cross-section at {self.timestamp}")

    def __len__(self) -> int:
        return int(self.stock_ids.shape[0])


# ---------------------------
# Synthetic generator
# ---------------------------

@dataclass
class SynthConfig:
    n_stocks: int = 100
    n_months: int = 36
    d_f: int = 20
    d_n: int = 32
    factor_signal_dim: int = 4
    news_signal_dim: int = 4
    noise_std_factors: float = 0.1
    noise_std_news: float = 0.1
    noise_std_return: float = 0.03
    regime_schedule: List[Regime] = field(default_factory=list)
    beta_news: float = 1.0
    seed: int = 0
    news_regime_shift: float = 0.0
    return_scale: float = 1.0
    start_day: int = 0
    horizon_months: int = 1

    def __post_init__(self):
        self.regime_schedule = [Regime(r) if not isinstance(r, Regime) else r for r in self.regime_schedule]

    def validate(self) -> "SynthConfig":
        for name in ("n_stocks", "n_months", "d_f", "d_n", "factor_signal_dim", "news_signal_dim", "horizon_months"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.factor_signal_dim > self.d_f:
            raise ConfigError("factor_signal_dim", f"must be <= d_f ({self.d_f})")
        if self.news_signal_dim > self.d_n:
            raise ConfigError("news_signal_dim", f"must be <= d_n ({self.d_n})")
        for name in ("noise_std_factors", "noise_std_news", "noise_std_return"):
            if not float(getattr(self, name)) >= 0:
                raise ConfigError(name, "must be >= 0")
        if len(self.regime_schedule) != self.n_months:
            raise ConfigError("regime_schedule",
                              f"length {len(self.regime_schedule)} does not match n_months {self.n_months}")
        return self

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["regime_schedule"] = [r.value for r in self.regime_schedule]
        return out


@dataclass(frozen=True)
class Latents:
    """Per-instance latent state retained by the generator, in dataset row order."""
    stock_ids: np.ndarray
    timestamps: np.ndarray
    s_f: np.ndarray
    s_n: np.ndarray
    regimes: Tuple[Regime, ...]

    def __len__(self) -> int:
        return int(self.stock_ids.shape[0])


# ---------------------------
# Models and training
# ---------------------------

@dataclass(frozen=True)
class PredictorSpec:
    kind: PredictorKind
    d_f: int
    d_n: int
    hidden_dim: int = 64
    dropout_rate: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "kind", PredictorKind(self.kind))
        if self.hidden_dim < 1 or self.d_f < 1 or self.d_n < 1:
            raise ConfigError("model", "d_f, d_n and hidden_dim must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate", "must be in [0, 1)")

    def to_dict(self) -> Dict:
        return {"kind": self.kind.value, "d_f": self.d_f, "d_n": self.d_n,
                "hidden_dim": self.hidden_dim, "dropout_rate": self.dropout_rate}

    @classmethod
    def from_dict(cls, data: Dict) -> "PredictorSpec":
        return cls(**data)


@dataclass(frozen=True)
class MixtureSpec:
    """Factors component (FACTORS_ALONE) + fusion component (FUSION_COMBINATION) + gate."""
    d_f: int
    d_n: int
    hidden_dim: int = 64
    dropout_rate: float = 0.3

    def component(self, kind: PredictorKind) -> PredictorSpec:
        return PredictorSpec(kind, self.d_f, self.d_n, self.hidden_dim, self.dropout_rate)

    def to_dict(self) -> Dict:
        return {"kind": "MIXTURE", "d_f": self.d_f, "d_n": self.d_n,
                "hidden_dim": self.hidden_dim, "dropout_rate": self.dropout_rate}


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    dropout: float = 0.3
    optimizer: str = "adam"
    seed: int = 0
    scheme: Scheme = Scheme.STANDALONE
    tau: float = 0.01
    lambda_match: float = 1.0
    log_every: int = 50

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)

    def validate(self, n_train: Optional[int] = None) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be positive")
        if self.epochs < 0:
            raise ConfigError("train.epochs", "must be >= 0")
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr", "must be positive")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", "must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("train.dropout", "must be in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("train.optimizer", "must be 'adam' or 'sgd'")
        if self.tau <= 0:
            raise ConfigError("train.tau", "must be positive")
        if self.lambda_match < 0:
            raise ConfigError("train.lambda_match", "must be >= 0")
        if self.log_every < 1:
            raise ConfigError("train.log_every", "must be positive")
        if n_train is not None and self.batch_size > n_train:
            raise ConfigError("train.batch_size", f"{self.batch_size} exceeds train size {n_train}")
        return self

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["scheme"] = self.scheme.value
        return out


@dataclass(frozen=True)
class TrainRecord:
    step: int
    epoch: int
    scheme: str
    component: str
    mse: float
    kl: float
    lr: float
    wall_clock: float


@dataclass
class TrainLog:
    scheme: Scheme
    records: List[TrainRecord] = field(default_factory=list)

    def append(self, record: TrainRecord) -> None:
        if self.records and record.step < self.records[-1].step:
            raise ValueError("train log steps must be monotone")
        self.records.append(record)

    def to_frame(self) -> pd.DataFrame:
        columns = ["step", "component", "mse", "kl", "lr", "epoch", "wall_clock"]
        if not self.records:
            return pd.DataFrame(columns=columns)
        return pd.DataFrame([asdict(r) for r in self.records])[columns]

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------
# Reports
# ---------------------------

@dataclass
class BacktestReport:
    timestamps: List[int]
    long_only: List[float]
    long_short: List[float]
    universe: List[float]
    cumulative_long_only: Optional[List[float]]
    cumulative_long_short: Optional[List[float]]
    cumulative_universe: Optional[List[float]]
    decile_returns: List[float]
    annualized_return: Dict[str, Optional[float]]
    sharpe_ratio: Dict[str, Optional[float]]
    max_drawdown: Dict[str, Optional[float]]
    mape: float
    ic: Optional[float]
    ic_sections_used: int
    ic_sections_skipped: int

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class VarianceEstimate:
    """Moments of per-instance gradients for one component (trace convention for vectors)."""
    n: int
    mean_delta: np.ndarray
    var_delta: float
    mean_p: float
    var_p: float
    var_zeta: float
    mean_sq_norm_zeta: float

    def closed_form(self) -> float:
        return 4.0 * self.mean_p ** 2 * self.var_zeta + 4.0 * self.mean_sq_norm_zeta * self.var_p

    def to_dict(self) -> Dict:
        return {
            "n": self.n,
            "mean_delta": np.asarray(self.mean_delta, dtype=np.float64).tolist(),
            "var_delta": self.var_delta,
            "mean_p": self.mean_p,
            "var_p": self.var_p,
            "var_zeta": self.var_zeta,
            "mean_sq_norm_zeta": self.mean_sq_norm_zeta,
        }


# ---------------------------
# Run configuration sections
# ---------------------------

@dataclass
class DataSection:
    path: Optional[str] = None
    train_end: Optional[int] = None
    val_end: Optional[int] = None
    standardize: str = "zscore"


@dataclass
class ModelSection:
    kind: str = "MIXTURE"
    hidden_dim: int = 64


@dataclass
class EvalSection:
    mape_eps: float = 1e-4
    ic_pooled: bool = False


@dataclass
class VarlabSection:
    p_low: float = 0.2
    p_high: float = 0.8
    p_constant: Optional[float] = None
    zeta_mean: List[float] = field(default_factory=lambda: [1.0])
    zeta_std: List[float] = field(default_factory=lambda: [1.0])
    n_samples: int = 1_000_000
    probe_instances: int = 512


@dataclass
class RunConfig:
    seed: int
    synth: Optional[SynthConfig] = None
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    varlab: VarlabSection = field(default_factory=VarlabSection)

    def to_dict(self) -> Dict:
        return {
            "seed": self.seed,
            "synth": None if self.synth is None else self.synth.to_dict(),
            "data": asdict(self.data),
            "model": asdict(self.model),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
            "varlab": asdict(self.varlab),
        }
