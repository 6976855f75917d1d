"""
dataset_io.py
Panel dataset persistence (MFNR binary and CSV), time-based splitting,
factor standardization and grouping of predictions into cross-sections.

MFNR layout, little-endian throughout:
    magic "MFNR" | version u32 = 1 | n_instances u64 | d_f u32 | d_n u32 | horizon u32
    n_instances x (stock_id u32, timestamp i64, split u8, target f32, d_f x f32, d_n x f32)
    crc32 u32 over header + records
"""
import logging
import struct
import zlib
from pathlib import Path

import numpy as np
import pandas as pd

from app.models import CrossSection, PanelDataset, Split
from src.errors import (BadMagicError, CorruptionError, DatasetError, EmptyPartitionError, NonFiniteValueError,
                        ShapeError, TruncatedPayloadError, VersionMismatchError)

logger = logging.getLogger(__name__)

MAGIC = b"MFNR"
VERSION = 1
_HEADER = struct.Struct("<4sIQIII")
_TRAILER = struct.Struct("<I")


def _record_dtype(d_f, d_n):
    return np.dtype([
        ("stock_id", "<u4"),
        ("timestamp", "<i8"),
        ("split", "u1"),
        ("target", "<f4"),
        ("factors", "<f4", (d_f,)),
        ("news", "<f4", (d_n,)),
    ])


_U32_MAX = 2**32 - 1


def _check_storable(dataset):
    if len(dataset) and (dataset.stock_ids.min() < 0 or dataset.stock_ids.max() > _U32_MAX):
        raise DatasetError(f"stock ids must fit in u32 (0..{_U32_MAX}) to be stored in MFNR")
    for name in ("targets", "factors", "news"):
        values = getattr(dataset, name)
        if not np.array_equal(values.astype(np.float32).astype(np.float64), values):
            raise DatasetError(f"{name} are not exactly representable as f32; MFNR would silently round them "
                               f"(cast with astype(np.float32) first to store the rounded panel)")


def save_dataset(dataset, path):
    """
    Write the dataset in MFNR format. Values are stored as f32; a value that f32 cannot hold
    exactly, or a stock id outside u32, raises DatasetError instead of being rounded or wrapped.
    """
    path = Path(path)
    _check_storable(dataset)
    records = np.zeros(len(dataset), dtype=_record_dtype(dataset.d_f, dataset.d_n))
    records["stock_id"] = dataset.stock_ids
    records["timestamp"] = dataset.timestamps
    records["split"] = dataset.splits
    records["target"] = dataset.targets
    records["factors"] = dataset.factors
    records["news"] = dataset.news
    body = _HEADER.pack(MAGIC, VERSION, len(dataset), dataset.d_f, dataset.d_n, dataset.horizon_months)
    body += records.tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(body)
        f.write(_TRAILER.pack(zlib.crc32(body)))
    logger.debug("saved %d instances to %s", len(dataset), path)


def load_dataset(path):
    """Load an MFNR or CSV dataset; the format is detected from the leading bytes."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if raw[:4] == MAGIC:
        return _decode_mfnr(raw, path)
    if raw.lstrip()[:8] == b"stock_id":
        return load_dataset_csv(path)
    raise BadMagicError(f"{path}: unrecognized magic {raw[:4]!r}")


def _decode_mfnr(raw, path):
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header is truncated")
    magic, version, n, d_f, d_n, horizon = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    if d_f < 1 or d_n < 1:
        raise ShapeError(f"{path}: d_f and d_n must be positive")
    dtype = _record_dtype(d_f, d_n)
    expected = _HEADER.size + n * dtype.itemsize + _TRAILER.size
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes for {n} instances, found {len(raw)}")
    body = raw[:-_TRAILER.size]
    (stored_crc,) = _TRAILER.unpack_from(raw, len(raw) - _TRAILER.size)
    if zlib.crc32(body) != stored_crc:
        raise CorruptionError(f"{path}: checksum mismatch")
    if n == 0:
        records = np.zeros(0, dtype=dtype)
    else:
        records = np.frombuffer(body, dtype=dtype, count=n, offset=_HEADER.size)
    for column in ("target", "factors", "news"):
        if not np.isfinite(records[column]).all():
            raise NonFiniteValueError(f"{path}: non-finite value in column {column}")
    return PanelDataset(
        stock_ids=records["stock_id"].astype(np.int64),
        timestamps=records["timestamp"].astype(np.int64),
        splits=records["split"].astype(np.uint8),
        targets=records["target"].astype(np.float64),
        factors=records["factors"].astype(np.float64).reshape(n, d_f),
        news=records["news"].astype(np.float64).reshape(n, d_n),
        horizon_months=horizon,
    )


def _csv_columns(d_f, d_n):
    return ["stock_id", "timestamp", "split", "target"] + [f"f{i}" for i in range(d_f)] + [f"n{i}" for i in range(d_n)]


def save_dataset_csv(dataset, path):
    """Write the human-editable CSV form (header stock_id,timestamp,split,target,f0..,n0..)."""
    df = dataset.split_frame()
    factors = pd.DataFrame(dataset.factors.astype(np.float32), columns=[f"f{i}" for i in range(dataset.d_f)])
    news = pd.DataFrame(dataset.news.astype(np.float32), columns=[f"n{i}" for i in range(dataset.d_n)])
    df["target"] = df["target"].astype(np.float32)
    pd.concat([df, factors, news], axis=1).to_csv(path, index=False, float_format="%.9g")


def load_dataset_csv(path, horizon_months=1):
    df = pd.read_csv(path, float_precision="round_trip")
    head = list(df.columns[:4])
    if head != ["stock_id", "timestamp", "split", "target"]:
        raise BadMagicError(f"{path}: CSV header must start with stock_id,timestamp,split,target")
    factor_cols = [c for c in df.columns if c.startswith("f") and c[1:].isdigit()]
    news_cols = [c for c in df.columns if c.startswith("n") and c[1:].isdigit()]
    if list(df.columns) != _csv_columns(len(factor_cols), len(news_cols)):
        raise DatasetError(f"{path}: columns must be f0..f{{d_f-1}} then n0..n{{d_n-1}} in order")
    if not factor_cols or not news_cols:
        raise ShapeError(f"{path}: need at least one factor and one news column")
    values = df[["target"] + factor_cols + news_cols].to_numpy(dtype=np.float64)
    if not np.isfinite(values).all():
        raise NonFiniteValueError(f"{path}: non-finite value")
    # CSV values are stored as f32, like the binary format
    values = values.astype(np.float32).astype(np.float64)
    return PanelDataset(
        stock_ids=df["stock_id"].to_numpy(dtype=np.int64),
        timestamps=df["timestamp"].to_numpy(dtype=np.int64),
        splits=[Split.parse(s) for s in df["split"]],
        targets=values[:, 0],
        factors=values[:, 1:1 + len(factor_cols)],
        news=values[:, 1 + len(factor_cols):],
        horizon_months=horizon_months,
    )


def split_by_time(dataset, train_end, val_end):
    """Tag instances train (t <= train_end), val (train_end < t <= val_end) or test."""
    if not train_end < val_end:
        raise DatasetError(f"train_end ({train_end}) must precede val_end ({val_end})")
    ts = dataset.timestamps
    splits = np.where(ts <= train_end, Split.TRAIN, np.where(ts <= val_end, Split.VAL, Split.TEST)).astype(np.uint8)
    if not (splits == Split.TRAIN).any():
        raise EmptyPartitionError(f"no instance at or before train_end={train_end}")
    if not (splits == Split.TEST).any():
        raise EmptyPartitionError(f"no instance after val_end={val_end}; test partition is empty")
    return dataset.replace(splits=splits)


def standardize_factors(dataset, mode="zscore"):
    """
    Z-score each factor column with train-split statistics (population std), applied to every split.
    Columns whose train std is below 1e-12 are zeroed. Returns (dataset, stats DataFrame).
    """
    columns = [f"f{i}" for i in range(dataset.d_f)]
    if mode == "off":
        stats = pd.DataFrame({"mean": np.zeros(dataset.d_f), "std": np.ones(dataset.d_f)}, index=columns)
        return dataset, stats
    if mode != "zscore":
        raise DatasetError(f"unknown standardization mode {mode!r}")
    train = dataset.factors[dataset.split_mask(Split.TRAIN)]
    if train.shape[0] < 2:
        raise EmptyPartitionError("zscore standardization needs at least 2 train instances")
    mean = train.mean(axis=0)
    std = train.std(axis=0, ddof=0)
    degenerate = std < 1e-12
    scaled = (dataset.factors - mean) / np.where(degenerate, 1.0, std)
    scaled[:, degenerate] = 0.0
    stats = pd.DataFrame({"mean": mean, "std": std}, index=columns)
    if degenerate.any():
        logger.info("zeroed %d constant factor columns", int(degenerate.sum()))
    return dataset.replace(factors=scaled), stats


def group_by_timestamp(predictions, dataset, split=Split.TEST):
    """One CrossSection per distinct timestamp of the split, in time order."""
    mask = dataset.split_mask(split)
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if predictions.shape[0] != int(mask.sum()):
        raise ShapeError(f"{predictions.shape[0]} predictions for {int(mask.sum())} instances of split {Split.parse(split).label}")
    ts = dataset.timestamps[mask]
    ids = dataset.stock_ids[mask]
    realized = dataset.targets[mask]
    sections = []
    # rows are sorted by timestamp, so each group is a contiguous run
    bounds = np.flatnonzero(np.diff(ts)) + 1
    for rows in np.split(np.arange(ts.shape[0]), bounds):
        if rows.size:
            sections.append(CrossSection(int(ts[rows[0]]), ids[rows], predictions[rows], realized[rows]))
    return sections


def save_predictions(predictions, dataset, path, split=Split.TEST):
    """Write `stock_id,timestamp,prediction` for the instances of one split, in dataset order."""
    frame = dataset.split_frame(split)[["stock_id", "timestamp"]].copy()
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if predictions.shape[0] != len(frame):
        raise ShapeError(f"{predictions.shape[0]} predictions for {len(frame)} instances")
    frame["prediction"] = predictions
    frame.to_csv(path, index=False, float_format="%.17g")
    return Path(path)


def load_predictions(path, dataset, split=Split.TEST):
    """Read a predictions CSV and align it to the split's dataset order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"predictions file not found: {path}")
    df = pd.read_csv(path, float_precision="round_trip")
    missing = {"stock_id", "timestamp", "prediction"} - set(df.columns)
    if missing:
        raise DatasetError(f"{path}: missing columns {sorted(missing)}")
    if df.duplicated(["stock_id", "timestamp"]).any():
        raise DatasetError(f"{path}: duplicate (stock_id, timestamp) rows")
    keys = dataset.split_frame(split)[["stock_id", "timestamp"]]
    merged = keys.merge(df[["stock_id", "timestamp", "prediction"]], on=["stock_id", "timestamp"], how="left")
    if merged["prediction"].isna().any():
        n_missing = int(merged["prediction"].isna().sum())
        raise ShapeError(f"{path}: no prediction for {n_missing} of {len(keys)} {Split.parse(split).label} instances")
    if len(df) != len(keys):
        logger.warning("%s: %d rows do not belong to the %s split and are ignored",
                       path, len(df) - len(keys), Split.parse(split).label)
    return merged["prediction"].to_numpy(dtype=np.float64)
