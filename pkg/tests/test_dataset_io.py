import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../')))
import struct
import zlib

import numpy as np
import pandas as pd
import pytest

from app.models import CrossSection, Instance, PanelDataset, Split
from src.dataset_io import (group_by_timestamp, load_dataset, load_predictions, save_dataset, save_dataset_csv,
                            save_predictions, split_by_time, standardize_factors)
from src.errors import (BadMagicError, CorruptionError, DatasetError, DuplicateInstanceError, EmptyPartitionError,
                        NonFiniteValueError, ShapeError, TruncatedPayloadError, VersionMismatchError)


def make_panel(n_stocks=3, n_months=4, d_f=2, d_n=3, seed=0, splits=None):
    rng = np.random.default_rng(seed)
    n = n_stocks * n_months
    f32 = lambda a: a.astype(np.float32).astype(np.float64)
    return PanelDataset(
        stock_ids=np.tile(np.arange(n_stocks), n_months),
        timestamps=np.repeat(np.arange(n_months) * 30, n_stocks),
        splits=np.zeros(n, dtype=np.uint8) if splits is None else splits,
        targets=f32(rng.normal(0, 0.05, n)),
        factors=f32(rng.normal(size=(n, d_f))),
        news=f32(rng.normal(size=(n, d_n))),
    )


@pytest.fixture(scope="module")
def panel():
    return split_by_time(make_panel(n_stocks=3, n_months=12), train_end=7 * 30, val_end=9 * 30)


# ----------------------
# PanelDataset invariants
# ----------------------

def test_rows_sorted_by_timestamp_then_stock():
    ds = PanelDataset(stock_ids=[2, 1, 1], timestamps=[10, 20, 10], splits=[0, 0, 0],
                      targets=[0.1, 0.2, 0.3], factors=np.eye(3), news=np.ones((3, 1)))
    assert ds.timestamps.tolist() == [10, 10, 20]
    assert ds.stock_ids.tolist() == [1, 2, 1]
    assert ds.targets.tolist() == [0.3, 0.1, 0.2]


def test_duplicate_instance_rejected():
    with pytest.raises(DuplicateInstanceError):
        PanelDataset(stock_ids=[1, 1], timestamps=[10, 10], splits=[0, 0], targets=[0.0, 0.0],
                     factors=np.zeros((2, 1)), news=np.zeros((2, 1)))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteValueError):
        PanelDataset(stock_ids=[1], timestamps=[10], splits=[0], targets=[np.nan],
                     factors=np.zeros((1, 1)), news=np.zeros((1, 1)))


def test_test_before_train_rejected():
    with pytest.raises(DatasetError):
        PanelDataset(stock_ids=[1, 1], timestamps=[10, 20], splits=[2, 0], targets=[0.0, 0.0],
                     factors=np.zeros((2, 1)), news=np.zeros((2, 1)))


def test_arrays_are_read_only(panel):
    with pytest.raises(ValueError):
        panel.targets[0] = 1.0


def test_from_instances_checks_dims():
    inst = Instance(0, 0, np.zeros(2), np.zeros(3), 0.0)
    assert len(PanelDataset.from_instances([inst], d_f=2, d_n=3)) == 1
    with pytest.raises(ShapeError):
        PanelDataset.from_instances([inst], d_f=3, d_n=3)


# ----------------------
# MFNR binary format
# ----------------------

def test_mfnr_round_trip_is_bit_exact(panel, tmp_path):
    path = tmp_path / "panel.mfnr"
    save_dataset(panel, path)
    loaded = load_dataset(path)
    assert loaded == panel
    assert loaded.instances[5].stock_id == panel.instances[5].stock_id


def test_mfnr_header_layout(panel, tmp_path):
    path = tmp_path / "panel.mfnr"
    save_dataset(panel, path)
    raw = path.read_bytes()
    magic, version, n, d_f, d_n, horizon = struct.unpack_from("<4sIQIII", raw, 0)
    assert (magic, version, n, d_f, d_n, horizon) == (b"MFNR", 1, len(panel), 2, 3, 1)
    record_size = 4 + 8 + 1 + 4 + 4 * (d_f + d_n)
    assert len(raw) == 28 + n * record_size + 4


def test_empty_dataset_round_trip(tmp_path):
    empty = PanelDataset(stock_ids=[], timestamps=[], splits=[], targets=[],
                         factors=np.zeros((0, 3)), news=np.zeros((0, 4)))
    path = tmp_path / "empty.mfnr"
    save_dataset(empty, path)
    assert path.stat().st_size == 28 + 4
    loaded = load_dataset(path)
    assert len(loaded) == 0
    assert (loaded.d_f, loaded.d_n) == (3, 4)


def test_flipped_payload_byte_is_detected(tmp_path):
    one = make_panel(n_stocks=1, n_months=1)
    path = tmp_path / "one.mfnr"
    save_dataset(one, path)
    raw = bytearray(path.read_bytes())
    raw[28 + 14] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        load_dataset(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.mfnr"
    path.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(BadMagicError):
        load_dataset(path)


def test_version_mismatch(panel, tmp_path):
    path = tmp_path / "v2.mfnr"
    save_dataset(panel, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load_dataset(path)


def test_truncated_payload(panel, tmp_path):
    path = tmp_path / "short.mfnr"
    save_dataset(panel, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(TruncatedPayloadError):
        load_dataset(path)


def test_non_finite_value_in_file(tmp_path):
    one = make_panel(n_stocks=1, n_months=1, d_f=1, d_n=1)
    path = tmp_path / "nan.mfnr"
    save_dataset(one, path)
    body = bytearray(path.read_bytes()[:-4])
    # target f32 sits after stock_id (4), timestamp (8) and split (1)
    body[28 + 13:28 + 17] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
    with pytest.raises(NonFiniteValueError):
        load_dataset(path)


def test_save_rejects_values_f32_cannot_hold(panel, tmp_path):
    standardized, _ = standardize_factors(panel)
    with pytest.raises(DatasetError, match="factors"):
        save_dataset(standardized, tmp_path / "std.mfnr")
    assert not (tmp_path / "std.mfnr").exists()
    nudged = PanelDataset(panel.stock_ids, panel.timestamps, panel.splits, panel.targets + 1e-12, panel.factors,
                          panel.news)
    with pytest.raises(DatasetError, match="targets"):
        save_dataset(nudged, tmp_path / "nudged.mfnr")


def test_save_rejects_stock_ids_outside_u32(tmp_path):
    wide = PanelDataset(stock_ids=[2**32 + 7], timestamps=[0], splits=[0], targets=[0.5],
                        factors=np.zeros((1, 1)), news=np.zeros((1, 1)))
    with pytest.raises(DatasetError, match="u32"):
        save_dataset(wide, tmp_path / "wide.mfnr")
    edge = PanelDataset(stock_ids=[2**32 - 1], timestamps=[0], splits=[0], targets=[0.5],
                        factors=np.zeros((1, 1)), news=np.zeros((1, 1)))
    save_dataset(edge, tmp_path / "edge.mfnr")
    assert load_dataset(tmp_path / "edge.mfnr").stock_ids.tolist() == [2**32 - 1]


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.mfnr")


# ----------------------
# CSV format
# ----------------------

def test_two_row_csv_infers_dims(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text(
        "stock_id,timestamp,split,target,f0,f1,n0,n1,n2\n"
        "7,30,test,0.25,1.5,-2,0.5,0.25,0\n"
        "3,0,train,-0.5,0,1,1,2,3\n"
    )
    ds = load_dataset(path)
    assert (ds.d_f, ds.d_n, len(ds)) == (2, 3, 2)
    first = ds.instances[0]
    assert (first.stock_id, first.timestamp, first.split) == (3, 0, Split.TRAIN)
    assert first.target_return == -0.5
    assert first.news_embedding.tolist() == [1.0, 2.0, 3.0]
    assert ds.instances[1].factors.tolist() == [1.5, -2.0]


def test_csv_round_trip(panel, tmp_path):
    path = tmp_path / "panel.csv"
    save_dataset_csv(panel, path)
    assert load_dataset(path) == panel


# ----------------------
# Splitting and standardization
# ----------------------

def test_split_boundaries():
    ds = PanelDataset(stock_ids=[0, 0, 0], timestamps=[10, 20, 30], splits=[0, 0, 0], targets=[0.0] * 3,
                      factors=np.zeros((3, 1)), news=np.zeros((3, 1)))
    tagged = split_by_time(ds, train_end=10, val_end=20)
    assert tagged.splits.tolist() == [Split.TRAIN, Split.VAL, Split.TEST]


def test_split_counts(panel):
    assert (panel.split_size(Split.TRAIN), panel.split_size(Split.VAL), panel.split_size(Split.TEST)) == (24, 6, 6)


def test_empty_test_partition():
    with pytest.raises(EmptyPartitionError):
        split_by_time(make_panel(), train_end=10_000, val_end=20_000)


def test_standardize_off_is_identity(panel):
    out, stats = standardize_factors(panel, "off")
    assert out is panel
    assert stats["std"].tolist() == [1.0, 1.0]


def test_standardize_population_convention():
    ds = PanelDataset(stock_ids=[0, 0, 0], timestamps=[0, 30, 60], splits=[0, 0, 2], targets=[0.0] * 3,
                      factors=[[1.0, 5.0], [3.0, 5.0], [7.0, 5.0]], news=np.zeros((3, 1)))
    out, stats = standardize_factors(ds, "zscore")
    assert stats.loc["f0", "mean"] == 2.0
    assert stats.loc["f0", "std"] == 1.0
    assert out.factors[:, 0].tolist() == [-1.0, 1.0, 5.0]
    assert out.factors[:, 1].tolist() == [0.0, 0.0, 0.0]


def test_standardized_train_moments(panel):
    out, _ = standardize_factors(panel)
    train = out.factors[out.split_mask(Split.TRAIN)]
    assert np.abs(train.mean(axis=0)).max() <= 1e-9
    assert np.abs(train.std(axis=0) - 1.0).max() <= 1e-9


# ----------------------
# Cross-sections
# ----------------------

def test_group_by_timestamp_partitions_split(panel):
    preds = np.arange(panel.split_size(Split.TRAIN), dtype=float)
    sections = group_by_timestamp(preds, panel, Split.TRAIN)
    assert [s.timestamp for s in sections] == sorted(s.timestamp for s in sections)
    assert sum(len(s) for s in sections) == panel.split_size(Split.TRAIN)
    assert all(isinstance(s, CrossSection) and len(s) == 3 for s in sections)


def test_group_by_timestamp_from_unsorted_input():
    ds = PanelDataset(stock_ids=[1, 0, 1, 0], timestamps=[60, 60, 30, 30], splits=[2] * 4,
                      targets=[0.4, 0.3, 0.2, 0.1], factors=np.zeros((4, 1)), news=np.zeros((4, 1)))
    sections = group_by_timestamp(np.array([1.0, 2.0, 3.0, 4.0]), ds, Split.TEST)
    assert [s.timestamp for s in sections] == [30, 60]
    assert sections[0].realized.tolist() == [0.1, 0.2]
    assert sections[1].predictions.tolist() == [3.0, 4.0]


def test_group_by_timestamp_count_mismatch(panel):
    with pytest.raises(ShapeError):
        group_by_timestamp(np.zeros(3), panel, Split.TEST)


def test_predictions_csv_round_trip(panel, tmp_path):
    preds = np.linspace(-1, 1, panel.split_size(Split.TEST))
    path = save_predictions(preds, panel, tmp_path / "preds.csv")
    shuffled = pd.read_csv(path, float_precision="round_trip").sample(frac=1.0, random_state=0)
    shuffled.to_csv(path, index=False)
    assert np.array_equal(load_predictions(path, panel), preds)


def test_predictions_csv_missing_rows(panel, tmp_path):
    path = save_predictions(np.zeros(panel.split_size(Split.TEST)), panel, tmp_path / "preds.csv")
    pd.read_csv(path, float_precision="round_trip").iloc[1:].to_csv(path, index=False)
    with pytest.raises(ShapeError):
        load_predictions(path, panel)
