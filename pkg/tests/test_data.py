"""Dataset loaders, the skewed partitioner, and the minibatch sampler."""

from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skewsim.cluster import run_experiment
from skewsim.data import (
    BatchSampler,
    load_csv,
    load_idx,
    make_partition_plan,
    plan_from_json,
    plan_to_json,
    skew_report,
    synth_dataset,
)
from skewsim.errors import ConfigError, FormatError, ShapeError

from conftest import tiny_config

# 99th percentile of chi-square with (5-1)*(10-1) = 36 degrees of freedom
CHI2_36_P99 = 58.619


def test_synth_dataset_is_deterministic():
    a = synth_dataset(4, 200, 8, 3.0, seed=11)
    b = synth_dataset(4, 200, 8, 3.0, seed=11)
    assert a.x.tobytes() == b.x.tobytes()
    assert np.array_equal(a.y, b.y)
    c = synth_dataset(4, 200, 8, 3.0, seed=12)
    assert a.x.tobytes() != c.x.tobytes()


def test_synth_split_is_stratified_and_disjoint():
    ds = synth_dataset(5, 500, 8, 3.0, seed=0, val_fraction=0.2)
    assert set(ds.train_idx) & set(ds.val_idx) == set()
    assert len(ds.train_idx) + len(ds.val_idx) == 500
    for c in range(5):
        n_c = int(np.sum(ds.y == c))
        n_val = int(np.sum(ds.y[ds.val_idx] == c))
        assert n_val == round(0.2 * n_c)


def test_zero_separation_trains_to_chance():
    cfg = tiny_config(
        synth_classes=4, synth_samples=2000, synth_separation=0.0,
        nodes=2, epochs=3,
    )
    log = run_experiment(cfg)
    assert abs(log.summary["final_val_acc"] - 0.25) < 0.05


def test_synth_rejects_degenerate_shapes():
    with pytest.raises(ConfigError):
        synth_dataset(1, 100, 8, 3.0, seed=0)
    with pytest.raises(ConfigError):
        synth_dataset(10, 5, 8, 3.0, seed=0)


# -- IDX ---------------------------------------------------------------------


def _write_idx_pair(tmp_path, n=4, rows=2, cols=2, labels=(0, 1, 2, 1), classes=3):
    images = tmp_path / "images.idx"
    lbls = tmp_path / "labels.idx"
    pixels = bytes(range(n * rows * cols))
    images.write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols) + pixels)
    lbls.write_bytes(struct.pack(">II", 0x00000801, n) + bytes(labels))
    return str(images), str(lbls), classes


def test_idx_round_trip(tmp_path):
    images, labels, classes = _write_idx_pair(tmp_path)
    ds = load_idx(images, labels, num_classes=classes, val_fraction=0.0)
    assert ds.x.shape == (4, 4)
    assert ds.image_shape == (1, 2, 2)
    assert np.array_equal(ds.y, [0, 1, 2, 1])
    assert ds.x.max() <= 1.0 and ds.x[0, 0] == 0.0
    # pixel 5 of the raw stream lands at sample 1, feature 1
    assert ds.x[1, 1] == pytest.approx(5 / 255)


def test_idx_truncated_header(tmp_path):
    images, labels, _ = _write_idx_pair(tmp_path)
    blob = open(images, "rb").read()
    open(images, "wb").write(blob[:10])
    with pytest.raises(FormatError, match="unexpected EOF"):
        load_idx(images, labels)


def test_idx_truncated_pixels(tmp_path):
    images, labels, _ = _write_idx_pair(tmp_path)
    blob = open(images, "rb").read()
    open(images, "wb").write(blob[:-3])
    with pytest.raises(FormatError, match="unexpected EOF"):
        load_idx(images, labels)


def test_idx_label_out_of_declared_range(tmp_path):
    images, labels, _ = _write_idx_pair(tmp_path, labels=(0, 1, 5, 1))
    with pytest.raises(FormatError, match="out of range"):
        load_idx(images, labels, num_classes=3)


def test_idx_count_mismatch(tmp_path):
    images, labels, _ = _write_idx_pair(tmp_path)
    lbl_blob = struct.pack(">II", 0x00000801, 3) + bytes((0, 1, 2))
    open(labels, "wb").write(lbl_blob)
    with pytest.raises(FormatError, match="does not match"):
        load_idx(images, labels)


def test_idx_bad_magic(tmp_path):
    images, labels, _ = _write_idx_pair(tmp_path)
    blob = bytearray(open(images, "rb").read())
    blob[3] = 0x99
    open(images, "wb").write(bytes(blob))
    with pytest.raises(FormatError, match="bad magic"):
        load_idx(images, labels)


# -- CSV ---------------------------------------------------------------------


def test_csv_round_trip(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,f0,f1\n0,1.5,2.0\n1,0.5,-1.0\n0,2.5,0.0\n1,3.5,1.0\n")
    ds = load_csv(str(path), val_fraction=0.0)
    assert ds.num_classes == 2
    assert np.array_equal(ds.y, [0, 1, 0, 1])
    assert ds.x[0, 1] == pytest.approx(2.0)


def test_csv_requires_label_header(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,f0\n0,1.0\n")
    with pytest.raises(FormatError, match="label"):
        load_csv(str(path))


def test_csv_rejects_out_of_range_labels(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,f0\n0,1.0\n7,2.0\n")
    with pytest.raises(FormatError, match="labels outside"):
        load_csv(str(path), num_classes=2)


# -- partitioning --------------------------------------------------------------


def test_full_skew_gives_exclusive_two_label_partitions():
    ds = synth_dataset(10, 3000, 16, 3.0, seed=1)
    plan = make_partition_plan(ds, 5, 1.0, seed=2)
    shares = skew_report(plan, ds)
    for label in range(10):
        home = label % 5
        assert shares[home, label] == pytest.approx(1.0)
        assert np.all(shares[np.arange(5) != home, label] == 0.0)
    for p in range(5):
        present = np.nonzero(shares[p] > 0)[0]
        assert list(present) == plan.label_groups[p] == [p, p + 5]


def test_half_skew_single_label_share():
    # home keeps 50%, the scattered half splits across K=2: 0.5 + 0.25 = 0.75
    ds = synth_dataset(2, 4000, 8, 3.0, seed=3)
    plan = make_partition_plan(ds, 2, 0.5, seed=4)
    shares = skew_report(plan, ds)
    assert abs(shares[0, 0] - 0.75) < 0.02
    assert abs(shares[1, 1] - 0.75) < 0.02


def test_zero_skew_matches_global_histogram():
    ds = synth_dataset(10, 5000, 16, 3.0, seed=5)
    plan = make_partition_plan(ds, 5, 0.0, seed=6)
    y = ds.y[ds.train_idx]
    assignment = plan.assignment[ds.train_idx]
    table = np.zeros((5, 10))
    for p in range(5):
        for label, count in zip(*np.unique(y[assignment == p], return_counts=True)):
            table[p, int(label)] = count
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / table.sum()
    stat = float(np.sum((table - expected) ** 2 / expected))
    assert stat < CHI2_36_P99
    shares = skew_report(plan, ds)
    assert np.all(np.abs(shares - 0.2) < 0.1)


def test_home_counts_round_per_label():
    ds = synth_dataset(10, 2000, 16, 3.0, seed=7)
    plan = make_partition_plan(ds, 5, 0.2, seed=8)
    y = ds.y[ds.train_idx]
    for label, count in enumerate(plan.home_counts):
        n_l = int(np.sum(y == label))
        assert count == round(0.2 * n_l)
        assert abs(count - 0.2 * n_l) <= 0.5


def test_partition_plan_validation():
    ds = synth_dataset(4, 200, 8, 3.0, seed=0)
    with pytest.raises(ConfigError):
        make_partition_plan(ds, 3, 1.5, seed=0)
    with pytest.raises(ConfigError):
        make_partition_plan(ds, 0, 0.5, seed=0)
    with pytest.raises(ConfigError):
        make_partition_plan(ds, 5, 0.5, seed=0)  # more partitions than labels
    make_partition_plan(ds, 5, 0.0, seed=0)  # fine without home assignment


def test_plan_json_round_trip():
    ds = synth_dataset(6, 600, 8, 3.0, seed=9)
    plan = make_partition_plan(ds, 3, 0.4, seed=10)
    text = plan_to_json(plan)
    back = plan_from_json(text)
    assert back.num_partitions == plan.num_partitions
    assert back.skew_fraction == plan.skew_fraction
    assert back.label_groups == plan.label_groups
    assert back.home_counts == plan.home_counts
    assert np.array_equal(back.assignment, plan.assignment)
    assert plan_to_json(back) == text


@settings(max_examples=20, deadline=None)
@given(
    alpha=st.floats(min_value=0.0, max_value=1.0),
    k=st.integers(min_value=1, max_value=6),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_partition_cover_and_determinism(alpha, k, seed):
    ds = synth_dataset(6, 240, 4, 2.0, seed=17)
    plan = make_partition_plan(ds, k, alpha, seed=seed)
    again = make_partition_plan(ds, k, alpha, seed=seed)
    assert np.array_equal(plan.assignment, again.assignment)
    assigned = plan.assignment[ds.train_idx]
    assert np.all((assigned >= 0) & (assigned < k))
    assert np.all(plan.assignment[ds.val_idx] == -1)
    assert sum(len(p) for p in plan.partitions()) == len(ds.train_idx)


def test_zero_skew_partition_sizes_balanced():
    ds = synth_dataset(6, 601, 4, 2.0, seed=18)
    plan = make_partition_plan(ds, 4, 0.0, seed=19)
    sizes = [len(p) for p in plan.partitions()]
    assert max(sizes) - min(sizes) <= 1


# -- batch sampler --------------------------------------------------------------


def test_sampler_covers_each_cycle_exactly_once():
    indices = np.arange(100, 107)
    sampler = BatchSampler(indices, batch_size=3, seed=1)
    drawn = np.concatenate([sampler.next_batch() for _ in range(7)])  # 21 = 3 cycles
    assert sorted(drawn.tolist()) == sorted(indices.tolist() * 3)
    for start in (0, 7, 14):
        assert sorted(drawn[start : start + 7].tolist()) == sorted(indices.tolist())


def test_sampler_wrap_fills_short_tail():
    sampler = BatchSampler(np.arange(5), batch_size=4, seed=2)
    first = sampler.next_batch()
    second = sampler.next_batch()
    assert len(first) == len(second) == 4
    assert len(np.unique(second)) >= 2  # spans the wrap: tail plus fresh permutation


def test_sampler_state_round_trip():
    sampler = BatchSampler(np.arange(11), batch_size=4, seed=3)
    for _ in range(3):
        sampler.next_batch()
    state = sampler.state()
    expected = [sampler.next_batch().tolist() for _ in range(4)]
    sampler.restore(state)
    replayed = [sampler.next_batch().tolist() for _ in range(4)]
    assert replayed == expected


def test_sampler_rejects_empty_partition():
    with pytest.raises(ShapeError):
        BatchSampler(np.array([], dtype=np.int64), batch_size=2, seed=0)
