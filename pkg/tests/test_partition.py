import logging

import numpy as np
import pytest

from scmfit.errors import ConfigurationError, DataError
from scmfit.model import BasisSpec, BlockModel, Link
from scmfit.partition import (
    LongData,
    Partition,
    from_balanced_arrays,
    make_partition,
    read_long_csv,
    split,
    write_long_csv,
)


def _balanced(n=4, times=None, seed=0, q=1, p=0):
    rng = np.random.default_rng(seed)
    times = np.arange(-15.0, 16.0) if times is None else np.asarray(times, dtype=float)
    m = len(times)
    y = rng.standard_normal((n, m))
    X = rng.standard_normal((n, m, q))
    Z = rng.standard_normal((n, m, p))
    return from_balanced_arrays(y, X, Z, times)


def test_make_partition_examples():
    assert make_partition(edges=(-15, 0, 15)).n_blocks == 2
    assert make_partition(edges=(0, 20, 40, 60, 80, 99)).n_blocks == 5
    assert make_partition(edges=(0, 1)).n_blocks == 1


def test_make_partition_uniform():
    part = make_partition(n_blocks=4, domain=(0.0, 8.0))
    np.testing.assert_allclose(part.edges, [0, 2, 4, 6, 8])
    with pytest.raises(ConfigurationError):
        make_partition()
    with pytest.raises(ConfigurationError):
        make_partition(edges=(0, 1), n_blocks=2)


def test_partition_rejects_bad_edges():
    with pytest.raises(ConfigurationError):
        Partition((0.0, 0.0, 1.0))
    with pytest.raises(ConfigurationError):
        Partition((1.0, 0.0))
    with pytest.raises(ConfigurationError):
        Partition((0.0,))


def test_block_of_half_open_convention():
    part = Partition((-15.0, 0.0, 15.0))
    idx = part.block_of(np.array([-15.0, -0.5, 0.0, 14.9, 15.0]))
    np.testing.assert_array_equal(idx, [0, 0, 1, 1, 1])


def test_block_of_outside_window():
    part = Partition((0.0, 1.0))
    with pytest.raises(DataError):
        part.block_of(np.array([1.5]))
    with pytest.raises(DataError):
        part.block_of(np.array([-0.1]))


def test_split_broken_stick_counts():
    data = _balanced()
    blocks = split(data, Partition((-15.0, 0.0, 15.0)))
    assert len(blocks) == 2
    # integer grid -15..15: 15 strictly negative times, 16 from 0 to 15
    assert all(c == 15 for c in blocks[0].counts)
    assert all(c == 16 for c in blocks[1].counts)
    assert blocks[0].n_present == data.n_subjects


def test_split_is_a_bijection_on_observations():
    data = _balanced(n=3, seed=5)
    blocks = split(data, Partition((-15.0, -3.0, 4.0, 15.0)))
    for i in range(data.n_subjects):
        whole = set()
        for b in blocks:
            (where,) = np.where(b.subject_index == i)
            if where.size == 0:
                continue
            sl = b.rows(int(where[0]))
            whole.update(zip(b.times[sl], b.y[sl]))
        lo, hi = data.offsets[i], data.offsets[i + 1]
        assert whole == set(zip(data.times[lo:hi], data.y[lo:hi]))
    assert sum(int(b.counts.sum()) for b in blocks) == len(data.y)


def test_split_single_block_round_trip():
    data = _balanced(n=2, seed=2)
    (block,) = split(data, Partition((-15.0, 15.0)))
    sl = block.rows(0)
    lo, hi = data.offsets[0], data.offsets[1]
    np.testing.assert_array_equal(block.times[sl], data.times[lo:hi])
    np.testing.assert_array_equal(block.y[sl], data.y[lo:hi])


def test_split_empty_block_is_configuration_error():
    data = _balanced(times=np.array([0.0, 1.0, 8.0, 9.0]))
    with pytest.raises(ConfigurationError):
        split(data, Partition((0.0, 2.0, 5.0, 9.0)))


def test_split_missing_subject_warns(caplog):
    # subject 1 has no observation before 0, so block 1 lacks them
    ids = np.array([0, 0, 1, 1])
    times = np.array([-1.0, 1.0, 0.5, 2.0])
    y = np.zeros(4)
    X = np.ones((4, 1))
    Z = np.zeros((4, 0))
    offsets = np.array([0, 2, 4])
    data = LongData(ids=ids, times=times, y=y, X=X, Z=Z, offsets=offsets)
    with caplog.at_level(logging.WARNING, logger="scmfit.partition"):
        blocks = split(data, Partition((-2.0, 0.0, 3.0)))
    assert any("block" in rec.message for rec in caplog.records)
    assert blocks[0].n_present == 1
    assert blocks[1].n_present == 2


def test_longdata_requires_increasing_times():
    with pytest.raises(DataError):
        LongData(
            ids=np.array([0, 0]),
            times=np.array([1.0, 1.0]),
            y=np.zeros(2),
            X=np.ones((2, 1)),
            Z=np.zeros((2, 0)),
            offsets=np.array([0, 2]),
        )


def test_longdata_rejects_nonfinite():
    with pytest.raises(DataError):
        LongData(
            ids=np.array([0, 0]),
            times=np.array([0.0, 1.0]),
            y=np.array([0.0, np.nan]),
            X=np.ones((2, 1)),
            Z=np.zeros((2, 0)),
            offsets=np.array([0, 2]),
        )


def test_balanced_flag():
    assert _balanced(n=3).balanced
    ids = np.array([0, 0, 1])
    data = LongData(
        ids=ids,
        times=np.array([0.0, 1.0, 0.0]),
        y=np.zeros(3),
        X=np.ones((3, 1)),
        Z=np.zeros((3, 0)),
        offsets=np.array([0, 2, 3]),
    )
    assert not data.balanced


def test_csv_round_trip(tmp_path):
    data = _balanced(n=3, times=np.array([0.0, 0.25, 1.5]), q=2, p=1, seed=9)
    path = tmp_path / "d.csv"
    write_long_csv(data, str(path), metadata={"note": "round trip"})
    back = read_long_csv(str(path), q=2, p=1)
    np.testing.assert_array_equal(back.times, data.times)
    np.testing.assert_array_equal(back.y, data.y)
    np.testing.assert_array_equal(back.X, data.X)
    np.testing.assert_array_equal(back.Z, data.Z)
    np.testing.assert_array_equal(back.offsets, data.offsets)


def test_csv_header_mismatch(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,time,y,x1\n1,0,1.0,2.0\n")
    with pytest.raises(DataError):
        read_long_csv(str(path), q=2, p=0)
    # extra trailing column beyond the declared layout
    with pytest.raises(DataError):
        read_long_csv(str(path), q=0, p=0)


def test_csv_missing_value(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,time,y,x1\n1,0,,2.0\n")
    with pytest.raises(DataError):
        read_long_csv(str(path), q=1, p=0)


def test_csv_missing_file():
    with pytest.raises(DataError):
        read_long_csv("/definitely/not/here.csv", q=1, p=0)


def test_csv_preserves_original_ids(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text(
        "id,time,y,x1\n101,0,1.0,1.0\n101,1,2.0,1.0\n7,0,3.0,1.0\n7,1,4.0,1.0\n"
    )
    data = read_long_csv(str(path), q=1, p=0)
    # ids holds one label per subject, in order of first appearance
    assert list(data.ids) == [101, 7]
    assert data.n_subjects == 2
    np.testing.assert_array_equal(data.y, [1.0, 2.0, 3.0, 4.0])


def test_design_cache_survives_pickling():
    import pickle

    data = _balanced(n=2)
    (block,) = split(data, Partition((-15.0, 15.0)))
    model = BlockModel(basis=BasisSpec(degrees=(1,)), link=Link.IDENTITY, n_scalar=0)
    d1 = block.design(model)
    clone = pickle.loads(pickle.dumps(block))
    np.testing.assert_array_equal(clone.design(model), d1)
