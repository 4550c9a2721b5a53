import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regionot.core import (DimensionError, FeatureSet, FormatError, decode_pfs, encode_pfs, flatten, gap,
                           normalize_rows, pairwise_cost, read_pfs, write_pfs)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_flatten_2x2_is_row_major():
    fs = FeatureSet.from_grid(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
    assert [float(r[0]) for r in flatten(fs)] == [1.0, 2.0, 3.0, 4.0]


def test_flatten_single_cell_unchanged():
    q = np.array([0.5, -1.0, 2.0])
    out = flatten(FeatureSet.from_grid(q.reshape(1, 1, 3)))
    assert len(out) == 1 and np.array_equal(out[0], q)


def test_flatten_3x2x2_matches_index_arithmetic():
    grid = np.arange(12, dtype=float).reshape(3, 2, 2)
    rows = flatten(FeatureSet.from_grid(grid))
    assert len(rows) == 6
    for i, row in enumerate(rows):
        assert np.array_equal(row, grid[i // 2, i % 2])


def test_gap_examples(rng):
    q = np.array([0.3, -0.2, 0.9])
    assert np.allclose(gap(FeatureSet(2, 2, 3, np.tile(q, (4, 1)))), q)
    assert np.array_equal(gap(FeatureSet(1, 2, 2, [[1.0, 0.0], [-1.0, 0.0]])), [0.0, 0.0])
    rows = rng.standard_normal((4, 5))
    brute = (rows[0] + rows[1] + rows[2] + rows[3]) / 4
    assert np.max(np.abs(gap(FeatureSet(2, 2, 5, rows)) - brute)) <= 1e-12


def test_gap_normalized_flag():
    fs = FeatureSet(1, 2, 2, [[3.0, 0.0], [3.0, 8.0]])
    assert np.allclose(gap(fs, normalized=True), [0.6, 0.8])


def test_pairwise_cost_examples():
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    u = FeatureSet(1, 3, 2, [e1, e1, e1])
    v = FeatureSet(1, 3, 2, [e1, e2, [-1.0, 0.0]])
    assert np.allclose(pairwise_cost(u, v)[0], [0.0, 1.0, 2.0])


def test_pairwise_cost_channel_mismatch():
    with pytest.raises(DimensionError):
        pairwise_cost(FeatureSet(1, 1, 2, [[1, 0]]), FeatureSet(1, 1, 3, [[1, 0, 0]]))


def test_zero_rows_become_e1():
    out = normalize_rows(np.array([[0.0, 0.0, 0.0], [0.0, 3.0, 4.0]]))
    assert np.array_equal(out[0], [1.0, 0.0, 0.0])
    assert np.allclose(out[1], [0.0, 0.6, 0.8])


def test_featureset_validation():
    with pytest.raises(DimensionError):
        FeatureSet(2, 2, 3, np.zeros((3, 3)))
    with pytest.raises(DimensionError):
        FeatureSet(0, 2, 3, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        FeatureSet(1, 1, 2, [[np.nan, 0.0]])


def test_featureset_is_immutable_copy():
    raw = np.ones((2, 2))
    fs = FeatureSet(1, 2, 2, raw)
    raw[0, 0] = 5.0
    assert fs.data[0, 0] == 1.0
    with pytest.raises(ValueError):
        fs.data[0, 0] = 2.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=finite))
def test_normalize_gives_unit_rows(x):
    norms = np.linalg.norm(normalize_rows(x), axis=1)
    assert np.allclose(norms, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_pooling_identity_for_raw_means(m, n, c, seed):
    r = np.random.default_rng(seed)
    u = FeatureSet(1, m, c, r.standard_normal((m, c)) * 3)
    v = FeatureSet(1, n, c, r.standard_normal((n, c)) * 3)
    lhs = 1.0 - gap(u) @ gap(v)
    rhs = np.mean(1.0 - u.data @ v.data.T)
    assert abs(lhs - rhs) <= 1e-9


def test_self_cost_has_zero_diagonal(rng):
    u = FeatureSet(2, 3, 4, rng.standard_normal((6, 4))).normalize()
    assert np.max(np.abs(np.diag(pairwise_cost(u, u)))) <= 1e-15


def test_grid_round_trip(rng):
    grid = rng.standard_normal((3, 4, 2))
    assert np.array_equal(FeatureSet.from_grid(grid).to_grid(), grid)


def test_pfs_layout_and_round_trip(tmp_path):
    fs = FeatureSet(1, 2, 2, [[1.0, 2.0], [3.0, -0.5]])
    payload = encode_pfs(fs)
    assert payload[:4] == b"PFS1"
    assert struct.unpack_from("<III", payload, 4) == (1, 2, 2)
    assert struct.unpack_from("<4f", payload, 16) == (1.0, 2.0, 3.0, -0.5)
    write_pfs(tmp_path / "a.pfs", fs)
    assert np.array_equal(read_pfs(tmp_path / "a.pfs").data, fs.data)


def test_pfs_rejects_bad_payloads():
    good = encode_pfs(FeatureSet(1, 1, 2, [[1.0, 2.0]]))
    with pytest.raises(FormatError):
        decode_pfs(b"PFS2" + good[4:])
    with pytest.raises(FormatError):
        decode_pfs(good[:-1])
    with pytest.raises(FormatError):
        decode_pfs(good[:6])
