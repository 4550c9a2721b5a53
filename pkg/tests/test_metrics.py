import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from regionot.core import DimensionError, FeatureSet, normalize_rows
from regionot.diffgrad import grad_check
from regionot.metrics import (AdjacencyMatrix, LossConfig, adjacency, baseline_distance, combined_distance, d_g,
                              d_g_and_grad, d_w, interpolation_matrix, omega, region_distance,
                              resize_adjacency, total_loss, triplet)
from regionot.transport import problem_from_features, solve

from conftest import line


# -- baseline --------------------------------------------------------------------------


def test_baseline_identical_sets(rng):
    u = FeatureSet(2, 2, 3, rng.standard_normal((4, 3)))
    assert baseline_distance(u, u) == pytest.approx(0.0, abs=1e-12)


def test_baseline_orthogonal_means():
    assert baseline_distance(line(2, 2, [[1, 0], [1, 0]]), line(1, 2, [0, 3])) == pytest.approx(1.0)


def test_baseline_raw_mean_is_average_pairwise_cost(rng):
    u = FeatureSet(1, 3, 4, normalize_rows(rng.standard_normal((3, 4))))
    v = FeatureSet(1, 2, 4, normalize_rows(rng.standard_normal((2, 4))))
    expected = np.mean(1 - u.data @ v.data.T)
    assert baseline_distance(u, v, normalized=False) == pytest.approx(expected, abs=1e-12)


# -- d_W -------------------------------------------------------------------------------


def test_dw_single_identical_region():
    u = line(1, 2, [0.6, 0.8])
    assert d_w(u, u, np.array([[1.001]])) == 0.0
    assert region_distance(u, u) == pytest.approx(0.0, abs=1e-15)


def test_dw_zero_flow(rng):
    u = FeatureSet(1, 2, 3, rng.standard_normal((2, 3)))
    v = FeatureSet(1, 2, 3, rng.standard_normal((2, 3)))
    assert d_w(u, v, np.zeros((2, 2))) == 0.0


def test_dw_flow_avoiding_positive_costs():
    e = [[1, 0], [0, 1]]
    assert d_w(line(2, 2, e), line(2, 2, e), np.eye(2)) == 0.0


def test_dw_rejects_wrong_flow_shape(rng):
    u = FeatureSet(1, 2, 3, rng.standard_normal((2, 3)))
    with pytest.raises(DimensionError):
        d_w(u, u, np.zeros((2, 3)))


def test_dw_scale_factor():
    # one region each, orthogonal: cost 1, flow s = 0 + eps
    assert region_distance(line(1, 2, [1, 0]), line(1, 2, [0, 1])) == pytest.approx(1e-3, rel=1e-9)


def test_dw_invariant_under_sketch_permutation(rng):
    u = FeatureSet(1, 4, 5, np.abs(rng.standard_normal((4, 5))))
    v = FeatureSet(1, 3, 5, np.abs(rng.standard_normal((3, 5))))
    perm = [2, 0, 3, 1]
    sol = solve(problem_from_features(u, v))
    moved = u.with_data(u.data[perm])
    assert d_w(moved, v, sol.flow[perm]) == pytest.approx(d_w(u, v, sol), abs=1e-14)
    assert region_distance(moved, v) == pytest.approx(region_distance(u, v), abs=1e-9)


# -- adjacency and resize ----------------------------------------------------------------


def test_adjacency_constant_map():
    a = adjacency(FeatureSet(2, 2, 3, np.tile([1.0, 2.0, 2.0], (4, 1))))
    assert np.allclose(a.values, 1 / 16, atol=1e-15)


def test_adjacency_orthogonal_regions():
    a = adjacency(line(2, 2, [[1, 0], [0, 1]]))
    assert np.array_equal(a.values, [[0.25, 0.0], [0.0, 0.25]])


def test_adjacency_elementwise_oracle(rng):
    x = rng.standard_normal((3, 4))
    a = adjacency(FeatureSet(1, 3, 4, x)).values
    for i in range(3):
        for j in range(3):
            ref = x[i] @ x[j] / np.linalg.norm(x[i]) / np.linalg.norm(x[j]) / 9
            assert a[i, j] == pytest.approx(ref, abs=1e-12)


def test_resize_midpoint():
    p, q = 0.3, 0.1
    r = resize_adjacency(AdjacencyMatrix(2, np.array([[p, q], [q, p]])), 3).values
    # corner-aligned midpoint (p+q)/2, then the 1/m^2 convention rescales by 4/9
    assert r[1, 1] == pytest.approx((p + q) / 2 * 4 / 9, abs=1e-15)
    assert r[0, 0] == pytest.approx(p * 4 / 9, abs=1e-15)
    assert np.allclose(r, r.T)


def test_resize_identity_and_single_sample():
    a = AdjacencyMatrix(2, np.array([[0.25, 0.1], [0.1, 0.25]]))
    assert resize_adjacency(a, 2) is a
    r = resize_adjacency(AdjacencyMatrix(1, np.array([[0.5]])), 3).values
    assert np.allclose(r, 0.5 / 9, atol=1e-15)


def test_interpolation_rows_sum_to_one():
    for n, m in ((2, 5), (4, 3), (3, 1), (1, 4)):
        assert np.allclose(interpolation_matrix(n, m).sum(axis=1), 1.0)


# -- omega and d_G ----------------------------------------------------------------------


def test_omega_orthogonal_modalities():
    u = line(2, 4, [[1, 0, 0, 0], [0, 1, 0, 0]])
    v = line(2, 4, [[0, 0, 1, 0], [0, 0, 0, 1]])
    assert not np.any(omega(u, v))
    assert d_g(u, v) == 0.0


def test_omega_identity_case():
    u = line(2, 2, [[1, 0], [1, 0]])
    assert np.array_equal(omega(u, u), np.ones((2, 2)))


def test_omega_clamps_negative_factor():
    u = line(2, 2, [[1, 0], [0, 1]])
    v = line(2, 2, [[1, 0], [-0.6, 0.8]])
    w = omega(u, v)
    # u_1 . v_2 < 0 is clamped, so every term containing it vanishes
    assert w[0, 1] == 0.0 and w[1, 0] == 0.0
    assert w[0, 0] == pytest.approx(1.0)


def test_dg_two_region_hand_case():
    u = line(2, 2, [[1, 0], [0.6, 0.8]])
    v = line(2, 2, [[0.8, 0.6], [1, 0]])
    # cosines u.v: 0.8, 1, 0.96, 0.6 -> omega_12 = 0.8*0.6*1*0.96; |A_u - A_v| = |0.6 - 0.8| / 4 off the diagonal
    assert d_g(u, v) == pytest.approx(2 * 0.4608 * 0.05, abs=1e-12)
    assert d_g(u, v) == pytest.approx(0.04608, abs=1e-12)
    assert d_g(u, v, weighted=False) == pytest.approx(0.1, abs=1e-12)


feature_rows = arrays(np.float64, (4, 3), elements=st.floats(-2, 2, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(feature_rows)
def test_dg_self_distance_is_zero(x):
    u = FeatureSet(2, 2, 3, x)
    assert d_g(u, u) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(feature_rows, arrays(np.float64, (6, 3), elements=st.floats(-2, 2, allow_nan=False)))
def test_weighted_dg_bounded_by_naive(x, y):
    u, v = FeatureSet(2, 2, 3, x), FeatureSet(2, 3, 3, y)
    assert 0.0 <= d_g(u, v) <= d_g(u, v, weighted=False) + 1e-15


def test_dg_ignores_uncorrelated_sketch_region(rng):
    # region 0 of the sketch lives in channels the photo never uses
    photo = FeatureSet(2, 2, 6, np.hstack([np.zeros((4, 3)), np.abs(rng.standard_normal((4, 3)))]))
    base = np.abs(rng.standard_normal((4, 6)))
    base[0] = [1.0, 0.0, 0.0, 0, 0, 0]
    other = base.copy()
    other[0] = [0.2, 0.9, 0.4, 0, 0, 0]   # changes every adjacency entry of region 0
    a, b = FeatureSet(2, 2, 6, base), FeatureSet(2, 2, 6, other)
    assert not np.allclose(adjacency(a).values[0], adjacency(b).values[0])
    assert d_g(a, photo) == d_g(b, photo)


def test_dg_channel_mismatch():
    with pytest.raises(DimensionError):
        d_g(line(1, 2, [1, 0]), line(1, 3, [1, 0, 0]))


@pytest.mark.parametrize("shape_v", [(2, 2), (1, 3), (3, 3)])
def test_dg_gradient_against_finite_differences(rng, shape_v):
    n = shape_v[0] * shape_v[1]
    for _ in range(3):
        u = np.abs(rng.standard_normal((4, 5))) + 0.1
        v = np.abs(rng.standard_normal((n, 5))) + 0.1

        def fn(a, b):
            return d_g(FeatureSet(2, 2, 5, a), FeatureSet(*shape_v, 5, b))

        def grad(a, b):
            return d_g_and_grad(FeatureSet(2, 2, 5, a), FeatureSet(*shape_v, 5, b))[1:]

        assert d_g_and_grad(FeatureSet(2, 2, 5, u), FeatureSet(*shape_v, 5, v))[0] == pytest.approx(fn(u, v))
        report = grad_check(fn, grad, u, v)
        assert report.passed, report.to_text()


# -- losses ----------------------------------------------------------------------------


def test_triplet_hinge():
    assert triplet(0.2, 0.6, 0.3) == 0.0
    assert triplet(0.5, 0.4, 0.3) == pytest.approx(0.4)


def test_total_loss():
    assert total_loss(1.0, 2.0) == pytest.approx(1.02)
    assert total_loss(0.0, 0.0) == 0.0
    assert LossConfig().alpha == 0.01 and LossConfig().margin_region == 0.3


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(margin_region=0.0)
    with pytest.raises(ValueError):
        LossConfig(alpha=-1.0)


def test_combined_distance(rng):
    u = FeatureSet(2, 2, 4, np.abs(rng.standard_normal((4, 4))))
    v = FeatureSet(2, 2, 4, np.abs(rng.standard_normal((4, 4))))
    assert combined_distance(u, v) == pytest.approx(region_distance(u, v) + 0.01 * d_g(u, v))
