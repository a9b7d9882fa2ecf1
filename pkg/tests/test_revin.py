import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from tfmixer.revin import EPS_STD, NormStats, masked_denormalize, masked_normalize


def test_fully_observed_column_hand_computed():
    x = np.array([[1.0], [2.0], [3.0]])
    m = np.ones_like(x)
    v, stats = masked_normalize(x, m)
    assert stats.mean.ravel()[0] == pytest.approx(2.0)
    assert stats.std.ravel()[0] == pytest.approx(0.8165, abs=1e-4)
    np.testing.assert_allclose(v.ravel(), [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_single_observation_clamps_std():
    x = np.array([[5.0], [0.0]])
    m = np.array([[1.0], [0.0]])
    v, stats = masked_normalize(x, m)
    assert stats.mean.ravel()[0] == 5.0
    assert stats.std.ravel()[0] == EPS_STD
    assert v[0, 0] == 0.0


def test_unobserved_variable_gets_identity_stats():
    x = np.zeros((3, 2))
    x[:, 0] = [1.0, 2.0, 3.0]
    m = np.zeros((3, 2))
    m[:, 0] = 1.0
    _, stats = masked_normalize(x, m)
    assert stats.mean.ravel()[1] == 0.0
    assert stats.std.ravel()[1] == 1.0


def test_masked_positions_cannot_influence_stats():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10, 3))
    m = (rng.random((10, 3)) > 0.5).astype(float)
    x = x * m
    v1, s1 = masked_normalize(x, m)
    x_adv = x + (1.0 - m) * rng.normal(size=x.shape) * 100.0
    v2, s2 = masked_normalize(x_adv, m)
    np.testing.assert_array_equal(v1, v2)
    np.testing.assert_array_equal(s1.mean, s2.mean)
    np.testing.assert_array_equal(s1.std, s2.std)


def test_denormalize_inverts_on_observed_entries():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 4)) * 3.0 + 5.0
    m = (rng.random((8, 4)) > 0.3).astype(float)
    x = x * m
    v, stats = masked_normalize(x, m)
    back = masked_denormalize(v, stats)
    assert np.max(np.abs((back - x) * m)) <= 1e-10


def test_identity_stats_are_identity():
    y = np.array([[1.5, -2.0]])
    out = masked_denormalize(y, NormStats(mean=np.zeros((1, 2)), std=np.ones((1, 2))))
    np.testing.assert_array_equal(out, y)


def test_denormalize_hand_value():
    stats = NormStats(mean=np.array([[2.0]]), std=np.array([[0.8165]]))
    assert masked_denormalize(np.array([[-1.2247]]), stats)[0, 0] == pytest.approx(1.0, abs=1e-4)


def test_observed_stats_are_standardized():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 3)) * 7.0 - 4.0
    m = np.ones_like(x)
    m[::3, 1] = 0.0
    x = x * m
    v, _ = masked_normalize(x, m)
    for n in range(3):
        col = v[m[:, n] > 0, n]
        assert abs(col.mean()) < 1e-9
        assert abs(col.std() - 1.0) < 1e-9


def test_batched_axis_semantics():
    rng = np.random.default_rng(3)
    xs = [rng.normal(size=(6, 2)) for _ in range(3)]
    ms = [(rng.random((6, 2)) > 0.4).astype(float) for _ in range(3)]
    xs = [x * m for x, m in zip(xs, ms)]
    vb, sb = masked_normalize(np.stack(xs), np.stack(ms))
    for b in range(3):
        v, s = masked_normalize(xs[b], ms[b])
        np.testing.assert_array_equal(vb[b], v)
        np.testing.assert_array_equal(sb.mean[b], s.mean)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (7, 2), elements=st.floats(-100, 100)),
       hnp.arrays(np.int8, (7, 2), elements=st.integers(0, 1)))
def test_round_trip_property(x, m_int):
    m = m_int.astype(float)
    x = x * m
    v, stats = masked_normalize(x, m)
    assert np.all((v * (1 - m)) == 0)  # masked slots exactly zero
    back = masked_denormalize(v, stats)
    assert np.max(np.abs((back - x) * m)) <= 1e-10
